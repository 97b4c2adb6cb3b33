//! Skeleton topology, absolute-coordinate motion and its joint/bone/motion
//! stream decomposition.

use std::fmt;
use std::io::Write;
use std::path::Path;

use diffcore::{Tensor, Var};

use crate::{Error, Result};

pub const JOINT_NAMES: [&str; 9] = [
    "pelvis",
    "spine",
    "head",
    "left_shoulder",
    "left_hand",
    "right_shoulder",
    "right_hand",
    "left_foot",
    "right_foot",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skeleton {
    pub parents: Vec<usize>,
    pub names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TopologyIssue {
    ParentOutOfRange { joint: usize, parent: usize },
    NoRoot,
    MultipleRoots(Vec<usize>),
    Cycle { joint: usize },
    NameCount { names: usize, joints: usize },
}

impl fmt::Display for TopologyIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ParentOutOfRange { joint, parent } => {
                write!(f, "joint {joint}: parent {parent} out of range")
            }
            Self::NoRoot => write!(f, "no root joint"),
            Self::MultipleRoots(r) => write!(f, "multiple roots: joints {r:?}"),
            Self::Cycle { joint } => write!(f, "joint {joint}: cycle in parent chain"),
            Self::NameCount { names, joints } => write!(f, "{names} names for {joints} joints"),
        }
    }
}

impl Skeleton {
    /// Pelvis-rooted 9-joint humanoid.
    pub fn humanoid() -> Self {
        Self {
            parents: vec![0, 0, 1, 1, 3, 1, 5, 0, 0],
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_parents(parents: Vec<usize>) -> Self {
        let names = (0..parents.len()).map(|i| format!("j{i}")).collect();
        Self { parents, names }
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> Option<usize> {
        (0..self.joints()).find(|&j| self.parents[j] == j)
    }

    pub fn children(&self, joint: usize) -> usize {
        (0..self.joints())
            .filter(|&j| j != joint && self.parents[j] == joint)
            .count()
    }

    /// Checks that there is exactly one root and that every chain reaches it.
    pub fn validate(&self) -> std::result::Result<(), Vec<TopologyIssue>> {
        let n = self.joints();
        let mut issues = Vec::new();
        if self.names.len() != n {
            issues.push(TopologyIssue::NameCount {
                names: self.names.len(),
                joints: n,
            });
        }
        for (j, &p) in self.parents.iter().enumerate() {
            if p >= n {
                issues.push(TopologyIssue::ParentOutOfRange { joint: j, parent: p });
            }
        }
        if !issues.is_empty() {
            return Err(issues);
        }
        let roots: Vec<usize> = (0..n).filter(|&j| self.parents[j] == j).collect();
        match roots.len() {
            0 => issues.push(TopologyIssue::NoRoot),
            1 => {}
            _ => issues.push(TopologyIssue::MultipleRoots(roots)),
        }
        for start in 0..n {
            let mut j = start;
            let mut steps = 0;
            while self.parents[j] != j {
                j = self.parents[j];
                steps += 1;
                if steps > n {
                    issues.push(TopologyIssue::Cycle { joint: start });
                    break;
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    /// `3J × 3J` matrix `B` with `bones = joints · B` on joint-major rows.
    pub fn bone_matrix(&self) -> Vec<f64> {
        let c = 3 * self.joints();
        let mut m = vec![0.0; c * c];
        for (j, &p) in self.parents.iter().enumerate() {
            if p == j {
                continue;
            }
            for a in 0..3 {
                m[(3 * j + a) * c + 3 * j + a] += 1.0;
                m[(3 * p + a) * c + 3 * j + a] -= 1.0;
            }
        }
        m
    }
}

/// `L × J × 3` absolute joint positions in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    frames: usize,
    joints: usize,
    data: Vec<f32>,
}

impl Motion {
    pub fn new(frames: usize, joints: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || joints == 0 {
            return Err(Error::invalid("motion needs at least one frame and joint"));
        }
        if data.len() != frames * joints * 3 {
            return Err(Error::invalid(format!(
                "motion data has {} values, expected {frames}×{joints}×3",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("motion contains non-finite values"));
        }
        Ok(Self { frames, joints, data })
    }

    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            data: vec![0.0; frames * joints * 3],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        3 * self.joints
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let c = self.channels();
        &self.data[f * c..(f + 1) * c]
    }

    pub fn joint(&self, f: usize, j: usize) -> [f32; 3] {
        let o = (f * self.joints + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_joint(&mut self, f: usize, j: usize, p: [f32; 3]) {
        let o = (f * self.joints + j) * 3;
        self.data[o..o + 3].copy_from_slice(&p);
    }

    /// First `frames` frames.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        Self {
            frames,
            joints: self.joints,
            data: self.data[..frames * self.channels()].to_vec(),
        }
    }

    /// Repeats the last frame until the length is a multiple of `multiple`.
    pub fn padded_to(&self, multiple: usize) -> Self {
        let target = self.frames.div_ceil(multiple) * multiple;
        let mut data = self.data.clone();
        let last = self.frame(self.frames - 1).to_vec();
        for _ in self.frames..target {
            data.extend_from_slice(&last);
        }
        Self {
            frames: target,
            joints: self.joints,
            data,
        }
    }

    pub fn reversed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for f in (0..self.frames).rev() {
            data.extend_from_slice(self.frame(f));
        }
        Self {
            frames: self.frames,
            joints: self.joints,
            data,
        }
    }

    /// `[1, L, 3J]` tensor.
    pub fn to_tensor<T: diffcore::Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.frames, self.channels()],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("shape matches data")
    }

    pub fn from_tensor_row<T: diffcore::Real>(t: &Tensor<T>, row: usize, frames: usize, joints: usize) -> Result<Self> {
        let c = 3 * joints;
        let sh = t.shape();
        if sh.len() != 3 || sh[2] != c || frames > sh[1] || row >= sh[0] {
            return Err(Error::invalid(format!("cannot read motion from tensor {sh:?}")));
        }
        let start = row * sh[1] * c;
        let data = t.data()[start..start + frames * c]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Self::new(frames, joints, data)
    }

    pub fn write_text(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "COAMD-MOTION v1 J={} L={}", self.joints, self.frames)?;
        for f in 0..self.frames {
            let line: Vec<String> = self.frame(f).iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("empty motion file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "COAMD-MOTION" || fields[1] != "v1" {
            return Err(Error::format(format!("bad motion header `{header}`")));
        }
        let num = |s: &str, key: &str| -> Result<usize> {
            s.strip_prefix(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("bad header field `{s}`")))
        };
        let (joints, frames) = (num(fields[2], "J=")?, num(fields[3], "L=")?);
        let mut data = Vec::with_capacity(frames * joints * 3);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row: Vec<f32> = line
                .split_whitespace()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(format!("line {}: {e}", i + 2)))?;
            if row.len() != 3 * joints {
                return Err(Error::format(format!(
                    "line {}: {} values, expected {}",
                    i + 2,
                    row.len(),
                    3 * joints
                )));
            }
            data.extend(row);
        }
        Self::new(frames, joints, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// The three streams, each `L × J × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Streams {
    pub joints: Motion,
    pub bones: Motion,
    pub motion: Motion,
}

pub fn derive_streams(x: &Motion, skeleton: &Skeleton) -> Result<Streams> {
    if x.joints() != skeleton.joints() {
        return Err(Error::invalid(format!(
            "motion has {} joints, skeleton has {}",
            x.joints(),
            skeleton.joints()
        )));
    }
    let (l, j) = (x.frames(), x.joints());
    let mut bones = Motion::zeros(l, j);
    let mut motion = Motion::zeros(l, j);
    for f in 0..l {
        for (k, &p) in skeleton.parents.iter().enumerate() {
            if p != k {
                let (a, b) = (x.joint(f, k), x.joint(f, p));
                bones.set_joint(f, k, [a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
            }
            if f > 0 {
                let (a, b) = (x.joint(f, k), x.joint(f - 1, k));
                motion.set_joint(f, k, [a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
            }
        }
    }
    Ok(Streams {
        joints: x.clone(),
        bones,
        motion,
    })
}

/// Tape version of [`derive_streams`] on `[b, L, 3J]` inputs; returns
/// `(bones, motion)` with the same shape.
pub fn derive_streams_var<'t, T: diffcore::Real>(
    x: Var<'t, T>,
    bone_matrix: Var<'t, T>,
) -> diffcore::Result<(Var<'t, T>, Var<'t, T>)> {
    let sh = x.shape();
    let bones = x.matmul(bone_matrix)?;
    let zero = x.tape().constant(Tensor::zeros(vec![sh[0], 1, sh[2]]));
    let motion = if sh[1] > 1 {
        let d = x.slice(1, 1, sh[1] - 1)?.sub(x.slice(1, 0, sh[1] - 1)?)?;
        Var::concat(&[zero, d], 1)?
    } else {
        zero
    };
    Ok((bones, motion))
}

/// Per-channel mean and floored standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Stats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl Stats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit<'a>(motions: impl IntoIterator<Item = &'a Motion>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in motions {
            if sum.is_empty() {
                sum = vec![0.0; m.channels()];
                sq = vec![0.0; m.channels()];
            }
            if m.channels() != sum.len() {
                return Err(Error::invalid("channel count differs across corpus"));
            }
            for f in 0..m.frames() {
                for (c, &v) in m.frame(f).iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
            }
            n += m.frames();
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit statistics on an empty corpus"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR)) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &Motion) -> Result<()> {
        if m.channels() != self.channels() {
            return Err(Error::invalid(format!(
                "stats have {} channels, motion has {}",
                self.channels(),
                m.channels()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, m: &Motion) -> Result<Motion> {
        self.check(m)?;
        let c = self.channels();
        let mut out = m.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        Ok(out)
    }

    pub fn denormalize(&self, m: &Motion) -> Result<Motion> {
        self.check(m)?;
        let c = self.channels();
        let mut out = m.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
        Ok(out)
    }
}

/// Per-stream statistics fitted on a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamStats {
    pub joints: Stats,
    pub bones: Stats,
    pub motion: Stats,
}

impl StreamStats {
    pub fn fit<'a>(streams: impl IntoIterator<Item = &'a Streams> + Clone) -> Result<Self> {
        Ok(Self {
            joints: Stats::fit(streams.clone().into_iter().map(|s| &s.joints))?,
            bones: Stats::fit(streams.clone().into_iter().map(|s| &s.bones))?,
            motion: Stats::fit(streams.into_iter().map(|s| &s.motion))?,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            joints: Stats::identity(channels),
            bones: Stats::identity(channels),
            motion: Stats::identity(channels),
        }
    }

    pub fn normalize(&self, s: &Streams) -> Result<Streams> {
        Ok(Streams {
            joints: self.joints.normalize(&s.joints)?,
            bones: self.bones.normalize(&s.bones)?,
            motion: self.motion.normalize(&s.motion)?,
        })
    }

    pub fn all(&self) -> [&Stats; 3] {
        [&self.joints, &self.bones, &self.motion]
    }

    pub fn push_to(&self, ck: &mut diffcore::Checkpoint, prefix: &str) {
        for (name, s) in ["joints", "bones", "motion"].iter().zip(self.all()) {
            ck.push(format!("{prefix}.{name}.mean"), vec![s.channels()], s.mean.clone());
            ck.push(format!("{prefix}.{name}.std"), vec![s.channels()], s.std.clone());
        }
    }

    pub fn read_from(ck: &diffcore::Checkpoint, prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<Stats> {
            let read = |key: String| {
                ck.tensor::<f32>(&key)
                    .map(Tensor::into_data)
                    .ok_or_else(|| Error::format(format!("checkpoint lacks `{key}`")))
            };
            Ok(Stats {
                mean: read(format!("{prefix}.{name}.mean"))?,
                std: read(format!("{prefix}.{name}.std"))?,
            })
        };
        Ok(Self {
            joints: get("joints")?,
            bones: get("bones")?,
            motion: get("motion")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::Rng;

    fn random_motion(rng: &mut Rng, frames: usize, joints: usize) -> Motion {
        let data = (0..frames * joints * 3).map(|_| rng.range(-2.0, 2.0) as f32).collect();
        Motion::new(frames, joints, data).unwrap()
    }

    #[test]
    fn two_joint_chain() {
        let sk = Skeleton::from_parents(vec![0, 0]);
        let x = Motion::new(1, 2, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = derive_streams(&x, &sk).unwrap();
        assert_eq!(s.bones.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(s.motion.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn static_sequence_has_no_motion() {
        let sk = Skeleton::humanoid();
        let mut rng = Rng::new(1);
        let one = random_motion(&mut rng, 1, 9);
        let data = one.data().repeat(5);
        let x = Motion::new(5, 9, data).unwrap();
        let s = derive_streams(&x, &sk).unwrap();
        assert!(s.motion.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn streams_match_pairwise_differences() {
        let sk = Skeleton::from_parents(vec![0, 0, 1, 1]);
        let mut rng = Rng::new(3);
        let x = random_motion(&mut rng, 3, 4);
        let s = derive_streams(&x, &sk).unwrap();
        for f in 0..3 {
            for j in 0..4 {
                let p = sk.parents[j];
                for a in 0..3 {
                    let xj = x.joint(f, j)[a];
                    let bone = if p == j { 0.0 } else { xj - x.joint(f, p)[a] };
                    let mot = if f == 0 { 0.0 } else { xj - x.joint(f - 1, j)[a] };
                    assert_eq!(s.bones.joint(f, j)[a], bone);
                    assert_eq!(s.motion.joint(f, j)[a], mot);
                }
            }
        }
    }

    #[test]
    fn joint_count_mismatch_is_an_error() {
        let x = Motion::zeros(2, 4);
        assert!(derive_streams(&x, &Skeleton::humanoid()).is_err());
    }

    #[test]
    fn rederivation_is_bit_exact() {
        let sk = Skeleton::humanoid();
        let x = random_motion(&mut Rng::new(4), 6, 9);
        assert_eq!(derive_streams(&x, &sk).unwrap(), derive_streams(&x, &sk).unwrap());
    }

    #[test]
    fn translation_equivariance() {
        let sk = Skeleton::humanoid();
        let x = random_motion(&mut Rng::new(5), 4, 9);
        let off = [0.5f32, -1.25, 2.0];
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += off[i % 3];
        }
        let (a, b) = (derive_streams(&x, &sk).unwrap(), derive_streams(&y, &sk).unwrap());
        for (p, q) in a.bones.data().iter().zip(b.bones.data()) {
            assert!((p - q).abs() < 1e-5);
        }
        for (p, q) in a.motion.data().iter().zip(b.motion.data()) {
            assert!((p - q).abs() < 1e-5);
        }
        for (i, (p, q)) in x.data().iter().zip(b.joints.data()).enumerate() {
            assert_eq!(p + off[i % 3], *q);
        }
    }

    #[test]
    fn linearity() {
        let sk = Skeleton::humanoid();
        let mut rng = Rng::new(6);
        let (x, y) = (random_motion(&mut rng, 5, 9), random_motion(&mut rng, 5, 9));
        let (al, be) = (0.7f32, -1.3f32);
        let mix: Vec<f32> = x.data().iter().zip(y.data()).map(|(a, b)| al * a + be * b).collect();
        let z = derive_streams(&Motion::new(5, 9, mix).unwrap(), &sk).unwrap();
        let (sx, sy) = (derive_streams(&x, &sk).unwrap(), derive_streams(&y, &sk).unwrap());
        for (lhs, (a, b)) in [
            (&z.bones, (&sx.bones, &sy.bones)),
            (&z.motion, (&sx.motion, &sy.motion)),
        ] {
            for ((l, p), q) in lhs.data().iter().zip(a.data()).zip(b.data()) {
                assert!((l - (al * p + be * q)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tape_streams_match_direct() {
        let sk = Skeleton::humanoid();
        let x = random_motion(&mut Rng::new(7), 5, 9);
        let s = derive_streams(&x, &sk).unwrap();
        let tape = diffcore::Tape::<f64>::new();
        let bm = tape.constant(Tensor::new(vec![27, 27], sk.bone_matrix()).unwrap());
        let (b, m) = derive_streams_var(tape.constant(x.to_tensor()), bm).unwrap();
        for (got, want) in [(b.to_tensor(), &s.bones), (m.to_tensor(), &s.motion)] {
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - *w as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_stats_and_constant_corpus() {
        let x = random_motion(&mut Rng::new(8), 4, 9);
        let id = Stats::identity(27);
        assert_eq!(id.normalize(&x).unwrap(), x);
        let c = Motion::new(2, 1, vec![3.0, 4.0, 5.0, 3.0, 4.0, 5.0]).unwrap();
        let st = Stats::fit([&c]).unwrap();
        assert!(st.std.iter().all(|&s| s as f64 == STD_FLOOR as f32 as f64));
        assert!(st.normalize(&c).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_roundtrip() {
        let mut rng = Rng::new(9);
        let corpus: Vec<Motion> = (0..4).map(|_| random_motion(&mut rng, 6, 9)).collect();
        let st = Stats::fit(&corpus).unwrap();
        let x = &corpus[2];
        let back = st.denormalize(&st.normalize(x).unwrap()).unwrap();
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-5, "{err}");
        assert!(st.normalize(&Motion::zeros(2, 4)).is_err());
    }

    #[test]
    fn topology_diagnostics() {
        assert!(Skeleton::humanoid().validate().is_ok());
        let cyc = Skeleton::from_parents(vec![1, 0]).validate().unwrap_err();
        assert!(cyc.iter().any(|i| i.to_string().contains("cycle")));
        let two = Skeleton::from_parents(vec![0, 1]).validate().unwrap_err();
        assert!(two.iter().any(|i| i.to_string().contains("multiple roots")));
        let oob = Skeleton::from_parents(vec![0, 7]).validate().unwrap_err();
        assert!(oob[0].to_string().contains("joint 1"));
    }

    #[test]
    fn motion_text_roundtrip() {
        let x = random_motion(&mut Rng::new(10), 3, 9);
        let text = x.to_text();
        assert!(text.starts_with("COAMD-MOTION v1 J=9 L=3\n"));
        assert_eq!(Motion::parse(&text).unwrap(), x);
        assert!(Motion::parse("COAMD-MOTION v2 J=9 L=3\n").is_err());
    }

    #[test]
    fn padding_repeats_last_frame() {
        let x = random_motion(&mut Rng::new(11), 5, 2);
        let p = x.padded_to(4);
        assert_eq!(p.frames(), 8);
        for f in 5..8 {
            assert_eq!(p.frame(f), x.frame(4));
        }
        assert_eq!(p.truncated(5), x);
    }
}
