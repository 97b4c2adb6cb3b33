//! Multi-stream motion autoencoder.
//!
//! Each stream gets its own kernel-3 convolution; the three projections are
//! summed and passed through a residual strided-convolution encoder that
//! halves the length twice. The encoder output is layer-normalized without
//! affine terms so latent tokens stay unit-scale for the flow-matching head.
//! The decoder mirrors the encoder with nearest-neighbour upsampling and
//! emits normalized joint coordinates, which are mapped back to meters with
//! the training-set joint statistics.

use diffcore::{AdamW, AdamWConfig, Bound, Checkpoint, Conv1d, Init, Params, Real, Rng, Tape, Tensor, Var};

use crate::layers::ConvResBlock;
use crate::motion_repr::{derive_streams, derive_streams_var, Motion, Skeleton, StreamStats, Streams};
use crate::{Error, Result};

pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AeConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 512,
            width: 256,
            lr: 2e-4,
            batch_size: 32,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 8 {
            return Err(Error::invalid("latent dimension must be at least 8"));
        }
        if self.width == 0 || self.batch_size == 0 {
            return Err(Error::invalid("width and batch size must be positive"));
        }
        Ok(())
    }
}

/// `L′ × D` latent tokens plus the motion length they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub tokens: Tensor<f32>,
    pub frames: usize,
}

impl Latent {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}

pub fn latent_len(frames: usize) -> usize {
    frames.div_ceil(DOWNSAMPLE)
}

/// Layer descriptors; the weights live in a [`Params`] store.
#[derive(Clone, Debug)]
pub struct AeModel {
    pub channels: usize,
    pub latent_dim: usize,
    proj: [Conv1d; 3],
    enc: [ConvResBlock; 3],
    down: [Conv1d; 2],
    enc_out: Conv1d,
    dec_in: Conv1d,
    dec: [ConvResBlock; 3],
    up: [Conv1d; 2],
    dec_out: Conv1d,
}

impl AeModel {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, cfg: &AeConfig) -> Self {
        let (w, d) = (cfg.width, cfg.latent_dim);
        let conv = |init: &mut Init<'_, T>, name: &str, k, cin, cout, s, pad| Conv1d::new(init, name, k, cin, cout, s, pad);
        Self {
            channels,
            latent_dim: d,
            proj: ["joints", "bones", "motion"].map(|s| conv(init, &format!("ae.proj.{s}"), 3, channels, w, 1, 1)),
            enc: [0, 1, 2].map(|i| ConvResBlock::new(init, &format!("ae.enc{i}"), w)),
            down: [0, 1].map(|i| conv(init, &format!("ae.down{i}"), 4, w, w, 2, 1)),
            enc_out: conv(init, "ae.enc_out", 3, w, d, 1, 1),
            dec_in: conv(init, "ae.dec_in", 3, d, w, 1, 1),
            dec: [0, 1, 2].map(|i| ConvResBlock::new(init, &format!("ae.dec{i}"), w)),
            up: [0, 1].map(|i| conv(init, &format!("ae.up{i}"), 3, w, w, 1, 1)),
            dec_out: conv(init, "ae.dec_out", 3, w, channels, 1, 1),
        }
    }

    /// Normalized streams `[b, L, C]` (L a multiple of 4) → `[b, L/4, D]`.
    pub fn encode<'t, T: Real>(&self, p: &Bound<'t, T>, streams: [Var<'t, T>; 3]) -> diffcore::Result<Var<'t, T>> {
        let mut h = self.proj[0].forward(p, streams[0])?;
        for (proj, s) in self.proj[1..].iter().zip(&streams[1..]) {
            h = h.add(proj.forward(p, *s)?)?;
        }
        h = self.enc[0].forward(p, h)?;
        h = self.down[0].forward(p, h)?;
        h = self.enc[1].forward(p, h)?;
        h = self.down[1].forward(p, h)?;
        h = self.enc[2].forward(p, h)?;
        self.enc_out.forward(p, h.gelu()?)?.layer_norm()
    }

    /// `[b, L′, D]` → normalized joints `[b, 4L′, C]`.
    pub fn decode<'t, T: Real>(&self, p: &Bound<'t, T>, z: Var<'t, T>) -> diffcore::Result<Var<'t, T>> {
        let mut h = self.dec_in.forward(p, z)?;
        h = self.dec[0].forward(p, h)?;
        for i in 0..2 {
            h = self.up[i].forward(p, h.upsample(2)?)?;
            h = self.dec[i + 1].forward(p, h)?;
        }
        self.dec_out.forward(p, h.gelu()?)
    }
}

/// Constant tensors that map between normalized and metric units on a tape.
pub struct StreamConsts<'t, T: Real> {
    pub mean: [Var<'t, T>; 3],
    pub std: [Var<'t, T>; 3],
    pub bone_matrix: Var<'t, T>,
}

impl<'t, T: Real> StreamConsts<'t, T> {
    pub fn new(tape: &'t Tape<T>, stats: &StreamStats, skeleton: &Skeleton) -> Self {
        let c = stats.joints.channels();
        let vec = |v: &[f32]| tape.constant(Tensor::new(vec![c], v.iter().map(|&x| T::of(x as f64)).collect()).unwrap());
        let s = stats.all();
        Self {
            mean: s.map(|st| vec(&st.mean)),
            std: s.map(|st| vec(&st.std)),
            bone_matrix: tape.constant(Tensor::from_f64(vec![c, c], &skeleton.bone_matrix()).unwrap()),
        }
    }

    pub fn denormalize(&self, stream: usize, x: Var<'t, T>) -> diffcore::Result<Var<'t, T>> {
        x.mul(self.std[stream])?.add(self.mean[stream])
    }

    pub fn normalize(&self, stream: usize, x: Var<'t, T>) -> diffcore::Result<Var<'t, T>> {
        let inv = {
            let s = self.std[stream].value();
            Tensor::new(s.shape(), s.data().iter().map(|&v| T::one() / v).collect())?
        };
        x.sub(self.mean[stream])?.mul(self.std[stream].tape().constant(inv))
    }

    /// Metric joints `[b, L, C]` → normalized `[joints, bones, motion]`.
    pub fn streams_from_joints(&self, joints: Var<'t, T>) -> diffcore::Result<[Var<'t, T>; 3]> {
        let (bones, motion) = derive_streams_var(joints, self.bone_matrix)?;
        Ok([self.normalize(0, joints)?, self.normalize(1, bones)?, self.normalize(2, motion)?])
    }
}

/// Stacks motions of equal length into `[b, L, C]` normalized stream tensors.
pub fn stream_batch<T: Real>(streams: &[&Streams], stats: &StreamStats) -> Result<[Tensor<T>; 3]> {
    let l = streams[0].joints.frames();
    let c = streams[0].joints.channels();
    let mut out: [Vec<T>; 3] = Default::default();
    for s in streams {
        if s.joints.frames() != l {
            return Err(Error::invalid("batch mixes motion lengths"));
        }
        let n = stats.normalize(s)?;
        for (dst, m) in out.iter_mut().zip([&n.joints, &n.bones, &n.motion]) {
            dst.extend(m.data().iter().map(|&v| T::of(v as f64)));
        }
    }
    Ok(out.map(|d| Tensor::new(vec![streams.len(), l, c], d).expect("stacked equal lengths")))
}

/// Multi-stream reconstruction loss in meters: the bone and motion streams of
/// `x̂_j` are re-derived and the per-stream mean absolute errors are summed.
pub fn ae_loss(x: &Streams, xhat_joints: &Motion, skeleton: &Skeleton) -> Result<f64> {
    if x.joints.frames() != xhat_joints.frames() || x.joints.joints() != xhat_joints.joints() {
        return Err(Error::invalid(format!(
            "reconstruction is {}×{}, target is {}×{}",
            xhat_joints.frames(),
            xhat_joints.joints(),
            x.joints.frames(),
            x.joints.joints()
        )));
    }
    let xh = derive_streams(xhat_joints, skeleton)?;
    let l1 = |a: &Motion, b: &Motion| {
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / a.data().len() as f64
    };
    Ok(l1(&x.joints, &xh.joints) + l1(&x.bones, &xh.bones) + l1(&x.motion, &xh.motion))
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub model: AeModel,
    pub params: Params<f32>,
    pub stats: StreamStats,
    pub skeleton: Skeleton,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

impl Autoencoder {
    pub fn new(config: AeConfig, skeleton: Skeleton, stats: StreamStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = Rng::stream(seed, 0xae);
        let model = AeModel::new(
            &mut Init {
                params: &mut params,
                rng: &mut rng,
            },
            3 * skeleton.joints(),
            &config,
        );
        Ok(Self {
            config,
            model,
            params,
            stats,
            skeleton,
        })
    }

    /// Encodes motions of one length; returns `[b, L′, D]`.
    pub fn encode_batch(&self, streams: &[&Streams]) -> Result<Tensor<f32>> {
        let frames = streams[0].joints.frames();
        let padded: Vec<Streams> = streams
            .iter()
            .map(|s| derive_streams(&s.joints.padded_to(DOWNSAMPLE), &self.skeleton))
            .collect::<Result<_>>()?;
        let refs: Vec<&Streams> = padded.iter().collect();
        debug_assert!(refs.iter().all(|s| s.joints.frames() == frames.div_ceil(DOWNSAMPLE) * DOWNSAMPLE));
        let inputs = stream_batch::<f32>(&refs, &self.stats)?;
        let tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let z = self.model.encode(&p, inputs.map(|t| tape.constant(t)))?;
        Ok(z.to_tensor())
    }

    pub fn encode(&self, motion: &Motion) -> Result<Latent> {
        let s = derive_streams(motion, &self.skeleton)?;
        let z = self.encode_batch(&[&s])?;
        let (lp, d) = (z.shape()[1], z.shape()[2]);
        Ok(Latent {
            tokens: z.reshape(vec![lp, d])?,
            frames: motion.frames(),
        })
    }

    /// Decodes to metric joints, truncated to the latent's recorded length.
    pub fn decode(&self, z: &Latent) -> Result<Motion> {
        if z.dim() != self.model.latent_dim {
            return Err(Error::invalid(format!(
                "latent width {} does not match D = {}",
                z.dim(),
                self.model.latent_dim
            )));
        }
        let tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let consts = StreamConsts::new(&tape, &self.stats, &self.skeleton);
        let zt = tape.constant(z.tokens.clone().reshape(vec![1, z.len(), z.dim()])?);
        let x = consts.denormalize(0, self.model.decode(&p, zt)?)?;
        let full = Motion::from_tensor_row(&x.to_tensor(), 0, DOWNSAMPLE * z.len(), self.skeleton.joints())?;
        Ok(full.truncated(z.frames))
    }

    /// Multi-stream L1 on a batch of equal-length motions, in meters.
    fn batch_loss<'t>(
        &self,
        tape: &'t Tape<f32>,
        p: &Bound<'t, f32>,
        consts: &StreamConsts<'t, f32>,
        inputs: [Tensor<f32>; 3],
    ) -> diffcore::Result<Var<'t, f32>> {
        let mut targets = Vec::with_capacity(3);
        for (k, t) in inputs.iter().enumerate() {
            targets.push(consts.denormalize(k, tape.constant(t.clone()))?);
        }
        let z = self.model.encode(p, inputs.map(|t| tape.constant(t)))?;
        let xhat = consts.denormalize(0, self.model.decode(p, z)?)?;
        let (bones, motion) = derive_streams_var(xhat, consts.bone_matrix)?;
        xhat.l1_loss(targets[0])?
            .add(bones.l1_loss(targets[1])?)?
            .add(motion.l1_loss(targets[2])?)
    }

    /// AdamW over length-bucketed mini-batches; returns the mean loss per epoch.
    pub fn train(&mut self, motions: &[&Motion], epochs: usize, seed: u64) -> Result<TrainLog> {
        if motions.is_empty() {
            return Err(Error::invalid("cannot train the autoencoder on an empty dataset"));
        }
        let streams: Vec<Streams> = motions
            .iter()
            .map(|m| derive_streams(&m.padded_to(DOWNSAMPLE), &self.skeleton))
            .collect::<Result<_>>()?;
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: self.config.lr,
                ..AdamWConfig::default()
            },
            &self.params,
        )?;
        let mut rng = Rng::stream(seed, 0xae7);
        let mut log = TrainLog::default();
        let mut step = 0;
        for _ in 0..epochs {
            let batches = length_buckets(
                &streams.iter().map(|s| s.joints.frames()).collect::<Vec<_>>(),
                self.config.batch_size,
                &mut rng,
            );
            let mut total = 0.0;
            for batch in &batches {
                let refs: Vec<&Streams> = batch.iter().map(|&i| &streams[i]).collect();
                let inputs = stream_batch::<f32>(&refs, &self.stats)?;
                let tape = Tape::new();
                let p = tape.bind(&self.params, true);
                let consts = StreamConsts::new(&tape, &self.stats, &self.skeleton);
                let fail = |source| Error::Training {
                    stage: "autoencoder",
                    step,
                    source,
                };
                let loss = self.batch_loss(&tape, &p, &consts, inputs).map_err(fail)?;
                total += loss.item() as f64;
                let mut grads = tape.backward(loss).map_err(fail)?;
                let g = p.collect(&mut grads);
                drop(p);
                opt.step(&mut self.params, &g).map_err(fail)?;
                step += 1;
            }
            log.epoch_loss.push(total / batches.len() as f64);
        }
        Ok(log)
    }

    /// Mean metric-unit [`ae_loss`] over `motions`.
    pub fn reconstruction_error(&self, motions: &[&Motion]) -> Result<f64> {
        let mut sum = 0.0;
        for m in motions {
            let s = derive_streams(m, &self.skeleton)?;
            let rec = self.decode(&self.encode(m)?)?;
            sum += ae_loss(&s, &rec, &self.skeleton)?;
        }
        Ok(sum / motions.len().max(1) as f64)
    }

    /// Mean absolute joint-coordinate error in meters.
    pub fn joint_l1(&self, motions: &[&Motion]) -> Result<f64> {
        let mut sum = 0.0;
        for m in motions {
            let rec = self.decode(&self.encode(m)?)?;
            sum += m.data().iter().zip(rec.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
                / m.data().len() as f64;
        }
        Ok(sum / motions.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_meta("module", "ae");
        ck.push_meta("latent_dim", &self.config.latent_dim.to_string());
        ck.push_meta("width", &self.config.width.to_string());
        ck.push_meta("parents", &join(&self.skeleton.parents));
        self.stats.push_to(&mut ck, "stats");
        ck.push_params(&self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            ck.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("autoencoder checkpoint lacks `{k}`")))
        };
        let parents = ck
            .meta("parents")
            .ok_or_else(|| Error::format("autoencoder checkpoint lacks `parents`"))?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::format("bad parent list")))
            .collect::<Result<Vec<usize>>>()?;
        let skeleton = if parents == Skeleton::humanoid().parents {
            Skeleton::humanoid()
        } else {
            Skeleton::from_parents(parents)
        };
        let config = AeConfig {
            latent_dim: num("latent_dim")?,
            width: num("width")?,
            ..AeConfig::default()
        };
        let stats = StreamStats::read_from(ck, "stats")?;
        let mut ae = Self::new(config, skeleton, stats, 0)?;
        ck.load_params(&mut ae.params)?;
        Ok(ae)
    }
}

pub(crate) fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Shuffled mini-batches in which every member has the same length.
pub fn length_buckets(lengths: &[usize], batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut keys: Vec<usize> = lengths.to_vec();
    keys.sort();
    keys.dedup();
    let mut batches = Vec::new();
    for key in keys {
        let mut idx: Vec<usize> = (0..lengths.len()).filter(|&i| lengths[i] == key).collect();
        rng.shuffle(&mut idx);
        batches.extend(idx.chunks(batch).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth, SynthConfig};
    use crate::motion_repr::Stats;

    fn toy_config() -> AeConfig {
        AeConfig {
            latent_dim: 8,
            width: 8,
            lr: 2e-3,
            batch_size: 8,
        }
    }

    fn toy_ae(seed: u64) -> Autoencoder {
        Autoencoder::new(toy_config(), Skeleton::humanoid(), StreamStats::identity(27), seed).unwrap()
    }

    #[test]
    fn latent_shape_and_determinism() {
        let ae = Autoencoder::new(
            AeConfig {
                latent_dim: 512,
                width: 16,
                ..AeConfig::default()
            },
            Skeleton::humanoid(),
            StreamStats::identity(27),
            0,
        )
        .unwrap();
        let m = synth::generate(&SynthConfig::default(), 1, 1).unwrap()[0].motion.clone();
        let m = m.truncated(32).padded_to(64);
        let z = ae.encode(&m).unwrap();
        assert_eq!(z.tokens.shape(), &[16, 512]);
        assert_eq!(ae.encode(&m).unwrap(), z);
        let x = ae.decode(&z).unwrap();
        assert_eq!(x.frames(), 64);
        assert_eq!(ae.decode(&z).unwrap(), x);
    }

    #[test]
    fn decoded_length_and_padding() {
        let ae = toy_ae(1);
        let m = synth::generate(&SynthConfig::default(), 1, 2).unwrap()[0].motion.truncated(30);
        let z = ae.encode(&m).unwrap();
        assert_eq!(z.len(), 8);
        assert_eq!(ae.decode(&z).unwrap().frames(), 30);
        let padded = ae.encode(&m.padded_to(4)).unwrap();
        assert_eq!(padded.tokens, z.tokens);
        assert!(ae.decode(&Latent { tokens: Tensor::zeros(vec![2, 5]), frames: 8 }).is_err());
    }

    #[test]
    fn ae_loss_zero_and_homogeneous() {
        let sk = Skeleton::humanoid();
        let m = synth::generate(&SynthConfig::default(), 1, 3).unwrap()[0].motion.clone();
        let s = derive_streams(&m, &sk).unwrap();
        assert_eq!(ae_loss(&s, &m, &sk).unwrap(), 0.0);
        let mut rng = Rng::new(4);
        let noise: Vec<f32> = (0..m.data().len()).map(|_| rng.range(-0.01, 0.01) as f32).collect();
        let shift = |k: f32| {
            let d = m.data().iter().zip(&noise).map(|(a, n)| a + k * n).collect();
            Motion::new(m.frames(), 9, d).unwrap()
        };
        let (l1, l2) = (ae_loss(&s, &shift(1.0), &sk).unwrap(), ae_loss(&s, &shift(2.0), &sk).unwrap());
        assert!((l2 / l1 - 2.0).abs() < 1e-3, "{l1} {l2}");
        assert!(ae_loss(&s, &m.truncated(3), &sk).is_err());
    }

    #[test]
    fn single_joint_perturbation_matches_difference_structure() {
        let sk = Skeleton::humanoid();
        let m = synth::generate(&SynthConfig::default(), 1, 5).unwrap()[0].motion.clone();
        let s = derive_streams(&m, &sk).unwrap();
        let (frame, joint, delta) = (10, 1, 0.125f32);
        let mut xh = m.clone();
        let mut p = xh.joint(frame, joint);
        p[1] += delta;
        xh.set_joint(frame, joint, p);
        let e = m.data().len() as f64;
        let c_b = 1.0 + sk.children(joint) as f64;
        let expected = delta as f64 * (1.0 + c_b + 2.0) / e;
        let brute = {
            let r = derive_streams(&xh, &sk).unwrap();
            let l1 = |a: &Motion, b: &Motion| {
                a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / e
            };
            l1(&s.joints, &r.joints) + l1(&s.bones, &r.bones) + l1(&s.motion, &r.motion)
        };
        let got = ae_loss(&s, &xh, &sk).unwrap();
        assert!((got - expected).abs() < 1e-6 * expected.max(1.0), "{got} vs {expected}");
        assert!((got - brute).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let samples = synth::generate(&SynthConfig::default(), 24, 6).unwrap();
        let motions: Vec<&Motion> = samples.iter().map(|s| &s.motion).collect();
        let streams: Vec<Streams> = motions.iter().map(|m| derive_streams(m, &Skeleton::humanoid()).unwrap()).collect();
        let stats = StreamStats::fit(&streams).unwrap();
        let run = || {
            let mut ae = Autoencoder::new(toy_config(), Skeleton::humanoid(), stats.clone(), 7).unwrap();
            let log = ae.train(&motions, 6, 8).unwrap();
            (log, ae.to_checkpoint().to_bytes())
        };
        let (log, bytes) = run();
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0], "{:?}", log.epoch_loss);
        assert_eq!(run().1, bytes);
        let mut ae = toy_ae(0);
        assert!(ae.train(&[], 1, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut stats = StreamStats::identity(27);
        stats.bones = Stats {
            mean: vec![0.5; 27],
            std: vec![2.0; 27],
        };
        let ae = Autoencoder::new(toy_config(), Skeleton::humanoid(), stats, 3).unwrap();
        let back = Autoencoder::from_checkpoint(&Checkpoint::from_bytes(&ae.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, ae.params);
        assert_eq!(back.stats, ae.stats);
    }

    #[test]
    fn buckets_share_length() {
        let lengths = [32, 40, 32, 40, 32, 48];
        let b = length_buckets(&lengths, 2, &mut Rng::new(0));
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 6);
        for batch in b {
            assert!(batch.iter().all(|&i| lengths[i] == lengths[batch[0]]));
        }
    }
}
