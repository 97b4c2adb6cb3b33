//! Procedural motion-caption corpus.
//!
//! Every sample is a chain of 1–3 primitive segments. Root translation and
//! heading are integrated across segments; the limbs follow positional curves
//! whose envelopes vanish at segment boundaries so consecutive segments join
//! at the rest pose.

use std::f64::consts::PI;

use diffcore::Rng;

use crate::motion_repr::{Motion, Skeleton};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    WalkForward,
    WalkBackward,
    WalkCircle,
    Turn,
    RaiseLeftHand,
    RaiseRightHand,
    Wave,
    Jump,
    Squat,
    Sidestep,
}

impl Primitive {
    pub const ALL: [Primitive; 10] = [
        Primitive::WalkForward,
        Primitive::WalkBackward,
        Primitive::WalkCircle,
        Primitive::Turn,
        Primitive::RaiseLeftHand,
        Primitive::RaiseRightHand,
        Primitive::Wave,
        Primitive::Jump,
        Primitive::Squat,
        Primitive::Sidestep,
    ];

    /// The action phrase the extractor yields for this primitive.
    pub fn phrase(self) -> &'static str {
        match self {
            Self::WalkForward => "walk forward",
            Self::WalkBackward => "walk backward",
            Self::WalkCircle => "walk in circle",
            Self::Turn => "turn",
            Self::RaiseLeftHand => "raise left hand",
            Self::RaiseRightHand => "raise right hand",
            Self::Wave => "wave",
            Self::Jump => "jump",
            Self::Squat => "squat",
            Self::Sidestep => "sidestep",
        }
    }

    pub fn from_phrase(phrase: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.phrase() == phrase)
    }

    /// Caption verb phrases (third person).
    fn surface_forms(self) -> &'static [&'static str] {
        match self {
            Self::WalkForward => &["walks forward", "walks forwards", "is walking forward", "walks straight forward"],
            Self::WalkBackward => &["walks backward", "walks backwards", "walks back", "is walking backwards"],
            Self::WalkCircle => &["walks in a circle", "walks in circles", "is walking in a circle"],
            Self::Turn => &["turns around", "turns", "turns in place"],
            Self::RaiseLeftHand => &["raises the left hand", "raises their left hand", "lifts the left hand"],
            Self::RaiseRightHand => &["raises the right hand", "raises their right hand", "lifts the right hand"],
            Self::Wave => &["waves", "is waving", "waves hello"],
            Self::Jump => &["jumps", "jumps in place", "hops"],
            Self::Squat => &["squats", "does a squat", "performs a squat"],
            Self::Sidestep => &["sidesteps", "is sidestepping"],
        }
    }
}

/// Subject phrases with the body-scale range they imply.
const SUBJECTS: [(&str, f64, f64); 6] = [
    ("a person", 0.93, 1.07),
    ("someone", 0.93, 1.07),
    ("the person", 0.93, 1.07),
    ("a child", 0.6, 0.68),
    ("a short person", 0.8, 0.86),
    ("a tall person", 1.14, 1.22),
];
const CONNECTORS: [&str; 4] = [", then", " then", " and then", ", and then"];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub skeleton: Skeleton,
    pub fps: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Frame counts are drawn from multiples of this step.
    pub frame_step: usize,
    pub vocabulary: Vec<Primitive>,
    pub max_depth: usize,
    pub zipf_exponent: f64,
    /// Probability that a segment carries a "quickly"/"slowly" adverb.
    pub adverb_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            skeleton: Skeleton::humanoid(),
            fps: 20.0,
            min_frames: 32,
            max_frames: 64,
            frame_step: 8,
            vocabulary: Primitive::ALL.to_vec(),
            max_depth: 3,
            zipf_exponent: 1.1,
            adverb_rate: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() {
            return Err(Error::invalid("vocabulary is empty"));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::invalid("zipf exponent must be positive"));
        }
        if self.max_depth == 0 {
            return Err(Error::invalid("composition depth must be at least 1"));
        }
        if self.frame_step == 0 || self.min_frames < self.frame_step || self.min_frames > self.max_frames {
            return Err(Error::invalid("bad frame range"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        if self.skeleton != Skeleton::humanoid() {
            return Err(Error::invalid("the synthetic generator only animates the 9-joint humanoid"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub motion: Motion,
    pub caption: String,
    pub segments: Vec<Primitive>,
}

pub fn generate(config: &SynthConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    Ok((0..n).map(|id| sample(config, id, &mut Rng::stream(seed, id as u64))).collect())
}

fn zipf_pick(rng: &mut Rng, len: usize, s: f64) -> usize {
    let weights: Vec<f64> = (1..=len).map(|r| (r as f64).powf(-s)).collect();
    let mut u = rng.uniform() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    len - 1
}

fn sample(config: &SynthConfig, id: usize, rng: &mut Rng) -> Sample {
    let depth_w = [0.75, 0.18, 0.07];
    let mut u = rng.uniform() * depth_w[..config.max_depth.min(3)].iter().sum::<f64>();
    let mut depth = 1;
    for (d, w) in depth_w.iter().enumerate().take(config.max_depth.min(3)) {
        if u < *w {
            depth = d + 1;
            break;
        }
        u -= w;
    }

    let mut segments: Vec<Primitive> = Vec::with_capacity(depth);
    while segments.len() < depth {
        let p = config.vocabulary[zipf_pick(rng, config.vocabulary.len(), config.zipf_exponent)];
        if segments.last() == Some(&p) && config.vocabulary.len() > 1 {
            continue;
        }
        segments.push(p);
    }
    let speeds: Vec<Option<bool>> = segments
        .iter()
        .map(|_| (rng.uniform() < config.adverb_rate).then(|| rng.uniform() < 0.5))
        .collect();

    let steps = (config.max_frames - config.min_frames) / config.frame_step;
    let frames = config.min_frames + config.frame_step * rng.below(steps + 1);

    let (subject, lo, hi) = SUBJECTS[rng.below(SUBJECTS.len())];
    let mut caption = subject.to_string();
    for (i, (p, speed)) in segments.iter().zip(&speeds).enumerate() {
        if i > 0 {
            caption.push_str(CONNECTORS[rng.below(CONNECTORS.len())]);
        }
        let forms = p.surface_forms();
        caption.push(' ');
        caption.push_str(forms[rng.below(forms.len())]);
        match speed {
            Some(true) => caption.push_str(" quickly"),
            Some(false) => caption.push_str(" slowly"),
            None => {}
        }
    }
    if rng.uniform() < 0.5 {
        caption.push('.');
    }

    let scale = rng.range(lo, hi);
    let motion = animate(config, &segments, &speeds, frames, scale, rng);
    Sample {
        id,
        motion,
        caption,
        segments,
    }
}

/// Rest pose in body coordinates (forward, up, left), meters.
const REST: [[f64; 3]; 9] = [
    [0.0, 0.9, 0.0],
    [0.0, 1.2, 0.0],
    [0.0, 1.6, 0.0],
    [0.0, 1.4, 0.2],
    [0.0, 1.0, 0.25],
    [0.0, 1.4, -0.2],
    [0.0, 1.0, -0.25],
    [0.0, 0.0, 0.1],
    [0.0, 0.0, -0.1],
];

const UPPER_BODY: [usize; 7] = [0, 1, 2, 3, 4, 5, 6];

struct Root {
    x: f64,
    z: f64,
    heading: f64,
}

fn animate(
    config: &SynthConfig,
    segments: &[Primitive],
    speeds: &[Option<bool>],
    frames: usize,
    scale: f64,
    rng: &mut Rng,
) -> Motion {
    let amp = rng.range(0.8, 1.2);
    let mut root = Root {
        x: rng.range(-0.5, 0.5),
        z: rng.range(-0.5, 0.5),
        heading: rng.range(-0.3, 0.3),
    };
    let dt = 1.0 / config.fps;
    let base = frames / segments.len();
    let mut motion = Motion::zeros(frames, 9);
    let mut f0 = 0;
    for (s, (&prim, speed)) in segments.iter().zip(speeds).enumerate() {
        let n = if s + 1 == segments.len() { frames - f0 } else { base };
        let speed = match speed {
            Some(true) => 1.5,
            Some(false) => 0.6,
            None => 1.0,
        };
        let dur = n as f64 * dt;
        let cycles = (dur * 1.2 * speed).round().max(1.0);
        for i in 0..n {
            let p = i as f64 / n as f64;
            let mut pose = REST.map(|j| j.map(|v| v * scale));
            let (vf, vs, omega) = realize(prim, p, cycles, speed, amp * scale, dur, &mut pose);
            for (j, local) in pose.iter().enumerate() {
                let (c, sn) = (root.heading.cos(), root.heading.sin());
                let x = root.x + local[0] * c - local[2] * sn;
                let z = root.z + local[0] * sn + local[2] * c;
                motion.set_joint(f0 + i, j, [x as f32, local[1] as f32, z as f32]);
            }
            let (c, sn) = (root.heading.cos(), root.heading.sin());
            root.x += (vf * c - vs * sn) * dt;
            root.z += (vf * sn + vs * c) * dt;
            root.heading += omega * dt;
        }
        f0 += n;
    }
    motion
}

fn gait(pose: &mut [[f64; 3]; 9], phase: f64, amp: f64) {
    let s = phase.sin();
    pose[7][0] += 0.25 * amp * s;
    pose[7][1] += 0.08 * s.max(0.0);
    pose[8][0] -= 0.25 * amp * s;
    pose[8][1] += 0.08 * (-s).max(0.0);
    pose[4][0] -= 0.15 * amp * s;
    pose[6][0] += 0.15 * amp * s;
    for &j in &UPPER_BODY {
        pose[j][1] += 0.02 * s.abs();
    }
}

/// Writes the pose for phase `p` and returns body-frame root velocity
/// `(forward, left)` in m/s and the yaw rate in rad/s.
fn realize(
    prim: Primitive,
    p: f64,
    cycles: f64,
    speed: f64,
    amp: f64,
    dur: f64,
    pose: &mut [[f64; 3]; 9],
) -> (f64, f64, f64) {
    let phase = 2.0 * PI * cycles * p;
    let env = (PI * p).sin();
    match prim {
        Primitive::WalkForward => {
            gait(pose, phase, amp);
            (1.2 * speed, 0.0, 0.0)
        }
        Primitive::WalkBackward => {
            gait(pose, -phase, amp);
            (-0.8 * speed, 0.0, 0.0)
        }
        Primitive::WalkCircle => {
            gait(pose, phase, amp);
            (1.0 * speed, 0.0, 2.0 * PI / dur)
        }
        Primitive::Turn => {
            gait(pose, phase, 0.3 * amp);
            let rate = PI / dur * 2.0 * (PI * p).sin().powi(2);
            (0.0, 0.0, rate)
        }
        Primitive::RaiseLeftHand | Primitive::RaiseRightHand => {
            let (hand, shoulder) = if prim == Primitive::RaiseLeftHand { (4, 3) } else { (6, 5) };
            pose[hand][0] += 0.1 * env;
            pose[hand][1] += 0.85 * amp * env;
            pose[shoulder][1] += 0.05 * env;
            (0.0, 0.0, 0.0)
        }
        Primitive::Wave => {
            let up = (3.0 * env).min(1.0);
            pose[6][0] += 0.1 * up;
            pose[6][1] += 0.7 * up;
            pose[6][2] -= 0.1 * up + 0.15 * amp * up * (2.0 * PI * 3.0 * speed.round().max(1.0) * p).sin();
            (0.0, 0.0, 0.0)
        }
        Primitive::Jump => {
            let s = (2.0 * PI * cycles.min(2.0) * p).sin();
            let lift = 0.3 * amp * s.max(0.0) - 0.1 * (-s).max(0.0);
            for j in pose.iter_mut() {
                j[1] += lift;
            }
            pose[4][1] += 0.2 * s.max(0.0);
            pose[6][1] += 0.2 * s.max(0.0);
            (0.0, 0.0, 0.0)
        }
        Primitive::Squat => {
            let d = 0.4 * amp * env * env;
            for &j in &UPPER_BODY {
                pose[j][1] -= d;
            }
            pose[4][0] += 0.3 * env;
            pose[6][0] += 0.3 * env;
            (0.0, 0.0, 0.0)
        }
        Primitive::Sidestep => {
            let s = phase.sin();
            pose[7][2] += 0.1 * amp * s.max(0.0);
            pose[8][2] -= 0.1 * amp * (-s).max(0.0);
            (0.0, 0.6 * speed, 0.0)
        }
    }
}
