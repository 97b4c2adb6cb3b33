//! Recognizer-gradient guidance of latent generation.
//!
//! The alignment score of a decoded motion against a text embedding is a
//! weighted sum of cosines between the text and the fused and per-stream
//! motion embeddings. Its gradient with respect to the latent grid is taken
//! through the decoder and the recognizer in one reverse pass.

use diffcore::{Bound, Real, Tape, Tensor, Var};

use crate::autoencoder::{Autoencoder, StreamConsts};
use crate::motion_repr::Motion;
use crate::recognizer::{dot, Recognizer, TextEmbedding};
use crate::{Error, Result};

pub const TERM_NAMES: [&str; 4] = ["fused", "joints", "bones", "motion"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// One normalized latent update per autoregressive step.
    PerArStep,
    /// Raw gradient added to the velocity at every ODE step.
    PerOdeStep,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-ar-step" => Ok(Self::PerArStep),
            "per-ode-step" => Ok(Self::PerOdeStep),
            _ => Err(Error::invalid(format!("unknown guidance placement `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub gamma: f64,
    /// Weights of the fused, joint, bone and motion cosines.
    pub weights: [f64; 4],
    pub eps: f64,
    pub placement: Placement,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            weights: [0.25; 4],
            eps: 1e-8,
            placement: Placement::PerArStep,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid(format!("guidance scale must be non-negative, got {}", self.gamma)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("normalization constant must be positive"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("stream weights must be non-negative"));
        }
        Ok(())
    }
}

/// Total score and the cosine of each term; terms of streams the recognizer
/// does not encode are `None` and contribute nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentScore {
    pub total: f64,
    pub terms: [Option<f64>; 4],
}

pub fn weighted_score(terms: [Option<f64>; 4], weights: [f64; 4]) -> AlignmentScore {
    let total = terms.iter().zip(weights).filter_map(|(t, w)| t.map(|c| w * c)).sum();
    AlignmentScore { total, terms }
}

/// On-tape cosines `[f, j, b, m]` between the embeddings of metric joints
/// `[1, L, C]` and a text embedding `[1, E]`.
pub fn cosine_terms<'t, T: Real>(
    mar: &Recognizer,
    p: &Bound<'t, T>,
    joints: Var<'t, T>,
    c: Var<'t, T>,
) -> diffcore::Result<[Option<Var<'t, T>>; 4]> {
    let consts = StreamConsts::new(joints.tape(), &mar.stats, &mar.skeleton);
    let emb = mar.model.embed_streams(p, consts.streams_from_joints(joints)?)?;
    let [j, b, m] = emb.streams;
    let mut out = [Some(emb.fused.cosine_rows(c)?), None, None, None];
    for (k, e) in [j, b, m].into_iter().enumerate() {
        if let Some(e) = e {
            out[k + 1] = Some(e.cosine_rows(c)?);
        }
    }
    Ok(out)
}

/// `S(D(z), c)` on a tape for latents `z [1, L′, D]`, with the decoded motion
/// cut to `frames`.
pub fn latent_score_var<'t, T: Real>(
    ae: &Autoencoder,
    pa: &Bound<'t, T>,
    mar: &Recognizer,
    pm: &Bound<'t, T>,
    z: Var<'t, T>,
    frames: usize,
    c: Var<'t, T>,
    weights: [f64; 4],
) -> diffcore::Result<(Var<'t, T>, [Option<Var<'t, T>>; 4])> {
    let tape = z.tape();
    let ae_consts = StreamConsts::new(tape, &ae.stats, &ae.skeleton);
    let x = ae_consts.denormalize(0, ae.model.decode(pa, z)?)?.slice(1, 0, frames)?;
    let terms = cosine_terms(mar, pm, x, c)?;
    let mut s: Option<Var<'t, T>> = None;
    for (t, w) in terms.iter().zip(weights) {
        if let Some(t) = t {
            let term = t.scale(w)?;
            s = Some(match s {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
    }
    let s = s.expect("the fused term is always present").sum()?;
    Ok((s, terms))
}

/// `g / (‖g‖₂ + ε)` with the norm over every entry.
pub fn normalize_gradient(g: &Tensor<f32>, eps: f64) -> Tensor<f32> {
    let n = g.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    let scale = 1.0 / (n + eps);
    Tensor::new(g.shape(), g.data().iter().map(|&v| (v as f64 * scale) as f32).collect()).expect("same shape")
}

/// `z + γ·ĝ` on rows `[L′, D]` whose mask entry is true; other rows are
/// copied unchanged.
pub fn apply_guidance(z: &Tensor<f32>, g_hat: &Tensor<f32>, gamma: f64, mask: &[bool]) -> Result<Tensor<f32>> {
    if z.shape() != g_hat.shape() || z.shape().len() != 2 || z.shape()[0] != mask.len() {
        return Err(Error::invalid(format!(
            "guidance shapes disagree: z {:?}, gradient {:?}, mask {}",
            z.shape(),
            g_hat.shape(),
            mask.len()
        )));
    }
    let d = z.shape()[1];
    let mut out = z.data().to_vec();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (o, &g) in out[i * d..(i + 1) * d].iter_mut().zip(&g_hat.data()[i * d..(i + 1) * d]) {
            *o = (*o as f64 + gamma * g as f64) as f32;
        }
    }
    Ok(Tensor::new(z.shape(), out)?)
}

/// `v + γ·g`.
pub fn guided_velocity(v: &Tensor<f32>, g: &Tensor<f32>, gamma: f64) -> Result<Tensor<f32>> {
    if v.shape() != g.shape() {
        return Err(Error::invalid(format!("velocity {:?} and gradient {:?} differ", v.shape(), g.shape())));
    }
    let data = v.data().iter().zip(g.data()).map(|(&a, &b)| (a as f64 + gamma * b as f64) as f32).collect();
    Ok(Tensor::new(v.shape(), data)?)
}

/// A trained decoder and recognizer ready to score and steer latents.
pub struct Guide<'a> {
    pub ae: &'a Autoencoder,
    pub mar: &'a Recognizer,
    pub config: GuidanceConfig,
}

impl<'a> Guide<'a> {
    pub fn new(ae: &'a Autoencoder, mar: &'a Recognizer, config: GuidanceConfig) -> Result<Self> {
        config.validate()?;
        if ae.skeleton.parents != mar.skeleton.parents {
            return Err(Error::invalid("autoencoder and recognizer use different skeletons"));
        }
        Ok(Self { ae, mar, config })
    }

    pub fn alignment_score(&self, x: &Motion, c: &TextEmbedding) -> Result<AlignmentScore> {
        let b = self.mar.embed_motion(x)?;
        let mut terms = [Some(dot(&b.fused, &c.c)), None, None, None];
        for (k, s) in b.streams.iter().enumerate() {
            terms[k + 1] = s.as_ref().map(|e| dot(e, &c.c));
        }
        Ok(weighted_score(terms, self.config.weights))
    }

    fn check_latent(&self, z: &Tensor<f32>, frames: usize) -> Result<()> {
        let sh = z.shape();
        if sh.len() != 2 || sh[1] != self.ae.model.latent_dim || frames == 0 || frames > 4 * sh[0] {
            return Err(Error::invalid(format!("latent {sh:?} cannot decode to {frames} frames")));
        }
        Ok(())
    }

    /// Score of `D(z)` and the raw gradient `∇_z S` for latents `[L′, D]`.
    pub fn gradient(&self, z: &Tensor<f32>, frames: usize, c: &[f32]) -> Result<(AlignmentScore, Tensor<f32>)> {
        self.check_latent(z, frames)?;
        let tape = Tape::new();
        let pa = tape.bind(&self.ae.params, false);
        let pm = tape.bind(&self.mar.params, false);
        let (l, d) = (z.shape()[0], z.shape()[1]);
        let zv = tape.leaf(z.clone().reshape(vec![1, l, d])?, true);
        let cv = tape.constant(Tensor::new(vec![1, c.len()], c.to_vec())?);
        let (s, terms) = latent_score_var(self.ae, &pa, self.mar, &pm, zv, frames, cv, self.config.weights)?;
        let score = weighted_score(terms.map(|t| t.map(|v| v.item() as f64)), self.config.weights);
        let grads = tape.backward(s)?;
        let g = grads.get(zv).cloned().unwrap_or_else(|| Tensor::zeros(vec![1, l, d]));
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite guidance gradient (score {:.4})", score.total)));
        }
        Ok((score, g.reshape(vec![l, d])?))
    }

    /// Score of `D(z)` without a gradient.
    pub fn latent_score(&self, z: &Tensor<f32>, frames: usize, c: &[f32]) -> Result<AlignmentScore> {
        self.check_latent(z, frames)?;
        let x = self.ae.decode(&crate::autoencoder::Latent {
            tokens: z.clone(),
            frames,
        })?;
        self.alignment_score(
            &x,
            &TextEmbedding {
                c: c.to_vec(),
                kind: crate::recognizer::TextKind::Caption,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AeConfig;
    use crate::dataset::{Corpus, Item, SynthConfig};
    use crate::motion_repr::{Skeleton, StreamStats};
    use crate::recognizer::{MarConfig, TextKind};
    use diffcore::Rng;

    fn models() -> (Autoencoder, Recognizer, Corpus) {
        let corpus = Corpus::synthesize(&SynthConfig::default(), 16, 2, 6).unwrap();
        let ae = Autoencoder::new(
            AeConfig {
                latent_dim: 8,
                width: 8,
                ..AeConfig::default()
            },
            Skeleton::humanoid(),
            StreamStats::identity(27),
            1,
        )
        .unwrap();
        let items: Vec<&Item> = corpus.items.iter().collect();
        let mar = Recognizer::new(
            MarConfig {
                embed_dim: 8,
                width: 8,
                layers: 1,
                heads: 2,
                max_frames: 64,
                ..MarConfig::default()
            },
            Skeleton::humanoid(),
            StreamStats::identity(27),
            Recognizer::vocab_for(&items, &corpus.classes),
            2,
        )
        .unwrap();
        (ae, mar, corpus)
    }

    #[test]
    fn weighted_sums() {
        let s = weighted_score([Some(0.5), Some(-0.5), None, None], [0.6, 0.4, 0.0, 0.0]);
        assert!((s.total - 0.1).abs() < 1e-12);
        assert_eq!(weighted_score([Some(0.3); 4], [0.0; 4]).total, 0.0);
        assert!((weighted_score([Some(1.0); 4], [0.25; 4]).total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_weighted_sum_of_cosines() {
        let (ae, mar, corpus) = models();
        let guide = Guide::new(&ae, &mar, GuidanceConfig::default()).unwrap();
        let c = mar.embed_text("a person jumps", TextKind::Caption).unwrap();
        let s = guide.alignment_score(&corpus.items[0].motion, &c).unwrap();
        let manual: f64 = s.terms.iter().map(|t| 0.25 * t.unwrap()).sum();
        assert!((s.total - manual).abs() < 1e-6);
        assert!(s.terms.iter().all(|t| (-1.0..=1.0).contains(&t.unwrap())));

        let z = ae.encode(&corpus.items[0].motion).unwrap();
        let (g_score, _) = guide.gradient(&z.tokens, z.frames, &c.c).unwrap();
        let direct = guide.latent_score(&z.tokens, z.frames, &c.c).unwrap();
        assert!((g_score.total - direct.total).abs() < 1e-5, "{} vs {}", g_score.total, direct.total);
    }

    #[test]
    fn normalization_and_update() {
        let g = Tensor::new(vec![1, 2], vec![3.0f32, 4.0]).unwrap();
        let gh = normalize_gradient(&g, 1e-8);
        assert!((gh.data()[0] - 0.6).abs() < 1e-6 && (gh.data()[1] - 0.8).abs() < 1e-6);
        assert!(gh.l2_norm() <= 1.0);
        let z = Tensor::new(vec![1, 2], vec![1.0f32, 1.0]).unwrap();
        let moved = apply_guidance(&z, &gh, 1.0, &[true]).unwrap();
        assert!((moved.data()[0] - 1.6).abs() < 1e-6 && (moved.data()[1] - 1.8).abs() < 1e-6);
        assert_eq!(apply_guidance(&z, &gh, 0.0, &[true]).unwrap(), z);
        assert_eq!(apply_guidance(&z, &gh, 1.0, &[false]).unwrap(), z);
        assert!(apply_guidance(&z, &gh, 1.0, &[true, false]).is_err());
        let zero = Tensor::zeros(vec![1, 2]);
        assert_eq!(normalize_gradient(&zero, 1e-8), zero);
    }

    #[test]
    fn masked_rows_untouched() {
        let mut rng = Rng::new(3);
        let z: Tensor<f32> = rng.normal(&[6, 4]);
        let g: Tensor<f32> = rng.normal(&[6, 4]);
        let mask = [true, false, false, true, false, true];
        let out = apply_guidance(&z, &normalize_gradient(&g, 1e-8), 2.0, &mask).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            let (a, b) = (&z.data()[i * 4..i * 4 + 4], &out.data()[i * 4..i * 4 + 4]);
            if m {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn velocity_variant() {
        let v = Tensor::new(vec![2], vec![1.0f32, 0.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.0f32, 2.0]).unwrap();
        assert_eq!(guided_velocity(&v, &g, 0.5).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(guided_velocity(&v, &g, 0.0).unwrap(), v);
        assert_eq!(guided_velocity(&v, &Tensor::zeros(vec![2]), 3.0).unwrap(), v);
        assert!(guided_velocity(&v, &Tensor::zeros(vec![3]), 1.0).is_err());
    }

    #[test]
    fn zeroed_recognizer_gives_zero_gradient() {
        let (ae, mut mar, corpus) = models();
        for t in mar.params.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let guide = Guide::new(&ae, &mar, GuidanceConfig::default()).unwrap();
        let z = ae.encode(&corpus.items[1].motion).unwrap();
        let c = vec![1.0 / 8f32.sqrt(); 8];
        let (s, g) = guide.gradient(&z.tokens, z.frames, &c).unwrap();
        assert_eq!(s.total, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(normalize_gradient(&g, 1e-8).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_steps_ascend() {
        let (ae, mar, corpus) = models();
        let guide = Guide::new(&ae, &mar, GuidanceConfig::default()).unwrap();
        let c = mar.embed_text("a person walks forward", TextKind::Caption).unwrap();
        let mut ok = 0;
        let trials = 20;
        let mut rng = Rng::new(9);
        for i in 0..trials {
            let m = &corpus.items[i % corpus.items.len()].motion;
            let mut z = ae.encode(m).unwrap();
            let noise: Tensor<f32> = rng.normal(z.tokens.shape());
            z.tokens = guided_velocity(&z.tokens, &noise, 0.3).unwrap();
            let (s0, g) = guide.gradient(&z.tokens, z.frames, &c.c).unwrap();
            let mask = vec![true; z.len()];
            let z1 = apply_guidance(&z.tokens, &normalize_gradient(&g, 1e-8), 1e-3, &mask).unwrap();
            let s1 = guide.latent_score(&z1, z.frames, &c.c).unwrap();
            if s1.total >= s0.total - 1e-6 {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * trials as f64, "{ok}/{trials}");
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let (ae, mar, _) = models();
        let bad = GuidanceConfig {
            gamma: -1.0,
            ..GuidanceConfig::default()
        };
        assert!(Guide::new(&ae, &mar, bad).is_err());
        let guide = Guide::new(&ae, &mar, GuidanceConfig::default()).unwrap();
        assert!(guide.gradient(&Tensor::zeros(vec![4, 5]), 16, &[0.0; 8]).is_err());
        assert!(guide.gradient(&Tensor::zeros(vec![4, 8]), 17, &[0.0; 8]).is_err());
        assert_eq!("per-ode-step".parse::<Placement>().unwrap(), Placement::PerOdeStep);
        assert!("sometimes".parse::<Placement>().is_err());
    }
}
