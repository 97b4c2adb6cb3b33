//! Masked autoregressive latent generator with a flow-matching head.
//!
//! A bidirectional transformer reads the latent grid with masked positions
//! replaced by a learned token and a text embedding prepended as a
//! conditioning token. A small MLP predicts, per masked position, the
//! velocity of the straight path from data (`t = 0`) to noise (`t = 1`).
//! Sampling integrates that field with Euler steps from `t = 1` to `t = 0`
//! and unmasks tokens over a cosine schedule.

use std::f64::consts::FRAC_PI_2;

use diffcore::{AdamW, AdamWConfig, Bound, Checkpoint, Init, LayerNorm, Linear, ParamId, Params, Real, Rng, Tape, Tensor, TransformerBlock, Var};

use crate::autoencoder::{length_buckets, Latent, DOWNSAMPLE};
use crate::guidance::{apply_guidance, guided_velocity, normalize_gradient, Guide, Placement};
use crate::layers::{timestep_features, MlpResBlock};
use crate::{Error, Result};

pub const TIME_FEATURES: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_width: usize,
    pub head_blocks: usize,
    /// Euler steps per token solve.
    pub ode_steps: usize,
    /// Autoregressive unmasking steps.
    pub ar_steps: usize,
    /// Longest latent sequence the positional table covers.
    pub max_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Noise draws per masked token in each training batch.
    pub head_repeats: usize,
    pub classifier_free: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            width: 1024,
            layers: 6,
            heads: 8,
            head_width: 1024,
            head_blocks: 3,
            ode_steps: 25,
            ar_steps: 8,
            max_len: 64,
            lr: 1e-4,
            batch_size: 32,
            head_repeats: 4,
            classifier_free: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ode_steps == 0 || self.ar_steps == 0 {
            return Err(Error::invalid("ODE steps and autoregressive steps must be at least 1"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if self.max_len == 0 || self.batch_size == 0 || self.head_repeats == 0 || self.head_width == 0 {
            return Err(Error::invalid("max_len, batch_size, head_repeats and head_width must be positive"));
        }
        if self.classifier_free {
            return Err(Error::invalid("classifier-free guidance is not supported"));
        }
        Ok(())
    }
}

/// Training mask: ratio `max(0.5, cos(πu/2))` with `u ~ U[0, 1)`, rounded to
/// a count in `[1, L′ − 1]` (a single token is always masked).
pub fn sample_training_mask(len: usize, rng: &mut Rng) -> Vec<bool> {
    if len <= 1 {
        return vec![true; len];
    }
    let r = (FRAC_PI_2 * rng.uniform()).cos().max(0.5);
    let n = ((r * len as f64).round() as usize).clamp(1, len - 1);
    let mut mask = vec![false; len];
    for i in rng.sample_indices(len, n) {
        mask[i] = true;
    }
    mask
}

/// Tokens still masked after step `k` of `steps` when `total` are generated.
pub fn remaining_after(total: usize, k: usize, steps: usize) -> usize {
    if k + 1 >= steps {
        return 0;
    }
    (total as f64 * (FRAC_PI_2 * (k + 1) as f64 / steps as f64).cos()).floor() as usize
}

/// `(1 − t)·z0 + t·ε`.
pub fn diffusion_forward(z0: &Tensor<f32>, t: f64, eps: &Tensor<f32>) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("diffusion time {t} outside [0, 1]")));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::invalid(format!("z0 {:?} and noise {:?} differ", z0.shape(), eps.shape())));
    }
    let data = z0.data().iter().zip(eps.data()).map(|(&a, &e)| ((1.0 - t) * a as f64 + t * e as f64) as f32).collect();
    Ok(Tensor::new(z0.shape(), data)?)
}

/// Mean squared error between `v_pred` and `ε − z0` over the given rows.
pub fn diffusion_loss(v_pred: &Tensor<f32>, eps: &Tensor<f32>, z0: &Tensor<f32>) -> Result<f64> {
    if v_pred.shape() != eps.shape() || eps.shape() != z0.shape() || v_pred.is_empty() {
        return Err(Error::invalid("velocity, noise and data shapes must agree"));
    }
    let n = v_pred.len() as f64;
    Ok(v_pred
        .data()
        .iter()
        .zip(eps.data())
        .zip(z0.data())
        .map(|((&v, &e), &z)| {
            let d = v as f64 - (e as f64 - z as f64);
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Euler integration of `dz/dt = v(z, t)` from `t = 1` to `t = 0` in `steps`
/// uniform steps, with `t_i = 1 − i/steps`.
pub fn euler(
    z1: Tensor<f32>,
    steps: usize,
    mut velocity: impl FnMut(&Tensor<f32>, f64) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    if steps == 0 {
        return Err(Error::invalid("the ODE solver needs at least one step"));
    }
    // The state is carried in f64 so that long solves do not drift by
    // accumulated f32 rounding.
    let shape = z1.shape().to_vec();
    let mut acc: Vec<f64> = z1.data().iter().map(|&v| v as f64).collect();
    let mut z = z1;
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::invalid("velocity shape differs from the state"));
        }
        for (a, &b) in acc.iter_mut().zip(v.data()) {
            *a -= dt * b as f64;
        }
        if acc.iter().any(|x| !x.is_finite() || x.abs() > f32::MAX as f64) {
            return Err(Error::invalid(format!("ODE state became non-finite at step {i}")));
        }
        z = Tensor::new(shape.clone(), acc.iter().map(|&a| a as f32).collect())?;
    }
    Ok(z)
}

#[derive(Clone, Debug)]
struct DiffusionHead {
    z_in: Linear,
    h_in: Linear,
    t_in: Linear,
    blocks: Vec<MlpResBlock>,
    ln: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct GenModel {
    in_proj: Linear,
    mask_token: ParamId,
    cond: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    head: DiffusionHead,
    width: usize,
}

impl GenModel {
    pub fn new<T: Real>(init: &mut Init<'_, T>, latent_dim: usize, cond_dim: usize, cfg: &GenConfig) -> Self {
        let (w, hw) = (cfg.width, cfg.head_width);
        Self {
            in_proj: Linear::new(init, "gen.in", latent_dim, w, true),
            mask_token: init.uniform("gen.mask_token", &[1, w], 0.1),
            cond: Linear::new(init, "gen.cond", cond_dim, w, true),
            pos: init.uniform("gen.pos", &[cfg.max_len + 1, w], 0.1),
            blocks: (0..cfg.layers)
                .map(|i| TransformerBlock::new(init, &format!("gen.block{i}"), w, cfg.heads, 2 * w))
                .collect(),
            ln: LayerNorm::new(init, "gen.ln", w),
            head: DiffusionHead {
                z_in: Linear::new(init, "gen.head.z", latent_dim, hw, true),
                h_in: Linear::new(init, "gen.head.h", w, hw, false),
                t_in: Linear::new(init, "gen.head.t", TIME_FEATURES, hw, false),
                blocks: (0..cfg.head_blocks)
                    .map(|i| MlpResBlock::new(init, &format!("gen.head.block{i}"), hw, 2 * hw))
                    .collect(),
                ln: LayerNorm::new(init, "gen.head.ln", hw),
                out: Linear::new(init, "gen.head.out", hw, latent_dim, true),
            },
            width: w,
        }
    }

    /// `z [b, L′, D]` with `masked` flags in row-major `(b, L′)` order and
    /// conditions `c [b, E]` → context `[b, L′, width]`. Masked positions
    /// see only the mask token.
    pub fn context<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        z: Var<'t, T>,
        masked: &[bool],
        c: Var<'t, T>,
    ) -> diffcore::Result<Var<'t, T>> {
        let sh = z.shape();
        let (b, l, w) = (sh[0], sh[1], self.width);
        if masked.len() != b * l {
            return Err(diffcore::Error::Invalid {
                op: "context",
                msg: format!("{} mask flags for {b}×{l} tokens", masked.len()),
            });
        }
        let table = p.p(self.pos);
        if l + 1 > table.shape()[0] {
            return Err(diffcore::Error::Invalid {
                op: "context",
                msg: format!("{l} latent tokens exceed the positional table"),
            });
        }
        let tokens = self.in_proj.forward(p, z)?.reshape(&[b * l, w])?;
        let rows = Var::concat(&[tokens, p.p(self.mask_token)], 0)?;
        let idx: Vec<usize> = (0..b * l).map(|i| if masked[i] { b * l } else { i }).collect();
        let x = rows.gather(&idx)?.reshape(&[b, l, w])?;
        let cond = self.cond.forward(p, c)?.reshape(&[b, 1, w])?;
        let mut x = Var::concat(&[cond, x], 1)?.add(table.slice(0, 0, l + 1)?)?;
        for blk in &self.blocks {
            x = blk.forward(p, x, None)?;
        }
        self.ln.forward(p, x)?.slice(1, 1, l)
    }

    /// Velocity for noisy rows `zt [n, D]` given context rows `h [n, width]`.
    pub fn velocity<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        zt: Var<'t, T>,
        h: Var<'t, T>,
        ts: &[f64],
    ) -> diffcore::Result<Var<'t, T>> {
        let hd = &self.head;
        let tf = zt.tape().constant(timestep_features::<T>(ts, TIME_FEATURES));
        let mut x = hd.z_in.forward(p, zt)?.add(hd.h_in.forward(p, h)?)?.add(hd.t_in.forward(p, tf)?)?;
        for blk in &hd.blocks {
            x = blk.forward(p, x)?;
        }
        hd.out.forward(p, hd.ln.forward(p, x)?.gelu()?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditMode {
    Inpaint,
    Outpaint,
    Prefix,
    Suffix,
}

impl std::str::FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inpaint" => Ok(Self::Inpaint),
            "outpaint" => Ok(Self::Outpaint),
            "prefix" => Ok(Self::Prefix),
            "suffix" => Ok(Self::Suffix),
            _ => Err(Error::invalid(format!("unknown edit mode `{s}`"))),
        }
    }
}

impl EditMode {
    pub const ALL: [EditMode; 4] = [Self::Inpaint, Self::Outpaint, Self::Prefix, Self::Suffix];

    pub fn name(self) -> &'static str {
        match self {
            Self::Inpaint => "inpaint",
            Self::Outpaint => "outpaint",
            Self::Prefix => "prefix",
            Self::Suffix => "suffix",
        }
    }

    /// Positions kept from the context: inpainting keeps the outer quarters,
    /// outpainting the middle half, prefix the first quarter and suffix the
    /// last quarter.
    pub fn fixed(self, len: usize) -> Vec<bool> {
        let q = (len as f64 / 4.0).round() as usize;
        (0..len)
            .map(|i| match self {
                Self::Inpaint => i < q || i >= len - q,
                Self::Outpaint => i >= q && i < len - q,
                Self::Prefix => i < q,
                Self::Suffix => i >= len - q,
            })
            .collect()
    }
}

/// Result of one generation run with its per-step history.
#[derive(Clone, Debug)]
pub struct Generation {
    pub latent: Latent,
    /// Frozen flags after each autoregressive step.
    pub frozen: Vec<Vec<bool>>,
    /// Latent grid after each autoregressive step.
    pub states: Vec<Tensor<f32>>,
    /// Alignment score before each guidance update, when guided.
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenTrainLog {
    pub epoch_loss: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GenConfig,
    pub model: GenModel,
    pub params: Params<f32>,
    pub latent_dim: usize,
    pub cond_dim: usize,
}

impl Generator {
    pub fn new(config: GenConfig, latent_dim: usize, cond_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = Rng::stream(seed, 0x9e7);
        let model = GenModel::new(
            &mut Init {
                params: &mut params,
                rng: &mut rng,
            },
            latent_dim,
            cond_dim,
            &config,
        );
        Ok(Self {
            config,
            model,
            params,
            latent_dim,
            cond_dim,
        })
    }

    fn check_latent(&self, z: &Tensor<f32>) -> Result<(usize, usize)> {
        let sh = z.shape();
        if sh.len() != 2 || sh[1] != self.latent_dim || sh[0] == 0 {
            return Err(Error::invalid(format!("latent {sh:?} does not have width {}", self.latent_dim)));
        }
        if sh[0] > self.config.max_len {
            return Err(Error::invalid(format!("{} latent tokens exceed max_len {}", sh[0], self.config.max_len)));
        }
        Ok((sh[0], sh[1]))
    }

    fn check_cond(&self, c: &[f32]) -> Result<()> {
        if c.len() != self.cond_dim {
            return Err(Error::invalid(format!("condition has {} entries, expected {}", c.len(), self.cond_dim)));
        }
        Ok(())
    }

    /// Context rows `[L′, width]` for one latent grid.
    pub fn context(&self, z: &Tensor<f32>, masked: &[bool], c: &[f32]) -> Result<Tensor<f32>> {
        let (l, d) = self.check_latent(z)?;
        self.check_cond(c)?;
        let tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let zv = tape.constant(z.clone().reshape(vec![1, l, d])?);
        let cv = tape.constant(Tensor::new(vec![1, c.len()], c.to_vec())?);
        let h = self.model.context(&p, zv, masked, cv)?.to_tensor();
        Ok(h.reshape(vec![l, self.config.width])?)
    }

    /// Head velocity for rows `zt [n, D]`, context `h [n, width]` at time `t`.
    pub fn velocity(&self, zt: &Tensor<f32>, h: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let n = zt.shape()[0];
        let v = self
            .model
            .velocity(&p, tape.constant(zt.clone()), tape.constant(h.clone()), &vec![t; n])?;
        Ok(v.to_tensor())
    }

    /// Euler solve of the masked rows given their context `h [n, width]`.
    pub fn ode_sample(&self, h: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
        let z1 = rng.normal(&[h.shape()[0], self.latent_dim]);
        euler(z1, self.config.ode_steps, |z, t| self.velocity(z, h, t))
    }

    /// Text-conditioned generation of `frames` frames.
    pub fn generate(&self, c: &[f32], frames: usize, guide: Option<&Guide<'_>>, rng: &mut Rng) -> Result<Generation> {
        let len = frames.div_ceil(DOWNSAMPLE);
        let z = Tensor::zeros(vec![len, self.latent_dim]);
        self.run(z, vec![false; len], frames, c, guide, self.config.ar_steps, rng)
    }

    /// Regenerates the non-fixed tokens of `ctx`; fixed tokens are copied
    /// bit-exactly.
    pub fn edit(
        &self,
        ctx: &Latent,
        fixed: &[bool],
        c: &[f32],
        guide: Option<&Guide<'_>>,
        rng: &mut Rng,
    ) -> Result<Generation> {
        if fixed.len() != ctx.len() {
            return Err(Error::invalid(format!("{} fixed flags for {} tokens", fixed.len(), ctx.len())));
        }
        if fixed.iter().all(|&f| f) {
            return Err(Error::invalid("every token is fixed; nothing to generate"));
        }
        self.run(ctx.tokens.clone(), fixed.to_vec(), ctx.frames, c, guide, self.config.ar_steps, rng)
    }

    /// Generation with an explicit number of autoregressive steps.
    pub fn generate_with_steps(
        &self,
        c: &[f32],
        frames: usize,
        guide: Option<&Guide<'_>>,
        ar_steps: usize,
        rng: &mut Rng,
    ) -> Result<Generation> {
        if ar_steps == 0 {
            return Err(Error::invalid("autoregressive steps must be at least 1"));
        }
        let len = frames.div_ceil(DOWNSAMPLE);
        let z = Tensor::zeros(vec![len, self.latent_dim]);
        self.run(z, vec![false; len], frames, c, guide, ar_steps, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        mut z: Tensor<f32>,
        mut frozen: Vec<bool>,
        frames: usize,
        c: &[f32],
        guide: Option<&Guide<'_>>,
        steps: usize,
        rng: &mut Rng,
    ) -> Result<Generation> {
        let (len, d) = self.check_latent(&z)?;
        self.check_cond(c)?;
        if frames == 0 || frames.div_ceil(DOWNSAMPLE) != len {
            return Err(Error::invalid(format!("{frames} frames do not match {len} latent tokens")));
        }
        let total = frozen.iter().filter(|&&f| !f).count();
        let mut out = Generation {
            latent: Latent {
                tokens: Tensor::zeros(vec![0, d]),
                frames,
            },
            frozen: Vec::with_capacity(steps),
            states: Vec::with_capacity(steps),
            scores: Vec::new(),
        };
        for k in 0..steps {
            let masked: Vec<bool> = frozen.iter().map(|f| !f).collect();
            let rows: Vec<usize> = (0..len).filter(|&i| masked[i]).collect();
            if rows.is_empty() {
                break;
            }
            let h = self.context(&z, &masked, c)?;
            let h_m = gather_rows(&h, &rows);
            let z_m = match guide {
                Some(g) if g.config.placement == Placement::PerOdeStep => {
                    let z1 = rng.normal(&[rows.len(), d]);
                    euler(z1, self.config.ode_steps, |zt, t| {
                        let v = self.velocity(zt, &h_m, t)?;
                        let (_, grad) = g.gradient(&scatter_rows(&z, &rows, zt), frames, c)?;
                        let g_m = gather_rows(&grad, &rows);
                        // The solver runs from noise at t = 1 toward data at t = 0,
                        // so ascending the score means subtracting the gradient.
                        guided_velocity(&v, &negate(&g_m), g.config.gamma)
                    })?
                }
                _ => self.ode_sample(&h_m, rng)?,
            };
            let mut z_prime = scatter_rows(&z, &rows, &z_m);
            if let Some(g) = guide.filter(|g| g.config.placement == Placement::PerArStep) {
                let (score, grad) = g.gradient(&z_prime, frames, c)?;
                out.scores.push(score.total);
                z_prime = apply_guidance(&z_prime, &normalize_gradient(&grad, g.config.eps), g.config.gamma, &masked)?;
            }
            let keep = remaining_after(total, k, steps).min(rows.len());
            let picks = rng.sample_indices(rows.len(), rows.len() - keep);
            for &i in &picks {
                frozen[rows[i]] = true;
            }
            for (i, &m) in masked.iter().enumerate() {
                if m {
                    z.data_mut()[i * d..(i + 1) * d].copy_from_slice(&z_prime.data()[i * d..(i + 1) * d]);
                }
            }
            out.frozen.push(frozen.clone());
            out.states.push(z.clone());
        }
        out.latent.tokens = z;
        Ok(out)
    }

    /// Flow-matching training on precomputed latents `[L′, D]` and frozen
    /// text embeddings.
    pub fn train(&mut self, latents: &[&Tensor<f32>], conds: &[&[f32]], epochs: usize, seed: u64) -> Result<GenTrainLog> {
        if latents.is_empty() || latents.len() != conds.len() {
            return Err(Error::invalid("generator training needs paired, non-empty latents and conditions"));
        }
        for (z, c) in latents.iter().zip(conds) {
            self.check_latent(z)?;
            self.check_cond(c)?;
        }
        let (d, e, w) = (self.latent_dim, self.cond_dim, self.config.width);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: self.config.lr,
                ..AdamWConfig::default()
            },
            &self.params,
        )?;
        let mut rng = Rng::stream(seed, 0x9e77);
        let lengths: Vec<usize> = latents.iter().map(|z| z.shape()[0]).collect();
        let mut log = GenTrainLog {
            t_min: f64::INFINITY,
            t_max: f64::NEG_INFINITY,
            ..GenTrainLog::default()
        };
        let mut step = 0;
        for _ in 0..epochs {
            let batches = length_buckets(&lengths, self.config.batch_size, &mut rng);
            let mut total = 0.0;
            for batch in &batches {
                let (b, l) = (batch.len(), lengths[batch[0]]);
                let mut zdata = Vec::with_capacity(b * l * d);
                let mut cdata = Vec::with_capacity(b * e);
                let mut masked = Vec::with_capacity(b * l);
                for &i in batch {
                    zdata.extend_from_slice(latents[i].data());
                    cdata.extend_from_slice(conds[i]);
                    masked.extend(sample_training_mask(l, &mut rng));
                }
                let rows: Vec<usize> = (0..b * l).filter(|&r| masked[r]).collect();
                let rows: Vec<usize> = (0..self.config.head_repeats).flat_map(|_| rows.iter().copied()).collect();
                let n = rows.len();
                let ts: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
                let eps: Tensor<f32> = rng.normal(&[n, d]);
                let mut zt = Vec::with_capacity(n * d);
                let mut target = Vec::with_capacity(n * d);
                for (j, &r) in rows.iter().enumerate() {
                    let t = ts[j];
                    for k in 0..d {
                        let (z0, ep) = (zdata[r * d + k], eps.data()[j * d + k]);
                        zt.push(((1.0 - t) * z0 as f64 + t * ep as f64) as f32);
                        target.push(ep - z0);
                    }
                }
                for &t in &ts {
                    log.t_min = log.t_min.min(t);
                    log.t_max = log.t_max.max(t);
                }
                let tape = Tape::new();
                let p = tape.bind(&self.params, true);
                let fail = |source| Error::Training {
                    stage: "generator",
                    step,
                    source,
                };
                let loss = (|| -> diffcore::Result<Var<'_, f32>> {
                    let zv = tape.constant(Tensor::new(vec![b, l, d], zdata)?);
                    let cv = tape.constant(Tensor::new(vec![b, e], cdata)?);
                    let h = self.model.context(&p, zv, &masked, cv)?.reshape(&[b * l, w])?.gather(&rows)?;
                    let v = self.model.velocity(&p, tape.constant(Tensor::new(vec![n, d], zt)?), h, &ts)?;
                    v.mse_loss(tape.constant(Tensor::new(vec![n, d], target)?))
                })()
                .map_err(fail)?;
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

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        ck.push_meta("module", "gen");
        for (k, v) in [
            ("width", c.width),
            ("layers", c.layers),
            ("heads", c.heads),
            ("head_width", c.head_width),
            ("head_blocks", c.head_blocks),
            ("ode_steps", c.ode_steps),
            ("ar_steps", c.ar_steps),
            ("max_len", c.max_len),
            ("head_repeats", c.head_repeats),
            ("batch_size", c.batch_size),
            ("latent_dim", self.latent_dim),
            ("cond_dim", self.cond_dim),
        ] {
            ck.push_meta(k, &v.to_string());
        }
        ck.push_meta("lr", &c.lr.to_string());
        ck.push_params(&self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let num = |k: &'static str| -> Result<usize> {
            ck.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("generator checkpoint lacks `{k}`")))
        };
        let config = GenConfig {
            width: num("width")?,
            layers: num("layers")?,
            heads: num("heads")?,
            head_width: num("head_width")?,
            head_blocks: num("head_blocks")?,
            ode_steps: num("ode_steps")?,
            ar_steps: num("ar_steps")?,
            max_len: num("max_len")?,
            head_repeats: num("head_repeats")?,
            batch_size: num("batch_size")?,
            lr: ck
                .meta("lr")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("generator checkpoint lacks `lr`"))?,
            classifier_free: false,
        };
        let mut gen = Self::new(config, num("latent_dim")?, num("cond_dim")?, 0)?;
        ck.load_params(&mut gen.params)?;
        Ok(gen)
    }
}

fn gather_rows(x: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let d = x.shape()[1];
    let data = rows.iter().flat_map(|&r| x.data()[r * d..(r + 1) * d].iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data).expect("row count times width")
}

fn scatter_rows(base: &Tensor<f32>, rows: &[usize], values: &Tensor<f32>) -> Tensor<f32> {
    let d = base.shape()[1];
    let mut out = base.clone();
    for (j, &r) in rows.iter().enumerate() {
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&values.data()[j * d..(j + 1) * d]);
    }
    out
}

fn negate(x: &Tensor<f32>) -> Tensor<f32> {
    Tensor::new(x.shape(), x.data().iter().map(|v| -v).collect()).expect("same shape")
}
