//! Multi-modal action recognizer.
//!
//! Each skeleton stream (joints, bones, motion) has its own encoder: a
//! stride-2 convolution turns frames into tokens, a small transformer attends
//! over them, and the mean-pooled output is projected to a unit embedding.
//! The fused embedding projects the concatenated pooled features. Captions
//! and class phrases share one text encoder. Training contrasts motions with
//! texts using InfoNCE.

use std::collections::BTreeSet;

use diffcore::{
    key_padding_bias, AdamW, AdamWConfig, Bound, Checkpoint, Conv1d, Init, LayerNorm, Linear, ParamId, Params,
    Real, Rng, Tape, Tensor, TransformerBlock, Var,
};

use crate::autoencoder::{join, length_buckets, stream_batch, TrainLog};
use crate::dataset::{ClassTable, Item};
use crate::motion_repr::{derive_streams, Motion, Skeleton, StreamStats, Streams};
use crate::{Error, Result};

pub const STREAM_NAMES: [&str; 3] = ["joints", "bones", "motion"];

#[derive(Clone, Debug, PartialEq)]
pub struct MarConfig {
    pub embed_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub tau: f64,
    pub max_tokens: usize,
    pub max_frames: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Which of joints, bones, motion are encoded.
    pub streams: [bool; 3],
    /// Adds the motion-over-texts direction to each contrastive term.
    pub symmetric: bool,
}

impl Default for MarConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            width: 128,
            layers: 2,
            heads: 4,
            tau: 0.1,
            max_tokens: 24,
            max_frames: 256,
            lr: 3e-4,
            batch_size: 32,
            streams: [true; 3],
            symmetric: false,
        }
    }
}

impl MarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.embed_dim < 8 {
            return Err(Error::invalid("embedding dimension must be at least 8"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if !self.streams.iter().any(|&s| s) {
            return Err(Error::invalid("at least one stream must be enabled"));
        }
        if self.max_tokens == 0 || self.max_frames < 2 || self.batch_size == 0 {
            return Err(Error::invalid("max_tokens, max_frames and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn streams_label(&self) -> String {
        let tags = ["j", "b", "m"];
        (0..3).filter(|&k| self.streams[k]).map(|k| tags[k]).collect::<Vec<_>>().join("+")
    }
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Token table; ids 0 and 1 are padding and unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct TextVocab {
    tokens: Vec<String>,
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl TextVocab {
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let set: BTreeSet<String> = texts.iter().flat_map(|t| tokenize(t.as_ref())).collect();
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(set);
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens[2..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map_or(UNK, |i| i + 2)
    }

    /// Token ids, at most `max` of them; empty text maps to `[UNK]`.
    pub fn encode(&self, text: &str, max: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text).iter().take(max).map(|t| self.id(t)).collect();
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }

    /// One token per line; the id is the line number.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>" {
            return Err(Error::format("vocabulary must start with <pad> and <unk>"));
        }
        if tokens[2..].windows(2).any(|w| w[0] >= w[1]) || tokens[2..].iter().any(|t| t.contains(char::is_whitespace)) {
            return Err(Error::format("vocabulary tokens must be sorted, unique and free of whitespace"));
        }
        Ok(Self { tokens })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextKind {
    Caption,
    ClassLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub c: Vec<f32>,
    pub kind: TextKind,
}

/// Fused and per-stream unit embeddings; disabled streams are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingsBundle {
    pub fused: Vec<f32>,
    pub streams: [Option<Vec<f32>>; 3],
}

/// Embeddings of a batch still attached to a tape, each `[b, E]`.
pub struct MotionEmbedding<'t, T: Real> {
    pub fused: Var<'t, T>,
    pub streams: [Option<Var<'t, T>>; 3],
}

#[derive(Clone, Debug)]
struct StreamEncoder {
    conv: Conv1d,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
struct TextEncoder {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct MarModel {
    encoders: [Option<StreamEncoder>; 3],
    fuse: Linear,
    text: TextEncoder,
    heads: usize,
}

impl MarModel {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, vocab: usize, cfg: &MarConfig) -> Self {
        let (w, e) = (cfg.width, cfg.embed_dim);
        let blocks = |init: &mut Init<'_, T>, name: &str| -> Vec<TransformerBlock> {
            (0..cfg.layers)
                .map(|i| TransformerBlock::new(init, &format!("{name}.block{i}"), w, cfg.heads, 2 * w))
                .collect()
        };
        let encoders = [0, 1, 2].map(|k| {
            cfg.streams[k].then(|| {
                let name = format!("mar.{}", STREAM_NAMES[k]);
                StreamEncoder {
                    conv: Conv1d::new(init, &format!("{name}.conv"), 4, channels, w, 2, 1),
                    pos: init.uniform(&format!("{name}.pos"), &[cfg.max_frames / 2, w], 0.1),
                    blocks: blocks(init, &name),
                    ln: LayerNorm::new(init, &format!("{name}.ln"), w),
                    head: Linear::new(init, &format!("{name}.head"), w, e, true),
                }
            })
        });
        let enabled = cfg.streams.iter().filter(|&&s| s).count();
        let fuse = Linear::new(init, "mar.fuse", enabled * w, e, true);
        let text = TextEncoder {
            tok: init.uniform("mar.text.tok", &[vocab, w], 1.0),
            pos: init.uniform("mar.text.pos", &[cfg.max_tokens, w], 0.1),
            blocks: blocks(init, "mar.text"),
            ln: LayerNorm::new(init, "mar.text.ln", w),
            head: Linear::new(init, "mar.text.head", w, e, true),
        };
        Self {
            encoders,
            fuse,
            text,
            heads: cfg.heads,
        }
    }

    /// Normalized streams `[b, L, C]` → unit embeddings. Inputs for disabled
    /// streams are ignored.
    pub fn embed_streams<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        streams: [Var<'t, T>; 3],
    ) -> diffcore::Result<MotionEmbedding<'t, T>> {
        let mut pooled = Vec::new();
        let mut out: [Option<Var<'t, T>>; 3] = [None; 3];
        for (k, enc) in self.encoders.iter().enumerate() {
            let Some(enc) = enc else { continue };
            let mut h = enc.conv.forward(p, streams[k])?;
            let n = h.shape()[1];
            let table = p.p(enc.pos);
            if n > table.shape()[0] {
                return Err(diffcore::Error::Invalid {
                    op: "embed_motion",
                    msg: format!("{n} frame tokens exceed the positional table"),
                });
            }
            h = h.add(table.slice(0, 0, n)?)?;
            for b in &enc.blocks {
                h = b.forward(p, h, None)?;
            }
            let pool = enc.ln.forward(p, h)?.mean_axis(1)?;
            out[k] = Some(enc.head.forward(p, pool)?.l2_normalize()?);
            pooled.push(pool);
        }
        let fused = self.fuse.forward(p, Var::concat(&pooled, 1)?)?.l2_normalize()?;
        Ok(MotionEmbedding { fused, streams: out })
    }

    /// Token id lists → unit embeddings `[b, E]`.
    pub fn embed_tokens<'t, T: Real>(&self, p: &Bound<'t, T>, ids: &[Vec<usize>]) -> diffcore::Result<Var<'t, T>> {
        let b = ids.len();
        let len = ids.iter().map(Vec::len).max().unwrap_or(1);
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        let flat: Vec<usize> = ids
            .iter()
            .flat_map(|r| r.iter().copied().chain(std::iter::repeat(PAD)).take(len))
            .collect();
        let enc = &self.text;
        let w = p.p(enc.tok).shape()[1];
        let mut h = p.p(enc.tok).gather(&flat)?.reshape(&[b, len, w])?;
        h = h.add(p.p(enc.pos).slice(0, 0, len)?)?;
        let tape = h.tape();
        let bias = tape.constant(key_padding_bias(&lengths, self.heads, len));
        for blk in &enc.blocks {
            h = blk.forward(p, h, Some(bias))?;
        }
        let h = enc.ln.forward(p, h)?;
        let mut weights = vec![T::zero(); b * len];
        for (i, &n) in lengths.iter().enumerate() {
            weights[i * len..i * len + n].fill(T::one() / T::of(n as f64));
        }
        let pool = tape
            .constant(Tensor::new(vec![b, 1, len], weights)?)
            .matmul(h)?
            .reshape(&[b, w])?;
        enc.head.forward(p, pool)?.l2_normalize()
    }
}

/// InfoNCE of unit rows: the mean over `i` of the cross-entropy of
/// `sim(e_i, c_i)/τ` against all `sim(e_i, c_k)/τ`.
pub fn info_nce<'t, T: Real>(e: Var<'t, T>, c: Var<'t, T>, tau: f64) -> diffcore::Result<Var<'t, T>> {
    let n = e.shape()[0];
    let logp = e.matmul_nt(c)?.scale(1.0 / tau)?.log_softmax()?;
    let mut eye = vec![T::zero(); n * n];
    (0..n).for_each(|i| eye[i * n + i] = T::one());
    let eye = e.tape().constant(Tensor::new(vec![n, n], eye)?);
    logp.mul(eye)?.sum()?.scale(-1.0 / n as f64)
}

fn nce_term<'t, T: Real>(e: Var<'t, T>, c: Var<'t, T>, tau: f64, symmetric: bool) -> diffcore::Result<Var<'t, T>> {
    let l = info_nce(e, c, tau)?;
    if symmetric {
        l.add(info_nce(c, e, tau)?)?.scale(0.5)
    } else {
        Ok(l)
    }
}

/// Plain-slice InfoNCE, computed in `f64`.
pub fn info_nce_loss<V: AsRef<[f32]>>(motion: &[V], text: &[V], tau: f64) -> Result<f64> {
    if motion.len() != text.len() || motion.is_empty() {
        return Err(Error::invalid(format!(
            "InfoNCE needs equal non-zero counts, got {} and {}",
            motion.len(),
            text.len()
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let n = motion.len();
    let mut total = 0.0;
    for (i, e) in motion.iter().enumerate() {
        let logits: Vec<f64> = text.iter().map(|c| dot(e.as_ref(), c.as_ref()) / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / n as f64)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Recall@k in both directions for index-paired embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    pub query_to_gallery: f64,
    pub gallery_to_query: f64,
}

/// 1-based rank of the true match: one plus the number of strictly closer items.
pub fn rank_of<V: AsRef<[f32]>>(query: &[f32], gallery: &[V], truth: usize) -> usize {
    let s = dot(query, gallery[truth].as_ref());
    1 + gallery.iter().filter(|g| dot(query, g.as_ref()) > s).count()
}

pub fn retrieve<V: AsRef<[f32]>>(queries: &[V], gallery: &[V], k: usize) -> Result<Recall> {
    if gallery.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    if queries.len() != gallery.len() {
        return Err(Error::invalid("queries and gallery must be paired by index"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let recall = |q: &[V], g: &[V]| {
        (0..q.len()).filter(|&i| rank_of(q[i].as_ref(), g, i) <= k).count() as f64 / q.len() as f64
    };
    Ok(Recall {
        query_to_gallery: recall(queries, gallery),
        gallery_to_query: recall(gallery, queries),
    })
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    pub config: MarConfig,
    pub model: MarModel,
    pub params: Params<f32>,
    pub vocab: TextVocab,
    pub stats: StreamStats,
    pub skeleton: Skeleton,
}

impl Recognizer {
    pub fn new(config: MarConfig, skeleton: Skeleton, stats: StreamStats, vocab: TextVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = Rng::stream(seed, 0x3a2);
        let model = MarModel::new(
            &mut Init {
                params: &mut params,
                rng: &mut rng,
            },
            3 * skeleton.joints(),
            vocab.len(),
            &config,
        );
        Ok(Self {
            config,
            model,
            params,
            vocab,
            stats,
            skeleton,
        })
    }

    /// Vocabulary over captions and class phrases of `items`.
    pub fn vocab_for(items: &[&Item], classes: &ClassTable) -> TextVocab {
        let mut texts: Vec<&str> = items.iter().map(|i| i.caption.as_str()).collect();
        texts.extend(classes.classes.iter().map(|c| c.canonical.as_str()));
        TextVocab::build(&texts)
    }

    fn tokens(&self, text: &str) -> Vec<usize> {
        self.vocab.encode(text, self.config.max_tokens)
    }

    fn bundles(&self, streams: &[&Streams]) -> Result<Vec<EmbeddingsBundle>> {
        let inputs = stream_batch::<f32>(streams, &self.stats)?;
        let tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let emb = self.model.embed_streams(&p, inputs.map(|t| tape.constant(t)))?;
        let rows = |v: Var<'_, f32>| -> Vec<Vec<f32>> {
            let t = v.to_tensor();
            t.data().chunks_exact(self.config.embed_dim).map(<[f32]>::to_vec).collect()
        };
        let fused = rows(emb.fused);
        let per: [Option<Vec<Vec<f32>>>; 3] = emb.streams.map(|s| s.map(rows));
        Ok((0..streams.len())
            .map(|i| EmbeddingsBundle {
                fused: fused[i].clone(),
                streams: [0, 1, 2].map(|k| per[k].as_ref().map(|r| r[i].clone())),
            })
            .collect())
    }

    pub fn embed_motion(&self, motion: &Motion) -> Result<EmbeddingsBundle> {
        let s = derive_streams(motion, &self.skeleton)?;
        Ok(self.bundles(&[&s])?.remove(0))
    }

    /// Batched embedding; motions are grouped by length internally.
    pub fn embed_motions(&self, motions: &[&Motion]) -> Result<Vec<EmbeddingsBundle>> {
        let streams: Vec<Streams> = motions
            .iter()
            .map(|m| derive_streams(m, &self.skeleton))
            .collect::<Result<_>>()?;
        let mut out: Vec<Option<EmbeddingsBundle>> = vec![None; motions.len()];
        let mut lengths: Vec<usize> = motions.iter().map(|m| m.frames()).collect();
        lengths.sort();
        lengths.dedup();
        for len in lengths {
            let idx: Vec<usize> = (0..motions.len()).filter(|&i| motions[i].frames() == len).collect();
            for chunk in idx.chunks(64) {
                let refs: Vec<&Streams> = chunk.iter().map(|&i| &streams[i]).collect();
                for (&i, b) in chunk.iter().zip(self.bundles(&refs)?) {
                    out[i] = Some(b);
                }
            }
        }
        Ok(out.into_iter().map(|b| b.expect("every motion embedded")).collect())
    }

    pub fn embed_text(&self, text: &str, kind: TextKind) -> Result<TextEmbedding> {
        Ok(self.embed_texts(&[text], kind)?.remove(0))
    }

    pub fn embed_texts<S: AsRef<str>>(&self, texts: &[S], kind: TextKind) -> Result<Vec<TextEmbedding>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(128) {
            let ids: Vec<Vec<usize>> = chunk.iter().map(|t| self.tokens(t.as_ref())).collect();
            let tape = Tape::new();
            let p = tape.bind(&self.params, false);
            let c = self.model.embed_tokens(&p, &ids)?.to_tensor();
            out.extend(c.data().chunks_exact(self.config.embed_dim).map(|r| TextEmbedding {
                c: r.to_vec(),
                kind,
            }));
        }
        Ok(out)
    }

    pub fn class_embeddings(&self, classes: &ClassTable) -> Result<Vec<TextEmbedding>> {
        let names: Vec<&str> = classes.classes.iter().map(|c| c.canonical.as_str()).collect();
        self.embed_texts(&names, TextKind::ClassLabel)
    }

    /// Class ids with cosine scores, best first.
    pub fn rank_classes(bundle: &EmbeddingsBundle, class_embeddings: &[TextEmbedding]) -> Vec<(usize, f64)> {
        let mut scores: Vec<(usize, f64)> = class_embeddings
            .iter()
            .enumerate()
            .map(|(i, c)| (i, dot(&bundle.fused, &c.c)))
            .collect();
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scores
    }

    pub fn classify(&self, motion: &Motion, classes: &ClassTable) -> Result<Vec<(usize, f64)>> {
        Ok(Self::rank_classes(&self.embed_motion(motion)?, &self.class_embeddings(classes)?))
    }

    fn batch_loss<'t>(
        &self,
        tape: &'t Tape<f32>,
        p: &Bound<'t, f32>,
        inputs: [Tensor<f32>; 3],
        captions: Vec<Vec<usize>>,
        class_texts: Vec<Vec<usize>>,
    ) -> diffcore::Result<Var<'t, f32>> {
        let n = captions.len();
        let emb = self.model.embed_streams(p, inputs.map(|t| tape.constant(t)))?;
        let texts: Vec<Vec<usize>> = captions.into_iter().chain(class_texts).collect();
        let all = self.model.embed_tokens(p, &texts)?;
        let cap = all.slice(0, 0, n)?;
        let cls = all.slice(0, n, n)?;
        let (tau, sym) = (self.config.tau, self.config.symmetric);
        let mut loss = nce_term(emb.fused, cap, tau, sym)?.add(nce_term(emb.fused, cls, tau, sym)?)?;
        for e in emb.streams.into_iter().flatten() {
            loss = loss.add(nce_term(e, cap, tau, sym)?)?;
        }
        Ok(loss)
    }

    /// Caption-level and class-level contrastive training over length-bucketed
    /// batches; the class text of an item is the canonical phrase of its
    /// lowest-id label.
    pub fn train(&mut self, items: &[&Item], classes: &ClassTable, epochs: usize, seed: u64) -> Result<TrainLog> {
        if items.is_empty() {
            return Err(Error::invalid("cannot train the recognizer on an empty dataset"));
        }
        if classes.is_empty() {
            return Err(Error::invalid("training the recognizer needs a class table"));
        }
        let class_of = |it: &Item| -> Result<usize> {
            it.labels
                .first()
                .copied()
                .filter(|&l| l < classes.len())
                .ok_or_else(|| Error::invalid(format!("item {} has no label in the class table", it.id)))
        };
        let labels: Vec<usize> = items.iter().map(|it| class_of(it)).collect::<Result<_>>()?;
        let streams: Vec<Streams> = items
            .iter()
            .map(|it| derive_streams(&it.motion, &self.skeleton))
            .collect::<Result<_>>()?;
        let captions: Vec<Vec<usize>> = items.iter().map(|it| self.tokens(&it.caption)).collect();
        let class_tokens: Vec<Vec<usize>> = classes.classes.iter().map(|c| self.tokens(&c.canonical)).collect();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: self.config.lr,
                ..AdamWConfig::default()
            },
            &self.params,
        )?;
        let mut rng = Rng::stream(seed, 0x3a27);
        let lengths: Vec<usize> = streams.iter().map(|s| s.joints.frames()).collect();
        let mut log = TrainLog::default();
        let mut step = 0;
        for _ in 0..epochs {
            let batches = length_buckets(&lengths, self.config.batch_size, &mut rng);
            let mut total = 0.0;
            for batch in &batches {
                let refs: Vec<&Streams> = batch.iter().map(|&i| &streams[i]).collect();
                let inputs = stream_batch::<f32>(&refs, &self.stats)?;
                let caps = batch.iter().map(|&i| captions[i].clone()).collect();
                let cls = batch.iter().map(|&i| class_tokens[labels[i]].clone()).collect();
                let tape = Tape::new();
                let p = tape.bind(&self.params, true);
                let fail = |source| Error::Training {
                    stage: "recognizer",
                    step,
                    source,
                };
                let loss = self.batch_loss(&tape, &p, inputs, caps, cls).map_err(fail)?;
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
        ck.push_meta("module", "mar");
        for (k, v) in [
            ("embed_dim", c.embed_dim),
            ("width", c.width),
            ("layers", c.layers),
            ("heads", c.heads),
            ("max_tokens", c.max_tokens),
            ("max_frames", c.max_frames),
        ] {
            ck.push_meta(k, &v.to_string());
        }
        ck.push_meta("tau", &c.tau.to_string());
        ck.push_meta("streams", &join(&c.streams.map(usize::from)));
        ck.push_meta("symmetric", &c.symmetric.to_string());
        ck.push_meta("parents", &join(&self.skeleton.parents));
        ck.push_meta("vocab", &self.vocab.tokens[2..].join(" "));
        self.stats.push_to(&mut ck, "stats");
        ck.push_params(&self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &'static str| ck.meta(k).ok_or_else(|| Error::format(format!("recognizer checkpoint lacks `{k}`")));
        let num = |k: &'static str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::format(format!("bad `{k}` in recognizer checkpoint")))
        };
        let flags: Vec<bool> = get("streams")?.split(',').map(|v| v == "1").collect();
        if flags.len() != 3 {
            return Err(Error::format("bad `streams` in recognizer checkpoint"));
        }
        let config = MarConfig {
            embed_dim: num("embed_dim")?,
            width: num("width")?,
            layers: num("layers")?,
            heads: num("heads")?,
            max_tokens: num("max_tokens")?,
            max_frames: num("max_frames")?,
            tau: get("tau")?.parse().map_err(|_| Error::format("bad `tau`"))?,
            streams: [flags[0], flags[1], flags[2]],
            symmetric: get("symmetric")? == "true",
            ..MarConfig::default()
        };
        let parents = get("parents")?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::format("bad parent list")))
            .collect::<Result<Vec<usize>>>()?;
        let skeleton = if parents == Skeleton::humanoid().parents {
            Skeleton::humanoid()
        } else {
            Skeleton::from_parents(parents)
        };
        let mut text = String::from("<pad>\n<unk>\n");
        for t in get("vocab")?.split_whitespace() {
            text.push_str(t);
            text.push('\n');
        }
        let vocab = TextVocab::parse(&text)?;
        let stats = StreamStats::read_from(ck, "stats")?;
        let mut mar = Self::new(config, skeleton, stats, vocab, 0)?;
        ck.load_params(&mut mar.params)?;
        Ok(mar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Corpus, SynthConfig};

    fn toy_config() -> MarConfig {
        MarConfig {
            embed_dim: 8,
            width: 8,
            layers: 1,
            heads: 2,
            max_tokens: 12,
            max_frames: 64,
            lr: 2e-3,
            batch_size: 8,
            ..MarConfig::default()
        }
    }

    fn corpus() -> Corpus {
        Corpus::synthesize(&SynthConfig::default(), 24, 3, 8).unwrap()
    }

    fn toy(cfg: MarConfig, corpus: &Corpus) -> Recognizer {
        let items: Vec<&Item> = corpus.items.iter().collect();
        let vocab = Recognizer::vocab_for(&items, &corpus.classes);
        Recognizer::new(cfg, Skeleton::humanoid(), StreamStats::identity(27), vocab, 1).unwrap()
    }

    fn unit(v: &[f32]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn tokenizer_and_vocab() {
        assert_eq!(tokenize("A person walks, then Jumps."), ["a", "person", "walks", "then", "jumps"]);
        let v = TextVocab::build(&["b a", "c a"]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.encode("", 4), vec![UNK]);
        assert_eq!(v.encode("a b c a", 3), vec![2, 3, 4]);
        assert_eq!(TextVocab::parse(&v.to_text()).unwrap(), v);
        assert!(TextVocab::parse("a\nb\n").is_err());
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let c = corpus();
        let mar = toy(toy_config(), &c);
        let m = &c.items[0].motion;
        let b = mar.embed_motion(m).unwrap();
        assert!((unit(&b.fused) - 1.0).abs() < 1e-5);
        for s in &b.streams {
            assert!((unit(s.as_ref().unwrap()) - 1.0).abs() < 1e-5);
        }
        assert_eq!(mar.embed_motion(m).unwrap(), b);
        let t = mar.embed_text("a person walks forward", TextKind::Caption).unwrap();
        assert!((unit(&t.c) - 1.0).abs() < 1e-5);
        assert_eq!(mar.embed_text("a person walks forward", TextKind::Caption).unwrap(), t);
        let e = mar.embed_text("", TextKind::ClassLabel).unwrap();
        assert_eq!(e.kind, TextKind::ClassLabel);
        assert!((cosine(&t.c, &e.c) - dot(&t.c, &e.c)).abs() < 1e-6);
    }

    #[test]
    fn batched_embeddings_match_single() {
        let c = corpus();
        let mar = toy(toy_config(), &c);
        let motions: Vec<&Motion> = c.items.iter().take(6).map(|i| &i.motion).collect();
        let batch = mar.embed_motions(&motions).unwrap();
        for (m, b) in motions.iter().zip(&batch) {
            let one = mar.embed_motion(m).unwrap();
            assert!(one.fused.iter().zip(&b.fused).all(|(x, y)| (x - y).abs() < 1e-5));
        }
        let texts = ["a person walks", "someone hops in place quickly"];
        let many = mar.embed_texts(&texts, TextKind::Caption).unwrap();
        for (t, e) in texts.iter().zip(&many) {
            let one = mar.embed_text(t, TextKind::Caption).unwrap();
            assert!(one.c.iter().zip(&e.c).all(|(x, y)| (x - y).abs() < 1e-5));
        }
    }

    #[test]
    fn time_reversal_changes_motion_embedding() {
        let c = corpus();
        let mar = toy(toy_config(), &c);
        let m = &c.items[0].motion;
        let (a, b) = (mar.embed_motion(m).unwrap(), mar.embed_motion(&m.reversed()).unwrap());
        assert_ne!(a.streams[2], b.streams[2]);
    }

    #[test]
    fn info_nce_values() {
        let one = vec![vec![1.0f32, 0.0]];
        assert_eq!(info_nce_loss(&one, &one, 0.1).unwrap(), 0.0);
        let e = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        let l = info_nce_loss(&e, &e, 1.0).unwrap();
        assert!((l - (-(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln())).abs() < 1e-9);
        assert!((l - 0.3133).abs() < 1e-4);
        assert!(info_nce_loss(&e, &one, 1.0).is_err());
        assert!(info_nce_loss(&e, &e, 0.0).is_err());

        let tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = info_nce(t, t, 1.0).unwrap().item();
        assert!((v - l).abs() < 1e-12);
    }

    #[test]
    fn info_nce_random_near_log_n() {
        let mut rng = Rng::new(11);
        let mut draw = || -> Vec<Vec<f32>> {
            (0..256)
                .map(|_| {
                    let v: Vec<f64> = rng.normal::<f64>(&[512]).into_data();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter().map(|x| (x / n) as f32).collect()
                })
                .collect()
        };
        let (e, c) = (draw(), draw());
        let l = info_nce_loss(&e, &c, 0.1).unwrap();
        assert!((l / 256f64.ln() - 1.0).abs() < 0.1, "{l}");
    }

    #[test]
    fn retrieval_recall() {
        let basis: Vec<Vec<f32>> = (0..4).map(|i| (0..4).map(|j| f32::from(i == j)).collect()).collect();
        let r = retrieve(&basis, &basis, 1).unwrap();
        assert_eq!((r.query_to_gallery, r.gallery_to_query), (1.0, 1.0));
        let shifted: Vec<Vec<f32>> = (0..4).map(|i| basis[(i + 1) % 4].clone()).collect();
        let r1 = retrieve(&basis, &shifted, 1).unwrap();
        assert_eq!(r1.query_to_gallery, 0.0);
        let r4 = retrieve(&basis, &shifted, 4).unwrap();
        assert_eq!(r4.query_to_gallery, 1.0);
        assert!(retrieve::<Vec<f32>>(&[], &[], 1).is_err());
        assert!(retrieve(&basis, &basis, 0).is_err());
        let tied = vec![vec![1.0f32, 0.0]; 3];
        assert_eq!(retrieve(&tied, &tied, 1).unwrap().query_to_gallery, 1.0);
    }

    #[test]
    fn classify_ranks_all_classes() {
        let c = corpus();
        let mar = toy(toy_config(), &c);
        let ranked = mar.classify(&c.items[0].motion, &c.classes).unwrap();
        assert_eq!(ranked.len(), c.classes.len());
        assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(ranked.iter().all(|&(_, s)| (-1.0..=1.0).contains(&s)));
        let single = ClassTable {
            classes: vec![c.classes.classes[0].clone()],
        };
        assert_eq!(mar.classify(&c.items[1].motion, &single).unwrap()[0].0, 0);
        let emb = mar.class_embeddings(&c.classes).unwrap();
        let b = mar.embed_motion(&c.items[0].motion).unwrap();
        let scaled: Vec<TextEmbedding> = emb
            .iter()
            .map(|e| TextEmbedding {
                c: e.c.iter().map(|v| v * 3.0).collect(),
                kind: e.kind,
            })
            .collect();
        assert_eq!(Recognizer::rank_classes(&b, &emb)[0].0, Recognizer::rank_classes(&b, &scaled)[0].0);
    }

    #[test]
    fn stream_subset() {
        let c = corpus();
        let cfg = MarConfig {
            streams: [true, false, false],
            ..toy_config()
        };
        assert_eq!(cfg.streams_label(), "j");
        let mar = toy(cfg, &c);
        let b = mar.embed_motion(&c.items[0].motion).unwrap();
        assert!(b.streams[0].is_some() && b.streams[1].is_none() && b.streams[2].is_none());
        let none = MarConfig {
            streams: [false; 3],
            ..toy_config()
        };
        assert!(none.validate().is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let c = corpus();
        let items: Vec<&Item> = c.items.iter().collect();
        let run = || {
            let mut mar = toy(toy_config(), &c);
            let log = mar.train(&items, &c.classes, 8, 5).unwrap();
            (log, mar.to_checkpoint().to_bytes())
        };
        let (log, bytes) = run();
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0], "{:?}", log.epoch_loss);
        assert_eq!(run().1, bytes);
        let mut mar = toy(toy_config(), &c);
        assert!(mar.train(&items, &ClassTable::default(), 1, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = corpus();
        let cfg = MarConfig {
            streams: [true, true, false],
            symmetric: true,
            ..toy_config()
        };
        let mar = toy(cfg, &c);
        let back = Recognizer::from_checkpoint(&Checkpoint::from_bytes(&mar.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, mar.params);
        assert_eq!(back.vocab, mar.vocab);
        assert_eq!(back.config.streams, mar.config.streams);
        assert!(back.config.symmetric);
    }
}
