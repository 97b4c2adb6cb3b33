//! Pipeline stages over on-disk artifacts, shared by the command-line tool and
//! the end-to-end tests.

use std::fmt::{Display, Write as _};
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use diffcore::{Checkpoint, Rng, Tensor};

use crate::autoencoder::{Autoencoder, Latent};
use crate::config::RunConfig;
use crate::dataset::{Corpus, SynthConfig};
use crate::evalmetrics::plot::{bar_chart, frame_strip, Bar};
use crate::evalmetrics::{self, BandAccuracy, MetricReport};
use crate::generator::{euler, EditMode, Generator};
use crate::guidance::{Guide, GuidanceConfig};
use crate::motion_repr::{derive_streams, Motion, StreamStats, Streams};
use crate::recognizer::{info_nce_loss, Recognizer, TextKind};
use crate::{Error, Result};

pub const AE_CKPT: &str = "ae.ckpt";
pub const MAR_CKPT: &str = "mar.ckpt";
pub const GEN_CKPT: &str = "gen.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const RUN_LOG: &str = "run.log";

/// Generated motions written as samples by `evaluate`.
const SAMPLE_MOTIONS: usize = 4;

/// Seed of one pipeline stage, derived from the run seed.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(stage)
}

/// Append-only event log written next to a command's artifacts.
#[derive(Debug)]
pub struct RunLog {
    file: File,
    start: Instant,
}

impl RunLog {
    /// Starts a log at `dir/run.log`. The first line records the version,
    /// seed and config hash; the effective config follows.
    pub fn create(dir: &Path, command: &str, seed: u64, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut file = File::create(dir.join(RUN_LOG))?;
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        writeln!(
            file,
            "coamd version={} seed={seed} config_sha256={} command={command} unix_time={unix}",
            env!("CARGO_PKG_VERSION"),
            cfg.hash
        )?;
        for line in cfg.echo().lines() {
            writeln!(file, "config {line}")?;
        }
        Ok(Self {
            file,
            start: Instant::now(),
        })
    }

    /// Reopens an existing log for appending.
    pub fn append(dir: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(dir.join(RUN_LOG))?;
        Ok(Self {
            file,
            start: Instant::now(),
        })
    }

    pub fn event(&mut self, msg: impl Display) -> Result<()> {
        writeln!(self.file, "t={:.3}s {msg}", self.start.elapsed().as_secs_f64())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Loads a checkpoint and verifies its module tag.
pub fn load_checkpoint(path: &Path, module: &str) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let ck = Checkpoint::load(path)?;
    let found = ck.meta("module").unwrap_or("none");
    if found != module {
        return Err(Error::WrongModule {
            path: path.display().to_string(),
            found: found.to_string(),
            expected: module.to_string(),
        });
    }
    Ok(ck)
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ck.save(path)?;
    Ok(())
}

pub fn load_ae(dir: &Path) -> Result<Autoencoder> {
    Autoencoder::from_checkpoint(&load_checkpoint(&dir.join(AE_CKPT), "ae")?)
}

pub fn load_mar(dir: &Path) -> Result<Recognizer> {
    Recognizer::from_checkpoint(&load_checkpoint(&dir.join(MAR_CKPT), "mar")?)
}

pub fn load_gen(dir: &Path) -> Result<Generator> {
    Generator::from_checkpoint(&load_checkpoint(&dir.join(GEN_CKPT), "gen")?)
}

/// The three trained models.
#[derive(Clone, Debug)]
pub struct Models {
    pub ae: Autoencoder,
    pub mar: Recognizer,
    pub gen: Generator,
}

impl Models {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            ae: load_ae(dir)?,
            mar: load_mar(dir)?,
            gen: load_gen(dir)?,
        })
    }

    pub fn guide(&self, cfg: GuidanceConfig) -> Result<Guide<'_>> {
        Guide::new(&self.ae, &self.mar, cfg)
    }
}

pub fn gen_data(cfg: &RunConfig, seed: u64, num: Option<usize>, out: &Path, log: &mut RunLog) -> Result<Corpus> {
    let n = match num {
        Some(n) => n,
        None => cfg.usize("data.num")?,
    };
    let corpus = Corpus::synthesize(&SynthConfig::default(), n, seed, cfg.usize("data.max_classes")?)?;
    corpus.save(out)?;
    log.event(format_args!(
        "gen-data samples={n} classes={} held_out={}",
        corpus.classes.len(),
        corpus.held_out().len()
    ))?;
    Ok(corpus)
}

fn train_streams(corpus: &Corpus, skeleton: &crate::motion_repr::Skeleton) -> Result<StreamStats> {
    let streams: Vec<Streams> = corpus
        .train()
        .iter()
        .map(|it| derive_streams(&it.motion, skeleton))
        .collect::<Result<_>>()?;
    StreamStats::fit(&streams)
}

pub fn train_ae(cfg: &RunConfig, seed: u64, corpus: &Corpus, out: &Path, log: &mut RunLog) -> Result<Autoencoder> {
    let skeleton = SynthConfig::default().skeleton;
    let stats = train_streams(corpus, &skeleton)?;
    let mut ae = Autoencoder::new(cfg.ae()?, skeleton, stats, stage_seed(seed, 1))?;
    let motions: Vec<&Motion> = corpus.train().iter().map(|it| &it.motion).collect();
    let train_log = ae.train(&motions, cfg.usize("ae.epochs")?, stage_seed(seed, 2))?;
    for (e, l) in train_log.epoch_loss.iter().enumerate() {
        log.event(format_args!("train-ae epoch={e} loss={l:.6}"))?;
    }
    let held: Vec<&Motion> = corpus.held_out().iter().map(|it| &it.motion).collect();
    log.event(format_args!("train-ae held_out_joint_l1={:.6}", ae.joint_l1(&held)?))?;
    save_checkpoint(&ae.to_checkpoint(), &out.join(AE_CKPT))?;
    Ok(ae)
}

pub fn train_mar(cfg: &RunConfig, seed: u64, corpus: &Corpus, out: &Path, log: &mut RunLog) -> Result<Recognizer> {
    let skeleton = SynthConfig::default().skeleton;
    let stats = train_streams(corpus, &skeleton)?;
    let train = corpus.train();
    let vocab = Recognizer::vocab_for(&train, &corpus.classes);
    let mut mar = Recognizer::new(cfg.mar()?, skeleton, stats, vocab, stage_seed(seed, 3))?;
    let train_log = mar.train(&train, &corpus.classes, cfg.usize("mar.epochs")?, stage_seed(seed, 4))?;
    for (e, l) in train_log.epoch_loss.iter().enumerate() {
        log.event(format_args!("train-mar epoch={e} loss={l:.6}"))?;
    }
    save_checkpoint(&mar.to_checkpoint(), &out.join(MAR_CKPT))?;
    std::fs::write(out.join(VOCAB_FILE), mar.vocab.to_text())?;
    Ok(mar)
}

pub fn train_gen(
    cfg: &RunConfig,
    seed: u64,
    corpus: &Corpus,
    ae: &Autoencoder,
    mar: &Recognizer,
    out: &Path,
    log: &mut RunLog,
) -> Result<Generator> {
    let train = corpus.train();
    let latents: Vec<Latent> = train.iter().map(|it| ae.encode(&it.motion)).collect::<Result<_>>()?;
    let captions: Vec<&str> = train.iter().map(|it| it.caption.as_str()).collect();
    let conds = mar.embed_texts(&captions, TextKind::Caption)?;
    let zs: Vec<&Tensor<f32>> = latents.iter().map(|l| &l.tokens).collect();
    let cs: Vec<&[f32]> = conds.iter().map(|c| c.c.as_slice()).collect();
    let mut gen = Generator::new(cfg.gen()?, ae.config.latent_dim, mar.config.embed_dim, stage_seed(seed, 5))?;
    let train_log = gen.train(&zs, &cs, cfg.usize("gen.epochs")?, stage_seed(seed, 6))?;
    for (e, l) in train_log.epoch_loss.iter().enumerate() {
        log.event(format_args!("train-gen epoch={e} loss={l:.6}"))?;
    }
    log.event(format_args!("train-gen t_min={:.6} t_max={:.6}", train_log.t_min, train_log.t_max))?;
    save_checkpoint(&gen.to_checkpoint(), &out.join(GEN_CKPT))?;
    Ok(gen)
}

/// Text-to-motion generation; `guidance` of `None` samples unguided.
pub fn generate_motion(
    models: &Models,
    text: &str,
    frames: usize,
    guidance: Option<&GuidanceConfig>,
    seed: u64,
) -> Result<Motion> {
    let c = models.mar.embed_text(text, TextKind::Caption)?;
    let guide = guidance.map(|g| models.guide(g.clone())).transpose()?;
    let out = models.gen.generate(&c.c, frames, guide.as_ref(), &mut Rng::new(seed))?;
    models.ae.decode(&out.latent)
}

/// Result of editing one motion.
#[derive(Clone, Debug)]
pub struct EditResult {
    pub motion: Motion,
    pub context: Latent,
    pub latent: Latent,
    pub fixed: Vec<bool>,
}

pub fn edit_motion(
    models: &Models,
    motion: &Motion,
    mode: EditMode,
    text: &str,
    guidance: Option<&GuidanceConfig>,
    seed: u64,
) -> Result<EditResult> {
    let context = models.ae.encode(motion)?;
    let fixed = mode.fixed(context.len());
    let c = models.mar.embed_text(text, TextKind::Caption)?;
    let guide = guidance.map(|g| models.guide(g.clone())).transpose()?;
    let out = models.gen.edit(&context, &fixed, &c.c, guide.as_ref(), &mut Rng::new(seed))?;
    Ok(EditResult {
        motion: models.ae.decode(&out.latent)?,
        context,
        latent: out.latent,
        fixed,
    })
}

/// One pass/fail line of the comparison report.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub id: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        format!("check={} result={} {}", self.id, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub reports: Vec<MetricReport>,
    pub checks: Vec<Check>,
}

impl Evaluation {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.reports.iter().find(|r| r.name == name).map(|r| r.value)
    }

    pub fn text(&self) -> String {
        let mut s = evalmetrics::report_text(&self.reports);
        for c in &self.checks {
            s.push_str(&c.line());
            s.push('\n');
        }
        s
    }
}

struct Variant {
    name: &'static str,
    scores: Vec<f64>,
    embeddings: Vec<Vec<f32>>,
}

fn fused(mar: &Recognizer, motions: &[Motion]) -> Result<Vec<Vec<f32>>> {
    let refs: Vec<&Motion> = motions.iter().collect();
    Ok(mar.embed_motions(&refs)?.into_iter().map(|b| b.fused).collect())
}

fn r_precision_runs(
    motion: &[Vec<f32>],
    text: &[Vec<f32>],
    runs: usize,
    seed: u64,
    prefix: &str,
) -> Result<Vec<MetricReport>> {
    let mut per_k = vec![Vec::new(); 3];
    for r in 0..runs.max(1) {
        let top = evalmetrics::r_precision(motion, text, 32, &[1, 2, 3], &mut Rng::stream(seed, r as u64))?;
        for (acc, v) in per_k.iter_mut().zip(top) {
            acc.push(v);
        }
    }
    per_k
        .iter()
        .enumerate()
        .map(|(k, v)| MetricReport::from_runs(format!("{prefix}.r_precision_top{}", k + 1), v))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Full metric suite: real-data reference rows, unguided and guided
/// generation rows, editing rows and the pass/fail checks. Writes the report,
/// plots and a few sample motions under `out`.
pub fn evaluate(
    models: &Models,
    corpus: &Corpus,
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    log: &mut RunLog,
) -> Result<Evaluation> {
    std::fs::create_dir_all(out.join("plots"))?;
    std::fs::create_dir_all(out.join("samples"))?;
    let (ae, mar, gen) = (&models.ae, &models.mar, &models.gen);
    let guidance = cfg.guidance()?;
    let scorer = models.guide(guidance.clone())?;
    let runs = cfg.usize("eval.rprecision_runs")?;
    let held = corpus.held_out();
    if held.len() < 32 {
        return Err(Error::invalid(format!("evaluation needs at least 32 held-out samples, found {}", held.len())));
    }
    let prompts: Vec<_> = held.iter().take(cfg.usize("eval.prompts")?.max(32)).copied().collect();
    let mut reports = Vec::new();
    let mut checks = Vec::new();

    let real: Vec<Motion> = prompts.iter().map(|it| it.motion.clone()).collect();
    let real_embs = fused(mar, &real)?;
    let captions: Vec<&str> = prompts.iter().map(|it| it.caption.as_str()).collect();
    let text_embs = mar.embed_texts(&captions, TextKind::Caption)?;
    let texts: Vec<Vec<f32>> = text_embs.iter().map(|t| t.c.clone()).collect();
    let held_motions: Vec<&Motion> = held.iter().map(|it| &it.motion).collect();
    let ae_l1 = ae.joint_l1(&held_motions)?;
    reports.push(MetricReport::single("ae.held_out_joint_l1", ae_l1));
    reports.extend(r_precision_runs(&real_embs, &texts, runs, stage_seed(seed, 10), "real")?);
    reports.push(MetricReport::single("real.mm_dist", evalmetrics::mm_dist(&real_embs, &texts)?));
    reports.push(MetricReport::single("real.clip_score", evalmetrics::clip_score(&real_embs, &texts)?));
    let real_scores: Vec<f64> = real
        .iter()
        .zip(&text_embs)
        .map(|(m, t)| scorer.alignment_score(m, t).map(|s| s.total))
        .collect::<Result<_>>()?;
    reports.push(MetricReport::single("real.alignment", mean(&real_scores)));

    let class_embs = mar.class_embeddings(&corpus.classes)?;
    let bundles = mar.embed_motions(&held_motions)?;
    let preds: Vec<usize> = bundles.iter().map(|b| Recognizer::rank_classes(b, &class_embs)[0].0).collect();
    let labels: Vec<Vec<usize>> = held.iter().map(|it| it.labels.clone()).collect();
    let acc: BandAccuracy = evalmetrics::recognition_accuracy(&preds, &labels, &corpus.bands)?;
    reports.extend(acc.reports("recognition."));
    log.event(format_args!("evaluate real rows done prompts={}", prompts.len()))?;

    let gen_seed = stage_seed(seed, 11);
    let mut variants = Vec::new();
    for (name, guide, steps) in [
        ("unguided", None, gen.config.ar_steps),
        ("guided", Some(&scorer), gen.config.ar_steps),
        ("single_shot", Some(&scorer), 1),
    ] {
        let mut motions = Vec::with_capacity(prompts.len());
        for (i, (it, t)) in prompts.iter().zip(&text_embs).enumerate() {
            let mut rng = Rng::stream(gen_seed, i as u64);
            let g = gen.generate_with_steps(&t.c, it.motion.frames(), guide, steps, &mut rng)?;
            motions.push(ae.decode(&g.latent)?);
        }
        let scores: Vec<f64> = motions
            .iter()
            .zip(&text_embs)
            .map(|(m, t)| scorer.alignment_score(m, t).map(|s| s.total))
            .collect::<Result<_>>()?;
        for (i, m) in motions.iter().take(SAMPLE_MOTIONS).enumerate() {
            m.save(out.join("samples").join(format!("{name}_{i:03}.motion")))?;
            std::fs::write(
                out.join("plots").join(format!("strip_{name}_{i:03}.svg")),
                frame_strip(m, &ae.skeleton, 6)?,
            )?;
        }
        let embeddings = fused(mar, &motions)?;
        log.event(format_args!("evaluate variant={name} mean_alignment={:.6}", mean(&scores)))?;
        variants.push(Variant {
            name,
            scores,
            embeddings,
        });
    }
    for (i, m) in real.iter().take(SAMPLE_MOTIONS).enumerate() {
        std::fs::write(out.join("plots").join(format!("strip_real_{i:03}.svg")), frame_strip(m, &ae.skeleton, 6)?)?;
    }

    let mm_prompts = cfg.usize("eval.mmodality_prompts")?.min(prompts.len());
    let mm_repeats = cfg.usize("eval.mmodality_repeats")?;
    for v in variants.iter().take(2) {
        let guide = (v.name == "guided").then_some(&scorer);
        reports.push(MetricReport::single(format!("{}.alignment", v.name), mean(&v.scores)));
        reports.extend(r_precision_runs(&v.embeddings, &texts, runs, stage_seed(seed, 12), v.name)?);
        reports.push(MetricReport::single(format!("{}.fid", v.name), evalmetrics::fid(&real_embs, &v.embeddings)?));
        reports.push(MetricReport::single(format!("{}.mm_dist", v.name), evalmetrics::mm_dist(&v.embeddings, &texts)?));
        reports.push(MetricReport::single(format!("{}.clip_score", v.name), evalmetrics::clip_score(&v.embeddings, &texts)?));
        if mm_prompts > 0 && mm_repeats >= 2 {
            let mut groups = Vec::with_capacity(mm_prompts);
            for (i, (it, t)) in prompts.iter().zip(&text_embs).take(mm_prompts).enumerate() {
                let mut motions = Vec::with_capacity(mm_repeats);
                for r in 0..mm_repeats {
                    let mut rng = Rng::stream(stage_seed(seed, 13), (i * mm_repeats + r) as u64);
                    let g = gen.generate(&t.c, it.motion.frames(), guide, &mut rng)?;
                    motions.push(ae.decode(&g.latent)?);
                }
                groups.push(fused(mar, &motions)?);
            }
            reports.push(MetricReport::single(format!("{}.mmodality", v.name), evalmetrics::m_modality(&groups)?));
        }
    }
    reports.push(MetricReport::single("single_shot.alignment", mean(&variants[2].scores)));
    let (wins, losses, ties) = evalmetrics::paired_counts(&variants[1].scores, &variants[0].scores);
    let p = evalmetrics::sign_test(wins, losses);
    reports.push(MetricReport::single("guided_vs_unguided.wins", wins as f64));
    reports.push(MetricReport::single("guided_vs_unguided.losses", losses as f64));
    reports.push(MetricReport::single("guided_vs_unguided.sign_test_p", p));
    log.event(format_args!("evaluate sign test wins={wins} losses={losses} ties={ties} p={p:.3e}"))?;

    let edit_samples = cfg.usize("eval.edit_samples")?.min(held.len());
    let edit_guidance = cfg.bool("guidance.enabled")?.then_some(&guidance);
    let mut edits_exact = true;
    let mut worst_edit: f64 = 0.0;
    for mode in EditMode::ALL {
        let mut l1 = Vec::with_capacity(edit_samples);
        for (i, it) in held.iter().take(edit_samples).enumerate() {
            let seed_i = stage_seed(seed, 14) ^ ((i as u64) << 8);
            let res = edit_motion(models, &it.motion, mode, &it.caption, edit_guidance, seed_i)?;
            for (t, &f) in res.fixed.iter().enumerate() {
                if f && res.context.token(t) != res.latent.token(t) {
                    edits_exact = false;
                }
            }
            let reference = ae.decode(&res.context)?;
            l1.push(fixed_region_l1(&reference, &res.motion, &res.fixed));
        }
        let m = mean(&l1);
        worst_edit = worst_edit.max(m);
        reports.push(MetricReport::single(format!("edit.{}.fixed_region_l1", mode.name()), m));
    }

    let rp = |name: &str| reports.iter().find(|r| r.name == name).map_or(f64::NAN, |r| r.value);
    let (s_u, s_g, s_1) = (mean(&variants[0].scores), mean(&variants[1].scores), mean(&variants[2].scores));
    checks.push(euler_check());
    checks.push(Check {
        id: "4a",
        pass: rp("real.r_precision_top1") >= 0.5,
        detail: format!("retrieval_r1={:.4} threshold=0.5", rp("real.r_precision_top1")),
    });
    checks.push(Check {
        id: "4b",
        pass: s_g > s_u && p < 0.05,
        detail: format!("guided_s={s_g:.4} unguided_s={s_u:.4} wins={wins} losses={losses} p={p:.3e}"),
    });
    checks.push(Check {
        id: "4c",
        pass: rp("guided.r_precision_top1") >= rp("unguided.r_precision_top1"),
        detail: format!(
            "guided_top1={:.4} unguided_top1={:.4}",
            rp("guided.r_precision_top1"),
            rp("unguided.r_precision_top1")
        ),
    });
    checks.push(Check {
        id: "4d",
        pass: s_1 <= s_g,
        detail: format!("single_shot_s={s_1:.4} iterative_s={s_g:.4}"),
    });
    checks.push(Check {
        id: "6",
        pass: edits_exact && worst_edit <= 1.5 * ae_l1,
        detail: format!("bit_exact={edits_exact} worst_fixed_l1={worst_edit:.5} bound={:.5}", 1.5 * ae_l1),
    });
    checks.push(metric_oracle_check(&real_embs)?);

    let eval = Evaluation { reports, checks };
    write_plots(&eval, &out.join("plots"))?;
    std::fs::write(out.join(REPORT_FILE), eval.text())?;
    for c in &eval.checks {
        log.event(c.line())?;
    }
    Ok(eval)
}

/// Mean absolute joint difference over frames covered by fixed tokens.
pub fn fixed_region_l1(reference: &Motion, edited: &Motion, fixed: &[bool]) -> f64 {
    let c = reference.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for f in 0..reference.frames().min(edited.frames()) {
        if fixed.get(f / crate::autoencoder::DOWNSAMPLE).copied().unwrap_or(false) {
            for (a, b) in reference.frame(f).iter().zip(edited.frame(f)) {
                sum += (a - b).abs() as f64;
            }
            n += c;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn euler_check() -> Check {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(0);
    for n in [1, 2, 10, 50] {
        let z1: Tensor<f32> = rng.normal(&[3, 8]);
        let target: Tensor<f32> = rng.normal(&[3, 8]);
        let field: Vec<f32> = z1.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let field = Tensor::new(vec![3, 8], field).expect("matching shape");
        let err = euler(z1, n, |_, _| Ok(field.clone()))
            .map(|z| z.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max))
            .unwrap_or(f64::INFINITY);
        worst = worst.max(err);
    }
    Check {
        id: "3",
        pass: worst <= 1e-6,
        detail: format!("max_endpoint_error={worst:.3e} steps=1,2,10,50"),
    }
}

fn metric_oracle_check(embs: &[Vec<f32>]) -> Result<Check> {
    let self_fid = evalmetrics::fid(embs, embs)?;
    let gauss = |m: f64, s: f64| -> Vec<Vec<f32>> {
        let k = s * (999.0f64 / 1000.0).sqrt();
        (0..1000).map(|i| vec![(m + if i % 2 == 0 { k } else { -k }) as f32]).collect()
    };
    let shift = (evalmetrics::fid(&gauss(0.0, 1.0), &gauss(1.0, 1.0))? - 1.0).abs();
    let scale = (evalmetrics::fid(&gauss(0.0, 1.0), &gauss(0.0, 2.0))? - 1.0).abs();
    let mut rng = Rng::new(1);
    let unit = |rng: &mut Rng, dim: usize| -> Vec<f32> {
        let v: Vec<f32> = rng.normal::<f32>(&[dim]).into_data();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let mut top1 = 0.0;
    for _ in 0..100 {
        let m: Vec<Vec<f32>> = (0..32).map(|_| unit(&mut rng, 32)).collect();
        let t: Vec<Vec<f32>> = (0..32).map(|_| unit(&mut rng, 32)).collect();
        top1 += evalmetrics::r_precision(&m, &t, 32, &[1], &mut rng)?[0];
    }
    top1 /= 100.0;
    let se = ((1.0 / 32.0) * (31.0 / 32.0) / 3200.0f64).sqrt();
    let a: Vec<Vec<f32>> = (0..256).map(|_| unit(&mut rng, 512)).collect();
    let b: Vec<Vec<f32>> = (0..256).map(|_| unit(&mut rng, 512)).collect();
    let nce = info_nce_loss(&a, &b, 0.1)?;
    let ln = 256f64.ln();
    Ok(Check {
        id: "7",
        pass: self_fid.abs() <= 1e-6
            && shift <= 1e-6
            && scale <= 1e-6
            && (top1 - 1.0 / 32.0).abs() <= 3.0 * se
            && (nce - ln).abs() <= 0.1 * ln,
        detail: format!(
            "fid_self={self_fid:.2e} fid_shift_err={shift:.2e} fid_scale_err={scale:.2e} random_top1={top1:.4} info_nce={nce:.4} ln256={ln:.4}"
        ),
    })
}

fn write_plots(eval: &Evaluation, dir: &Path) -> Result<()> {
    let bar = |name: &str, label: &str| -> Option<Bar> {
        eval.reports.iter().find(|r| r.name == name).map(|r| Bar {
            label: label.to_string(),
            value: r.value,
            ci: r.ci,
        })
    };
    let charts: [(&str, &str, Vec<(&str, &str)>); 6] = [
        ("alignment", "Mean alignment score", vec![("real.alignment", "real"), ("unguided.alignment", "unguided"), ("guided.alignment", "guided"), ("single_shot.alignment", "single-shot")]),
        ("r_precision_top1", "R-precision top-1", vec![("real.r_precision_top1", "real"), ("unguided.r_precision_top1", "unguided"), ("guided.r_precision_top1", "guided")]),
        ("fid", "FID (recognizer space)", vec![("unguided.fid", "unguided"), ("guided.fid", "guided")]),
        ("clip_score", "CLIP-style score", vec![("real.clip_score", "real"), ("unguided.clip_score", "unguided"), ("guided.clip_score", "guided")]),
        ("mm_dist", "MM-Dist", vec![("real.mm_dist", "real"), ("unguided.mm_dist", "unguided"), ("guided.mm_dist", "guided")]),
        ("recognition", "Recognition top-1 (%)", vec![("recognition.overall", "overall"), ("recognition.many", "many"), ("recognition.medium", "medium"), ("recognition.few", "few")]),
    ];
    for (file, title, rows) in charts {
        let bars: Vec<Bar> = rows.iter().filter_map(|(n, l)| bar(n, l)).collect();
        if !bars.is_empty() {
            std::fs::write(dir.join(format!("{file}.svg")), bar_chart(title, &bars)?)?;
        }
    }
    Ok(())
}

/// Output layout of a full reproduction run.
#[derive(Clone, Debug)]
pub struct ReproduceLayout {
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub eval: PathBuf,
    pub report: PathBuf,
}

impl ReproduceLayout {
    pub fn under(out: &Path) -> Self {
        Self {
            data: out.join("data"),
            ckpt: out.join("ckpt"),
            eval: out.join("eval"),
            report: out.join(REPORT_FILE),
        }
    }
}

/// gen-data → train-ae → train-mar → train-gen → evaluate, into a clean
/// directory. A failing stage is named in the error and earlier artifacts
/// are kept.
pub fn reproduce(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Evaluation> {
    if out.exists() && std::fs::read_dir(out)?.next().is_some() {
        return Err(Error::invalid(format!("output directory {} is not empty", out.display())));
    }
    let layout = ReproduceLayout::under(out);
    let mut log = RunLog::create(out, "reproduce", seed, cfg)?;
    let stage = |name: &'static str| move |e: Error| Error::Stage { stage: name, source: Box::new(e) };
    let corpus = gen_data(cfg, seed, None, &layout.data, &mut log).map_err(stage("gen-data"))?;
    let ae = train_ae(cfg, seed, &corpus, &layout.ckpt, &mut log).map_err(stage("train-ae"))?;
    let mar = train_mar(cfg, seed, &corpus, &layout.ckpt, &mut log).map_err(stage("train-mar"))?;
    let gen = train_gen(cfg, seed, &corpus, &ae, &mar, &layout.ckpt, &mut log).map_err(stage("train-gen"))?;
    let models = Models { ae, mar, gen };
    let eval = evaluate(&models, &corpus, cfg, seed, &layout.eval, &mut log).map_err(stage("evaluate"))?;
    let mut text = String::new();
    let _ = writeln!(text, "# reproduce seed={seed} config_sha256={}", cfg.hash);
    text.push_str(&eval.text());
    std::fs::write(&layout.report, text)?;
    log.event("reproduce done")?;
    Ok(eval)
}

/// Score of a generated motion for a caption, for command-line reporting.
pub fn alignment(models: &Models, motion: &Motion, text: &str, cfg: &GuidanceConfig) -> Result<f64> {
    let c = models.mar.embed_text(text, TextKind::Caption)?;
    Ok(models.guide(cfg.clone())?.alignment_score(motion, &c)?.total)
}
