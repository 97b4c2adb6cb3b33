//! `coamd` command-line tool.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coamd::config::RunConfig;
use coamd::dataset::Corpus;
use coamd::evalmetrics::plot::frame_strip;
use coamd::generator::EditMode;
use coamd::motion_repr::Motion;
use coamd::pipeline::{self, Models, RunLog};
use coamd::recognizer::{cosine, Recognizer, TextKind};
use coamd::Error;

#[derive(Parser, Debug)]
#[command(name = "coamd", version, about = "Text-to-motion generation with recognizer-gradient guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (flat key=value file).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug, Default)]
struct GuidanceFlags {
    #[arg(long, value_enum)]
    guidance: Option<OnOff>,
    #[arg(long)]
    gamma: Option<f64>,
    /// per-ar-step or per-ode-step.
    #[arg(long)]
    placement: Option<String>,
    /// Fused, joint, bone and motion weights, comma separated.
    #[arg(long)]
    weights: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a labeled motion-caption corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num: Option<usize>,
    },
    /// Train the motion autoencoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the contrastive recognizer.
    TrainMar {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the latent generator against trained AE and recognizer checkpoints.
    TrainGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Generate one motion from text.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        /// Number of frames.
        #[arg(long)]
        length: usize,
        #[command(flatten)]
        guidance: GuidanceFlags,
    },
    /// Regenerate part of a motion.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// inpaint, outpaint, prefix or suffix.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        text: String,
        #[command(flatten)]
        guidance: GuidanceFlags,
    },
    /// Rank action classes for a motion file.
    Recognize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Rank corpus motions for a text query.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Run the metric suite and write the report and plots.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        guidance: GuidanceFlags,
    },
    /// Render a motion file as a frame-strip SVG.
    ExportAnim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        panels: usize,
    },
    /// Run every stage into an empty directory and write a comparison report.
    Reproduce {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::GenData { common, .. }
            | Self::TrainAe { common, .. }
            | Self::TrainMar { common, .. }
            | Self::TrainGen { common, .. }
            | Self::Generate { common, .. }
            | Self::Edit { common, .. }
            | Self::Recognize { common, .. }
            | Self::Retrieve { common, .. }
            | Self::Evaluate { common, .. }
            | Self::ExportAnim { common, .. }
            | Self::Reproduce { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::GenData { .. } => "gen-data",
            Self::TrainAe { .. } => "train-ae",
            Self::TrainMar { .. } => "train-mar",
            Self::TrainGen { .. } => "train-gen",
            Self::Generate { .. } => "generate",
            Self::Edit { .. } => "edit",
            Self::Recognize { .. } => "recognize",
            Self::Retrieve { .. } => "retrieve",
            Self::Evaluate { .. } => "evaluate",
            Self::ExportAnim { .. } => "export-anim",
            Self::Reproduce { .. } => "reproduce",
        }
    }

    fn guidance(&self) -> Option<&GuidanceFlags> {
        match self {
            Self::Generate { guidance, .. } | Self::Edit { guidance, .. } | Self::Evaluate { guidance, .. } => Some(guidance),
            _ => None,
        }
    }
}

/// Failure split by exit code.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Self::Usage(e.to_string()),
            e => Self::Runtime(e),
        }
    }
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("COAMD_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Failure::Usage(format!("COAMD_THREADS must be a positive integer, got `{v}`"))),
    }
}

fn effective_config(cmd: &Command) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&cmd.common().config)?;
    if let Some(g) = cmd.guidance() {
        if let Some(v) = g.guidance {
            cfg.set("guidance.enabled", if matches!(v, OnOff::On) { "true" } else { "false" })?;
        }
        if let Some(v) = g.gamma {
            cfg.set("guidance.gamma", &v.to_string())?;
        }
        if let Some(v) = &g.placement {
            cfg.set("guidance.placement", v)?;
        }
        if let Some(v) = &g.weights {
            cfg.set("guidance.weights", v)?;
        }
    }
    Ok(cfg)
}

fn guidance_for(cfg: &RunConfig) -> Result<Option<coamd::guidance::GuidanceConfig>, Failure> {
    Ok(if cfg.bool("guidance.enabled")? { Some(cfg.guidance()?) } else { None })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = threads()?;
    let cmd = &cli.command;
    let cfg = effective_config(cmd)?;
    let Common { seed, out, .. } = cmd.common();
    let (seed, out) = (*seed, out.as_path());
    if let Command::Edit { mode, .. } = cmd {
        mode.parse::<EditMode>().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Command::Reproduce { .. } = cmd {
        let eval = pipeline::reproduce(&cfg, seed, out)?;
        print!("{}", eval.checks.iter().map(|c| c.line() + "\n").collect::<String>());
        return Ok(());
    }
    let mut log = RunLog::create(out, cmd.name(), seed, &cfg)?;
    log.event(format_args!("threads={threads}"))?;
    match cmd {
        Command::GenData { num, .. } => {
            pipeline::gen_data(&cfg, seed, *num, out, &mut log)?;
        }
        Command::TrainAe { data, .. } => {
            pipeline::train_ae(&cfg, seed, &Corpus::load(data)?, out, &mut log)?;
        }
        Command::TrainMar { data, .. } => {
            pipeline::train_mar(&cfg, seed, &Corpus::load(data)?, out, &mut log)?;
        }
        Command::TrainGen { data, ckpt, .. } => {
            let ae = pipeline::load_ae(ckpt)?;
            let mar = pipeline::load_mar(ckpt)?;
            pipeline::train_gen(&cfg, seed, &Corpus::load(data)?, &ae, &mar, out, &mut log)?;
        }
        Command::Generate { ckpt, text, length, .. } => {
            let models = Models::load(ckpt)?;
            let guidance = guidance_for(&cfg)?;
            let motion = pipeline::generate_motion(&models, text, *length, guidance.as_ref(), seed)?;
            write_motion(&motion, &out.join("generated.motion"))?;
            let score = pipeline::alignment(&models, &motion, text, &cfg.guidance()?)?;
            log.event(format_args!("generate frames={} guided={} alignment={score:.6}", motion.frames(), guidance.is_some()))?;
        }
        Command::Edit { ckpt, input, mode, text, .. } => {
            let models = Models::load(ckpt)?;
            let guidance = guidance_for(&cfg)?;
            let motion = Motion::load(input)?;
            let mode: EditMode = mode.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let res = pipeline::edit_motion(&models, &motion, mode, text, guidance.as_ref(), seed)?;
            write_motion(&res.motion, &out.join("edited.motion"))?;
            let fixed = res.fixed.iter().filter(|&&f| f).count();
            log.event(format_args!("edit mode={} fixed_tokens={fixed}/{}", mode.name(), res.fixed.len()))?;
        }
        Command::Recognize { ckpt, data, input, top, .. } => {
            let mar = pipeline::load_mar(ckpt)?;
            let corpus = Corpus::load(data)?;
            let ranked = mar.classify(&Motion::load(input)?, &corpus.classes)?;
            let mut s = String::new();
            for (rank, (class, score)) in ranked.iter().take(*top).enumerate() {
                let _ = writeln!(
                    s,
                    "rank={} class={class} score={score:.6} phrase={}",
                    rank + 1,
                    corpus.classes.classes[*class].canonical
                );
            }
            std::fs::write(out.join("recognition.txt"), &s).map_err(Error::from)?;
            print!("{s}");
        }
        Command::Retrieve { ckpt, data, text, top, .. } => {
            let mar = pipeline::load_mar(ckpt)?;
            let corpus = Corpus::load(data)?;
            let s = retrieve(&mar, &corpus, text, *top)?;
            std::fs::write(out.join("retrieval.txt"), &s).map_err(Error::from)?;
            print!("{s}");
        }
        Command::Evaluate { ckpt, data, .. } => {
            let models = Models::load(ckpt)?;
            let eval = pipeline::evaluate(&models, &Corpus::load(data)?, &cfg, seed, out, &mut log)?;
            print!("{}", eval.checks.iter().map(|c| c.line() + "\n").collect::<String>());
        }
        Command::ExportAnim { input, panels, .. } => {
            let motion = Motion::load(input)?;
            let skeleton = coamd::dataset::SynthConfig::default().skeleton;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("motion");
            std::fs::write(out.join(format!("{stem}.svg")), frame_strip(&motion, &skeleton, *panels)?)
                .map_err(Error::from)?;
        }
        Command::Reproduce { .. } => unreachable!("handled above"),
    }
    log.event("done")?;
    Ok(())
}

fn write_motion(motion: &Motion, path: &Path) -> Result<(), Failure> {
    motion.save(path)?;
    Ok(())
}

fn retrieve(mar: &Recognizer, corpus: &Corpus, text: &str, top: usize) -> Result<String, Failure> {
    let query = mar.embed_text(text, TextKind::Caption)?;
    let motions: Vec<&Motion> = corpus.items.iter().map(|it| &it.motion).collect();
    let embs = mar.embed_motions(&motions)?;
    let mut scored: Vec<(usize, f64)> = embs.iter().map(|b| cosine(&b.fused, &query.c)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut s = String::new();
    for (rank, (i, score)) in scored.iter().take(top).enumerate() {
        let it = &corpus.items[*i];
        let _ = writeln!(s, "rank={} id={} score={score:.6} caption={}", rank + 1, it.id, it.caption);
    }
    Ok(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
