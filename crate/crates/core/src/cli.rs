//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE`, a `key=value` file whose keys
//! are long flag names; flags given on the command line win.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::augment::{build_suppression_set, default_t_dec, generate_hallucinative};
use crate::corpus::{generate_world, load_corpus, save_corpus, split_of, Split, VideoSample, WorldConfig};
use crate::lexicon::{Category, Lexicon};
use crate::metrics::{MetricReport, Variant};
use crate::model::ToyMllm;
use crate::train::{
    evaluate, gradcheck_losses, model_config, run_experiment, write_training_log, Ablation, ExperimentSpec, Optimizer,
    TrainConfig, TrainError, Trainer, WorldSource,
};

/// Gradient checks pass at or below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Validation(e.to_string()),
            TrainError::Corpus(crate::corpus::CorpusError::Config(_)) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "halalign", version, about = "Hallucination-aware alignment for a toy video captioner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world into a data directory.
    Gen(GenArgs),
    /// Train one configuration and write checkpoint, log and metrics.
    Train(TrainArgs),
    /// Print hallucinated captions for the training split.
    Negatives(NegativesArgs),
    /// Evaluate a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Run the component ablation over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every loss.
    Gradcheck(GradcheckArgs),
    /// Print saved metric reports side by side.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// key=value file with default flag values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct WorldArgs {
    #[arg(long, default_value_t = WorldConfig::default().num_objects)]
    pub num_objects: usize,
    #[arg(long, default_value_t = WorldConfig::default().num_actions)]
    pub num_actions: usize,
    #[arg(long, default_value_t = WorldConfig::default().vocab_other)]
    pub vocab_other: usize,
    #[arg(long, default_value_t = WorldConfig::default().num_train)]
    pub num_train: usize,
    #[arg(long, default_value_t = WorldConfig::default().num_eval)]
    pub num_eval: usize,
    #[arg(long, default_value_t = WorldConfig::default().frames)]
    pub frames: usize,
    /// Tracklet noise standard deviation.
    #[arg(long, default_value_t = WorldConfig::default().tracklet_noise)]
    pub noise: f64,
    #[arg(long, default_value_t = WorldConfig::default().d_vis)]
    pub d_vis: usize,
    #[arg(long, default_value_t = WorldConfig::default().cooccurrence)]
    pub cooccurrence: f64,
    #[arg(long, default_value_t = WorldConfig::default().family_similarity)]
    pub family_similarity: f64,
}

impl WorldArgs {
    fn world(&self) -> WorldConfig {
        WorldConfig {
            num_objects: self.num_objects,
            num_actions: self.num_actions,
            vocab_other: self.vocab_other,
            num_train: self.num_train,
            num_eval: self.num_eval,
            frames: self.frames,
            tracklet_noise: self.noise,
            d_vis: self.d_vis,
            cooccurrence: self.cooccurrence,
            family_similarity: self.family_similarity,
            ..WorldConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    /// sgd or adam
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
    #[arg(long, default_value_t = TrainConfig::default().alpha)]
    pub alpha: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta)]
    pub beta: f64,
    #[arg(long, default_value_t = TrainConfig::default().tau)]
    pub tau: f64,
}

impl OptimArgs {
    fn train_config(&self, seed: u64, ablation: Ablation) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            optimizer: self.optimizer,
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            seed,
            toggles: ablation.toggles(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub world: WorldArgs,
    /// Output directory (lexicon.tsv, train.tsv, eval.tsv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Data directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// baseline, video, video_obj, video_obj_act or full.
    #[arg(long, default_value = "full")]
    pub ablation: Ablation,
    /// Output directory for model.ckpt, train_log.csv and metrics.{csv,json}.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct NegativesArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to decode with; a fresh model from `--seed` when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write a TSV instead of printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to evaluate; a fresh model from `--seed` when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output prefix; writes PREFIX.csv and PREFIX.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Also train the captioning-only baseline row.
    #[arg(long)]
    pub with_baseline: bool,
    /// Output directory for ablation.csv and runs.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = GRADCHECK_STEP)]
    pub h: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Metric JSON files written by `train` or `eval`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

/// Reads `key=value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("config line {}: expected key=value", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::Validation(format!("config line {}: invalid key `{}`", i + 1, k.trim())));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Splices config-file values in front of the command-line flags so that the
/// latter take precedence.
fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let given: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut merged: Vec<OsString> = args[..2.min(args.len())].to_vec();
    for (k, v) in parse_config_file(&text)? {
        let flag = format!("--{k}");
        if given.iter().any(|g| *g == flag || g.starts_with(&format!("{flag}="))) {
            continue;
        }
        merged.push(format!("{flag}={v}").into());
    }
    merged.extend(args.into_iter().skip(2));
    Ok(merged)
}

/// Parses and runs `args` (including the program name). Output goes to `out`,
/// diagnostics to `err`. Returns the process exit code.
pub fn run<I, T, W, E>(args: I, out: &mut W, err: &mut E) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
    W: std::io::Write,
    E: std::io::Write,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let result = expand_args(args).and_then(|args| match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => Ok(e.to_string()),
            _ => Err(CliError::Usage(e.to_string())),
        },
    });
    match result {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train(&a),
        Command::Negatives(a) => negatives(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Report(a) => report(&a),
    }
}

pub fn load_data(dir: &Path) -> Result<(Lexicon, Vec<VideoSample>), CliError> {
    let lexicon = Lexicon::load(dir.join("lexicon.tsv")).map_err(runtime)?;
    let mut samples = load_corpus(dir.join("train.tsv"), &lexicon).map_err(runtime)?;
    samples.extend(load_corpus(dir.join("eval.tsv"), &lexicon).map_err(runtime)?);
    Ok((lexicon, samples))
}

fn load_or_init(checkpoint: Option<&Path>, lexicon: &Lexicon, samples: &[VideoSample], seed: u64) -> Result<ToyMllm, CliError> {
    match checkpoint {
        Some(p) => ToyMllm::load(p).map_err(runtime),
        None => Ok(ToyMllm::new(model_config(lexicon, samples, seed, crate::losses::DEFAULT_TAU)?).map_err(runtime)?),
    }
}

fn gen(a: &GenArgs) -> Result<String, CliError> {
    let world = a.world.world();
    world.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let (lexicon, samples) = generate_world(a.common.seed, &world).map_err(runtime)?;
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    lexicon.save(a.out.join("lexicon.tsv")).map_err(runtime)?;
    save_corpus(a.out.join("train.tsv"), &split_of(&samples, Split::Train)).map_err(runtime)?;
    save_corpus(a.out.join("eval.tsv"), &split_of(&samples, Split::Eval)).map_err(runtime)?;
    Ok(format!(
        "wrote {} tokens, {} train and {} eval samples to {}\n",
        lexicon.len(),
        world.num_train,
        world.num_eval,
        a.out.display()
    ))
}

fn train(a: &TrainArgs) -> Result<String, CliError> {
    let cfg = a.optim.train_config(a.common.seed, a.ablation);
    cfg.validate()?;
    let (lexicon, samples) = load_data(&a.data)?;
    let model = ToyMllm::new(model_config(&lexicon, &samples, a.common.seed, cfg.tau)?).map_err(runtime)?;
    let train = split_of(&samples, Split::Train);
    let mut trainer = Trainer::new(model, cfg, &lexicon, &train)?;
    let log = trainer.run()?;
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    trainer.model.save(a.out.join("model.ckpt")).map_err(runtime)?;
    let file = std::fs::File::create(a.out.join("train_log.csv")).map_err(runtime)?;
    write_training_log(file, &log)?;
    let report = evaluate(&trainer.model, &lexicon, &samples)?;
    report
        .save(a.out.join("metrics.csv"), a.out.join("metrics.json"))
        .map_err(runtime)?;
    let mut s = String::new();
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        let _ = writeln!(s, "L_total {:.4} -> {:.4} over {} steps", first.l_total, last.l_total, log.len());
    }
    let _ = write!(s, "{report}");
    Ok(s)
}

fn negatives(a: &NegativesArgs) -> Result<String, CliError> {
    let (lexicon, samples) = load_data(&a.data)?;
    let model = load_or_init(a.checkpoint.as_deref(), &lexicon, &samples, a.common.seed)?;
    let mut s = String::new();
    for sample in samples.iter().filter(|x| x.split == Split::Train) {
        let omega = build_suppression_set(sample, &lexicon).map_err(runtime)?;
        let ch = generate_hallucinative(&model, sample, &omega, default_t_dec(sample)).map_err(runtime)?;
        let _ = writeln!(
            s,
            "{}\t{}\t{}",
            sample.sample_id,
            lexicon.render(&sample.caption),
            lexicon.render(&ch.tokens)
        );
    }
    match &a.out {
        Some(p) => {
            std::fs::write(p, &s).map_err(runtime)?;
            Ok(format!("wrote hallucinated captions to {}\n", p.display()))
        }
        None => Ok(s),
    }
}

fn eval(a: &EvalArgs) -> Result<String, CliError> {
    let (lexicon, samples) = load_data(&a.data)?;
    let model = load_or_init(a.checkpoint.as_deref(), &lexicon, &samples, a.common.seed)?;
    let report = evaluate(&model, &lexicon, &samples)?;
    if let Some(prefix) = &a.out {
        report
            .save(prefix.with_extension("csv"), prefix.with_extension("json"))
            .map_err(runtime)?;
    }
    Ok(report.to_string())
}

fn ablate(a: &AblateArgs) -> Result<String, CliError> {
    if a.seeds == 0 {
        return Err(CliError::Validation("--seeds must be at least 1".into()));
    }
    let world = a.world.world();
    world.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let mut rows = Vec::new();
    if a.with_baseline {
        rows.push(Ablation::Baseline);
    }
    rows.extend(Ablation::TABLE);
    let spec = ExperimentSpec {
        world: WorldSource::Generate(world),
        train: a.optim.train_config(a.common.seed, Ablation::Full),
        seeds: (a.common.seed..a.common.seed + a.seeds).collect(),
        rows,
    };
    let result = run_experiment(&spec)?;
    let mut table = Vec::new();
    result.write_table(&mut table)?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(runtime)?;
        std::fs::write(dir.join("ablation.csv"), &table).map_err(runtime)?;
        std::fs::write(dir.join("runs.json"), serde_json::to_string(&result).map_err(runtime)?).map_err(runtime)?;
    }
    Ok(String::from_utf8(table).expect("csv output is utf-8"))
}

fn gradcheck(a: &GradcheckArgs) -> Result<String, CliError> {
    if !(1e-6..=1e-3).contains(&a.h) {
        return Err(CliError::Validation(format!("--h {} outside [1e-6, 1e-3]", a.h)));
    }
    let checks = gradcheck_losses(a.common.seed, a.h)?;
    let mut s = String::new();
    let mut worst: f64 = 0.0;
    for (which, r) in &checks {
        let _ = writeln!(s, "{which:<8} max relative error {:.3e} over {} coordinates", r.max_rel_error, r.coordinates);
        worst = worst.max(r.max_rel_error);
    }
    let _ = writeln!(s, "max relative error {worst:.3e}");
    if worst <= GRADCHECK_TOLERANCE {
        Ok(s)
    } else {
        Err(CliError::Validation(format!("{s}gradient check failed (tolerance {GRADCHECK_TOLERANCE:e})")))
    }
}

fn report(a: &ReportArgs) -> Result<String, CliError> {
    let mut s = format!("{:<24}", "report");
    for v in [Variant::Weighted, Variant::Exact] {
        for c in [Category::Object, Category::Action] {
            let _ = write!(s, " {:>12}", format!("{v}_f1_{}", &c.to_string()[..3]));
        }
    }
    let _ = writeln!(s, " {:>8}", "gap");
    for path in &a.reports {
        let r = MetricReport::load_json(path).map_err(runtime)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = write!(s, "{name:<24}");
        for v in [Variant::Weighted, Variant::Exact] {
            for c in [Category::Object, Category::Action] {
                let _ = write!(s, " {:>12.4}", r.get(v, c).f1);
            }
        }
        let gap = r.alignment_gap.map(|g| format!("{g:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, " {gap:>8}");
    }
    Ok(s)
}
