use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualrec::checkpoint::{Checkpoint, CheckpointError};
use dualrec::fusion::predict_batch;
use dualrec::harness::{
    derive_seed, evaluate_model, fold_split_spec, fuse_branches, gen_synthetic, ingest_reviews,
    prepare_store, pretrain_mf_branch, pretrain_mlp_branch, run_experiment, run_sweep, split_fold,
    write_reviews_jsonl, write_sweep_csv, ConfigError, EvalConfig, ExperimentConfig, HarnessError,
    SyntheticSpec,
};
use dualrec::ingest::{InteractionStore, StoreError};
use dualrec::metrics::{EvalReport, MetricError, NdcgGain};
use dualrec::reliability::{score_store, write_breakdown_csv, ReliabilityError};
use dualrec::train::{TrainError, TrainLog};
use thiserror::Error;

#[derive(Parser, Debug)]
#[command(
    name = "dualrec",
    version,
    about = "Review-aware dual-embedding recommender pipeline"
)]
struct Cli {
    /// Root of every random stream; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads, 0 for one per core; overrides the config's `threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log warnings and errors only.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse line-delimited review JSON, score reliability and write a store.
    Ingest(IngestArgs),
    /// Write the per-review reliability breakdown of a store as CSV.
    Reliability(ReliabilityArgs),
    /// Pre-train the matrix-factorization branch and write a checkpoint.
    PretrainMf(PretrainArgs),
    /// Pre-train the MLP branch and write a checkpoint.
    PretrainMlp(PretrainArgs),
    /// Cross-validated pretrain → fuse → evaluate run, or fusion of two
    /// pre-trained checkpoints with --mf and --mlp.
    Train(TrainArgs),
    /// Score a fused checkpoint against the ratings of a store.
    Evaluate(EvaluateArgs),
    /// Predict ratings for (user_key, product_key) pairs.
    Predict(PredictArgs),
    /// Generate a synthetic low-rank store.
    Synth(SynthArgs),
    /// Repeat the experiment over training sizes and factor counts.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct ReliabilityFlags {
    /// Weight of the top-ranking score in the readership score.
    #[arg(long)]
    alpha: Option<f64>,

    /// Minimum reliability for the "reliable" label.
    #[arg(long)]
    threshold: Option<f64>,

    /// Normalize helpful votes by the product's largest helpful count
    /// instead of each review's total votes.
    #[arg(long)]
    fallback_helpful_max: bool,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Review file, one JSON object per line.
    #[arg(long)]
    input: PathBuf,

    /// Store file to write.
    #[arg(long)]
    out: PathBuf,

    /// Drop reviews with fewer total votes.
    #[arg(long, default_value_t = 0)]
    min_votes: u32,

    #[command(flatten)]
    reliability: ReliabilityFlags,
}

#[derive(Args, Debug)]
struct ReliabilityArgs {
    #[arg(long)]
    store: PathBuf,

    /// CSV output, `-` for standard output.
    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    reliability: ReliabilityFlags,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Training store.
    #[arg(long)]
    store: PathBuf,

    /// Validation store for early stopping.
    #[arg(long)]
    val: Option<PathBuf>,

    /// Experiment config supplying hyperparameters; defaults apply without one.
    #[arg(long, env = "DUALREC_CONFIG")]
    config: Option<PathBuf>,

    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,

    /// Latent dimension K; resets the tower to its default shape.
    #[arg(long)]
    k: Option<usize>,

    /// Epoch budget for every phase.
    #[arg(long)]
    epochs: Option<usize>,

    /// Per-epoch timing CSV.
    #[arg(long)]
    timings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment config.
    #[arg(long, env = "DUALREC_CONFIG")]
    config: Option<PathBuf>,

    /// Pre-trained MF checkpoint (requires --mlp, --store and --out).
    #[arg(long, requires_all = ["mlp", "store", "out"])]
    mf: Option<PathBuf>,

    /// Pre-trained MLP checkpoint.
    #[arg(long, requires = "mf")]
    mlp: Option<PathBuf>,

    /// Training store for checkpoint fusion.
    #[arg(long)]
    store: Option<PathBuf>,

    /// Validation store for checkpoint fusion.
    #[arg(long)]
    val: Option<PathBuf>,

    /// Fused checkpoint to write (checkpoint fusion only).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Fold and mean report CSV, `-` for standard output.
    #[arg(long, default_value = "-")]
    report: PathBuf,

    /// Mean report as `key = value` lines.
    #[arg(long)]
    report_kv: Option<PathBuf>,

    /// Per-epoch timing CSV.
    #[arg(long)]
    timings: Option<PathBuf>,

    /// Directory for `fold<k>.ckpt` and `fold<k>-test.json` per fold.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Csv,
    Kv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Gain {
    TrueRating,
    PredictedRating,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Fused checkpoint.
    #[arg(long)]
    model: PathBuf,

    /// Store whose ratings are the test set.
    #[arg(long)]
    store: PathBuf,

    #[arg(long, value_enum, default_value = "csv")]
    format: ReportFormat,

    /// Top-t cutoffs for F1@t.
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    cutoffs: Vec<usize>,

    /// NDCG gain source.
    #[arg(long, value_enum, default_value = "true-rating")]
    ndcg_gain: Gain,

    /// Output, `-` for standard output.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Fused checkpoint.
    #[arg(long)]
    model: PathBuf,

    /// Store whose key maps the model was trained with.
    #[arg(long)]
    store: PathBuf,

    /// CSV of `user_key,product_key` rows without a header, `-` for
    /// standard input.
    #[arg(long)]
    pairs: PathBuf,

    /// Output CSV, `-` for standard output.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    users: usize,

    #[arg(long, default_value_t = 40)]
    products: usize,

    /// Rank of the generating factors.
    #[arg(long, default_value_t = 2)]
    rank: usize,

    /// Probability that a pair is observed.
    #[arg(long, default_value_t = 0.3)]
    density: f64,

    /// Noise on the normalized rating and on reliability.
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,

    /// Standard deviation of the generating logits.
    #[arg(long, default_value_t = 2.0)]
    signal_std: f64,

    /// Keep fractional ratings instead of rounding to whole stars.
    #[arg(long)]
    no_quantize: bool,

    /// Store file to write.
    #[arg(long)]
    out: PathBuf,

    /// Also write the data as review JSON lines.
    #[arg(long)]
    reviews: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, env = "DUALREC_CONFIG")]
    config: PathBuf,

    /// Training percentages; overrides the config.
    #[arg(long, value_delimiter = ',')]
    train_sizes: Option<Vec<u32>>,

    /// Factor counts K; overrides the config.
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<usize>>,

    /// Output CSV, `-` for standard output.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("reliability: {0}")]
    Reliability(#[from] ReliabilityError),
    #[error("metrics: {0}")]
    Metric(#[from] MetricError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Input(String),
}

impl CliError {
    /// Stable category printed in the error line.
    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Harness(
                HarnessError::ConfigFile(_) | HarnessError::Config(_) | HarnessError::Split(_),
            ) => "config",
            CliError::Harness(HarnessError::Train(_)) | CliError::Train(_) => "training",
            CliError::Harness(HarnessError::Io(_)) | CliError::Io(_) => "io",
            CliError::Checkpoint(_) => "model",
            CliError::Input(_) => "input",
            _ => "data",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let global = Global {
        seed: cli.seed,
        threads: cli.threads,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&global, a),
        Command::Reliability(a) => reliability(a),
        Command::PretrainMf(a) => pretrain(&global, a, Branch::Mf),
        Command::PretrainMlp(a) => pretrain(&global, a, Branch::Mlp),
        Command::Train(a) => train(&global, a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Synth(a) => synth(&global, a),
        Command::Sweep(a) => sweep(&global, a),
    }
}

struct Global {
    seed: Option<u64>,
    threads: Option<usize>,
}

impl Global {
    /// Loads `path` (or the defaults) and applies the global overrides.
    fn config(&self, path: Option<&Path>) -> Result<ExperimentConfig> {
        let mut cfg = match path {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if cfg.threads > 0 {
            // Fails only if a pool already exists, which cannot happen here.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build_global();
        }
        Ok(cfg)
    }
}

fn output(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        Ok(Box::new(BufWriter::new(File::create(path)?)))
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CliError::Input(format!("input not found: {}", path.display())),
        _ => e.into(),
    })
}

fn load_store(path: &Path) -> Result<InteractionStore> {
    open(path)?;
    Ok(InteractionStore::load(path)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    open(path)?;
    Ok(Checkpoint::load(path)?)
}

fn apply_reliability_flags(cfg: &mut ExperimentConfig, flags: &ReliabilityFlags) {
    if let Some(a) = flags.alpha {
        cfg.reliability.alpha = a;
    }
    if let Some(t) = flags.threshold {
        cfg.reliability.threshold = t;
    }
    cfg.reliability.fallback_helpful_max |= flags.fallback_helpful_max;
}

fn ingest(global: &Global, a: IngestArgs) -> Result<()> {
    let mut cfg = global.config(None)?;
    cfg.reliability.min_votes = a.min_votes;
    apply_reliability_flags(&mut cfg, &a.reliability);
    let file = open(&a.input)?;
    let (store, skipped) = ingest_reviews(BufReader::new(file), &cfg)?;
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed lines");
    }
    log::info!(
        "{} users, {} products, {} ratings",
        store.n_users(),
        store.n_products(),
        store.ratings().len()
    );
    store.save(&a.out)?;
    Ok(())
}

fn reliability(a: ReliabilityArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    apply_reliability_flags(&mut cfg, &a.reliability);
    let store = load_store(&a.store)?;
    let scored = score_store(&store, &cfg.reliability.to_config())?;
    write_breakdown_csv(output(&a.out)?, &store, &scored)?;
    Ok(())
}

#[derive(Clone, Copy)]
enum Branch {
    Mf,
    Mlp,
}

fn pretrain(global: &Global, a: PretrainArgs, branch: Branch) -> Result<()> {
    let mut cfg = global.config(a.config.as_deref())?;
    if let Some(k) = a.k {
        cfg.model.k = k;
        cfg.model.tower.clear();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let store = load_store(&a.store)?;
    let val = a.val.as_deref().map(load_store).transpose()?;
    let (checkpoint, logs) = match branch {
        Branch::Mf => {
            let (p, logs) = pretrain_mf_branch(&cfg, &store, val.as_ref(), cfg.seed)?;
            (Checkpoint::Mf(p), logs)
        }
        Branch::Mlp => {
            let (p, log) = pretrain_mlp_branch(&cfg, &store, val.as_ref(), cfg.seed)?;
            (Checkpoint::Mlp(p), vec![log])
        }
    };
    report_logs(&logs);
    checkpoint.save(&a.out)?;
    if let Some(path) = &a.timings {
        write_timings(path, &logs)?;
    }
    Ok(())
}

fn report_logs(logs: &[TrainLog]) {
    for log in logs {
        if let Some(last) = log.epochs.last() {
            log::info!(
                "{}: {} epochs, kept {}, train MAE {:.4}{}",
                log.phase,
                log.epochs.len(),
                log.kept_epoch,
                last.train_mae,
                last.val_mae
                    .map(|v| format!(", val MAE {v:.4}"))
                    .unwrap_or_default()
            );
        }
    }
}

fn write_timings(path: &Path, logs: &[TrainLog]) -> Result<()> {
    let mut out = csv::Writer::from_writer(output(path)?);
    out.write_record(["phase", "epoch", "secs", "loss", "train_mae", "val_mae"])?;
    for log in logs {
        for e in &log.epochs {
            out.write_record([
                log.phase.clone(),
                e.epoch.to_string(),
                e.secs.to_string(),
                e.loss.to_string(),
                e.train_mae.to_string(),
                e.val_mae.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        let total = log.total_secs.to_string();
        out.write_record([log.phase.as_str(), "total", total.as_str(), "", "", ""])?;
    }
    out.flush()?;
    Ok(())
}

fn train(global: &Global, a: TrainArgs) -> Result<()> {
    let config = a
        .config
        .as_deref()
        .ok_or_else(|| CliError::Input("train needs --config (or DUALREC_CONFIG)".into()));
    if let (Some(mf), Some(mlp)) = (&a.mf, &a.mlp) {
        let cfg = global.config(config.ok())?;
        return fuse_checkpoints(&cfg, &a, mf, mlp);
    }
    let cfg = global.config(Some(config?))?;
    let store = prepare_store(&cfg)?;
    let result = run_experiment(&cfg, &store)?;
    result.write_reports(output(&a.report)?)?;
    if let Some(path) = &a.report_kv {
        output(path)?.write_all(result.mean.to_key_value().as_bytes())?;
    }
    if let Some(path) = &a.timings {
        result.write_timings(output(path)?)?;
    }
    for f in &result.folds {
        log::info!(
            "fold {}: RMSE {:.4}, MAE {:.4}, {:.2}s",
            f.fold,
            f.report.rmse,
            f.report.mae,
            f.secs
        );
    }
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        for f in &result.folds {
            Checkpoint::Fusion(f.model.clone()).save(&dir.join(format!("fold{}.ckpt", f.fold)))?;
            let parts = split_fold(&store, &fold_split_spec(&cfg), f.fold)?;
            parts
                .test
                .save(&dir.join(format!("fold{}-test.json", f.fold)))?;
        }
    }
    if !result.failures.is_empty() {
        return Err(CliError::Input(format!(
            "{} of {} folds failed",
            result.failures.len(),
            cfg.split.folds
        )));
    }
    Ok(())
}

fn fuse_checkpoints(cfg: &ExperimentConfig, a: &TrainArgs, mf: &Path, mlp: &Path) -> Result<()> {
    let mf = load_checkpoint(mf)?.into_mf()?;
    let mlp = load_checkpoint(mlp)?.into_mlp()?;
    let store_path = a
        .store
        .as_deref()
        .ok_or_else(|| CliError::Input("--store is required".into()))?;
    let out = a
        .out
        .as_deref()
        .ok_or_else(|| CliError::Input("--out is required".into()))?;
    let store = load_store(store_path)?;
    let val = a.val.as_deref().map(load_store).transpose()?;
    let (fused, log) = fuse_branches(cfg, mf, mlp, &store, val.as_ref(), cfg.seed)?;
    report_logs(std::slice::from_ref(&log));
    Checkpoint::Fusion(fused).save(out)?;
    if let Some(path) = &a.timings {
        write_timings(path, &[log])?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?.into_fusion()?;
    let store = load_store(&a.store)?;
    if (model.n_users(), model.n_products()) != (store.n_users(), store.n_products()) {
        log::warn!(
            "model covers {}×{} but the store is {}×{}",
            model.n_users(),
            model.n_products(),
            store.n_users(),
            store.n_products()
        );
    }
    let eval = EvalConfig {
        cutoffs: a.cutoffs,
        ndcg_gain: match a.ndcg_gain {
            Gain::TrueRating => NdcgGain::TrueRating,
            Gain::PredictedRating => NdcgGain::PredictedRating,
        },
    };
    let report = evaluate_model(&model, &store, &eval)?;
    let mut out = output(&a.out)?;
    match a.format {
        ReportFormat::Csv => EvalReport::write_csv(&[("model".to_owned(), report)], &mut out)?,
        ReportFormat::Kv => out.write_all(report.to_key_value().as_bytes())?,
    }
    out.flush()?;
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?.into_fusion()?;
    let store = load_store(&a.store)?;
    let reader: Box<dyn io::Read> = if a.pairs == Path::new("-") {
        Box::new(io::stdin().lock())
    } else {
        Box::new(open(&a.pairs)?)
    };
    let mut rows = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut keys = Vec::new();
    let mut pairs = Vec::new();
    let mut unknown = 0usize;
    for (line, rec) in rows.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(CliError::Input(format!(
                "pairs line {}: expected user_key,product_key",
                line + 1
            )));
        }
        let (u, p) = (rec[0].to_owned(), rec[1].to_owned());
        // Unknown keys map past the model's range and get the fallback.
        let i = store.users().get(&u).unwrap_or(usize::MAX);
        let j = store.products().get(&p).unwrap_or(usize::MAX);
        unknown += usize::from(i == usize::MAX || j == usize::MAX);
        pairs.push((i, j));
        keys.push((u, p));
    }
    if unknown > 0 {
        log::warn!("{unknown} pairs name unknown users or products; they get the fallback rating");
    }
    let preds = predict_batch(&model, &pairs);
    let mut out = csv::Writer::from_writer(output(&a.out)?);
    out.write_record(["user", "product", "prediction"])?;
    for ((u, p), r) in keys.iter().zip(preds) {
        out.write_record([u.as_str(), p.as_str(), &r.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

fn synth(global: &Global, a: SynthArgs) -> Result<()> {
    let seed = global.seed.unwrap_or(0);
    let spec = SyntheticSpec {
        n_users: a.users,
        n_products: a.products,
        true_rank: a.rank,
        density: a.density,
        noise_std: a.noise_std,
        signal_std: a.signal_std,
        quantize: !a.no_quantize,
        seed: derive_seed(seed, "synthetic", 0),
    };
    let data = gen_synthetic(&spec)?;
    log::info!("{} ratings", data.store.ratings().len());
    data.store.save(&a.out)?;
    if let Some(path) = &a.reviews {
        let mut w = output(path)?;
        write_reviews_jsonl(&data.store, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn sweep(global: &Global, a: SweepArgs) -> Result<()> {
    let mut cfg = global.config(Some(&a.config))?;
    if let Some(sizes) = a.train_sizes {
        cfg.sweep.train_sizes = sizes;
    }
    if let Some(f) = a.factors {
        cfg.sweep.factors = f;
    }
    let store = prepare_store(&cfg)?;
    let rows = run_sweep(&cfg, &store)?;
    write_sweep_csv(&rows, output(&a.out)?)?;
    Ok(())
}
