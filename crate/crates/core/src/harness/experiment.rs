use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig};
use super::split::{split_fold, SplitSpec};
use super::synthetic::gen_synthetic;
use crate::fusion::{init_fusion, predict_batch, random_fusion, train_fusion, FusionModel};
use crate::ingest::{
    build_store, parse_reviews, IngestError, InteractionStore, ParseOptions, StoreError, MAX_RATING,
};
use crate::metrics::{evaluate_rows, EvalReport, MetricError};
use crate::mf::{pretrain_mf, MfParams};
use crate::mlp::{pretrain_mlp, MlpParams};
use crate::reliability::{reliability_map, score_store, ReliabilityError};
use crate::train::{TrainError, TrainLog};

use super::config::EvalConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("split: {0}")]
    Split(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("metrics: {0}")]
    Metric(#[from] MetricError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("reliability: {0}")]
    Reliability(#[from] ReliabilityError),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic sub-seed for a labelled stream (SplitMix64 finalizer over
/// the root, an FNV-1a hash of the label, and an index).
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = root ^ h ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Parses reviews, builds the store and attaches reliability scores.
pub fn ingest_reviews(
    reader: impl BufRead,
    cfg: &ExperimentConfig,
) -> Result<(InteractionStore, usize), HarnessError> {
    let log = parse_reviews(
        reader,
        &ParseOptions {
            min_votes: cfg.reliability.min_votes,
        },
    )?;
    let mut store = build_store(&log, None)?;
    let scored = score_store(&store, &cfg.reliability.to_config())?;
    store.set_reliability(reliability_map(&scored))?;
    Ok((store, log.skipped.len()))
}

/// Loads or generates the interactions named by `cfg.data`.
pub fn prepare_store(cfg: &ExperimentConfig) -> Result<InteractionStore, HarnessError> {
    let d = &cfg.data;
    if let Some(path) = &d.store {
        return Ok(InteractionStore::load(path)?);
    }
    if let Some(path) = &d.reviews {
        let file = open(path)?;
        return Ok(ingest_reviews(std::io::BufReader::new(file), cfg)?.0);
    }
    if let Some(spec) = &d.synthetic {
        let mut spec = *spec;
        spec.seed = derive_seed(cfg.seed, "synthetic", 0);
        return Ok(gen_synthetic(&spec)?.store);
    }
    Err(HarnessError::Config("no data source configured".into()))
}

fn open(path: &Path) -> Result<std::fs::File, HarnessError> {
    std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            HarnessError::Config(format!("input not found: {}", path.display()))
        } else {
            e.into()
        }
    })
}

/// Models produced by one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineModels {
    pub mf: Option<MfParams>,
    pub mlp: Option<MlpParams>,
    pub fused: FusionModel,
    pub logs: Vec<TrainLog>,
}

/// MF pre-training (factor phases, then the head) with the config's
/// hyperparameters.
pub fn pretrain_mf_branch(
    cfg: &ExperimentConfig,
    train: &InteractionStore,
    val: Option<&InteractionStore>,
    seed: u64,
) -> Result<(MfParams, Vec<TrainLog>), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mf-init", 0));
    Ok(pretrain_mf(
        train,
        val,
        &cfg.mf_hyper(derive_seed(seed, "mf", 0)),
        &mut rng,
    )?)
}

pub fn pretrain_mlp_branch(
    cfg: &ExperimentConfig,
    train: &InteractionStore,
    val: Option<&InteractionStore>,
    seed: u64,
) -> Result<(MlpParams, TrainLog), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mlp-init", 0));
    Ok(pretrain_mlp(
        train,
        val,
        &cfg.mlp_hyper(derive_seed(seed, "mlp", 0)),
        &mut rng,
    )?)
}

/// Block-initializes the fused model from two pre-trained branches and
/// fine-tunes it.
pub fn fuse_branches(
    cfg: &ExperimentConfig,
    mf: MfParams,
    mlp: MlpParams,
    train: &InteractionStore,
    val: Option<&InteractionStore>,
    seed: u64,
) -> Result<(FusionModel, TrainLog), HarnessError> {
    let mut fused = init_fusion(mf, mlp, cfg.model.gamma)?;
    let log = train_fusion(
        &mut fused,
        train,
        val,
        &cfg.fusion_hyper(derive_seed(seed, "fusion", 0)),
    )?;
    Ok((fused, log))
}

/// Pre-trains both branches (unless disabled), fuses them and fine-tunes.
pub fn train_pipeline(
    cfg: &ExperimentConfig,
    train: &InteractionStore,
    val: Option<&InteractionStore>,
    seed: u64,
) -> Result<PipelineModels, HarnessError> {
    if cfg.model.pretrain {
        let (mf, mut logs) = pretrain_mf_branch(cfg, train, val, seed)?;
        let (mlp, mlp_log) = pretrain_mlp_branch(cfg, train, val, seed)?;
        logs.push(mlp_log);
        let (fused, log) = fuse_branches(cfg, mf.clone(), mlp.clone(), train, val, seed)?;
        logs.push(log);
        return Ok(PipelineModels {
            mf: Some(mf),
            mlp: Some(mlp),
            fused,
            logs,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fusion-init", 0));
    let mean = train.global_mean_raw().ok_or(TrainError::Empty("fusion"))?;
    let mut fused = random_fusion(
        train.n_users(),
        train.n_products(),
        cfg.model.k,
        &cfg.model.widths(),
        cfg.model.gamma,
        cfg.model.no_pretrain_init_std,
        mean / MAX_RATING as f64,
        &mut rng,
    )?;
    let log = train_fusion(
        &mut fused,
        train,
        val,
        &cfg.fusion_hyper(derive_seed(seed, "fusion", 0)),
    )?;
    Ok(PipelineModels {
        mf: None,
        mlp: None,
        fused,
        logs: vec![log],
    })
}

/// Reported (clamped) predictions of `model` on every rated pair of `test`.
pub fn evaluate_model(
    model: &FusionModel,
    test: &InteractionStore,
    eval: &EvalConfig,
) -> Result<EvalReport, HarnessError> {
    let pairs: Vec<(usize, usize)> = test.omega().collect();
    let preds = predict_batch(model, &pairs);
    let rows: Vec<(usize, usize, f64, f64)> = pairs
        .iter()
        .zip(preds)
        .map(|(&(i, j), p)| (i, j, p, test.raw_rating(i, j).expect("rated pair")))
        .collect();
    Ok(evaluate_rows(&rows, &eval.cutoffs, eval.ndcg_gain)?)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub report: EvalReport,
    pub logs: Vec<TrainLog>,
    pub secs: f64,
    pub model: FusionModel,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub folds: Vec<FoldResult>,
    /// Folds that failed, with their error.
    pub failures: Vec<(usize, String)>,
    pub mean: EvalReport,
}

/// The split spec every fold of `cfg` uses; its seed derives from the root.
pub fn fold_split_spec(cfg: &ExperimentConfig) -> SplitSpec {
    SplitSpec {
        seed: derive_seed(cfg.seed, "split", 0),
        ..cfg.split
    }
}

pub fn run_fold(
    cfg: &ExperimentConfig,
    store: &InteractionStore,
    fold: usize,
) -> Result<FoldResult, HarnessError> {
    let start = Instant::now();
    let parts = split_fold(store, &fold_split_spec(cfg), fold)?;
    let models = train_pipeline(
        cfg,
        &parts.train,
        Some(&parts.val),
        derive_seed(cfg.seed, "fold", fold as u64),
    )?;
    let report = evaluate_model(&models.fused, &parts.test, &cfg.eval)?;
    Ok(FoldResult {
        fold,
        report,
        logs: models.logs,
        secs: start.elapsed().as_secs_f64(),
        model: models.fused,
    })
}

/// Every fold (in parallel), then the mean of the successful folds' reports.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    store: &InteractionStore,
) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let outcomes: Vec<Result<FoldResult, HarnessError>> = (0..cfg.split.folds)
        .into_par_iter()
        .map(|f| run_fold(cfg, store, f))
        .collect();
    let mut folds = Vec::new();
    let mut failures = Vec::new();
    let mut first_err = None;
    for (f, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => folds.push(r),
            Err(e) => {
                log::error!("fold {f} failed: {e}");
                failures.push((f, e.to_string()));
                first_err.get_or_insert(e);
            }
        }
    }
    let reports: Vec<EvalReport> = folds.iter().map(|f| f.report.clone()).collect();
    match EvalReport::mean(&reports) {
        Some(mean) => Ok(ExperimentResult {
            folds,
            failures,
            mean,
        }),
        None => Err(first_err.unwrap_or_else(|| HarnessError::Config("no folds ran".into()))),
    }
}

impl ExperimentResult {
    /// One CSV row per fold plus the mean.
    pub fn write_reports<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut rows: Vec<(String, EvalReport)> = self
            .folds
            .iter()
            .map(|f| (format!("fold{}", f.fold), f.report.clone()))
            .collect();
        rows.push(("mean".into(), self.mean.clone()));
        EvalReport::write_csv(&rows, w)
    }

    /// `fold,phase,epoch,secs,loss,train_mae,val_mae` rows plus one
    /// `total` row per phase.
    pub fn write_timings<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "fold",
            "phase",
            "epoch",
            "secs",
            "loss",
            "train_mae",
            "val_mae",
        ])?;
        for f in &self.folds {
            write_log_rows(&mut out, &f.fold.to_string(), &f.logs)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn write_log_rows<W: Write>(
    out: &mut csv::Writer<W>,
    fold: &str,
    logs: &[TrainLog],
) -> csv::Result<()> {
    for log in logs {
        for e in &log.epochs {
            out.write_record([
                fold.to_owned(),
                log.phase.clone(),
                e.epoch.to_string(),
                e.secs.to_string(),
                e.loss.to_string(),
                e.train_mae.to_string(),
                e.val_mae.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        out.write_record([
            fold.to_owned(),
            log.phase.clone(),
            "total".to_owned(),
            log.total_secs.to_string(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub train_percent: u32,
    pub k: usize,
    pub result: ExperimentResult,
}

/// `train_percent,k,` followed by the mean report's columns, one row per
/// grid point.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (idx, row) in rows.iter().enumerate() {
        let fields = row.result.mean.fields();
        if idx == 0 {
            let mut header = vec!["train_percent".to_owned(), "k".to_owned()];
            header.extend(fields.iter().map(|f| f.0.clone()));
            out.write_record(&header)?;
        }
        let mut record = vec![row.train_percent.to_string(), row.k.to_string()];
        record.extend(fields.into_iter().map(|f| f.1));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}

/// Runs the experiment for every training size and factor count in
/// `cfg.sweep`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    store: &InteractionStore,
) -> Result<Vec<SweepRow>, HarnessError> {
    let factors = if cfg.sweep.factors.is_empty() {
        vec![cfg.model.k]
    } else {
        cfg.sweep.factors.clone()
    };
    let mut rows = Vec::new();
    for &x in &cfg.sweep.train_sizes {
        if !(1..100).contains(&x) {
            return Err(HarnessError::Config(format!(
                "sweep train size {x} outside 1..100"
            )));
        }
        for &k in &factors {
            let mut c = cfg.clone();
            c.split = SplitSpec::sweep(x, cfg.split.folds, cfg.split.seed);
            if k != cfg.model.k {
                c.model.k = k;
                c.model.tower = Vec::new();
            }
            log::info!("sweep: train {x}%, K = {k}");
            rows.push(SweepRow {
                train_percent: x,
                k,
                result: run_experiment(&c, store)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SyntheticSpec;

    fn small_cfg(folds: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 11;
        cfg.data.synthetic = Some(SyntheticSpec {
            n_users: 30,
            n_products: 20,
            ..Default::default()
        });
        cfg.split.folds = folds;
        cfg.model.k = 4;
        cfg.model.mlp_init_std = 0.1;
        cfg.train.epochs = 3;
        cfg.train.batch_size = 32;
        cfg.train.lr = 0.005;
        cfg
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_eq!(derive_seed(9, "fold", 3), derive_seed(9, "fold", 3));
    }

    #[test]
    fn single_fold_mean_equals_fold() {
        let cfg = small_cfg(1);
        let store = prepare_store(&cfg).unwrap();
        let r = run_experiment(&cfg, &store).unwrap();
        assert_eq!(r.folds.len(), 1);
        assert_eq!(r.mean, r.folds[0].report);
    }

    #[test]
    fn repeated_runs_agree_and_mean_is_arithmetic() {
        let cfg = small_cfg(3);
        let store = prepare_store(&cfg).unwrap();
        let a = run_experiment(&cfg, &store).unwrap();
        let b = run_experiment(&cfg, &store).unwrap();
        assert_eq!(a.mean, b.mean);
        let m = a.folds.iter().map(|f| f.report.mae).sum::<f64>() / 3.0;
        assert!((a.mean.mae - m).abs() < 1e-12);
        let mut buf = Vec::new();
        a.write_reports(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn without_pretraining_runs() {
        let mut cfg = small_cfg(1);
        cfg.model.pretrain = false;
        let store = prepare_store(&cfg).unwrap();
        let r = run_experiment(&cfg, &store).unwrap();
        assert!(r.mean.mae.is_finite());
        assert_eq!(r.folds[0].logs.len(), 1);
    }

    #[test]
    fn sweep_covers_grid() {
        let mut cfg = small_cfg(1);
        cfg.sweep.train_sizes = vec![50, 70];
        cfg.sweep.factors = vec![2, 4];
        let store = prepare_store(&cfg).unwrap();
        let rows = run_sweep(&cfg, &store).unwrap();
        let grid: Vec<(u32, usize)> = rows.iter().map(|r| (r.train_percent, r.k)).collect();
        assert_eq!(grid, vec![(50, 2), (50, 4), (70, 2), (70, 4)]);
    }
}
