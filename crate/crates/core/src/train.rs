//! Mini-batch Adam loop shared by the MF, MLP and fused trainers.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{adam_step, AdamState, LinalgError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{phase}: loss became {loss} at epoch {epoch}, batch {batch}")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("{0}: no training data")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A model whose parameters are a fixed list of named `f64` blocks. The
/// same type doubles as its own gradient container.
pub trait ParamSet: Clone {
    fn block_names(&self) -> Vec<String>;
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn fill_zero(&mut self) {
        for b in self.blocks_mut() {
            b.fill(0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&flat[offset..offset + b.len()]);
            offset += b.len();
        }
        assert_eq!(offset, flat.len(), "flat vector length mismatch");
    }
}

/// Adam state per trainable block; frozen blocks carry no state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    states: Vec<Option<AdamState>>,
}

impl Optimizer {
    pub fn new<P: ParamSet>(params: &P, lr: f64, trainable: impl Fn(&str) -> bool) -> Self {
        let states = params
            .block_names()
            .iter()
            .zip(params.blocks())
            .map(|(name, b)| trainable(name).then(|| AdamState::new(b.len(), lr)))
            .collect();
        Self { states }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<(), LinalgError> {
        let gb = grads.blocks();
        for ((p, g), st) in params
            .blocks_mut()
            .into_iter()
            .zip(gb)
            .zip(&mut self.states)
        {
            if let Some(st) = st {
                adam_step(p, g, st)?;
            }
        }
        Ok(())
    }
}

/// Optimization budget for one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 512,
            lr: AdamState::DEFAULT_LR,
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of batch losses over the epoch.
    pub loss: f64,
    /// Training MAE (raw scale) after the epoch.
    pub train_mae: f64,
    pub val_mae: Option<f64>,
    /// Wall-clock of the optimization pass, excluding metric evaluation.
    pub secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub phase: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based; 0 = initial parameters).
    pub kept_epoch: usize,
    pub stopped_early: bool,
    pub total_secs: f64,
}

/// Callbacks describing one training phase.
pub struct Phase<'a, P, O> {
    pub name: &'static str,
    pub observations: &'a [O],
    /// Adds the batch gradient into `grads` and returns the batch loss.
    pub batch_grad: &'a mut dyn FnMut(&P, &[O], &mut P) -> f64,
    /// Training MAE on the raw scale.
    pub train_mae: &'a mut dyn FnMut(&P) -> f64,
    pub val_mae: Option<&'a mut dyn FnMut(&P) -> f64>,
    pub trainable: &'a dyn Fn(&str) -> bool,
}

fn phase_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the phase name keeps phases on distinct streams.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

/// Runs mini-batch Adam for up to `settings.epochs` epochs.
///
/// With a validation callback and non-zero patience, training stops after
/// `patience` epochs without improvement and the best parameters are
/// restored.
pub fn run_phase<P: ParamSet, O: Copy>(
    params: &mut P,
    settings: &TrainSettings,
    phase: Phase<'_, P, O>,
) -> Result<TrainLog, TrainError> {
    let Phase {
        name,
        observations,
        batch_grad,
        train_mae,
        mut val_mae,
        trainable,
    } = phase;
    let mut log = TrainLog {
        phase: name.to_owned(),
        ..Default::default()
    };
    if settings.epochs == 0 {
        return Ok(log);
    }
    if observations.is_empty() {
        return Err(TrainError::Empty(name));
    }
    if settings.batch_size == 0 {
        return Err(TrainError::Invalid("batch_size must be positive".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(settings.seed, name));
    let mut opt = Optimizer::new(params, settings.lr, trainable);
    let mut grads = params.zeroed();
    let mut order: Vec<usize> = (0..observations.len()).collect();
    let mut batch: Vec<O> = Vec::with_capacity(settings.batch_size);

    let mut best: Option<(f64, P, usize)> = None;
    let mut since_best = 0;
    if let Some(val) = val_mae.as_mut() {
        best = Some((val(params), params.clone(), 0));
    }

    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let t0 = Instant::now();
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(settings.batch_size).enumerate() {
            grads.fill_zero();
            batch.clear();
            batch.extend(chunk.iter().map(|&i| observations[i]));
            let loss = batch_grad(params, &batch, &mut grads);
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    phase: name,
                    epoch,
                    batch: b,
                    loss,
                });
            }
            epoch_loss += loss;
            opt.step(params, &grads)?;
        }
        let secs = t0.elapsed().as_secs_f64();
        let tr = train_mae(params);
        if !tr.is_finite() {
            return Err(TrainError::Diverged {
                phase: name,
                epoch,
                batch: usize::MAX,
                loss: tr,
            });
        }
        let val = val_mae.as_mut().map(|f| f(params));
        log::debug!("{name} epoch {epoch}: loss {epoch_loss:.6} train MAE {tr:.4} val MAE {val:?}");
        log.epochs.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            train_mae: tr,
            val_mae: val,
            secs,
        });
        log.kept_epoch = epoch;

        if let (Some(v), Some((best_v, best_p, best_e))) = (val, best.as_mut()) {
            if v < *best_v {
                *best_v = v;
                *best_p = params.clone();
                *best_e = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if settings.patience > 0 && since_best >= settings.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, best_p, best_e)) = best {
        if best_e != log.kept_epoch {
            *params = best_p;
            log.kept_epoch = best_e;
        }
    }
    log.total_secs = start.elapsed().as_secs_f64();
    Ok(log)
}
