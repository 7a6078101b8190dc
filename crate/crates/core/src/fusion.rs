//! Fused model: concatenates `θ^MF` and `θ^MLP`, projects through a shared
//! `W_h`, and regresses to a rating.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{InteractionStore, MAX_RATING};
use crate::linalg::{dot, DenseMatrix};
use crate::mf::{
    mae_grad, pair_targets, raw_mae, MfParams, PairTarget, ThetaMfCache, MF_HEAD_BLOCKS,
};
use crate::mlp::{init_mlp_with_std, MlpCache, MlpParams, MLP_HEAD_BLOCKS};
use crate::train::{run_phase, ParamSet, Phase, TrainError, TrainLog, TrainSettings};

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub mf: MfParams,
    pub mlp: MlpParams,
    /// `p × (K + p)`.
    pub w_h: DenseMatrix,
    /// `1 × p`.
    pub w_re: DenseMatrix,
    pub b_re: f64,
    pub gamma: f64,
    /// Raw-scale prediction for pairs outside the trained index range.
    pub fallback_raw: f64,
}

impl ParamSet for FusionModel {
    fn block_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .mf
            .block_names()
            .into_iter()
            .map(|n| format!("mf.{n}"))
            .collect();
        names.extend(
            self.mlp
                .block_names()
                .into_iter()
                .map(|n| format!("mlp.{n}")),
        );
        names.extend(["fusion.w_h", "fusion.w_re", "fusion.b_re"].map(String::from));
        names
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out = self.mf.blocks();
        out.extend(self.mlp.blocks());
        out.push(self.w_h.data());
        out.push(self.w_re.data());
        out.push(std::slice::from_ref(&self.b_re));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.mf.blocks_mut();
        out.extend(self.mlp.blocks_mut());
        out.push(self.w_h.data_mut());
        out.push(self.w_re.data_mut());
        out.push(std::slice::from_mut(&mut self.b_re));
        out
    }
}

/// Whether a block is updated during fine-tuning. The branch regression
/// heads take no part in the fused forward pass and stay fixed.
pub fn fusion_trainable(name: &str, freeze_branches: bool) -> bool {
    if name.starts_with("fusion.") {
        return true;
    }
    if freeze_branches {
        return false;
    }
    match name.split_once('.') {
        Some(("mf", rest)) => !MF_HEAD_BLOCKS.contains(&rest),
        Some(("mlp", rest)) => !MLP_HEAD_BLOCKS.contains(&rest),
        _ => false,
    }
}

fn check_gamma(gamma: f64) -> Result<(), TrainError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(TrainError::Invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// Assembles `W_h = [γ·(W_h^MF)ᵀ | (1−γ)·(W_h^MLP)ᵀ]`; the regression layer
/// starts at the average of the two branch heads.
pub fn init_fusion(mf: MfParams, mlp: MlpParams, gamma: f64) -> Result<FusionModel, TrainError> {
    check_gamma(gamma)?;
    if mf.p() != mlp.p() {
        return Err(TrainError::Invalid(format!(
            "branch head widths differ: MF p = {}, MLP p = {}",
            mf.p(),
            mlp.p()
        )));
    }
    if mf.n_users() != mlp.n_users() || mf.n_products() != mlp.n_products() {
        return Err(TrainError::Invalid(format!(
            "branch dimensions differ: MF {}x{}, MLP {}x{}",
            mf.n_users(),
            mf.n_products(),
            mlp.n_users(),
            mlp.n_products()
        )));
    }
    let (k, p) = (mf.k(), mf.p());
    let w_h = DenseMatrix::from_fn(p, k + p, |r, c| {
        if c < k {
            gamma * mf.w_h.get(c, r)
        } else {
            (1.0 - gamma) * mlp.w_h.get(c - k, r)
        }
    });
    let w_re = DenseMatrix::from_fn(1, p, |_, c| 0.5 * (mf.w_m.get(0, c) + mlp.w_out.get(0, c)));
    let b_re = 0.5 * (mf.b_m + mlp.b_out);
    Ok(FusionModel {
        mf,
        mlp,
        w_h,
        w_re,
        b_re,
        gamma,
        fallback_raw: MAX_RATING as f64 * b_re,
    })
}

/// Every parameter drawn from `Normal(0, std²)` with the regression bias at
/// `b_re`; the starting point when neither branch is pre-trained.
#[allow(clippy::too_many_arguments)]
pub fn random_fusion(
    n: usize,
    m: usize,
    k: usize,
    widths: &[usize],
    gamma: f64,
    std: f64,
    b_re: f64,
    rng: &mut impl Rng,
) -> Result<FusionModel, TrainError> {
    check_gamma(gamma)?;
    let mlp = init_mlp_with_std(n, m, k, widths, std, rng)?;
    let p = mlp.p();
    let mf = MfParams::random(n, m, k, p, std, b_re, rng);
    Ok(FusionModel {
        mf,
        mlp,
        w_h: DenseMatrix::random_normal(p, k + p, std, rng),
        w_re: DenseMatrix::random_normal(1, p, std, rng),
        b_re,
        gamma,
        fallback_raw: MAX_RATING as f64 * b_re,
    })
}

#[derive(Debug, Clone)]
pub struct FusedCache {
    mf: ThetaMfCache,
    mlp: MlpCache,
    /// `[θ^MF; θ^MLP]`.
    joined: Vec<f64>,
    latent: Vec<f64>,
    pub raw: f64,
}

impl FusionModel {
    pub fn k(&self) -> usize {
        self.mf.k()
    }

    pub fn p(&self) -> usize {
        self.mf.p()
    }

    pub fn n_users(&self) -> usize {
        self.mf.n_users()
    }

    pub fn n_products(&self) -> usize {
        self.mf.n_products()
    }

    pub fn contains(&self, user: usize, product: usize) -> bool {
        self.mf.contains(user, product)
    }

    /// Unclamped raw-scale forward pass; callers guarantee valid indices.
    pub fn forward(&self, user: usize, product: usize) -> FusedCache {
        let mf = self.mf.theta_forward(user, product);
        let mlp = self.mlp.forward(user, product);
        let joined: Vec<f64> = mf.theta.iter().chain(&mlp.theta).copied().collect();
        let mut latent = vec![0.0; self.p()];
        self.w_h.mul_vec(&joined, &mut latent);
        let raw = MAX_RATING as f64 * (dot(self.w_re.row(0), &latent) + self.b_re);
        FusedCache {
            mf,
            mlp,
            joined,
            latent,
            raw,
        }
    }

    /// Adds `∂raw/∂params · d_raw` into `grads`; with `freeze_branches` only
    /// the fusion head receives gradient.
    pub fn backward(
        &self,
        cache: &FusedCache,
        d_raw: f64,
        grads: &mut FusionModel,
        freeze_branches: bool,
    ) {
        let d_norm = MAX_RATING as f64 * d_raw;
        grads.b_re += d_norm;
        grads.w_re.add_outer(&[d_norm], &cache.latent, 1.0);
        let d_latent: Vec<f64> = self.w_re.row(0).iter().map(|w| w * d_norm).collect();
        grads.w_h.add_outer(&d_latent, &cache.joined, 1.0);
        if freeze_branches {
            return;
        }
        let mut d_joined = vec![0.0; cache.joined.len()];
        self.w_h.mul_vec_transposed(&d_latent, &mut d_joined);
        let (d_mf, d_mlp) = d_joined.split_at(self.k());
        self.mf.theta_backward(&cache.mf, d_mf, &mut grads.mf, true);
        self.mlp.backward(&cache.mlp, d_mlp, &mut grads.mlp);
    }

    /// Reported prediction: clamped to `[1, 5]`, fallback for unknown pairs.
    pub fn predict(&self, user: usize, product: usize) -> f64 {
        if !self.contains(user, product) {
            return self.fallback_raw;
        }
        self.forward(user, product)
            .raw
            .clamp(1.0, MAX_RATING as f64)
    }
}

/// Unclamped raw-scale prediction.
pub fn fused_forward(model: &FusionModel, user: usize, product: usize) -> Result<f64, TrainError> {
    if !model.contains(user, product) {
        return Err(TrainError::Invalid(format!(
            "pair ({user}, {product}) outside {}x{}",
            model.n_users(),
            model.n_products()
        )));
    }
    Ok(model.forward(user, product).raw)
}

/// Order-preserving reported predictions.
pub fn predict_batch(model: &FusionModel, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .par_iter()
        .map(|&(i, j)| model.predict(i, j))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionHyperparams {
    pub gamma: f64,
    pub freeze_branches: bool,
    pub train: TrainSettings,
}

impl Default for FusionHyperparams {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            freeze_branches: false,
            train: TrainSettings::default(),
        }
    }
}

/// End-to-end MAE fine-tuning. Sets the cold-start fallback to the mean
/// training rating.
pub fn train_fusion(
    model: &mut FusionModel,
    store: &InteractionStore,
    val: Option<&InteractionStore>,
    hyper: &FusionHyperparams,
) -> Result<TrainLog, TrainError> {
    if store.n_users() > model.n_users() || store.n_products() > model.n_products() {
        return Err(TrainError::Invalid(
            "store has more users or products than the model".into(),
        ));
    }
    if let Some(mean) = store.global_mean_raw() {
        model.fallback_raw = mean;
    }
    let freeze = hyper.freeze_branches;
    let targets = pair_targets(store);
    let mut grad = |m: &FusionModel, obs: &[PairTarget], g: &mut FusionModel| {
        let mut loss = 0.0;
        for t in obs {
            let cache = m.forward(t.user, t.product);
            loss += (cache.raw - t.raw).abs();
            m.backward(&cache, mae_grad(cache.raw, t.raw), g, freeze);
        }
        loss
    };
    let mut train = |m: &FusionModel| raw_mae(store, |i, j| m.forward(i, j).raw);
    let mut val_fn = val.map(|v| move |m: &FusionModel| raw_mae(v, |i, j| m.forward(i, j).raw));
    run_phase(
        model,
        &hyper.train,
        Phase {
            name: "fusion",
            observations: &targets,
            batch_grad: &mut grad,
            train_mae: &mut train,
            val_mae: val_fn
                .as_mut()
                .map(|f| f as &mut dyn FnMut(&FusionModel) -> f64),
            trainable: &|name| fusion_trainable(name, freeze),
        },
    )
}
