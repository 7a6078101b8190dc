//! Linear branch: sigmoid matrix factorization of the rating and
//! reliability matrices, the `θ^MF` embedding and its regression head.
//!
//! Factor tables are stored one row per entity, so row `i` of `w` is the
//! user vector `w_i` (a column of the `K × n` factor matrix).
//!
//! Two factor sets are trained independently:
//!
//! * rating factors `(w, z_rating)` minimizing
//!   `Σ_Ω (r − g(wᵢ·zⱼ))² + λ(Σ nᵢ‖wᵢ‖² + Σ nⱼ‖zⱼ‖²)`;
//! * joint factors `(e, z_joint, f)` where `e` is shared between the rating
//!   term `g(eᵢ·zⱼ)` and the reliability term `g(eᵢ·fⱼ)`.
//!
//! The count-weighted regularizer equals a per-observation penalty on the
//! vectors an observation touches, which is how the mini-batch gradients
//! distribute it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{InteractionStore, MAX_RATING};
use crate::linalg::{dot, sigmoid, truncated_svd, DenseMatrix, LinalgError};
use crate::train::{run_phase, ParamSet, Phase, TrainError, TrainLog, TrainSettings};

/// Standard deviation of randomly initialized weights.
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfHyperparams {
    pub lambda: f64,
    pub k: usize,
    pub p: usize,
    /// Budget for each factor objective.
    pub factors: TrainSettings,
    /// Budget for the MAE-trained head.
    pub head: TrainSettings,
}

impl Default for MfHyperparams {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            k: 256,
            p: 64,
            factors: TrainSettings::default(),
            head: TrainSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfParams {
    /// `n × K` rating-based user factors.
    pub w: DenseMatrix,
    /// `m × K` product factors of the rating objective.
    pub z_rating: DenseMatrix,
    /// `n × K` user factors shared by the joint objective.
    pub e: DenseMatrix,
    /// `m × K` product rating factors of the joint objective.
    pub z_joint: DenseMatrix,
    /// `m × K` product reliability factors.
    pub f: DenseMatrix,
    /// `K × K` projections of the two elementwise products.
    pub w_mf1: DenseMatrix,
    pub w_mf2: DenseMatrix,
    /// `K × p` output projection.
    pub w_h: DenseMatrix,
    /// `1 × p` regression weights.
    pub w_m: DenseMatrix,
    pub b_m: f64,
}

const MF_BLOCKS: [&str; 10] = [
    "w", "z_rating", "e", "z_joint", "f", "w_mf1", "w_mf2", "w_h_mf", "w_m", "b_m",
];
const FACTOR_BLOCKS_RATING: [&str; 2] = ["w", "z_rating"];
const FACTOR_BLOCKS_JOINT: [&str; 3] = ["e", "z_joint", "f"];
pub(crate) const MF_HEAD_BLOCKS: [&str; 3] = ["w_h_mf", "w_m", "b_m"];

impl ParamSet for MfParams {
    fn block_names(&self) -> Vec<String> {
        MF_BLOCKS.iter().map(|s| s.to_string()).collect()
    }

    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            self.w.data(),
            self.z_rating.data(),
            self.e.data(),
            self.z_joint.data(),
            self.f.data(),
            self.w_mf1.data(),
            self.w_mf2.data(),
            self.w_h.data(),
            self.w_m.data(),
            std::slice::from_ref(&self.b_m),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.data_mut(),
            self.z_rating.data_mut(),
            self.e.data_mut(),
            self.z_joint.data_mut(),
            self.f.data_mut(),
            self.w_mf1.data_mut(),
            self.w_mf2.data_mut(),
            self.w_h.data_mut(),
            self.w_m.data_mut(),
            std::slice::from_mut(&mut self.b_m),
        ]
    }
}

/// User and product factor tables from one decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    /// `n × K`; row `i` is `(U·S^{1/2})ᵢ`.
    pub users: DenseMatrix,
    /// `m × K`; row `j` is column `j` of `S^{1/2}·Vᵀ`.
    pub products: DenseMatrix,
}

fn split_svd(a: &DenseMatrix, k: usize) -> Result<FactorPair, LinalgError> {
    let svd = truncated_svd(a, k)?;
    let root: Vec<f64> = svd.s.iter().map(|s| s.sqrt()).collect();
    let users = DenseMatrix::from_fn(a.rows(), k, |i, c| svd.u.get(i, c) * root[c]);
    let products = DenseMatrix::from_fn(a.cols(), k, |j, c| root[c] * svd.vt.get(c, j));
    Ok(FactorPair { users, products })
}

/// Rank-`K` SVD factors of `R` and of `H`, unobserved entries read as 0.
pub fn svd_init(
    store: &InteractionStore,
    k: usize,
) -> Result<(FactorPair, FactorPair), LinalgError> {
    let rating = split_svd(&store.dense_ratings(), k)?;
    let reliability = split_svd(&store.dense_reliability(), k)?;
    Ok((rating, reliability))
}

/// Contribution of one observation `(target − g(u·v))²` plus the optional
/// penalties `λ‖u‖²`, `λ‖v‖²`; adds the gradients into `gu`, `gv`.
#[allow(clippy::too_many_arguments)]
fn pair_term(
    u: &[f64],
    v: &[f64],
    target: f64,
    lambda: f64,
    reg_u: bool,
    reg_v: bool,
    gu: &mut [f64],
    gv: &mut [f64],
) -> f64 {
    let g = sigmoid(dot(u, v));
    let resid = target - g;
    let dx = -2.0 * resid * g * (1.0 - g);
    let mut loss = resid * resid;
    for c in 0..u.len() {
        gu[c] += dx * v[c];
        gv[c] += dx * u[c];
    }
    if reg_u {
        loss += lambda * dot(u, u);
        gu.iter_mut()
            .zip(u)
            .for_each(|(g, x)| *g += 2.0 * lambda * x);
    }
    if reg_v {
        loss += lambda * dot(v, v);
        gv.iter_mut()
            .zip(v)
            .for_each(|(g, x)| *g += 2.0 * lambda * x);
    }
    loss
}

/// One observed entry of `R` or `H` (normalized target).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MfObservation {
    Rating {
        user: usize,
        product: usize,
        target: f64,
    },
    Reliability {
        user: usize,
        product: usize,
        target: f64,
    },
}

pub fn rating_observations(store: &InteractionStore) -> Vec<MfObservation> {
    store
        .ratings()
        .iter()
        .map(|(&(user, product), &target)| MfObservation::Rating {
            user,
            product,
            target,
        })
        .collect()
}

pub fn reliability_observations(store: &InteractionStore) -> Vec<MfObservation> {
    store
        .reliability()
        .iter()
        .map(|(&(user, product), &target)| MfObservation::Reliability {
            user,
            product,
            target,
        })
        .collect()
}

/// Which factor objective a gradient evaluation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorObjective {
    /// `(w, z_rating)` on `Ω`.
    Rating,
    /// `(e, f)` on `Ψ`.
    Reliability,
    /// `(e, z_joint)` on `Ω` plus `(e, f)` on `Ψ`.
    Joint,
}

/// Loss of `objective` restricted to `obs`, with gradients added to `grads`.
/// Observations an objective does not use are ignored.
pub fn objective_batch(
    params: &MfParams,
    obs: &[MfObservation],
    lambda: f64,
    objective: FactorObjective,
    grads: &mut MfParams,
) -> f64 {
    let mut loss = 0.0;
    for o in obs {
        loss += match (*o, objective) {
            (
                MfObservation::Rating {
                    user,
                    product,
                    target,
                },
                FactorObjective::Rating,
            ) => pair_term(
                params.w.row(user),
                params.z_rating.row(product),
                target,
                lambda,
                true,
                true,
                grads.w.row_mut(user),
                grads.z_rating.row_mut(product),
            ),
            (
                MfObservation::Rating {
                    user,
                    product,
                    target,
                },
                FactorObjective::Joint,
            ) => pair_term(
                params.e.row(user),
                params.z_joint.row(product),
                target,
                lambda,
                false,
                true,
                grads.e.row_mut(user),
                grads.z_joint.row_mut(product),
            ),
            (
                MfObservation::Reliability {
                    user,
                    product,
                    target,
                },
                FactorObjective::Reliability | FactorObjective::Joint,
            ) => pair_term(
                params.e.row(user),
                params.f.row(product),
                target,
                lambda,
                true,
                true,
                grads.e.row_mut(user),
                grads.f.row_mut(product),
            ),
            _ => 0.0,
        };
    }
    loss
}

fn sq_norm_rows(m: &DenseMatrix, counts: &[usize]) -> f64 {
    counts
        .iter()
        .enumerate()
        .map(|(r, &c)| c as f64 * dot(m.row(r), m.row(r)))
        .sum()
}

/// Rating objective on `(w, z_rating)`, evaluated term by term.
pub fn rating_loss(params: &MfParams, store: &InteractionStore, lambda: f64) -> f64 {
    let data: f64 = store
        .ratings()
        .iter()
        .map(|(&(i, j), &r)| (r - sigmoid(dot(params.w.row(i), params.z_rating.row(j)))).powi(2))
        .sum();
    data + lambda
        * (sq_norm_rows(&params.w, &store.user_rating_counts())
            + sq_norm_rows(&params.z_rating, &store.product_rating_counts()))
}

/// Reliability objective on `(e, f)`.
pub fn reliability_loss(params: &MfParams, store: &InteractionStore, lambda: f64) -> f64 {
    let data: f64 = store
        .reliability()
        .iter()
        .map(|(&(i, j), &v)| (v - sigmoid(dot(params.e.row(i), params.f.row(j)))).powi(2))
        .sum();
    data + lambda
        * (sq_norm_rows(&params.e, &store.user_reliability_counts())
            + sq_norm_rows(&params.f, &store.product_reliability_counts()))
}

/// Joint objective on `(e, z_joint, f)`.
pub fn joint_loss(params: &MfParams, store: &InteractionStore, lambda: f64) -> f64 {
    let rating: f64 = store
        .ratings()
        .iter()
        .map(|(&(i, j), &r)| (r - sigmoid(dot(params.e.row(i), params.z_joint.row(j)))).powi(2))
        .sum();
    let rel: f64 = store
        .reliability()
        .iter()
        .map(|(&(i, j), &v)| (v - sigmoid(dot(params.e.row(i), params.f.row(j)))).powi(2))
        .sum();
    rating
        + rel
        + lambda
            * (sq_norm_rows(&params.e, &store.user_reliability_counts())
                + sq_norm_rows(&params.z_joint, &store.product_rating_counts())
                + sq_norm_rows(&params.f, &store.product_reliability_counts()))
}

/// Full-data gradient of one objective.
pub fn objective_grad(
    params: &MfParams,
    store: &InteractionStore,
    lambda: f64,
    objective: FactorObjective,
) -> (f64, MfParams) {
    let mut grads = params.zeroed();
    let mut obs = rating_observations(store);
    obs.extend(reliability_observations(store));
    let loss = objective_batch(params, &obs, lambda, objective, &mut grads);
    (loss, grads)
}

/// Forward intermediates of `θ^MF` for one pair.
#[derive(Debug, Clone)]
pub struct ThetaMfCache {
    pub user: usize,
    pub product: usize,
    /// `w_i ⊙ z_rating_j`.
    pub rating_part: Vec<f64>,
    /// `e_i ⊙ z_joint_j`.
    pub joint_part: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Forward intermediates of the pre-training head.
#[derive(Debug, Clone)]
pub struct MfHeadCache {
    pub theta: ThetaMfCache,
    /// `W_hᵀ θ`, length `p`.
    pub latent: Vec<f64>,
    /// Raw-scale prediction.
    pub raw: f64,
}

impl MfParams {
    /// Factors from the SVD of `R` and `H`; `z_joint` starts as a copy of
    /// `z_rating`. Projections start at identity, the head at
    /// `Normal(0, 0.01²)` with the bias at the mean normalized rating.
    pub fn from_svd(
        store: &InteractionStore,
        k: usize,
        p: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, LinalgError> {
        let (rating, reliability) = svd_init(store, k)?;
        let b_m = store.global_mean_raw().unwrap_or(3.0) / MAX_RATING as f64;
        Ok(Self {
            w: rating.users,
            z_joint: rating.products.clone(),
            z_rating: rating.products,
            e: reliability.users,
            f: reliability.products,
            w_mf1: DenseMatrix::identity(k),
            w_mf2: DenseMatrix::identity(k),
            w_h: DenseMatrix::random_normal(k, p, INIT_STD, rng),
            w_m: DenseMatrix::random_normal(1, p, INIT_STD, rng),
            b_m,
        })
    }

    /// Every weight from `Normal(0, std²)`, bias `b_m`; used when the branch
    /// is not pre-trained.
    pub fn random(
        n: usize,
        m: usize,
        k: usize,
        p: usize,
        std: f64,
        b_m: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: DenseMatrix::random_normal(n, k, std, rng),
            z_rating: DenseMatrix::random_normal(m, k, std, rng),
            e: DenseMatrix::random_normal(n, k, std, rng),
            z_joint: DenseMatrix::random_normal(m, k, std, rng),
            f: DenseMatrix::random_normal(m, k, std, rng),
            w_mf1: DenseMatrix::random_normal(k, k, std, rng),
            w_mf2: DenseMatrix::random_normal(k, k, std, rng),
            w_h: DenseMatrix::random_normal(k, p, std, rng),
            w_m: DenseMatrix::random_normal(1, p, std, rng),
            b_m,
        }
    }

    pub fn k(&self) -> usize {
        self.w.cols()
    }

    pub fn p(&self) -> usize {
        self.w_h.cols()
    }

    pub fn n_users(&self) -> usize {
        self.w.rows()
    }

    pub fn n_products(&self) -> usize {
        self.z_rating.rows()
    }

    pub fn contains(&self, user: usize, product: usize) -> bool {
        user < self.n_users() && product < self.n_products()
    }

    /// Raw-scale prediction `5·g(wᵢ·zⱼ)` of the rating factors.
    pub fn predict_rating_factors(&self, user: usize, product: usize) -> f64 {
        MAX_RATING as f64 * sigmoid(dot(self.w.row(user), self.z_rating.row(product)))
    }

    /// Raw-scale prediction `5·g(eᵢ·zⱼ)` of the joint factors.
    pub fn predict_joint(&self, user: usize, product: usize) -> f64 {
        MAX_RATING as f64 * sigmoid(dot(self.e.row(user), self.z_joint.row(product)))
    }

    pub fn theta_forward(&self, user: usize, product: usize) -> ThetaMfCache {
        let rating_part: Vec<f64> = self
            .w
            .row(user)
            .iter()
            .zip(self.z_rating.row(product))
            .map(|(a, b)| a * b)
            .collect();
        let joint_part: Vec<f64> = self
            .e
            .row(user)
            .iter()
            .zip(self.z_joint.row(product))
            .map(|(a, b)| a * b)
            .collect();
        let k = self.k();
        let mut theta = vec![0.0; k];
        let mut tmp = vec![0.0; k];
        self.w_mf1.mul_vec(&rating_part, &mut theta);
        self.w_mf2.mul_vec(&joint_part, &mut tmp);
        theta.iter_mut().zip(&tmp).for_each(|(t, x)| *t += x);
        ThetaMfCache {
            user,
            product,
            rating_part,
            joint_part,
            theta,
        }
    }

    /// Adds `∂/∂params` of `dθ·θ` into `grads`. Factor rows are skipped
    /// unless `into_factors`.
    pub fn theta_backward(
        &self,
        cache: &ThetaMfCache,
        dtheta: &[f64],
        grads: &mut MfParams,
        into_factors: bool,
    ) {
        grads.w_mf1.add_outer(dtheta, &cache.rating_part, 1.0);
        grads.w_mf2.add_outer(dtheta, &cache.joint_part, 1.0);
        if !into_factors {
            return;
        }
        let k = self.k();
        let (i, j) = (cache.user, cache.product);
        let mut d_rating = vec![0.0; k];
        let mut d_joint = vec![0.0; k];
        self.w_mf1.mul_vec_transposed(dtheta, &mut d_rating);
        self.w_mf2.mul_vec_transposed(dtheta, &mut d_joint);
        for c in 0..k {
            grads.w.row_mut(i)[c] += d_rating[c] * self.z_rating.get(j, c);
            grads.z_rating.row_mut(j)[c] += d_rating[c] * self.w.get(i, c);
            grads.e.row_mut(i)[c] += d_joint[c] * self.z_joint.get(j, c);
            grads.z_joint.row_mut(j)[c] += d_joint[c] * self.e.get(i, c);
        }
    }

    pub fn head_forward(&self, user: usize, product: usize) -> MfHeadCache {
        let theta = self.theta_forward(user, product);
        let mut latent = vec![0.0; self.p()];
        self.w_h.mul_vec_transposed(&theta.theta, &mut latent);
        let raw = MAX_RATING as f64 * (dot(self.w_m.row(0), &latent) + self.b_m);
        MfHeadCache { theta, latent, raw }
    }

    /// Backpropagates `∂loss/∂raw` through the head.
    pub fn head_backward(
        &self,
        cache: &MfHeadCache,
        d_raw: f64,
        grads: &mut MfParams,
        into_factors: bool,
    ) {
        let d_norm = MAX_RATING as f64 * d_raw;
        grads.b_m += d_norm;
        grads.w_m.add_outer(&[d_norm], &cache.latent, 1.0);
        let d_latent: Vec<f64> = self.w_m.row(0).iter().map(|w| w * d_norm).collect();
        grads.w_h.add_outer(&cache.theta.theta, &d_latent, 1.0);
        let mut dtheta = vec![0.0; self.k()];
        self.w_h.mul_vec(&d_latent, &mut dtheta);
        self.theta_backward(&cache.theta, &dtheta, grads, into_factors);
    }
}

/// `θ^MF = W_MF1(wᵢ ⊙ zⱼ) + W_MF2(eᵢ ⊙ zⱼ')` for a pair.
pub fn theta_mf(params: &MfParams, user: usize, product: usize) -> Result<Vec<f64>, TrainError> {
    if !params.contains(user, product) {
        return Err(TrainError::Invalid(format!(
            "pair ({user}, {product}) outside {}x{}",
            params.n_users(),
            params.n_products()
        )));
    }
    Ok(params.theta_forward(user, product).theta)
}

/// Raw-scale prediction of the MF pre-training head.
pub fn mf_pretrain_predict(params: &MfParams, user: usize, product: usize) -> f64 {
    params.head_forward(user, product).raw
}

/// Mean absolute raw-scale error of `predict` over the rated pairs.
pub(crate) fn raw_mae(store: &InteractionStore, predict: impl Fn(usize, usize) -> f64) -> f64 {
    let n = store.ratings().len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = store
        .ratings()
        .iter()
        .map(|(&(i, j), &r)| (predict(i, j) - r * MAX_RATING as f64).abs())
        .sum();
    total / n as f64
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PairTarget {
    pub user: usize,
    pub product: usize,
    /// Raw-scale rating.
    pub raw: f64,
}

pub(crate) fn pair_targets(store: &InteractionStore) -> Vec<PairTarget> {
    store
        .ratings()
        .iter()
        .map(|(&(user, product), &r)| PairTarget {
            user,
            product,
            raw: r * MAX_RATING as f64,
        })
        .collect()
}

/// Derivative of `|pred − target|`; 0 at the kink.
#[inline]
pub(crate) fn mae_grad(pred: f64, target: f64) -> f64 {
    let d = pred - target;
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_dims(store: &InteractionStore, hyper: &MfHyperparams) -> Result<(), TrainError> {
    if store.is_empty() {
        return Err(TrainError::Empty("mf"));
    }
    if hyper.k == 0 || hyper.p == 0 {
        return Err(TrainError::Invalid("K and p must be positive".into()));
    }
    if hyper.lambda < 0.0 {
        return Err(TrainError::Invalid(format!("lambda {} < 0", hyper.lambda)));
    }
    Ok(())
}

/// SVD initialization followed by mini-batch Adam on the rating objective
/// and then on the joint objective. The head is left at its initial value.
pub fn train_mf(
    store: &InteractionStore,
    val: Option<&InteractionStore>,
    hyper: &MfHyperparams,
    rng: &mut impl Rng,
) -> Result<(MfParams, Vec<TrainLog>), TrainError> {
    check_dims(store, hyper)?;
    let mut params = MfParams::from_svd(store, hyper.k, hyper.p, rng)?;
    let logs = train_factors(&mut params, store, val, hyper)?;
    Ok((params, logs))
}

/// Runs both factor phases on existing parameters.
pub fn train_factors(
    params: &mut MfParams,
    store: &InteractionStore,
    val: Option<&InteractionStore>,
    hyper: &MfHyperparams,
) -> Result<Vec<TrainLog>, TrainError> {
    let lambda = hyper.lambda;
    let ratings = rating_observations(store);
    let mut joint_obs = ratings.clone();
    joint_obs.extend(reliability_observations(store));

    let mut rating_grad = |p: &MfParams, obs: &[MfObservation], g: &mut MfParams| {
        objective_batch(p, obs, lambda, FactorObjective::Rating, g)
    };
    let mut rating_train = |p: &MfParams| raw_mae(store, |i, j| p.predict_rating_factors(i, j));
    let mut rating_val =
        val.map(|v| move |p: &MfParams| raw_mae(v, |i, j| p.predict_rating_factors(i, j)));
    let rating_log = run_phase(
        params,
        &hyper.factors,
        Phase {
            name: "mf-rating",
            observations: &ratings,
            batch_grad: &mut rating_grad,
            train_mae: &mut rating_train,
            val_mae: rating_val
                .as_mut()
                .map(|f| f as &mut dyn FnMut(&MfParams) -> f64),
            trainable: &|name| FACTOR_BLOCKS_RATING.contains(&name),
        },
    )?;

    let mut joint_grad = |p: &MfParams, obs: &[MfObservation], g: &mut MfParams| {
        objective_batch(p, obs, lambda, FactorObjective::Joint, g)
    };
    let mut joint_train = |p: &MfParams| raw_mae(store, |i, j| p.predict_joint(i, j));
    let mut joint_val = val.map(|v| move |p: &MfParams| raw_mae(v, |i, j| p.predict_joint(i, j)));
    let joint_log = run_phase(
        params,
        &hyper.factors,
        Phase {
            name: "mf-joint",
            observations: &joint_obs,
            batch_grad: &mut joint_grad,
            train_mae: &mut joint_train,
            val_mae: joint_val
                .as_mut()
                .map(|f| f as &mut dyn FnMut(&MfParams) -> f64),
            trainable: &|name| FACTOR_BLOCKS_JOINT.contains(&name),
        },
    )?;
    Ok(vec![rating_log, joint_log])
}

/// Trains the projections and regression head with MAE against raw
/// ratings, factors frozen.
pub fn train_mf_head(
    params: &mut MfParams,
    store: &InteractionStore,
    val: Option<&InteractionStore>,
    settings: &TrainSettings,
) -> Result<TrainLog, TrainError> {
    let targets = pair_targets(store);
    let mut grad = |p: &MfParams, obs: &[PairTarget], g: &mut MfParams| {
        let mut loss = 0.0;
        for t in obs {
            let cache = p.head_forward(t.user, t.product);
            loss += (cache.raw - t.raw).abs();
            p.head_backward(&cache, mae_grad(cache.raw, t.raw), g, false);
        }
        loss
    };
    let mut train = |p: &MfParams| raw_mae(store, |i, j| mf_pretrain_predict(p, i, j));
    let mut val_fn =
        val.map(|v| move |p: &MfParams| raw_mae(v, |i, j| mf_pretrain_predict(p, i, j)));
    run_phase(
        params,
        settings,
        Phase {
            name: "mf-head",
            observations: &targets,
            batch_grad: &mut grad,
            train_mae: &mut train,
            val_mae: val_fn
                .as_mut()
                .map(|f| f as &mut dyn FnMut(&MfParams) -> f64),
            trainable: &|name| name == "w_mf1" || name == "w_mf2" || MF_HEAD_BLOCKS.contains(&name),
        },
    )
}

/// Factor training followed by head training.
pub fn pretrain_mf(
    store: &InteractionStore,
    val: Option<&InteractionStore>,
    hyper: &MfHyperparams,
    rng: &mut impl Rng,
) -> Result<(MfParams, Vec<TrainLog>), TrainError> {
    let (mut params, mut logs) = train_mf(store, val, hyper, rng)?;
    logs.push(train_mf_head(&mut params, store, val, &hyper.head)?);
    Ok((params, logs))
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::ingest::{InteractionStore, KeyIndex, PairKey};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    pub(crate) fn store_from(
        n: usize,
        m: usize,
        ratings: &[(usize, usize, f64)],
        rel: &[(usize, usize, f64)],
    ) -> InteractionStore {
        let to_map = |v: &[(usize, usize, f64)]| -> BTreeMap<PairKey, f64> {
            v.iter().map(|&(i, j, x)| ((i, j), x)).collect()
        };
        InteractionStore::from_parts(
            KeyIndex::numbered("u", n),
            KeyIndex::numbered("p", m),
            to_map(ratings),
            to_map(rel),
            vec![Vec::new(); m],
        )
        .unwrap()
    }

    /// 8 users × 6 products, ~70% rated, reliability on half the ratings.
    pub(crate) fn small_store() -> InteractionStore {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut r = Vec::new();
        let mut h = Vec::new();
        for i in 0..8 {
            for j in 0..6 {
                if rng.random_bool(0.7) {
                    r.push((i, j, rng.random_range(1..=5) as f64 / 5.0));
                    if rng.random_bool(0.5) {
                        h.push((i, j, rng.random_range(0.05..0.95)));
                    }
                }
            }
        }
        store_from(8, 6, &r, &h)
    }
}
