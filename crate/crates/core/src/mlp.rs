//! Non-linear branch: embedding lookup, additive fusion layer, ReLU tower
//! producing `θ^MLP`, and its pre-training regression head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{InteractionStore, MAX_RATING};
use crate::linalg::{dot, relu, relu_grad, DenseMatrix};
use crate::mf::{mae_grad, pair_targets, raw_mae, svd_init, PairTarget, INIT_STD};
use crate::train::{run_phase, ParamSet, Phase, TrainError, TrainLog, TrainSettings};

/// One fully-connected ReLU layer; `w` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub user_rating_emb: DenseMatrix,
    pub user_rel_emb: DenseMatrix,
    pub prod_rating_emb: DenseMatrix,
    pub prod_rel_emb: DenseMatrix,
    pub fusion_w_user: DenseMatrix,
    pub fusion_b_user: Vec<f64>,
    pub fusion_w_prod: DenseMatrix,
    pub fusion_b_prod: Vec<f64>,
    pub tower: Vec<Layer>,
    /// `p × p` output projection.
    pub w_h: DenseMatrix,
    /// `1 × p` regression weights.
    pub w_out: DenseMatrix,
    pub b_out: f64,
}

pub(crate) const MLP_HEAD_BLOCKS: [&str; 3] = ["w_h_mlp", "w_mlp", "b_mlp"];

impl ParamSet for MlpParams {
    fn block_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "user_rating_emb",
            "user_rel_emb",
            "prod_rating_emb",
            "prod_rel_emb",
            "fusion_w_user",
            "fusion_b_user",
            "fusion_w_prod",
            "fusion_b_prod",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for l in 0..self.tower.len() {
            names.push(format!("tower.{l}.w"));
            names.push(format!("tower.{l}.b"));
        }
        names.extend(MLP_HEAD_BLOCKS.iter().map(|s| s.to_string()));
        names
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.user_rating_emb.data(),
            self.user_rel_emb.data(),
            self.prod_rating_emb.data(),
            self.prod_rel_emb.data(),
            self.fusion_w_user.data(),
            &self.fusion_b_user,
            self.fusion_w_prod.data(),
            &self.fusion_b_prod,
        ];
        for layer in &self.tower {
            out.push(layer.w.data());
            out.push(&layer.b);
        }
        out.push(self.w_h.data());
        out.push(self.w_out.data());
        out.push(std::slice::from_ref(&self.b_out));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.user_rating_emb.data_mut(),
            self.user_rel_emb.data_mut(),
            self.prod_rating_emb.data_mut(),
            self.prod_rel_emb.data_mut(),
            self.fusion_w_user.data_mut(),
            &mut self.fusion_b_user,
            self.fusion_w_prod.data_mut(),
            &mut self.fusion_b_prod,
        ];
        for layer in &mut self.tower {
            out.push(layer.w.data_mut());
            out.push(&mut layer.b);
        }
        out.push(self.w_h.data_mut());
        out.push(self.w_out.data_mut());
        out.push(std::slice::from_mut(&mut self.b_out));
        out
    }
}

/// Halving tower `2K → 2K → K → K/2 → K/4`; at `K = 256` this is
/// `512, 256, 128, 64`.
pub fn default_tower(k: usize) -> Vec<usize> {
    vec![2 * k, k, (k / 2).max(1), (k / 4).max(1)]
}

/// Checks layer output widths against the `2K` input: non-empty, positive,
/// non-increasing.
pub fn validate_tower(k: usize, widths: &[usize]) -> Result<(), TrainError> {
    if k == 0 {
        return Err(TrainError::Invalid("K must be positive".into()));
    }
    if widths.is_empty() {
        return Err(TrainError::Invalid("tower needs at least one layer".into()));
    }
    let mut prev = 2 * k;
    for &w in widths {
        if w == 0 || w > prev {
            return Err(TrainError::Invalid(format!(
                "tower widths must be positive and non-increasing from 2K = {}: {widths:?}",
                2 * k
            )));
        }
        prev = w;
    }
    Ok(())
}

/// Weights from `Normal(0, 0.01²)`, biases 0. `widths` are the layer output
/// widths; the last one is `p`.
pub fn init_mlp(
    n: usize,
    m: usize,
    k: usize,
    widths: &[usize],
    rng: &mut impl Rng,
) -> Result<MlpParams, TrainError> {
    init_mlp_with_std(n, m, k, widths, INIT_STD, rng)
}

/// [`init_mlp`] with a custom weight standard deviation.
pub fn init_mlp_with_std(
    n: usize,
    m: usize,
    k: usize,
    widths: &[usize],
    std: f64,
    rng: &mut impl Rng,
) -> Result<MlpParams, TrainError> {
    validate_tower(k, widths)?;
    let user_rating_emb = DenseMatrix::random_normal(n, k, std, rng);
    let user_rel_emb = DenseMatrix::random_normal(n, k, std, rng);
    let prod_rating_emb = DenseMatrix::random_normal(m, k, std, rng);
    let prod_rel_emb = DenseMatrix::random_normal(m, k, std, rng);
    let fusion_w_user = DenseMatrix::random_normal(k, k, std, rng);
    let fusion_w_prod = DenseMatrix::random_normal(k, k, std, rng);
    let mut tower = Vec::with_capacity(widths.len());
    let mut input = 2 * k;
    for &w in widths {
        tower.push(Layer {
            w: DenseMatrix::random_normal(w, input, std, rng),
            b: vec![0.0; w],
        });
        input = w;
    }
    let p = input;
    Ok(MlpParams {
        user_rating_emb,
        user_rel_emb,
        prod_rating_emb,
        prod_rel_emb,
        fusion_w_user,
        fusion_b_user: vec![0.0; k],
        fusion_w_prod,
        fusion_b_prod: vec![0.0; k],
        tower,
        w_h: DenseMatrix::random_normal(p, p, std, rng),
        w_out: DenseMatrix::random_normal(1, p, std, rng),
        b_out: 0.0,
    })
}

/// Forward intermediates for one pair.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub user: usize,
    pub product: usize,
    user_sum: Vec<f64>,
    prod_sum: Vec<f64>,
    a_pre: Vec<f64>,
    b_pre: Vec<f64>,
    /// Input of each tower layer; `inputs[0] = [a; b]`.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

impl MlpCache {
    pub fn fusion_outputs(&self) -> (&[f64], &[f64]) {
        let k = self.a_pre.len();
        (&self.inputs[0][..k], &self.inputs[0][k..])
    }
}

#[derive(Debug, Clone)]
pub struct MlpHeadCache {
    pub tower: MlpCache,
    pub latent: Vec<f64>,
    pub raw: f64,
}

fn affine(w: &DenseMatrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    w.mul_vec(x, &mut out);
    out.iter_mut().zip(b).for_each(|(o, b)| *o += b);
    out
}

fn add_rows(a: &DenseMatrix, b: &DenseMatrix, r: usize) -> Vec<f64> {
    a.row(r).iter().zip(b.row(r)).map(|(x, y)| x + y).collect()
}

impl MlpParams {
    pub fn k(&self) -> usize {
        self.user_rating_emb.cols()
    }

    pub fn p(&self) -> usize {
        self.w_h.rows()
    }

    pub fn n_users(&self) -> usize {
        self.user_rating_emb.rows()
    }

    pub fn n_products(&self) -> usize {
        self.prod_rating_emb.rows()
    }

    pub fn tower_widths(&self) -> Vec<usize> {
        self.tower.iter().map(Layer::output_dim).collect()
    }

    pub fn contains(&self, user: usize, product: usize) -> bool {
        user < self.n_users() && product < self.n_products()
    }

    fn check(&self, user: usize, product: usize) -> Result<(), TrainError> {
        if self.contains(user, product) {
            Ok(())
        } else {
            Err(TrainError::Invalid(format!(
                "pair ({user}, {product}) outside {}x{}",
                self.n_users(),
                self.n_products()
            )))
        }
    }

    /// Replaces the four embedding tables with rank-`K` SVD factors of `R`
    /// (rating tables) and `H` (reliability tables).
    pub fn embeddings_from_svd(&mut self, store: &InteractionStore) -> Result<(), TrainError> {
        let (rating, rel) = svd_init(store, self.k())?;
        if rating.users.rows() != self.n_users() || rating.products.rows() != self.n_products() {
            return Err(TrainError::Invalid(
                "store dimensions differ from the embedding tables".into(),
            ));
        }
        self.user_rating_emb = rating.users;
        self.prod_rating_emb = rating.products;
        self.user_rel_emb = rel.users;
        self.prod_rel_emb = rel.products;
        Ok(())
    }

    /// Callers guarantee valid indices.
    pub fn forward(&self, user: usize, product: usize) -> MlpCache {
        let user_sum = add_rows(&self.user_rating_emb, &self.user_rel_emb, user);
        let prod_sum = add_rows(&self.prod_rating_emb, &self.prod_rel_emb, product);
        let a_pre = affine(&self.fusion_w_user, &self.fusion_b_user, &user_sum);
        let b_pre = affine(&self.fusion_w_prod, &self.fusion_b_prod, &prod_sum);
        let v: Vec<f64> = a_pre.iter().chain(&b_pre).map(|&x| relu(x)).collect();
        let mut inputs = Vec::with_capacity(self.tower.len());
        let mut pre = Vec::with_capacity(self.tower.len());
        let mut x = v;
        for layer in &self.tower {
            let z = affine(&layer.w, &layer.b, &x);
            let next: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        MlpCache {
            user,
            product,
            user_sum,
            prod_sum,
            a_pre,
            b_pre,
            inputs,
            pre,
            theta: x,
        }
    }

    /// Adds the gradient of `dθ·θ` into `grads`.
    pub fn backward(&self, cache: &MlpCache, dtheta: &[f64], grads: &mut MlpParams) {
        let mut dout = dtheta.to_vec();
        for (l, layer) in self.tower.iter().enumerate().rev() {
            let dpre: Vec<f64> = dout
                .iter()
                .zip(&cache.pre[l])
                .map(|(d, &z)| d * relu_grad(z))
                .collect();
            let g = &mut grads.tower[l];
            g.w.add_outer(&dpre, &cache.inputs[l], 1.0);
            g.b.iter_mut().zip(&dpre).for_each(|(b, d)| *b += d);
            let mut din = vec![0.0; layer.input_dim()];
            layer.w.mul_vec_transposed(&dpre, &mut din);
            dout = din;
        }
        let k = self.k();
        let (da, db) = dout.split_at(k);
        let da_pre: Vec<f64> = da
            .iter()
            .zip(&cache.a_pre)
            .map(|(d, &z)| d * relu_grad(z))
            .collect();
        let db_pre: Vec<f64> = db
            .iter()
            .zip(&cache.b_pre)
            .map(|(d, &z)| d * relu_grad(z))
            .collect();
        grads.fusion_w_user.add_outer(&da_pre, &cache.user_sum, 1.0);
        grads.fusion_w_prod.add_outer(&db_pre, &cache.prod_sum, 1.0);
        grads
            .fusion_b_user
            .iter_mut()
            .zip(&da_pre)
            .for_each(|(b, d)| *b += d);
        grads
            .fusion_b_prod
            .iter_mut()
            .zip(&db_pre)
            .for_each(|(b, d)| *b += d);
        let mut du = vec![0.0; k];
        let mut dp = vec![0.0; k];
        self.fusion_w_user.mul_vec_transposed(&da_pre, &mut du);
        self.fusion_w_prod.mul_vec_transposed(&db_pre, &mut dp);
        for (c, (&u, &p)) in du.iter().zip(&dp).enumerate() {
            grads.user_rating_emb.row_mut(cache.user)[c] += u;
            grads.user_rel_emb.row_mut(cache.user)[c] += u;
            grads.prod_rating_emb.row_mut(cache.product)[c] += p;
            grads.prod_rel_emb.row_mut(cache.product)[c] += p;
        }
    }

    pub fn head_forward(&self, user: usize, product: usize) -> MlpHeadCache {
        let tower = self.forward(user, product);
        let mut latent = vec![0.0; self.p()];
        self.w_h.mul_vec_transposed(&tower.theta, &mut latent);
        let raw = MAX_RATING as f64 * (dot(self.w_out.row(0), &latent) + self.b_out);
        MlpHeadCache { tower, latent, raw }
    }

    pub fn head_backward(&self, cache: &MlpHeadCache, d_raw: f64, grads: &mut MlpParams) {
        let d_norm = MAX_RATING as f64 * d_raw;
        grads.b_out += d_norm;
        grads.w_out.add_outer(&[d_norm], &cache.latent, 1.0);
        let d_latent: Vec<f64> = self.w_out.row(0).iter().map(|w| w * d_norm).collect();
        grads.w_h.add_outer(&cache.tower.theta, &d_latent, 1.0);
        let mut dtheta = vec![0.0; self.p()];
        self.w_h.mul_vec(&d_latent, &mut dtheta);
        self.backward(&cache.tower, &dtheta, grads);
    }
}

/// `(a_i, b_j)`: ReLU of the fused user and product embeddings.
pub fn fusion_layer(
    params: &MlpParams,
    user: usize,
    product: usize,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    params.check(user, product)?;
    let cache = params.forward(user, product);
    let (a, b) = cache.fusion_outputs();
    Ok((a.to_vec(), b.to_vec()))
}

/// `θ^MLP` for a pair.
pub fn mlp_forward(
    params: &MlpParams,
    user: usize,
    product: usize,
) -> Result<Vec<f64>, TrainError> {
    params.check(user, product)?;
    Ok(params.forward(user, product).theta)
}

/// Gradients of `loss_grad·θ^MLP(i, j)` with respect to every parameter.
pub fn mlp_backward(
    params: &MlpParams,
    user: usize,
    product: usize,
    loss_grad: &[f64],
) -> Result<MlpParams, TrainError> {
    params.check(user, product)?;
    if loss_grad.len() != params.p() {
        return Err(TrainError::Invalid(format!(
            "loss gradient has length {}, expected {}",
            loss_grad.len(),
            params.p()
        )));
    }
    let cache = params.forward(user, product);
    let mut grads = params.zeroed();
    params.backward(&cache, loss_grad, &mut grads);
    Ok(grads)
}

/// Raw-scale prediction of the MLP pre-training head.
pub fn mlp_pretrain_predict(params: &MlpParams, user: usize, product: usize) -> f64 {
    params.head_forward(user, product).raw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingInit {
    Random,
    /// SVD factors of `R` and `H`.
    Svd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpHyperparams {
    pub k: usize,
    /// Layer output widths; empty means [`default_tower`].
    pub tower: Vec<usize>,
    pub embedding_init: EmbeddingInit,
    /// Standard deviation of the Gaussian weight initializer.
    pub init_std: f64,
    pub train: TrainSettings,
}

impl Default for MlpHyperparams {
    fn default() -> Self {
        Self {
            k: 256,
            tower: Vec::new(),
            embedding_init: EmbeddingInit::Random,
            init_std: INIT_STD,
            train: TrainSettings::default(),
        }
    }
}

impl MlpHyperparams {
    pub fn widths(&self) -> Vec<usize> {
        if self.tower.is_empty() {
            default_tower(self.k)
        } else {
            self.tower.clone()
        }
    }
}

/// Sum of absolute raw errors over `obs`, gradients added into `grads`.
pub(crate) fn mlp_mae_batch(params: &MlpParams, obs: &[PairTarget], grads: &mut MlpParams) -> f64 {
    let mut loss = 0.0;
    for t in obs {
        let cache = params.head_forward(t.user, t.product);
        loss += (cache.raw - t.raw).abs();
        params.head_backward(&cache, mae_grad(cache.raw, t.raw), grads);
    }
    loss
}

/// Trains an initialized branch end to end with MAE.
pub fn train_mlp(
    params: &mut MlpParams,
    store: &InteractionStore,
    val: Option<&InteractionStore>,
    settings: &TrainSettings,
) -> Result<TrainLog, TrainError> {
    let targets = pair_targets(store);
    let mut grad = |p: &MlpParams, obs: &[PairTarget], g: &mut MlpParams| mlp_mae_batch(p, obs, g);
    let mut train = |p: &MlpParams| raw_mae(store, |i, j| mlp_pretrain_predict(p, i, j));
    let mut val_fn =
        val.map(|v| move |p: &MlpParams| raw_mae(v, |i, j| mlp_pretrain_predict(p, i, j)));
    run_phase(
        params,
        settings,
        Phase {
            name: "mlp",
            observations: &targets,
            batch_grad: &mut grad,
            train_mae: &mut train,
            val_mae: val_fn
                .as_mut()
                .map(|f| f as &mut dyn FnMut(&MlpParams) -> f64),
            trainable: &|_| true,
        },
    )
}

/// Initialization followed by [`train_mlp`]. The regression bias starts at
/// the mean normalized training rating.
pub fn pretrain_mlp(
    store: &InteractionStore,
    val: Option<&InteractionStore>,
    hyper: &MlpHyperparams,
    rng: &mut impl Rng,
) -> Result<(MlpParams, TrainLog), TrainError> {
    if store.is_empty() {
        return Err(TrainError::Empty("mlp"));
    }
    let mut params = init_mlp_with_std(
        store.n_users(),
        store.n_products(),
        hyper.k,
        &hyper.widths(),
        hyper.init_std,
        rng,
    )?;
    if hyper.embedding_init == EmbeddingInit::Svd {
        params.embeddings_from_svd(store)?;
    }
    params.b_out = store.global_mean_raw().unwrap_or(3.0) / MAX_RATING as f64;
    let log = train_mlp(&mut params, store, val, &hyper.train)?;
    Ok((params, log))
}
