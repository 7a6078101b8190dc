//! Small dense kernels used by the factor models: a row-major matrix type,
//! truncated SVD, activations, Adam and central-difference gradients.
//!
//! Everything is `f64`. Nothing here spawns threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("requested rank {k} exceeds min({rows}, {cols})")]
    RankTooLarge { k: usize, rows: usize, cols: usize },
    #[error("SVD did not converge after {sweeps} Jacobi sweeps")]
    SvdNoConvergence { sweeps: usize },
}

fn shape_err(expected: impl Into<String>, got: impl Into<String>) -> LinalgError {
    LinalgError::Shape {
        expected: expected.into(),
        got: got.into(),
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(shape_err(
                format!("{} entries for {rows}x{cols}", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from `Normal(0, std^2)`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(shape_err(
                format!("left cols == right rows ({})", self.cols),
                format!("right rows {}", other.rows),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `out = self · x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// `out = selfᵀ · x`.
    pub fn mul_vec_transposed(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, xr) in x.iter().enumerate() {
            if *xr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * xr;
            }
        }
    }

    /// `self += scale · a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, ar) in a.iter().enumerate() {
            let s = ar * scale;
            if s == 0.0 {
                continue;
            }
            for (o, bc) in self.row_mut(r).iter_mut().zip(b) {
                *o += s * bc;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn check_finite(&self) -> Result<(), LinalgError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(LinalgError::NonFinite {
                row: p / self.cols.max(1),
                col: p % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    // Two branches keep exp() from overflowing for large |x|.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Subgradient of ReLU; taken as 0 at the kink.
#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Rank-`K` singular value decomposition `A ≈ U · diag(S) · Vt`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `n × K`, orthonormal columns.
    pub u: DenseMatrix,
    /// Non-negative, non-increasing.
    pub s: Vec<f64>,
    /// `K × m`, orthonormal rows.
    pub vt: DenseMatrix,
}

impl Svd {
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                let v = us.get(r, c) * s;
                us.set(r, c, v);
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;
/// Above this size, truncated SVD switches to a randomized range finder.
pub const EXACT_SVD_MAX_DIM: usize = 256;
const RANDOMIZED_OVERSAMPLE: usize = 10;
const RANDOMIZED_POWER_ITERS: usize = 4;
const SVD_SEED: u64 = 0x5eed_5bd0;

/// Truncated SVD keeping the `k` leading singular triplets.
///
/// Small problems (min dimension up to [`EXACT_SVD_MAX_DIM`]) use a full
/// one-sided Jacobi decomposition. Larger ones project onto a randomized
/// subspace of dimension `k + 10` with a fixed seed, then run Jacobi on the
/// projected matrix. Singular vectors paired with zero singular values are
/// completed to an orthonormal set.
pub fn truncated_svd(a: &DenseMatrix, k: usize) -> Result<Svd, LinalgError> {
    let (n, m) = a.shape();
    if k > n.min(m) {
        return Err(LinalgError::RankTooLarge {
            k,
            rows: n,
            cols: m,
        });
    }
    a.check_finite()?;
    let min_dim = n.min(m);
    if min_dim <= EXACT_SVD_MAX_DIM || k + RANDOMIZED_OVERSAMPLE >= min_dim {
        let full = jacobi_svd(a)?;
        Ok(truncate(full, k))
    } else {
        randomized_svd(a, k)
    }
}

fn truncate(svd: Svd, k: usize) -> Svd {
    let n = svd.u.rows();
    let m = svd.vt.cols();
    let u = DenseMatrix::from_fn(n, k, |r, c| svd.u.get(r, c));
    let vt = DenseMatrix::from_fn(k, m, |r, c| svd.vt.get(r, c));
    Svd {
        u,
        s: svd.s[..k].to_vec(),
        vt,
    }
}

/// Full thin SVD by one-sided Jacobi rotations on the columns of the taller
/// orientation. Returns `min(n, m)` triplets sorted by singular value.
fn jacobi_svd(a: &DenseMatrix) -> Result<Svd, LinalgError> {
    let (n, m) = a.shape();
    let transposed = n < m;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (rows, cols) = work.shape();

    // Column-major copies: `g` is rotated towards orthogonal columns, `v`
    // accumulates the rotations.
    let mut g: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| work.get(r, c)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..cols).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = f64::EPSILON * rows as f64;
    let mut converged = cols < 2;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut g, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence { sweeps });
    }

    let mut order: Vec<(usize, f64)> = g
        .iter()
        .enumerate()
        .map(|(c, col)| (c, dot(col, col).sqrt()))
        .collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let sigma_max = order.first().map(|o| o.1).unwrap_or(0.0);
    let zero_tol = sigma_max * f64::EPSILON * (rows.max(cols) as f64) * 8.0;
    let mut s = Vec::with_capacity(cols);
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for &(c, sigma) in &order {
        right.push(v[c].clone());
        if sigma > zero_tol && sigma > 0.0 {
            s.push(sigma);
            left.push(g[c].iter().map(|x| x / sigma).collect());
        } else {
            s.push(0.0);
            left.push(vec![0.0; rows]);
        }
    }
    complete_orthonormal(&mut left, &s);

    let (u_cols, v_cols) = if transposed {
        (right, left)
    } else {
        (left, right)
    };
    let k = s.len();
    let u = DenseMatrix::from_fn(n, k, |r, c| u_cols[c][r]);
    let vt = DenseMatrix::from_fn(k, m, |r, c| v_cols[r][c]);
    Ok(Svd { u, s, vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Replaces the vectors paired with zero singular values by unit vectors
/// orthogonal to every other vector in the set.
fn complete_orthonormal(vectors: &mut [Vec<f64>], s: &[f64]) {
    let dim = vectors.first().map(|v| v.len()).unwrap_or(0);
    for idx in 0..vectors.len() {
        if s[idx] > 0.0 {
            continue;
        }
        let mut basis = 0;
        loop {
            assert!(basis < dim, "cannot complete orthonormal basis");
            let mut cand = vec![0.0; dim];
            cand[basis] = 1.0;
            basis += 1;
            for (j, other) in vectors.iter().enumerate() {
                if j == idx || (s[j] == 0.0 && j > idx) {
                    continue;
                }
                let proj = dot(&cand, other);
                cand.iter_mut().zip(other).for_each(|(c, o)| *c -= proj * o);
            }
            // Second pass for numerical orthogonality.
            for (j, other) in vectors.iter().enumerate() {
                if j == idx || (s[j] == 0.0 && j > idx) {
                    continue;
                }
                let proj = dot(&cand, other);
                cand.iter_mut().zip(other).for_each(|(c, o)| *c -= proj * o);
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-6 {
                cand.iter_mut().for_each(|c| *c /= norm);
                vectors[idx] = cand;
                break;
            }
        }
    }
}

/// Orthonormalizes the columns of `m` in place (modified Gram-Schmidt, two
/// passes). Columns numerically dependent on earlier ones become zero.
fn orthonormalize_columns(m: &mut DenseMatrix) {
    let (rows, cols) = m.shape();
    let mut colv: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| m.get(r, c)).collect())
        .collect();
    for c in 0..cols {
        let start = dot(&colv[c], &colv[c]).sqrt();
        for _ in 0..2 {
            for prev in 0..c {
                let (lo, hi) = colv.split_at_mut(c);
                let proj = dot(&hi[0], &lo[prev]);
                hi[0]
                    .iter_mut()
                    .zip(&lo[prev])
                    .for_each(|(x, p)| *x -= proj * p);
            }
        }
        let norm = dot(&colv[c], &colv[c]).sqrt();
        if norm > 1e-10 * start && norm > 0.0 {
            colv[c].iter_mut().for_each(|x| *x /= norm);
        } else {
            colv[c].fill(0.0);
        }
    }
    for (c, col) in colv.iter().enumerate() {
        for (r, x) in col.iter().enumerate() {
            m.set(r, c, *x);
        }
    }
}

fn randomized_svd(a: &DenseMatrix, k: usize) -> Result<Svd, LinalgError> {
    let (_, m) = a.shape();
    let l = k + RANDOMIZED_OVERSAMPLE;
    let mut rng = ChaCha8Rng::seed_from_u64(SVD_SEED);
    let omega = DenseMatrix::random_normal(m, l, 1.0, &mut rng);
    let at = a.transpose();
    let mut q = a.matmul(&omega)?;
    orthonormalize_columns(&mut q);
    for _ in 0..RANDOMIZED_POWER_ITERS {
        let mut z = at.matmul(&q)?;
        orthonormalize_columns(&mut z);
        q = a.matmul(&z)?;
        orthonormalize_columns(&mut q);
    }
    // B = Qᵀ A is l × m; its SVD lifts back through Q.
    let b = q.transpose().matmul(a)?;
    let small = jacobi_svd(&b)?;
    let small = truncate(small, k);
    let lifted = q.matmul(&small.u)?;
    // Directions of zero singular values may land on dropped columns of Q.
    let mut u_cols: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..lifted.rows()).map(|r| lifted.get(r, c)).collect())
        .collect();
    let marks: Vec<f64> = u_cols
        .iter()
        .zip(&small.s)
        .map(|(col, &s)| {
            if s > 0.0 && dot(col, col) > 0.5 {
                s
            } else {
                0.0
            }
        })
        .collect();
    complete_orthonormal(&mut u_cols, &marks);
    let u = DenseMatrix::from_fn(lifted.rows(), k, |r, c| u_cols[c][r]);
    Ok(Svd {
        u,
        s: small.s,
        vt: small.vt,
    })
}

/// Per-parameter-block Adam state with the usual bias-corrected update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 0.001;

    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
) -> Result<(), LinalgError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            format!("{} parameters", state.m.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}
