use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::experiment::HarnessError;
use crate::ingest::{InteractionStore, KeyIndex, PairKey, TimelineEntry, MAX_RATING};
use crate::linalg::{dot, sigmoid, DenseMatrix};

/// Parameters of the low-rank generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_products: usize,
    pub true_rank: usize,
    /// Probability that a pair is observed.
    pub density: f64,
    /// Gaussian noise on the normalized rating and on reliability.
    pub noise_std: f64,
    /// Standard deviation of the logits `u_i·v_j`.
    pub signal_std: f64,
    /// Round raw ratings to whole stars.
    pub quantize: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 50,
            n_products: 40,
            true_rank: 2,
            density: 0.3,
            noise_std: 0.05,
            signal_std: 2.0,
            quantize: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_users == 0 || self.n_products == 0 {
            return Err(HarnessError::Config(
                "synthetic data needs users and products".into(),
            ));
        }
        if self.true_rank == 0 || self.true_rank > self.n_users.min(self.n_products) {
            return Err(HarnessError::Config(format!(
                "true_rank {} must lie in 1..={}",
                self.true_rank,
                self.n_users.min(self.n_products)
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(HarnessError::Config(format!(
                "density {} outside (0, 1]",
                self.density
            )));
        }
        if !(self.noise_std >= 0.0 && self.signal_std > 0.0) {
            return Err(HarnessError::Config(
                "noise_std must be >= 0 and signal_std > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Factors the data was drawn from; row `i` is an entity's vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub users: DenseMatrix,
    pub products: DenseMatrix,
    pub reliability_products: DenseMatrix,
}

impl GroundTruth {
    /// Noise-free raw rating `clamp(5·g(u_i·v_j), 1, 5)`.
    pub fn raw_rating(&self, user: usize, product: usize) -> f64 {
        (MAX_RATING as f64 * sigmoid(dot(self.users.row(user), self.products.row(product))))
            .clamp(1.0, MAX_RATING as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub store: InteractionStore,
    pub truth: GroundTruth,
}

/// Draws rank-`r` user, product and reliability factors, observes each pair
/// with probability `density`, and emits
///
/// * rating `clamp(round(5·(g(u·v) + ε)), 1, 5)` (rounding only
///   when `quantize`), `ε ~ N(0, noise_std²)`;
/// * reliability `clamp(g(u·q) + ε', 0.01, 0.99)` sharing the user factors;
/// * a timeline entry with a random timestamp and votes whose helpful share
///   follows the reliability.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let factor_std = (spec.signal_std / (spec.true_rank as f64).sqrt()).sqrt();
    let users = DenseMatrix::random_normal(spec.n_users, spec.true_rank, factor_std, &mut rng);
    let products =
        DenseMatrix::random_normal(spec.n_products, spec.true_rank, factor_std, &mut rng);
    let reliability_products =
        DenseMatrix::random_normal(spec.n_products, spec.true_rank, factor_std, &mut rng);
    let truth = GroundTruth {
        users,
        products,
        reliability_products,
    };
    let noise =
        Normal::new(0.0, spec.noise_std).map_err(|e| HarnessError::Config(e.to_string()))?;
    let max = MAX_RATING as f64;

    let mut ratings = BTreeMap::<PairKey, f64>::new();
    let mut reliability = BTreeMap::<PairKey, f64>::new();
    let mut timelines = vec![Vec::new(); spec.n_products];
    for i in 0..spec.n_users {
        for j in 0..spec.n_products {
            if !rng.random_bool(spec.density) {
                continue;
            }
            let norm =
                sigmoid(dot(truth.users.row(i), truth.products.row(j))) + noise.sample(&mut rng);
            let mut raw = max * norm;
            if spec.quantize {
                raw = raw.round();
            }
            let raw = raw.clamp(1.0, max);
            ratings.insert((i, j), raw / max);

            let rel = (sigmoid(dot(truth.users.row(i), truth.reliability_products.row(j)))
                + noise.sample(&mut rng))
            .clamp(0.01, 0.99);
            reliability.insert((i, j), rel);

            let votes_total: u32 = rng.random_range(0..=20);
            timelines[j].push(TimelineEntry {
                user: i,
                unix_time: rng.random_range(1_000_000_000..1_400_000_000),
                helpful_yes: (votes_total as f64 * rel).round() as u32,
                votes_total,
            });
        }
    }
    for tl in &mut timelines {
        tl.sort_by_key(|e| (e.unix_time, e.user));
    }
    let store = InteractionStore::from_parts(
        KeyIndex::numbered("U", spec.n_users),
        KeyIndex::numbered("P", spec.n_products),
        ratings,
        reliability,
        timelines,
    )?;
    Ok(SyntheticData { store, truth })
}

#[derive(Serialize)]
struct ReviewLine<'a> {
    #[serde(rename = "reviewerID")]
    reviewer_id: &'a str,
    asin: &'a str,
    overall: f64,
    helpful: [u32; 2],
    #[serde(rename = "unixReviewTime")]
    unix_review_time: i64,
}

/// Writes the store's reviews as line-delimited review JSON, product by
/// product in timeline order. Ratings must be whole stars.
pub fn write_reviews_jsonl(
    store: &InteractionStore,
    mut w: impl Write,
) -> Result<(), HarnessError> {
    for (j, tl) in store.timelines().iter().enumerate() {
        for e in tl {
            let raw = store.raw_rating(e.user, j).ok_or_else(|| {
                HarnessError::Config(format!("timeline pair ({}, {j}) has no rating", e.user))
            })?;
            let overall = raw.round();
            if (raw - overall).abs() > 1e-9 {
                return Err(HarnessError::Config(format!(
                    "rating {raw} is not a whole star; generate with quantize"
                )));
            }
            let line = ReviewLine {
                reviewer_id: store.users().key(e.user).unwrap_or_default(),
                asin: store.products().key(j).unwrap_or_default(),
                overall,
                helpful: [e.helpful_yes, e.votes_total],
                unix_review_time: e.unix_time,
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| HarnessError::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}
