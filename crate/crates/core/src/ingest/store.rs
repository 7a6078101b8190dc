use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{normalize_rating, KeyIndex, ReviewLog, MAX_RATING};

/// `(user index, product index)`.
pub type PairKey = (usize, usize);

pub const STORE_FORMAT: &str = "dualrec-store";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed store file: {0}")]
    Format(String),
    #[error("invalid store contents: {0}")]
    Invalid(String),
}

/// One review in a product's timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub user: usize,
    pub unix_time: i64,
    pub helpful_yes: u32,
    pub votes_total: u32,
}

/// Sparse rating matrix `R` and reliability matrix `H`.
///
/// The observation sets are the key sets of the two maps, so `Ω` and `Ψ`
/// always agree with the stored entries. Ratings are kept on the normalized
/// scale `raw / 5`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionStore {
    users: KeyIndex,
    products: KeyIndex,
    ratings: BTreeMap<PairKey, f64>,
    reliability: BTreeMap<PairKey, f64>,
    timelines: Vec<Vec<TimelineEntry>>,
}

impl InteractionStore {
    /// Assembles a store from already-indexed parts, validating ranges.
    pub fn from_parts(
        users: KeyIndex,
        products: KeyIndex,
        ratings: BTreeMap<PairKey, f64>,
        reliability: BTreeMap<PairKey, f64>,
        timelines: Vec<Vec<TimelineEntry>>,
    ) -> Result<Self, StoreError> {
        let (n, m) = (users.len(), products.len());
        for (&(i, j), &r) in &ratings {
            if i >= n || j >= m {
                return Err(StoreError::Invalid(format!(
                    "rating key ({i}, {j}) out of range"
                )));
            }
            if !(r > 0.0 && r <= 1.0) {
                return Err(StoreError::Invalid(format!(
                    "rating {r} at ({i}, {j}) outside (0, 1]"
                )));
            }
        }
        for (&(i, j), &v) in &reliability {
            if i >= n || j >= m {
                return Err(StoreError::Invalid(format!(
                    "reliability key ({i}, {j}) out of range"
                )));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(StoreError::Invalid(format!(
                    "reliability {v} at ({i}, {j}) outside [0, 1]"
                )));
            }
        }
        if timelines.len() != m {
            return Err(StoreError::Invalid(format!(
                "{} timelines for {m} products",
                timelines.len()
            )));
        }
        for (j, tl) in timelines.iter().enumerate() {
            if tl.iter().any(|e| e.user >= n) {
                return Err(StoreError::Invalid(format!(
                    "timeline of product {j} names unknown user"
                )));
            }
            if tl.windows(2).any(|w| w[0].unix_time > w[1].unix_time) {
                return Err(StoreError::Invalid(format!(
                    "timeline of product {j} is not time-ordered"
                )));
            }
        }
        Ok(Self {
            users,
            products,
            ratings,
            reliability,
            timelines,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    pub fn users(&self) -> &KeyIndex {
        &self.users
    }

    pub fn products(&self) -> &KeyIndex {
        &self.products
    }

    pub fn ratings(&self) -> &BTreeMap<PairKey, f64> {
        &self.ratings
    }

    pub fn reliability(&self) -> &BTreeMap<PairKey, f64> {
        &self.reliability
    }

    /// Observed rating pairs, `Ω`.
    pub fn omega(&self) -> impl Iterator<Item = PairKey> + '_ {
        self.ratings.keys().copied()
    }

    /// Observed reliability pairs, `Ψ`.
    pub fn psi(&self) -> impl Iterator<Item = PairKey> + '_ {
        self.reliability.keys().copied()
    }

    pub fn rating(&self, user: usize, product: usize) -> Option<f64> {
        self.ratings.get(&(user, product)).copied()
    }

    /// Rating on the 1..5 scale.
    pub fn raw_rating(&self, user: usize, product: usize) -> Option<f64> {
        self.rating(user, product).map(|r| r * MAX_RATING as f64)
    }

    pub fn timelines(&self) -> &[Vec<TimelineEntry>] {
        &self.timelines
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    /// Mean rating on the raw scale, or `None` for an empty store.
    pub fn global_mean_raw(&self) -> Option<f64> {
        if self.ratings.is_empty() {
            return None;
        }
        let sum: f64 = self.ratings.values().sum();
        Some(sum / self.ratings.len() as f64 * MAX_RATING as f64)
    }

    pub fn user_rating_counts(&self) -> Vec<usize> {
        count_by(self.ratings.keys().map(|k| k.0), self.n_users())
    }

    pub fn product_rating_counts(&self) -> Vec<usize> {
        count_by(self.ratings.keys().map(|k| k.1), self.n_products())
    }

    pub fn user_reliability_counts(&self) -> Vec<usize> {
        count_by(self.reliability.keys().map(|k| k.0), self.n_users())
    }

    pub fn product_reliability_counts(&self) -> Vec<usize> {
        count_by(self.reliability.keys().map(|k| k.1), self.n_products())
    }

    /// Dense `n × m` copies of `R` and `H` with unobserved entries as 0.
    pub fn dense_ratings(&self) -> crate::linalg::DenseMatrix {
        dense_from(&self.ratings, self.n_users(), self.n_products())
    }

    pub fn dense_reliability(&self) -> crate::linalg::DenseMatrix {
        dense_from(&self.reliability, self.n_users(), self.n_products())
    }

    /// Replaces the reliability matrix. Keys must be rated pairs.
    pub fn set_reliability(&mut self, scores: BTreeMap<PairKey, f64>) -> Result<(), StoreError> {
        for (k, v) in &scores {
            if !self.ratings.contains_key(k) {
                return Err(StoreError::Invalid(format!(
                    "reliability for unrated pair {k:?}"
                )));
            }
            if !(0.0..=1.0).contains(v) {
                return Err(StoreError::Invalid(format!(
                    "reliability {v} outside [0, 1]"
                )));
            }
        }
        self.reliability = scores;
        Ok(())
    }

    /// Same index space, only the pairs accepted by `keep`. Timelines are
    /// filtered to the retained reviews.
    pub fn restrict(&self, mut keep: impl FnMut(PairKey) -> bool) -> InteractionStore {
        let ratings: BTreeMap<PairKey, f64> = self
            .ratings
            .iter()
            .filter(|(k, _)| keep(**k))
            .map(|(k, v)| (*k, *v))
            .collect();
        let reliability = self
            .reliability
            .iter()
            .filter(|(k, _)| ratings.contains_key(k))
            .map(|(k, v)| (*k, *v))
            .collect();
        let timelines = self
            .timelines
            .iter()
            .enumerate()
            .map(|(j, tl)| {
                tl.iter()
                    .filter(|e| ratings.contains_key(&(e.user, j)))
                    .copied()
                    .collect()
            })
            .collect();
        InteractionStore {
            users: self.users.clone(),
            products: self.products.clone(),
            ratings,
            reliability,
            timelines,
        }
    }

    pub fn write_json(&self, w: impl Write) -> Result<(), StoreError> {
        let file = StoreFile {
            format: STORE_FORMAT.to_owned(),
            version: STORE_VERSION,
            n_users: self.n_users(),
            n_products: self.n_products(),
            users: self.users.keys().to_vec(),
            products: self.products.keys().to_vec(),
            ratings: self.ratings.iter().map(|(k, v)| (k.0, k.1, *v)).collect(),
            reliability: self
                .reliability
                .iter()
                .map(|(k, v)| (k.0, k.1, *v))
                .collect(),
            timelines: self.timelines.clone(),
        };
        serde_json::to_writer(w, &file).map_err(|e| StoreError::Format(e.to_string()))
    }

    pub fn read_json(r: impl Read) -> Result<Self, StoreError> {
        let file: StoreFile =
            serde_json::from_reader(r).map_err(|e| StoreError::Format(e.to_string()))?;
        if file.format != STORE_FORMAT {
            return Err(StoreError::Format(format!(
                "unexpected format tag {:?}",
                file.format
            )));
        }
        if file.version != STORE_VERSION {
            return Err(StoreError::Format(format!(
                "unsupported version {}",
                file.version
            )));
        }
        if file.users.len() != file.n_users || file.products.len() != file.n_products {
            return Err(StoreError::Format(
                "dimension header disagrees with index maps".into(),
            ));
        }
        let users = KeyIndex::from_keys(file.users).map_err(StoreError::Format)?;
        let products = KeyIndex::from_keys(file.products).map_err(StoreError::Format)?;
        let collect = |v: Vec<(usize, usize, f64)>| -> BTreeMap<PairKey, f64> {
            v.into_iter().map(|(i, j, x)| ((i, j), x)).collect()
        };
        let ratings = collect(file.ratings);
        let reliability = collect(file.reliability);
        if reliability.keys().any(|k| !ratings.contains_key(k)) {
            return Err(StoreError::Invalid("reliability for unrated pair".into()));
        }
        Self::from_parts(users, products, ratings, reliability, file.timelines)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_json(&mut w)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::read_json(BufReader::new(File::open(path)?))
    }
}

/// On-disk layout of a store: a format tag and version, dimension counts,
/// both index maps, then `[user, product, value]` triples and per-product
/// timelines.
#[derive(Serialize, Deserialize)]
struct StoreFile {
    format: String,
    version: u32,
    n_users: usize,
    n_products: usize,
    users: Vec<String>,
    products: Vec<String>,
    ratings: Vec<(usize, usize, f64)>,
    reliability: Vec<(usize, usize, f64)>,
    timelines: Vec<Vec<TimelineEntry>>,
}

fn count_by(idx: impl Iterator<Item = usize>, n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for i in idx {
        counts[i] += 1;
    }
    counts
}

fn dense_from(map: &BTreeMap<PairKey, f64>, n: usize, m: usize) -> crate::linalg::DenseMatrix {
    let mut d = crate::linalg::DenseMatrix::zeros(n, m);
    for (&(i, j), &v) in map {
        d.set(i, j, v);
    }
    d
}

/// Builds the interaction store from parsed reviews.
///
/// Duplicate `(user, product)` reviews keep the one with the latest
/// timestamp; on equal timestamps the later input line wins. Each product's
/// timeline is sorted by time, ties in input order.
pub fn build_store(
    log: &ReviewLog,
    reliability: Option<&HashMap<PairKey, f64>>,
) -> Result<InteractionStore, StoreError> {
    let mut latest: HashMap<PairKey, usize> = HashMap::with_capacity(log.records.len());
    for (pos, rec) in log.records.iter().enumerate() {
        let key = (rec.user, rec.product);
        match latest.get(&key) {
            Some(&prev) if log.records[prev].unix_time > rec.unix_time => {}
            _ => {
                latest.insert(key, pos);
            }
        }
    }
    let mut kept: Vec<usize> = latest.values().copied().collect();
    kept.sort_unstable();

    let mut ratings = BTreeMap::new();
    let mut timelines: Vec<Vec<(i64, usize, TimelineEntry)>> = vec![Vec::new(); log.products.len()];
    for &pos in &kept {
        let rec = &log.records[pos];
        let r = normalize_rating(rec.rating).map_err(|e| StoreError::Invalid(e.to_string()))?;
        ratings.insert((rec.user, rec.product), r);
        timelines[rec.product].push((
            rec.unix_time,
            pos,
            TimelineEntry {
                user: rec.user,
                unix_time: rec.unix_time,
                helpful_yes: rec.helpful_yes,
                votes_total: rec.votes_total,
            },
        ));
    }
    let timelines = timelines
        .into_iter()
        .map(|mut tl| {
            tl.sort_by_key(|(t, pos, _)| (*t, *pos));
            tl.into_iter().map(|(_, _, e)| e).collect()
        })
        .collect();

    let mut store = InteractionStore::from_parts(
        log.users.clone(),
        log.products.clone(),
        ratings,
        BTreeMap::new(),
        timelines,
    )?;
    if let Some(rel) = reliability {
        store.set_reliability(rel.iter().map(|(k, v)| (*k, *v)).collect())?;
    }
    Ok(store)
}
