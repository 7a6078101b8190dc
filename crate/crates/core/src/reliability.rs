//! Per-review reliability from helpfulness votes and reading exposure.
//!
//! For each product the reviews are ordered by time. Three normalized
//! scores are computed over that ordering:
//!
//! * `h`: squared helpful votes over total votes, normalized per product;
//! * `most`: how often later buyers would meet the review among the most
//!   recent ones, `Σ_{s=1}^{n'-i} 1/s²`, normalized;
//! * `top`: exposure through the helpfulness ranking, `(n'-i) / o²`,
//!   normalized, where `o` is the review's helpfulness rank.
//!
//! `d = α·top + (1-α)·most` and the reliability is `(h + d) / 2`.
//! Any normalization whose denominator is zero yields zeros.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{InteractionStore, PairKey, TimelineEntry};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReliabilityError {
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("empty timeline for product {0}")]
    EmptyTimeline(usize),
    #[error("ranks are not a permutation of 1..={0}")]
    Ranks(usize),
}

/// What divides the squared helpful count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HelpfulDenominator {
    /// Total votes on the same review.
    #[default]
    TotalVotes,
    /// Largest helpful count on any review of the product, for data that
    /// records helpful votes without totals.
    MaxHelpful,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityConfig {
    pub alpha: f64,
    pub threshold: f64,
    pub denominator: HelpfulDenominator,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            threshold: DEFAULT_THRESHOLD,
            denominator: HelpfulDenominator::TotalVotes,
        }
    }
}

/// Reviews of one product in time order. Position `i` (0-based here) is the
/// `(i+1)`-th reviewer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductTimeline {
    pub product: usize,
    pub reviewers: Vec<usize>,
    pub unix_times: Vec<i64>,
    /// `(helpful_yes, votes_total)` per review.
    pub votes: Vec<(u32, u32)>,
    /// Helpfulness rank per review, 1 = most helpful.
    pub ranks: Vec<usize>,
}

impl ProductTimeline {
    /// Builds a timeline from time-ordered entries and assigns ranks by
    /// descending helpfulness; ties go to the earlier review, then to the
    /// lower reviewer index.
    pub fn new(
        product: usize,
        entries: &[TimelineEntry],
        denominator: HelpfulDenominator,
    ) -> Result<Self, ReliabilityError> {
        if entries.is_empty() {
            return Err(ReliabilityError::EmptyTimeline(product));
        }
        let mut tl = ProductTimeline {
            product,
            reviewers: entries.iter().map(|e| e.user).collect(),
            unix_times: entries.iter().map(|e| e.unix_time).collect(),
            votes: entries
                .iter()
                .map(|e| (e.helpful_yes, e.votes_total))
                .collect(),
            ranks: Vec::new(),
        };
        let h = helpfulness_scores(&tl, denominator);
        tl.ranks = helpfulness_ranks(&tl, &h);
        Ok(tl)
    }

    /// Timeline with caller-supplied ranks.
    pub fn with_ranks(
        product: usize,
        reviewers: Vec<usize>,
        votes: Vec<(u32, u32)>,
        ranks: Vec<usize>,
    ) -> Result<Self, ReliabilityError> {
        let n = reviewers.len();
        if n == 0 {
            return Err(ReliabilityError::EmptyTimeline(product));
        }
        let mut seen = vec![false; n];
        for &r in &ranks {
            if r == 0 || r > n || std::mem::replace(&mut seen[r - 1], true) {
                return Err(ReliabilityError::Ranks(n));
            }
        }
        if ranks.len() != n || votes.len() != n {
            return Err(ReliabilityError::Ranks(n));
        }
        Ok(ProductTimeline {
            product,
            unix_times: (0..n as i64).collect(),
            reviewers,
            votes,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.reviewers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviewers.is_empty()
    }
}

fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.into_iter().map(|x| x / total).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Normalized helpfulness `h` per review.
pub fn helpfulness_scores(tl: &ProductTimeline, denominator: HelpfulDenominator) -> Vec<f64> {
    let max_yes = tl.votes.iter().map(|v| v.0).max().unwrap_or(0);
    let l = tl
        .votes
        .iter()
        .map(|&(yes, total)| {
            let denom = match denominator {
                HelpfulDenominator::TotalVotes => total,
                HelpfulDenominator::MaxHelpful => max_yes,
            };
            if denom == 0 {
                0.0
            } else {
                let yes = yes as f64;
                yes * yes / denom as f64
            }
        })
        .collect();
    normalize(l)
}

fn helpfulness_ranks(tl: &ProductTimeline, h: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tl.len()).collect();
    order.sort_by(|&a, &b| {
        h[b].total_cmp(&h[a])
            .then(tl.unix_times[a].cmp(&tl.unix_times[b]))
            .then(tl.reviewers[a].cmp(&tl.reviewers[b]))
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; tl.len()];
    for (rank, pos) in order.into_iter().enumerate() {
        ranks[pos] = rank + 1;
    }
    ranks
}

/// Unnormalized recency exposure `c_i = Σ_{s=1}^{n-i} 1/s²` for 1-based
/// positions `i = 1..=n`.
pub fn recency_exposure(n: usize) -> Vec<f64> {
    // partial[k] = Σ_{s=1}^{k} 1/s², summed in increasing s.
    let mut partial = Vec::with_capacity(n);
    let mut acc = 0.0;
    partial.push(acc);
    for s in 1..n {
        let s = s as f64;
        acc += 1.0 / (s * s);
        partial.push(acc);
    }
    (1..=n).map(|i| partial[n - i]).collect()
}

pub fn most_recent_scores(tl: &ProductTimeline) -> Vec<f64> {
    normalize(recency_exposure(tl.len()))
}

pub fn top_ranking_scores(tl: &ProductTimeline) -> Vec<f64> {
    let n = tl.len();
    let q = tl
        .ranks
        .iter()
        .enumerate()
        .map(|(pos, &o)| {
            let o = o as f64;
            (1.0 / (o * o)) * (n - (pos + 1)) as f64
        })
        .collect();
    normalize(q)
}

pub fn combined_score(top: f64, most: f64, alpha: f64) -> Result<f64, ReliabilityError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ReliabilityError::Alpha(alpha));
    }
    Ok(alpha * top + (1.0 - alpha) * most)
}

pub fn reliability_score(h: f64, d: f64) -> f64 {
    (h + d) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReliabilityLabel {
    Reliable,
    NotReliable,
}

impl ReliabilityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ReliabilityLabel::Reliable => "reliable",
            ReliabilityLabel::NotReliable => "not-reliable",
        }
    }
}

pub fn classify_reviewer(rel: f64, threshold: f64) -> ReliabilityLabel {
    if rel >= threshold {
        ReliabilityLabel::Reliable
    } else {
        ReliabilityLabel::NotReliable
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBreakdown {
    pub h: f64,
    pub most: f64,
    pub top: f64,
    pub d: f64,
    pub rel: f64,
    pub alpha: f64,
}

/// All scores for one product, in timeline order.
pub fn score_timeline(
    tl: &ProductTimeline,
    cfg: &ReliabilityConfig,
) -> Result<Vec<ReliabilityBreakdown>, ReliabilityError> {
    let h = helpfulness_scores(tl, cfg.denominator);
    let most = most_recent_scores(tl);
    let top = top_ranking_scores(tl);
    h.iter()
        .zip(&most)
        .zip(&top)
        .map(|((&h, &most), &top)| {
            let d = combined_score(top, most, cfg.alpha)?;
            Ok(ReliabilityBreakdown {
                h,
                most,
                top,
                d,
                rel: reliability_score(h, d),
                alpha: cfg.alpha,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredReview {
    pub user: usize,
    pub product: usize,
    pub breakdown: ReliabilityBreakdown,
    pub label: ReliabilityLabel,
}

/// Scores every review in the store, product by product. Output is ordered
/// by product index, then timeline position.
pub fn score_store(
    store: &InteractionStore,
    cfg: &ReliabilityConfig,
) -> Result<Vec<ScoredReview>, ReliabilityError> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(ReliabilityError::Alpha(cfg.alpha));
    }
    let per_product: Vec<Vec<ScoredReview>> = store
        .timelines()
        .par_iter()
        .enumerate()
        .filter(|(_, entries)| !entries.is_empty())
        .map(|(j, entries)| {
            let tl = ProductTimeline::new(j, entries, cfg.denominator)?;
            let scores = score_timeline(&tl, cfg)?;
            Ok(tl
                .reviewers
                .iter()
                .zip(scores)
                .map(|(&user, breakdown)| ScoredReview {
                    user,
                    product: j,
                    breakdown,
                    label: classify_reviewer(breakdown.rel, cfg.threshold),
                })
                .collect())
        })
        .collect::<Result<_, ReliabilityError>>()?;
    Ok(per_product.into_iter().flatten().collect())
}

pub fn reliability_map(scored: &[ScoredReview]) -> BTreeMap<PairKey, f64> {
    scored
        .iter()
        .map(|s| ((s.user, s.product), s.breakdown.rel))
        .collect()
}

/// Writes `user,product,h,most,top,d,rel,label` rows with decoded keys.
pub fn write_breakdown_csv(
    w: impl Write,
    store: &InteractionStore,
    scored: &[ScoredReview],
) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["user", "product", "h", "most", "top", "d", "rel", "label"])?;
    for s in scored {
        let b = &s.breakdown;
        out.write_record([
            store.users().key(s.user).unwrap_or_default(),
            store.products().key(s.product).unwrap_or_default(),
            &b.h.to_string(),
            &b.most.to_string(),
            &b.top.to_string(),
            &b.d.to_string(),
            &b.rel.to_string(),
            s.label.as_str(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
