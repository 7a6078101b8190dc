//! Error and ranking metrics over raw-scale predictions.
//!
//! Ranking metrics group test pairs by user. Within a user, items are ranked
//! by predicted rating descending with ties broken by ascending product
//! index. An item is relevant when its true rating is at least
//! [`RELEVANCE_THRESHOLD`]; it is predicted relevant when its prediction is.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RELEVANCE_THRESHOLD: f64 = 3.0;
pub const DEFAULT_CUTOFFS: [usize; 2] = [5, 10];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction and truth lengths differ ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no pairs to evaluate")]
    Empty,
    #[error("cutoff must be at least 1")]
    Cutoff,
}

fn check(pred: &[f64], truth: &[f64]) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let sae: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sae / pred.len() as f64)
}

/// `2PR/(P+R)`, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredItem {
    pub product: usize,
    pub pred: f64,
    pub truth: f64,
}

/// One user's test items.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserItems {
    pub user: usize,
    pub items: Vec<ScoredItem>,
}

impl UserItems {
    /// Items in ranking order.
    pub fn ranked(&self) -> Vec<ScoredItem> {
        let mut v = self.items.clone();
        v.sort_by(|a, b| b.pred.total_cmp(&a.pred).then(a.product.cmp(&b.product)));
        v
    }

    fn relevant_count(&self) -> usize {
        self.items.iter().filter(|it| is_relevant(it.truth)).count()
    }
}

fn is_relevant(rating: f64) -> bool {
    rating >= RELEVANCE_THRESHOLD
}

/// Groups `(user, product, pred, truth)` rows by user, users ascending.
pub fn group_by_user(rows: &[(usize, usize, f64, f64)]) -> Vec<UserItems> {
    let mut map: BTreeMap<usize, Vec<ScoredItem>> = BTreeMap::new();
    for &(user, product, pred, truth) in rows {
        map.entry(user).or_default().push(ScoredItem {
            product,
            pred,
            truth,
        });
    }
    map.into_iter()
        .map(|(user, items)| UserItems { user, items })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision and recall of one user's predicted-relevant set `pre`.
fn user_pr(pre: &[ScoredItem], orig: usize) -> (f64, f64) {
    let hits = pre.iter().filter(|it| is_relevant(it.truth)).count() as f64;
    let p = if pre.is_empty() {
        0.0
    } else {
        hits / pre.len() as f64
    };
    let r = if orig == 0 { 0.0 } else { hits / orig as f64 };
    (p, r)
}

fn averaged(users: &[UserItems], pre_of: impl Fn(&UserItems) -> Vec<ScoredItem>) -> Classification {
    if users.is_empty() {
        return Classification {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let (mut ps, mut rs) = (0.0, 0.0);
    for u in users {
        let (p, r) = user_pr(&pre_of(u), u.relevant_count());
        ps += p;
        rs += r;
    }
    let n = users.len() as f64;
    let (precision, recall) = (ps / n, rs / n);
    Classification {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// User-averaged precision and recall with `Pre = {r̂ ≥ 3}` and
/// `Orig = {r ≥ 3}`. An empty `Pre` (resp. `Orig`) contributes 0 precision
/// (resp. recall).
pub fn classification_metrics(users: &[UserItems]) -> Classification {
    averaged(users, |u| {
        u.items
            .iter()
            .copied()
            .filter(|it| is_relevant(it.pred))
            .collect()
    })
}

/// Precision/recall restricted to the top `t` ranked items of each user;
/// recall is still relative to the full `Orig`.
pub fn topt_metrics(users: &[UserItems], t: usize) -> Result<Classification, MetricError> {
    if t == 0 {
        return Err(MetricError::Cutoff);
    }
    Ok(averaged(users, |u| {
        u.ranked()
            .into_iter()
            .take(t)
            .filter(|it| is_relevant(it.pred))
            .collect()
    }))
}

/// Average precision of one user; 0 without relevant items.
pub fn average_precision(user: &UserItems) -> f64 {
    let orig = user.relevant_count();
    if orig == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, it) in user.ranked().iter().enumerate() {
        if is_relevant(it.truth) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    sum / orig as f64
}

pub fn map(users: &[UserItems]) -> f64 {
    if users.is_empty() {
        return 0.0;
    }
    users.iter().map(average_precision).sum::<f64>() / users.len() as f64
}

/// Gain used in the DCG numerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NdcgGain {
    /// `2^r − 1` of the true rating, placed by predicted rank.
    #[default]
    TrueRating,
    /// `2^r̂ − 1` of the prediction; can exceed 1 after normalization.
    PredictedRating,
}

fn gain(r: f64) -> f64 {
    r.exp2() - 1.0
}

fn discount(rank: usize) -> f64 {
    (1.0 + rank as f64).log2()
}

/// DCG of `gains` listed in rank order (rank 1 first).
pub fn dcg(gains: &[f64]) -> f64 {
    gains
        .iter()
        .enumerate()
        .map(|(i, g)| g / discount(i + 1))
        .sum()
}

pub fn ndcg_user(user: &UserItems, variant: NdcgGain) -> f64 {
    if user.items.len() <= 1 {
        return 1.0;
    }
    let ranked = user.ranked();
    let numer: Vec<f64> = ranked
        .iter()
        .map(|it| match variant {
            NdcgGain::TrueRating => gain(it.truth),
            NdcgGain::PredictedRating => gain(it.pred),
        })
        .collect();
    let mut ideal: Vec<f64> = user.items.iter().map(|it| gain(it.truth)).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let z = dcg(&ideal);
    if z == 0.0 {
        return 0.0;
    }
    dcg(&numer) / z
}

pub fn ndcg(users: &[UserItems], variant: NdcgGain) -> f64 {
    if users.is_empty() {
        return 0.0;
    }
    users.iter().map(|u| ndcg_user(u, variant)).sum::<f64>() / users.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffF1 {
    pub t: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map: f64,
    pub ndcg: f64,
    pub f1_at: Vec<CutoffF1>,
    pub users: usize,
    pub pairs: usize,
}

/// Full report from `(user, product, pred, truth)` rows on the raw scale.
pub fn evaluate_rows(
    rows: &[(usize, usize, f64, f64)],
    cutoffs: &[usize],
    gain: NdcgGain,
) -> Result<EvalReport, MetricError> {
    let pred: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let users = group_by_user(rows);
    let class = classification_metrics(&users);
    let f1_at = cutoffs
        .iter()
        .map(|&t| topt_metrics(&users, t).map(|c| CutoffF1 { t, f1: c.f1 }))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        rmse: rmse(&pred, &truth)?,
        mae: mae(&pred, &truth)?,
        precision: class.precision,
        recall: class.recall,
        f1: class.f1,
        map: map(&users),
        ndcg: ndcg(&users, gain),
        f1_at,
        users: users.len(),
        pairs: rows.len(),
    })
}

impl EvalReport {
    /// Field-wise arithmetic mean; counts are summed. Cutoffs must agree.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let f1_at = first
            .f1_at
            .iter()
            .enumerate()
            .map(|(idx, c)| CutoffF1 {
                t: c.t,
                f1: reports.iter().map(|r| r.f1_at[idx].f1).sum::<f64>() / n,
            })
            .collect();
        Some(EvalReport {
            rmse: avg(|r| r.rmse),
            mae: avg(|r| r.mae),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f1: avg(|r| r.f1),
            map: avg(|r| r.map),
            ndcg: avg(|r| r.ndcg),
            f1_at,
            users: reports.iter().map(|r| r.users).sum(),
            pairs: reports.iter().map(|r| r.pairs).sum(),
        })
    }

    /// `(name, value)` pairs in report column order.
    pub fn fields(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("rmse".to_owned(), self.rmse.to_string()),
            ("mae".to_owned(), self.mae.to_string()),
            ("precision".to_owned(), self.precision.to_string()),
            ("recall".to_owned(), self.recall.to_string()),
            ("f1".to_owned(), self.f1.to_string()),
            ("map".to_owned(), self.map.to_string()),
            ("ndcg".to_owned(), self.ndcg.to_string()),
        ];
        for c in &self.f1_at {
            out.push((format!("f1_at_{}", c.t), c.f1.to_string()));
        }
        out.push(("users".to_owned(), self.users.to_string()));
        out.push(("pairs".to_owned(), self.pairs.to_string()));
        out
    }

    /// Header plus one row per labelled report.
    pub fn write_csv<W: Write>(reports: &[(String, EvalReport)], out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if let Some((_, first)) = reports.first() {
            let mut header = vec!["label".to_owned()];
            header.extend(first.fields().into_iter().map(|(k, _)| k));
            w.write_record(&header)?;
        }
        for (label, r) in reports {
            let mut row = vec![label.clone()];
            row.extend(r.fields().into_iter().map(|(_, v)| v));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `key = value` lines.
    pub fn to_key_value(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn user(items: &[(usize, f64, f64)]) -> UserItems {
        UserItems {
            user: 0,
            items: items
                .iter()
                .map(|&(product, pred, truth)| ScoredItem {
                    product,
                    pred,
                    truth,
                })
                .collect(),
        }
    }

    #[test]
    fn rmse_mae_fixtures() {
        assert_eq!(rmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            rmse(&[3.0, 4.0], &[3.0, 5.0]).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(mae(&[3.0, 4.0], &[3.0, 5.0]).unwrap(), 0.5, epsilon = 1e-15);
        let truth = [1.0, 2.5, 4.0];
        let shifted: Vec<f64> = truth.iter().map(|t| t - 0.7).collect();
        assert_abs_diff_eq!(rmse(&shifted, &truth).unwrap(), 0.7, epsilon = 1e-15);
        assert_eq!(rmse(&[], &[]), Err(MetricError::Empty));
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn classification_fixtures() {
        let all = vec![user(&[(0, 4.0, 5.0), (1, 3.0, 3.0)])];
        let c = classification_metrics(&all);
        assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));

        // A: Pre={1,2}, Orig={2}; B: Pre={3}, Orig={3,4}.
        let a = UserItems {
            user: 0,
            items: vec![
                ScoredItem {
                    product: 1,
                    pred: 4.0,
                    truth: 2.0,
                },
                ScoredItem {
                    product: 2,
                    pred: 4.0,
                    truth: 4.0,
                },
            ],
        };
        let b = UserItems {
            user: 1,
            items: vec![
                ScoredItem {
                    product: 3,
                    pred: 5.0,
                    truth: 5.0,
                },
                ScoredItem {
                    product: 4,
                    pred: 2.0,
                    truth: 3.0,
                },
            ],
        };
        let c = classification_metrics(&[a, b]);
        assert_abs_diff_eq!(c.precision, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(c.recall, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(c.f1, 0.75, epsilon = 1e-15);

        // Empty Pre contributes 0 precision.
        let c = classification_metrics(&[user(&[(0, 2.0, 5.0)]), user(&[(0, 4.0, 4.0)])]);
        assert_abs_diff_eq!(c.precision, 0.5, epsilon = 1e-15);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn map_fixtures() {
        assert_eq!(
            average_precision(&user(&[(0, 5.0, 4.0), (1, 4.0, 1.0), (2, 3.0, 2.0)])),
            1.0
        );
        assert_abs_diff_eq!(
            average_precision(&user(&[(0, 5.0, 1.0), (1, 4.0, 4.0)])),
            0.5,
            epsilon = 1e-15
        );
        // Ties break toward the lower product index.
        assert_abs_diff_eq!(
            average_precision(&user(&[(1, 4.0, 4.0), (0, 4.0, 1.0)])),
            0.5,
            epsilon = 1e-15
        );
        let perfect = user(&[(0, 5.0, 5.0), (1, 4.0, 4.0), (2, 1.0, 1.0), (3, 0.5, 2.0)]);
        let reversed = user(&[(0, 1.0, 5.0), (1, 2.0, 4.0), (2, 3.0, 1.0), (3, 4.0, 2.0)]);
        assert!(map(&[reversed]) <= map(&[perfect]));
    }

    #[test]
    fn ndcg_fixtures() {
        assert_abs_diff_eq!(
            ndcg_user(
                &user(&[(0, 5.0, 5.0), (1, 3.0, 2.0), (2, 1.0, 1.0)]),
                NdcgGain::TrueRating
            ),
            1.0,
            epsilon = 1e-15
        );
        let rev = user(&[(0, 1.0, 5.0), (1, 5.0, 1.0)]);
        let dcg = 1.0 + 31.0 / 3f64.log2();
        let ideal = 31.0 + 1.0 / 3f64.log2();
        assert_abs_diff_eq!(dcg, 20.558, epsilon = 1e-3);
        assert_abs_diff_eq!(ideal, 31.631, epsilon = 1e-3);
        let v = ndcg_user(&rev, NdcgGain::TrueRating);
        assert_abs_diff_eq!(v, dcg / ideal, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.650, epsilon = 1e-3);
        assert_eq!(
            ndcg_user(&user(&[(0, 2.0, 4.0)]), NdcgGain::TrueRating),
            1.0
        );
        // Predicted gains can push the ratio above 1.
        let over = user(&[(0, 5.0, 2.0), (1, 4.0, 1.0)]);
        assert!(ndcg_user(&over, NdcgGain::PredictedRating) > 1.0);
    }

    #[test]
    fn topt_fixtures() {
        let u = user(&[(0, 5.0, 5.0), (1, 2.0, 4.0), (2, 1.0, 1.0)]);
        let c = topt_metrics(std::slice::from_ref(&u), 1).unwrap();
        assert_eq!((c.precision, c.recall), (1.0, 0.5));
        assert_abs_diff_eq!(c.f1, 2.0 / 3.0, epsilon = 1e-15);
        let full = classification_metrics(std::slice::from_ref(&u));
        assert_eq!(topt_metrics(std::slice::from_ref(&u), 3).unwrap(), full);
        assert_eq!(topt_metrics(&[u], 0), Err(MetricError::Cutoff));
    }

    #[test]
    fn report_mean_and_serialization() {
        let rows = [(0, 0, 4.0, 5.0), (0, 1, 2.0, 1.0), (1, 0, 3.5, 3.0)];
        let r = evaluate_rows(&rows, &DEFAULT_CUTOFFS, NdcgGain::TrueRating).unwrap();
        assert_eq!((r.users, r.pairs), (2, 3));
        let m = EvalReport::mean(std::slice::from_ref(&r)).unwrap();
        assert_eq!(m.rmse, r.rmse);
        let kv = r.to_key_value();
        assert!(kv.contains("f1_at_5 = ") && kv.starts_with("rmse = "));
        let mut buf = Vec::new();
        EvalReport::write_csv(&[("fold0".into(), r)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "label,rmse,mae,precision,recall,f1,map,ndcg,f1_at_5,f1_at_10,users,pairs\nfold0,"
        ));
    }

    proptest::proptest! {
        #[test]
        fn mae_never_exceeds_rmse(v in proptest::collection::vec((1.0f64..5.0, 1.0f64..5.0), 1..30)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            proptest::prop_assert!(mae(&p, &t).unwrap() <= rmse(&p, &t).unwrap() + 1e-12);
        }

        #[test]
        fn ranking_metrics_ignore_monotone_transforms(
            items in proptest::collection::vec((0.0f64..5.0, 1u8..=5), 1..8)
        ) {
            let u = UserItems { user: 0, items: items.iter().enumerate()
                .map(|(j, &(p, t))| ScoredItem { product: j, pred: p, truth: t as f64 }).collect() };
            let mut v = u.clone();
            v.items.iter_mut().for_each(|it| it.pred = (it.pred * 3.0).exp());
            proptest::prop_assert_eq!(ndcg_user(&u, NdcgGain::TrueRating), ndcg_user(&v, NdcgGain::TrueRating));
            proptest::prop_assert_eq!(average_precision(&u), average_precision(&v));
            let n = ndcg_user(&u, NdcgGain::TrueRating);
            proptest::prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        }
    }
}
