//! Review-stream parsing and the sparse interaction store.

mod store;

pub use store::{
    build_store, InteractionStore, PairKey, StoreError, TimelineEntry, STORE_FORMAT, STORE_VERSION,
};

use std::collections::HashMap;
use std::io::BufRead;

use serde::Deserialize;
use thiserror::Error;

pub const MAX_RATING: u8 = 5;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read review stream at line {line}: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("rating {0} outside 1..=5")]
    RatingOutOfRange(i64),
}

/// Bijective map between opaque string keys and contiguous indices,
/// assigned in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyIndex {
    keys: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl KeyIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_keys(keys: Vec<String>) -> Result<Self, String> {
        let mut lookup = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if lookup.insert(k.clone(), i).is_some() {
                return Err(format!("duplicate key {k:?}"));
            }
        }
        Ok(Self { keys, lookup })
    }

    /// Synthetic keys `prefix0, prefix1, ...`.
    pub fn numbered(prefix: &str, n: usize) -> Self {
        Self::from_keys((0..n).map(|i| format!("{prefix}{i}")).collect())
            .expect("numbered keys are unique")
    }

    pub fn intern(&mut self, key: &str) -> usize {
        if let Some(&i) = self.lookup.get(key) {
            return i;
        }
        let i = self.keys.len();
        self.keys.push(key.to_owned());
        self.lookup.insert(key.to_owned(), i);
        i
    }

    pub fn get(&self, key: &str) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    pub fn key(&self, idx: usize) -> Option<&str> {
        self.keys.get(idx).map(String::as_str)
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// One review with users and products already re-indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReviewRecord {
    pub user: usize,
    pub product: usize,
    /// Raw star rating, 1..=5.
    pub rating: u8,
    pub helpful_yes: u32,
    pub votes_total: u32,
    pub unix_time: i64,
}

/// A skipped input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Drop reviews with fewer total votes than this.
    pub min_votes: u32,
}

/// Parsed review stream together with the key maps that decode its indices.
#[derive(Debug, Clone, Default)]
pub struct ReviewLog {
    pub records: Vec<ReviewRecord>,
    pub users: KeyIndex,
    pub products: KeyIndex,
    pub skipped: Vec<LineIssue>,
    /// Well-formed lines dropped by `min_votes`.
    pub filtered: usize,
}

#[derive(Deserialize)]
struct RawReview {
    #[serde(rename = "reviewerID")]
    reviewer_id: Option<String>,
    asin: Option<String>,
    overall: Option<f64>,
    helpful: Option<Vec<i64>>,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: Option<i64>,
}

pub fn normalize_rating(raw: u8) -> Result<f64, IngestError> {
    if !(1..=MAX_RATING).contains(&raw) {
        return Err(IngestError::RatingOutOfRange(raw as i64));
    }
    Ok(raw as f64 / MAX_RATING as f64)
}

struct Fields<'a> {
    user: &'a str,
    product: &'a str,
    rating: u8,
    helpful_yes: u32,
    votes_total: u32,
    unix_time: i64,
}

fn validate(raw: &RawReview) -> Result<Fields<'_>, String> {
    let user = raw.reviewer_id.as_deref().ok_or("missing reviewerID")?;
    let product = raw.asin.as_deref().ok_or("missing asin")?;
    let overall = raw.overall.ok_or("missing overall")?;
    if overall.fract() != 0.0 || !(1.0..=5.0).contains(&overall) {
        return Err(format!("overall {overall} is not an integer in 1..=5"));
    }
    let unix_time = raw.unix_review_time.ok_or("missing unixReviewTime")?;
    let (yes, total) = match raw.helpful.as_deref() {
        None => (0, 0),
        Some([yes, total]) => (*yes, *total),
        Some(other) => return Err(format!("helpful has {} entries, expected 2", other.len())),
    };
    if yes < 0 || total < 0 {
        return Err("negative helpful votes".to_owned());
    }
    if yes > total {
        return Err("helpful_yes > votes_total".to_owned());
    }
    let to_u32 = |v: i64| u32::try_from(v).map_err(|_| format!("vote count {v} too large"));
    Ok(Fields {
        user,
        product,
        rating: overall as u8,
        helpful_yes: to_u32(yes)?,
        votes_total: to_u32(total)?,
        unix_time,
    })
}

/// Parses line-delimited review JSON.
///
/// Lines missing a required field, or violating `helpful_yes <= votes_total`,
/// are skipped and reported in [`ReviewLog::skipped`]. A missing `helpful`
/// field counts as zero votes. Blank lines are ignored. Only a read failure
/// is a hard error.
pub fn parse_reviews(reader: impl BufRead, opts: &ParseOptions) -> Result<ReviewLog, IngestError> {
    let mut log = ReviewLog::default();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| IngestError::Io {
            line: lineno,
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawReview = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log.skipped.push(LineIssue {
                    line: lineno,
                    reason: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        let fields = match validate(&raw) {
            Ok(f) => f,
            Err(reason) => {
                log::warn!("line {lineno}: {reason}");
                log.skipped.push(LineIssue {
                    line: lineno,
                    reason,
                });
                continue;
            }
        };
        if fields.votes_total < opts.min_votes {
            log.filtered += 1;
            continue;
        }
        let user = log.users.intern(fields.user);
        let product = log.products.intern(fields.product);
        log.records.push(ReviewRecord {
            user,
            product,
            rating: fields.rating,
            helpful_yes: fields.helpful_yes,
            votes_total: fields.votes_total,
            unix_time: fields.unix_time,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{"reviewerID": "A2SUAM1J3GNN3B", "asin": "0000013714", "reviewerName": "J. McDonald", "helpful": [3, 5], "reviewText": "I bought this", "overall": 3.0, "summary": "Heavenly Highway Hymns", "unixReviewTime": 126472000, "reviewTime": "09 13, 2009"}"#;

    fn parse(s: &str) -> ReviewLog {
        parse_reviews(s.as_bytes(), &ParseOptions::default()).unwrap()
    }

    #[test]
    fn parses_dataset_example() {
        let log = parse(EXAMPLE);
        assert_eq!(log.records.len(), 1);
        let r = log.records[0];
        assert_eq!((r.rating, r.helpful_yes, r.votes_total), (3, 3, 5));
        assert_eq!(r.unix_time, 126472000);
        assert_eq!(log.users.key(r.user), Some("A2SUAM1J3GNN3B"));
        assert_eq!(log.products.key(r.product), Some("0000013714"));
        assert!(log.skipped.is_empty());
    }

    #[test]
    fn empty_stream() {
        let log = parse("");
        assert!(log.records.is_empty() && log.skipped.is_empty());
    }

    #[test]
    fn rejects_more_helpful_than_total() {
        let line = EXAMPLE.replace("[3, 5]", "[7, 5]");
        let log = parse(&format!("{EXAMPLE}\n{line}\n"));
        assert_eq!(log.records.len(), 1);
        assert_eq!(
            log.skipped,
            vec![LineIssue {
                line: 2,
                reason: "helpful_yes > votes_total".into()
            }]
        );
    }

    #[test]
    fn skips_malformed_and_incomplete_lines_with_line_numbers() {
        let input = format!(
            "{EXAMPLE}\nnot json\n{{\"asin\":\"x\",\"overall\":4.0,\"unixReviewTime\":1}}\n\n{}\n{}\n",
            EXAMPLE.replace("3.0", "3.5"),
            EXAMPLE.replace("3.0", "6.0"),
        );
        let log = parse(&input);
        assert_eq!(log.records.len(), 1);
        let lines: Vec<usize> = log.skipped.iter().map(|s| s.line).collect();
        assert_eq!(lines, vec![2, 3, 5, 6]);
        assert!(log.skipped[1].reason.contains("reviewerID"));
    }

    #[test]
    fn missing_helpful_means_zero_votes() {
        let line = r#"{"reviewerID":"u","asin":"p","overall":5.0,"unixReviewTime":7}"#;
        let log = parse(line);
        assert_eq!(
            (log.records[0].helpful_yes, log.records[0].votes_total),
            (0, 0)
        );
    }

    #[test]
    fn min_votes_filter() {
        let low = EXAMPLE
            .replace("[3, 5]", "[0, 1]")
            .replace("A2SUAM1J3GNN3B", "other");
        let log = parse_reviews(
            format!("{low}\n{EXAMPLE}").as_bytes(),
            &ParseOptions { min_votes: 2 },
        )
        .unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.filtered, 1);
        // Filtered lines never claim an index.
        assert_eq!(log.users.keys(), &["A2SUAM1J3GNN3B".to_owned()]);
    }

    #[test]
    fn reindexing_is_first_appearance() {
        let mk = |u: &str, p: &str| {
            format!(
                r#"{{"reviewerID":"{u}","asin":"{p}","overall":4.0,"helpful":[0,0],"unixReviewTime":1}}"#
            )
        };
        let input = [mk("b", "x"), mk("a", "y"), mk("b", "y")].join("\n");
        let log = parse(&input);
        let pairs: Vec<(usize, usize)> = log.records.iter().map(|r| (r.user, r.product)).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 1), (0, 1)]);
        assert_eq!(log.users.get("a"), Some(1));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_rating(5).unwrap(), 1.0);
        assert_eq!(normalize_rating(1).unwrap(), 0.2);
        assert_eq!(normalize_rating(3).unwrap(), 0.6);
        assert!(normalize_rating(0).is_err());
        assert!(normalize_rating(6).is_err());
    }

    proptest::proptest! {
        #[test]
        fn key_index_is_a_bijection(keys in proptest::collection::vec("[a-z]{1,4}", 0..40)) {
            let mut idx = KeyIndex::new();
            let assigned: Vec<usize> = keys.iter().map(|k| idx.intern(k)).collect();
            for (k, i) in keys.iter().zip(assigned) {
                proptest::prop_assert_eq!(idx.key(i), Some(k.as_str()));
                proptest::prop_assert_eq!(idx.get(k), Some(i));
            }
            proptest::prop_assert!((0..idx.len()).all(|i| idx.get(idx.key(i).unwrap()) == Some(i)));
        }
    }
}
