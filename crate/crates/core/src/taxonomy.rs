//! Interest-cluster vocabulary and canonical history keys.
//!
//! A [`HistoryKey`] is the unordered set of a user's `K` most recent distinct
//! clusters, stored in ascending id order. Every table in the pipeline is
//! keyed by it.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use thiserror::Error;

use crate::codec::{provenance_line, split_provenance, FormatError};
use crate::rng::{stream, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClusterId(pub u32);

impl ClusterId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("history has {found} distinct clusters, need {needed}")]
    TooFewDistinctClusters { found: usize, needed: usize },
    #[error("history key must contain strictly ascending ids, got {0:?}")]
    NotCanonical(Vec<u32>),
    #[error("history key length {found} does not match K = {expected}")]
    WrongLength { found: usize, expected: usize },
    #[error("cluster id {id} out of range for vocabulary of {size}")]
    OutOfRange { id: u32, size: usize },
    #[error("cluster name {0:?} is empty or duplicated")]
    BadName(String),
    #[error("taxonomy ids must be dense 0..N, found {found} at position {position}")]
    SparseIds { found: u32, position: usize },
    #[error("K = {k} exceeds vocabulary size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("cannot parse history key {0:?}")]
    Parse(String),
}

/// The closed vocabulary of interest clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    names: Vec<String>,
    by_name: HashMap<String, ClusterId>,
}

const TOPICS: &[&str] = &[
    "dogs", "cats", "wildlife", "nature documentary", "boats", "photography", "visual effects",
    "video game", "internet meme", "cooking", "baking", "street food", "travel", "hiking",
    "camping", "fishing", "gardening", "woodworking", "cars", "motorcycles", "aviation", "trains",
    "space", "astronomy", "chemistry", "physics", "history", "architecture", "interior design",
    "fashion", "makeup", "skincare", "fitness", "yoga", "running", "cycling", "soccer",
    "basketball", "tennis", "skateboarding", "surfing", "dance", "k-pop", "jazz", "classical music",
    "guitar", "drums", "stand-up comedy", "magic tricks", "origami",
];

const FACETS: &[&str] = &["", "tutorials", "vlogs", "reviews", "highlights", "asmr", "kids", "challenges"];

impl Taxonomy {
    /// Builds a taxonomy from names in id order. Names must be non-empty and
    /// unique ignoring ASCII case, so that case-insensitive lookup is unambiguous.
    pub fn new(names: Vec<String>) -> Result<Self, TaxonomyError> {
        let mut by_name = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let folded = name.trim().to_lowercase();
            if folded.is_empty() || by_name.insert(folded, ClusterId(i as u32)).is_some() {
                return Err(TaxonomyError::BadName(name.clone()));
            }
        }
        Ok(Taxonomy { names, by_name })
    }

    /// A deterministic vocabulary of `n` readable cluster names.
    pub fn synthetic(n: usize) -> Self {
        let mut names = Vec::with_capacity(n);
        let mut round = 0usize;
        'outer: loop {
            for facet in FACETS {
                for topic in TOPICS {
                    if names.len() == n {
                        break 'outer;
                    }
                    let mut name = if facet.is_empty() { topic.to_string() } else { format!("{topic} {facet}") };
                    if round > 0 {
                        name = format!("{name} {round}");
                    }
                    names.push(name);
                }
            }
            round += 1;
        }
        Taxonomy::new(names).expect("synthetic names are unique")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ClusterId) -> &str {
        &self.names[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = ClusterId> {
        (0..self.names.len() as u32).map(ClusterId)
    }

    pub fn check(&self, id: ClusterId) -> Result<ClusterId, TaxonomyError> {
        if id.index() < self.names.len() {
            Ok(id)
        } else {
            Err(TaxonomyError::OutOfRange { id: id.0, size: self.names.len() })
        }
    }

    /// Case-insensitive exact lookup.
    pub fn lookup(&self, name: &str) -> Option<ClusterId> {
        self.by_name.get(&name.trim().to_lowercase()).copied()
    }

    /// `id<TAB>name` lines.
    pub fn to_text(&self, provenance: &str) -> String {
        let mut out = provenance_line(provenance);
        for (i, name) in self.names.iter().enumerate() {
            out.push_str(&format!("{i}\t{name}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let (_, lines) = split_provenance(text);
        let mut names = Vec::new();
        for (line_no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (id, name) = line
                .split_once('\t')
                .ok_or_else(|| FormatError::Line { line: line_no, reason: "expected id<TAB>name".into() })?;
            let id: u32 = id
                .parse()
                .map_err(|_| FormatError::Line { line: line_no, reason: format!("bad id {id:?}") })?;
            if id as usize != names.len() {
                let err = TaxonomyError::SparseIds { found: id, position: names.len() };
                return Err(FormatError::Line { line: line_no, reason: err.to_string() });
            }
            names.push(name.to_string());
        }
        Taxonomy::new(names).map_err(|e| FormatError::Invalid(e.to_string()))
    }
}

/// `K` distinct cluster ids in strictly ascending order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HistoryKey(Box<[ClusterId]>);

impl HistoryKey {
    /// Accepts ids that are already canonical (strictly ascending).
    pub fn new(ids: Vec<ClusterId>) -> Result<Self, TaxonomyError> {
        if ids.is_empty() || ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TaxonomyError::NotCanonical(ids.iter().map(|c| c.0).collect()));
        }
        Ok(HistoryKey(ids.into_boxed_slice()))
    }

    /// Sorts and validates a set of distinct ids.
    pub fn from_set(mut ids: Vec<ClusterId>) -> Result<Self, TaxonomyError> {
        ids.sort_unstable();
        HistoryKey::new(ids)
    }

    pub fn clusters(&self) -> &[ClusterId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: ClusterId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    /// Stable 64-bit identity, used to derive per-key random streams.
    pub fn fingerprint(&self) -> u64 {
        self.0
            .iter()
            .fold(0x6b65_795f_6670u64, |acc, c| crate::rng::mix64(acc ^ u64::from(c.0)))
    }
}

impl fmt::Display for HistoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", c.0)?;
        }
        Ok(())
    }
}

impl FromStr for HistoryKey {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let ids = parse_ids(s).ok_or_else(|| TaxonomyError::Parse(s.to_string()))?;
        HistoryKey::new(ids)
    }
}

/// Parses a comma-joined id list.
pub fn parse_ids(s: &str) -> Option<Vec<ClusterId>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse::<u32>().ok().map(ClusterId)).collect()
}

pub fn join_ids(ids: &[ClusterId]) -> String {
    ids.iter().map(|c| c.0.to_string()).collect::<Vec<_>>().join(",")
}

/// The `k` most recent distinct clusters of `raw_history`, sorted ascending.
pub fn canonicalize(raw_history: &[ClusterId], k: usize) -> Result<HistoryKey, TaxonomyError> {
    let mut recent: Vec<ClusterId> = Vec::with_capacity(k);
    for &c in raw_history.iter().rev() {
        if recent.len() == k {
            break;
        }
        if !recent.contains(&c) {
            recent.push(c);
        }
    }
    if recent.len() < k || k == 0 {
        return Err(TaxonomyError::TooFewDistinctClusters { found: recent.len(), needed: k });
    }
    HistoryKey::from_set(recent)
}

/// Binomial coefficient, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// The combination of lexicographic rank `rank` among k-subsets of `0..n`.
fn unrank(n: usize, k: usize, mut rank: u64) -> HistoryKey {
    let mut ids = Vec::with_capacity(k);
    let mut next = 0usize;
    for slot in 0..k {
        loop {
            let rest = binomial(n - next - 1, k - slot - 1);
            if rank < rest {
                break;
            }
            rank -= rest;
            next += 1;
        }
        ids.push(ClusterId(next as u32));
        next += 1;
    }
    HistoryKey::new(ids).expect("unranked combinations are ascending")
}

/// All `C(N, K)` keys in lexicographic order, or a seeded uniform sample of
/// `sample_limit` of them (returned in lexicographic order).
pub fn enumerate_keys(
    taxonomy: &Taxonomy,
    k: usize,
    sample_limit: Option<usize>,
    seed: u64,
) -> Result<Vec<HistoryKey>, TaxonomyError> {
    let n = taxonomy.len();
    if k == 0 || k > n {
        return Err(TaxonomyError::KTooLarge { k, n });
    }
    let total = binomial(n, k);
    match sample_limit {
        Some(limit) if (limit as u64) < total => {
            let mut rng = stream(seed, Domain::KeySample, k as u64);
            let mut ranks: Vec<u64> = index::sample(&mut rng, total as usize, limit)
                .into_iter()
                .map(|r| r as u64)
                .collect();
            ranks.sort_unstable();
            Ok(ranks.into_iter().map(|r| unrank(n, k, r)).collect())
        }
        _ => {
            let mut out = Vec::with_capacity(total as usize);
            let mut idx: Vec<usize> = (0..k).collect();
            loop {
                out.push(HistoryKey::new(idx.iter().map(|&i| ClusterId(i as u32)).collect()).expect("ascending"));
                let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
                    return Ok(out);
                };
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
            }
        }
    }
}
