//! Online-path stand-in: history → key → table lookup → constrained items.

use std::collections::HashSet;
use std::fmt::{self, Write as _};

use rand::Rng;
use thiserror::Error;

use crate::codec::{provenance_line, split_provenance, FormatError};
use crate::planner::TransitionTable;
use crate::rng::{stream, Domain};
use crate::simulator::GroundTruth;
use crate::taxonomy::{canonicalize, join_ids, parse_ids, ClusterId, HistoryKey};

#[derive(Debug, Error, PartialEq)]
pub enum ServeError {
    #[error("no allowed clusters")]
    EmptyAllowedSet,
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("item {item}: cluster {cluster} outside a vocabulary of {n}")]
    BadItem { item: u64, cluster: u32, n: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Item {
    pub item_id: u64,
    pub cluster: ClusterId,
    pub quality: f64,
}

/// Items indexed by cluster, each cluster's list sorted by descending quality
/// then ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    items: Vec<Item>,
    by_cluster: Vec<Vec<usize>>,
}

impl Catalog {
    pub fn new(items: Vec<Item>, n_clusters: usize) -> Result<Self, ServeError> {
        if items.is_empty() {
            return Err(ServeError::EmptyCatalog);
        }
        let mut by_cluster = vec![Vec::new(); n_clusters];
        for (i, item) in items.iter().enumerate() {
            let slot = by_cluster.get_mut(item.cluster.index()).ok_or(ServeError::BadItem {
                item: item.item_id,
                cluster: item.cluster.0,
                n: n_clusters,
            })?;
            slot.push(i);
        }
        for list in &mut by_cluster {
            list.sort_by(|&a, &b| {
                items[b].quality.total_cmp(&items[a].quality).then(items[a].item_id.cmp(&items[b].item_id))
            });
        }
        Ok(Catalog { items, by_cluster })
    }

    /// `per_cluster` items per cluster with uniform quality in [0, 1).
    pub fn synthetic(n_clusters: usize, per_cluster: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Domain::Catalog, 0);
        let items = (0..n_clusters * per_cluster)
            .map(|i| Item {
                item_id: i as u64,
                cluster: ClusterId((i / per_cluster) as u32),
                quality: rng.random::<f64>(),
            })
            .collect();
        Catalog::new(items, n_clusters).expect("synthetic catalog is valid")
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn n_clusters(&self) -> usize {
        self.by_cluster.len()
    }

    pub fn cluster_of(&self, item_id: u64) -> Option<ClusterId> {
        self.items.iter().find(|i| i.item_id == item_id).map(|i| i.cluster)
    }

    pub fn to_text(&self, provenance: &str) -> String {
        let mut out = provenance_line(provenance);
        let _ = writeln!(out, "item_id\tcluster\tquality\tn_clusters={}", self.n_clusters());
        for i in &self.items {
            let _ = writeln!(out, "{}\t{}\t{}", i.item_id, i.cluster, i.quality);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let (_, mut lines) = split_provenance(text);
        let (line, header) = lines.next().ok_or(FormatError::Truncated(0))?;
        let n = header
            .strip_prefix("item_id\tcluster\tquality\tn_clusters=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FormatError::Line { line, reason: "bad header".into() })?;
        let mut items = Vec::new();
        for (line, l) in lines.filter(|(_, l)| !l.is_empty()) {
            let bad = || FormatError::Line { line, reason: "expected item_id<TAB>cluster<TAB>quality".into() };
            let mut cols = l.split('\t');
            let item_id = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let cluster = cols.next().and_then(|c| c.parse().ok()).map(ClusterId).ok_or_else(bad)?;
            let quality: f64 = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            if cols.next().is_some() || !quality.is_finite() {
                return Err(bad());
            }
            items.push(Item { item_id, cluster, quality });
        }
        Catalog::new(items, n).map_err(|e| FormatError::Invalid(e.to_string()))
    }
}

pub fn lookup<'t>(table: &'t TransitionTable, raw_history: &[ClusterId], history_k: usize) -> Option<&'t [ClusterId]> {
    let key = canonicalize(raw_history, history_k).ok()?;
    table.get(&key)
}

/// Up to `m` items from `allowed`, taking each cluster's best remaining item
/// in turn.
pub fn recommend_items(catalog: &Catalog, allowed: &[ClusterId], m: usize) -> Result<Vec<u64>, ServeError> {
    if allowed.is_empty() {
        return Err(ServeError::EmptyAllowedSet);
    }
    let mut seen = HashSet::new();
    let lists: Vec<&[usize]> = allowed
        .iter()
        .filter(|c| seen.insert(**c))
        .map(|c| catalog.by_cluster.get(c.index()).map_or(&[][..], |v| &v[..]))
        .collect();
    let mut out = Vec::with_capacity(m);
    let mut depth = 0;
    while out.len() < m {
        let mut any = false;
        for list in &lists {
            if let Some(&i) = list.get(depth) {
                any = true;
                if out.len() < m {
                    out.push(catalog.items[i].item_id);
                }
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    Ok(out)
}

/// Scores clusters for a raw history when the table has no entry.
pub trait ClusterAffinity: Sync {
    fn affinity_row(&self, history: &[ClusterId]) -> Vec<f64>;
}

impl ClusterAffinity for GroundTruth {
    fn affinity_row(&self, history: &[ClusterId]) -> Vec<f64> {
        GroundTruth::affinity_row(self, history)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    TableHit,
    Fallback,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::TableHit => "table-hit",
            Source::Fallback => "fallback",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServeResult {
    pub clusters: Vec<ClusterId>,
    pub items: Vec<u64>,
    pub source: Source,
}

impl fmt::Display for ServeResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self.items.iter().map(u64::to_string).collect();
        write!(f, "source={} clusters={} items={}", self.source.name(), join_ids(&self.clusters), items.join(","))
    }
}

/// Top-`m` items by `quality · affinity(cluster)` over the whole catalog.
pub fn exploitation_items(catalog: &Catalog, raw_history: &[ClusterId], m: usize, affinity: &dyn ClusterAffinity) -> ServeResult {
    let row = affinity.affinity_row(raw_history);
    let mut scored: Vec<(f64, u64, ClusterId)> = catalog
        .items
        .iter()
        .map(|i| (i.quality * row.get(i.cluster.index()).copied().unwrap_or(0.0), i.item_id, i.cluster))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(m);
    let mut clusters = Vec::new();
    for s in &scored {
        if !clusters.contains(&s.2) {
            clusters.push(s.2);
        }
    }
    ServeResult { clusters, items: scored.into_iter().map(|s| s.1).collect(), source: Source::Fallback }
}

pub fn serve(
    table: &TransitionTable,
    catalog: &Catalog,
    raw_history: &[ClusterId],
    history_k: usize,
    m: usize,
    fallback: &dyn ClusterAffinity,
) -> ServeResult {
    match lookup(table, raw_history, history_k) {
        Some(clusters) => ServeResult {
            clusters: clusters.to_vec(),
            items: recommend_items(catalog, clusters, m).expect("table entries are non-empty"),
            source: Source::TableHit,
        },
        None => exploitation_items(catalog, raw_history, m, fallback),
    }
}

/// One raw history per line (comma-separated ids, oldest first).
pub fn parse_histories(text: &str) -> Result<Vec<Vec<ClusterId>>, FormatError> {
    let (_, lines) = split_provenance(text);
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(line, l)| parse_ids(l.trim()).ok_or(FormatError::Line { line, reason: "bad id list".into() }))
        .collect()
}

pub fn serve_batch(
    table: &TransitionTable,
    catalog: &Catalog,
    histories: &[Vec<ClusterId>],
    history_k: usize,
    m: usize,
    fallback: &dyn ClusterAffinity,
) -> Vec<ServeResult> {
    histories.iter().map(|h| serve(table, catalog, h, history_k, m, fallback)).collect()
}

pub fn results_to_text(results: &[ServeResult], provenance: &str) -> String {
    let mut out = provenance_line(provenance);
    for r in results {
        let _ = writeln!(out, "{r}");
    }
    out
}

pub fn parse_result_line(line: &str) -> Option<ServeResult> {
    let mut parts = line.split(' ');
    let source = match parts.next()?.strip_prefix("source=")? {
        "table-hit" => Source::TableHit,
        "fallback" => Source::Fallback,
        _ => return None,
    };
    let clusters = parse_ids(parts.next()?.strip_prefix("clusters=")?)?;
    let items_raw = parts.next()?.strip_prefix("items=")?;
    let items = if items_raw.is_empty() {
        Vec::new()
    } else {
        items_raw.split(',').map(|s| s.parse().ok()).collect::<Option<Vec<u64>>>()?
    };
    if parts.next().is_some() {
        return None;
    }
    Some(ServeResult { clusters, items, source })
}

/// Fraction of histories whose canonical key is in `table`.
pub fn key_coverage(table: &TransitionTable, histories: &[Vec<ClusterId>], history_k: usize) -> f64 {
    if histories.is_empty() {
        return 0.0;
    }
    let hits = histories
        .iter()
        .filter(|h| canonicalize(h, history_k).is_ok_and(|k: HistoryKey| table.get(&k).is_some()))
        .count();
    hits as f64 / histories.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ClusterId> {
        v.iter().copied().map(ClusterId).collect()
    }

    fn catalog() -> Catalog {
        let items = vec![
            Item { item_id: 10, cluster: ClusterId(2), quality: 0.5 },
            Item { item_id: 11, cluster: ClusterId(2), quality: 0.9 },
            Item { item_id: 12, cluster: ClusterId(2), quality: 0.7 },
            Item { item_id: 20, cluster: ClusterId(3), quality: 0.1 },
            Item { item_id: 21, cluster: ClusterId(3), quality: 0.2 },
            Item { item_id: 30, cluster: ClusterId(0), quality: 1.0 },
        ];
        Catalog::new(items, 5).unwrap()
    }

    struct Flat;

    impl ClusterAffinity for Flat {
        fn affinity_row(&self, _h: &[ClusterId]) -> Vec<f64> {
            vec![1.0; 5]
        }
    }

    #[test]
    fn round_robin_and_quality() {
        let c = catalog();
        assert_eq!(recommend_items(&c, &ids(&[2]), 2).unwrap(), vec![11, 12]);
        assert_eq!(recommend_items(&c, &ids(&[2, 3]), 2).unwrap(), vec![11, 21]);
        assert_eq!(recommend_items(&c, &ids(&[3, 2]), 5).unwrap(), vec![21, 11, 20, 12, 10]);
        assert_eq!(recommend_items(&c, &ids(&[4]), 3).unwrap(), Vec::<u64>::new());
        assert_eq!(recommend_items(&c, &[], 3), Err(ServeError::EmptyAllowedSet));
    }

    #[test]
    fn hit_and_miss() {
        let mut table = TransitionTable::new(2, String::new());
        table.insert(HistoryKey::from_set(ids(&[0, 1])).unwrap(), ids(&[3, 2])).unwrap();
        let c = catalog();
        let hit = serve(&table, &c, &ids(&[1, 1, 0]), 2, 3, &Flat);
        assert_eq!(hit.source, Source::TableHit);
        assert_eq!(hit.clusters, ids(&[3, 2]));
        assert_eq!(hit.items, vec![21, 11, 20]);
        let miss = serve(&table, &c, &ids(&[4, 1]), 2, 2, &Flat);
        assert_eq!(miss.source, Source::Fallback);
        assert_eq!(miss.items, vec![30, 11]);
        assert_eq!(lookup(&table, &ids(&[0]), 2), None);
        for r in [hit, miss] {
            assert_eq!(parse_result_line(&r.to_string()), Some(r));
        }
    }

    #[test]
    fn catalog_text_round_trip() {
        let c = Catalog::synthetic(4, 3, 9);
        assert_eq!(Catalog::from_text(&c.to_text("x=1")).unwrap(), c);
        assert!(Catalog::new(vec![Item { item_id: 1, cluster: ClusterId(9), quality: 0.0 }], 4).is_err());
    }
}
