//! Best-of-n planning and the precomputed transition table.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use thiserror::Error;

use crate::alignment::AlignmentScorer;
use crate::codec::{provenance_line, split_provenance, Decoder, Encoder, FormatError};
use crate::evals::top_k_by_score;
use crate::novelty::{propose_batch, NoveltyBackend, NoveltyError, Rejection, DEFAULT_RETRY_BUDGET};
use crate::rng::{stream, Domain, StreamRng};
use crate::taxonomy::{ClusterId, HistoryKey};

/// Extra sampling rounds allowed when deduplication leaves fewer than k candidates.
pub const TOPUP_ROUNDS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("key {key} leaves {available} novel clusters, {needed} needed")]
    InsufficientCandidates { key: String, needed: usize, available: usize },
    #[error(transparent)]
    Novelty(#[from] NoveltyError),
    #[error("invalid planner config: {0}")]
    BadConfig(String),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannerConfig {
    pub k: usize,
    pub oversample_factor: usize,
    pub temperature: f64,
    pub seed: u64,
    pub retry_budget: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { k: 3, oversample_factor: 5, temperature: 2.0, seed: 13, retry_budget: DEFAULT_RETRY_BUDGET }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.k == 0 {
            return Err(PlanError::BadConfig("k must be >= 1".into()));
        }
        if self.oversample_factor == 0 {
            return Err(PlanError::BadConfig("oversample_factor must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PlanError::BadConfig("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn draws(&self) -> usize {
        self.k * self.oversample_factor
    }
}

/// Per-key generation bookkeeping, summed over a build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlanStats {
    pub generations: usize,
    pub accepted: usize,
    pub repeated: usize,
    pub vocab_violations: usize,
    pub dropped: usize,
    pub topup_rounds: usize,
    pub greedy_fills: usize,
}

impl PlanStats {
    fn add(&mut self, o: &PlanStats) {
        self.generations += o.generations;
        self.accepted += o.accepted;
        self.repeated += o.repeated;
        self.vocab_violations += o.vocab_violations;
        self.dropped += o.dropped;
        self.topup_rounds += o.topup_rounds;
        self.greedy_fills += o.greedy_fills;
    }

    pub fn format_valid_rate(&self) -> f64 {
        if self.generations == 0 {
            0.0
        } else {
            self.accepted as f64 / self.generations as f64
        }
    }

    pub fn repetition_rate(&self) -> f64 {
        if self.accepted == 0 {
            0.0
        } else {
            self.repeated as f64 / self.accepted as f64
        }
    }
}

/// Training pairs, used to count generations that replay one.
pub type SeenPairs = HashSet<(HistoryKey, ClusterId)>;

/// Distinct candidates in first-draw order: `n` draws, up to
/// [`TOPUP_ROUNDS`] more rounds while fewer than `k` are distinct, then a
/// greedy fill from the backend's fallback order.
pub fn gather_candidates(
    key: &HistoryKey,
    backend: &dyn NoveltyBackend,
    n: usize,
    cfg: &PlannerConfig,
    rng: &mut StreamRng,
    seen: Option<&SeenPairs>,
    stats: &mut PlanStats,
) -> Result<Vec<ClusterId>, PlanError> {
    let available = backend.vocab_size().saturating_sub(key.len());
    if available < cfg.k {
        return Err(PlanError::InsufficientCandidates { key: key.to_string(), needed: cfg.k, available });
    }
    let mut distinct = Vec::new();
    let mut present = HashSet::new();
    let mut round = 0;
    loop {
        let batch = propose_batch(backend, key, n, cfg.temperature, cfg.retry_budget, rng)?;
        stats.generations += batch.outcomes.len();
        stats.dropped += batch.dropped;
        for o in &batch.outcomes {
            match o.result {
                Ok(c) => {
                    stats.accepted += 1;
                    if seen.is_some_and(|s| s.contains(&(key.clone(), c))) {
                        stats.repeated += 1;
                    }
                }
                Err(Rejection::NotInVocabulary) => stats.vocab_violations += 1,
                Err(_) => {}
            }
        }
        for c in batch.clusters {
            if present.insert(c) {
                distinct.push(c);
            }
        }
        if distinct.len() >= cfg.k || round == TOPUP_ROUNDS {
            break;
        }
        round += 1;
        stats.topup_rounds += 1;
    }
    if distinct.len() < cfg.k {
        for c in backend.fallback_order(key) {
            if distinct.len() == cfg.k {
                break;
            }
            if !key.contains(c) && present.insert(c) {
                distinct.push(c);
                stats.greedy_fills += 1;
            }
        }
    }
    if distinct.len() < cfg.k {
        return Err(PlanError::InsufficientCandidates { key: key.to_string(), needed: cfg.k, available: distinct.len() });
    }
    Ok(distinct)
}

/// Top-k of `n` draws by alignment score, ties by ascending id.
#[allow(clippy::too_many_arguments)]
pub fn plan_with_draws(
    key: &HistoryKey,
    backend: &dyn NoveltyBackend,
    scorer: &dyn AlignmentScorer,
    n: usize,
    cfg: &PlannerConfig,
    rng: &mut StreamRng,
    seen: Option<&SeenPairs>,
    stats: &mut PlanStats,
) -> Result<Vec<ClusterId>, PlanError> {
    let candidates = gather_candidates(key, backend, n, cfg, rng, seen, stats)?;
    let scores = scorer.score_many(key, &candidates);
    let scored: Vec<(ClusterId, f64)> = candidates.into_iter().zip(scores).collect();
    Ok(top_k_by_score(&scored, cfg.k))
}

pub fn plan_one(
    key: &HistoryKey,
    backend: &dyn NoveltyBackend,
    scorer: &dyn AlignmentScorer,
    cfg: &PlannerConfig,
    rng: &mut StreamRng,
) -> Result<Vec<ClusterId>, PlanError> {
    plan_with_draws(key, backend, scorer, cfg.draws(), cfg, rng, None, &mut PlanStats::default())
}

/// The first k distinct draws, with no alignment selection.
pub fn plan_novelty_only(
    key: &HistoryKey,
    backend: &dyn NoveltyBackend,
    cfg: &PlannerConfig,
    rng: &mut StreamRng,
) -> Result<Vec<ClusterId>, PlanError> {
    let mut c = gather_candidates(key, backend, cfg.k, cfg, rng, None, &mut PlanStats::default())?;
    c.truncate(cfg.k);
    Ok(c)
}

pub fn key_stream(seed: u64, key: &HistoryKey) -> StreamRng {
    stream(seed, Domain::Planner, key.fingerprint())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableProvenance {
    pub backend_id: String,
    pub checkpoint_id: String,
    pub config: PlannerConfig,
    pub build_timestamp: u64,
    /// Free-form upstream description (hashes and the like).
    pub extra: String,
}

impl fmt::Display for TableProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        write!(
            f,
            "backend={} checkpoint={} k={} oversample_factor={} temperature={} seed={} built={}",
            self.backend_id, self.checkpoint_id, c.k, c.oversample_factor, c.temperature, c.seed, self.build_timestamp
        )?;
        if !self.extra.is_empty() {
            write!(f, " {}", self.extra)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    pub k: usize,
    entries: HashMap<HistoryKey, Box<[ClusterId]>>,
    pub provenance: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("entry {key}: {reason}")]
    BadEntry { key: String, reason: String },
}

const TABLE_MAGIC: &[u8; 4] = b"CPTT";
const TABLE_VERSION: u32 = 1;

fn check_entry(k: usize, key: &HistoryKey, clusters: &[ClusterId]) -> Result<(), TableError> {
    let bad = |reason: &str| Err(TableError::BadEntry { key: key.to_string(), reason: reason.into() });
    if clusters.len() != k {
        return bad("wrong number of clusters");
    }
    if clusters.iter().any(|&c| key.contains(c)) {
        return bad("cluster from its own key");
    }
    let distinct: HashSet<&ClusterId> = clusters.iter().collect();
    if distinct.len() != k {
        return bad("duplicate cluster");
    }
    Ok(())
}

impl TransitionTable {
    pub fn new(k: usize, provenance: String) -> Self {
        TransitionTable { k, entries: HashMap::new(), provenance }
    }

    pub fn insert(&mut self, key: HistoryKey, clusters: Vec<ClusterId>) -> Result<(), TableError> {
        check_entry(self.k, &key, &clusters)?;
        self.entries.insert(key, clusters.into_boxed_slice());
        Ok(())
    }

    pub fn get(&self, key: &HistoryKey) -> Option<&[ClusterId]> {
        self.entries.get(key).map(|v| &**v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending key order.
    pub fn sorted(&self) -> Vec<(&HistoryKey, &[ClusterId])> {
        let mut v: Vec<(&HistoryKey, &[ClusterId])> = self.entries.iter().map(|(k, c)| (k, &**c)).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    /// Every entry has k distinct clusters outside its key.
    pub fn verify(&self) -> Result<(), TableError> {
        self.entries.iter().try_for_each(|(key, c)| check_entry(self.k, key, c))
    }

    pub fn to_text(&self) -> String {
        let mut out = provenance_line(&self.provenance);
        let _ = writeln!(out, "key\tclusters\tk={}", self.k);
        for (key, clusters) in self.sorted() {
            let _ = writeln!(out, "{key}\t{}", crate::taxonomy::join_ids(clusters));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let (prov, mut lines) = split_provenance(text);
        let (line, header) = lines.next().ok_or(FormatError::Truncated(0))?;
        let k = header
            .strip_prefix("key\tclusters\tk=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FormatError::Line { line, reason: "bad header".into() })?;
        let mut table = TransitionTable::new(k, prov.unwrap_or("").to_string());
        for (line, l) in lines {
            if l.is_empty() {
                continue;
            }
            let bad = |reason: String| FormatError::Line { line, reason };
            let (key, clusters) = l.split_once('\t').ok_or_else(|| bad("expected key<TAB>clusters".into()))?;
            let key: HistoryKey = key.parse().map_err(|e: crate::taxonomy::TaxonomyError| bad(e.to_string()))?;
            let clusters = crate::taxonomy::parse_ids(clusters).ok_or_else(|| bad("bad cluster list".into()))?;
            table.insert(key, clusters).map_err(|e| bad(e.to_string()))?;
        }
        Ok(table)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(TABLE_MAGIC, TABLE_VERSION);
        enc.str(&self.provenance).u32(self.k as u32).u64(self.entries.len() as u64);
        for (key, clusters) in self.sorted() {
            enc.u32(key.len() as u32);
            key.clusters().iter().for_each(|c| {
                enc.u32(c.0);
            });
            clusters.iter().for_each(|c| {
                enc.u32(c.0);
            });
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (mut dec, version) = Decoder::open(bytes, TABLE_MAGIC)?;
        if version != TABLE_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let provenance = dec.str()?;
        let k = dec.u32()? as usize;
        let n = dec.u64()?;
        let mut table = TransitionTable::new(k, provenance);
        for _ in 0..n {
            let len = dec.u32()? as usize;
            let key_ids = (0..len).map(|_| dec.u32().map(ClusterId)).collect::<Result<Vec<_>, _>>()?;
            let key = HistoryKey::new(key_ids).map_err(|e| FormatError::Invalid(e.to_string()))?;
            let clusters = (0..k).map(|_| dec.u32().map(ClusterId)).collect::<Result<Vec<_>, _>>()?;
            table.insert(key, clusters).map_err(|e| FormatError::Invalid(e.to_string()))?;
        }
        dec.finish()?;
        Ok(table)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub keys: usize,
    pub built: usize,
    pub failures: Vec<(HistoryKey, String)>,
    pub stats: PlanStats,
}

impl BuildReport {
    pub fn to_text(&self, provenance: &str) -> String {
        let mut out = provenance_line(provenance);
        let s = &self.stats;
        let _ = writeln!(out, "keys={}", self.keys);
        let _ = writeln!(out, "built={}", self.built);
        let _ = writeln!(out, "failed={}", self.failures.len());
        let _ = writeln!(out, "generations={}", s.generations);
        let _ = writeln!(out, "format_valid_rate={}", s.format_valid_rate());
        let _ = writeln!(out, "repetition_rate={}", s.repetition_rate());
        let _ = writeln!(out, "vocab_violations={}", s.vocab_violations);
        let _ = writeln!(out, "dropped_slots={}", s.dropped);
        let _ = writeln!(out, "topup_rounds={}", s.topup_rounds);
        let _ = writeln!(out, "greedy_fills={}", s.greedy_fills);
        for (key, reason) in &self.failures {
            let _ = writeln!(out, "failure\t{key}\t{reason}");
        }
        out
    }
}

/// How a table entry is chosen.
#[derive(Clone, Copy)]
pub enum Selection<'a> {
    BestOfN(&'a dyn AlignmentScorer),
    NoveltyOnly,
}

pub fn run_in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PlanError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PlanError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Plans every key on `workers` threads. Each key draws from its own stream,
/// so the table does not depend on scheduling.
pub fn build_table(
    keys: &[HistoryKey],
    backend: &dyn NoveltyBackend,
    selection: Selection<'_>,
    cfg: &PlannerConfig,
    provenance: &TableProvenance,
    workers: usize,
    seen: Option<&SeenPairs>,
) -> Result<(TransitionTable, BuildReport), PlanError> {
    cfg.validate()?;
    let results: Vec<(Result<Vec<ClusterId>, PlanError>, PlanStats)> = run_in_pool(workers, || {
        keys.par_iter()
            .map(|key| {
                let mut rng = key_stream(cfg.seed, key);
                let mut stats = PlanStats::default();
                let planned = match selection {
                    Selection::BestOfN(scorer) => {
                        plan_with_draws(key, backend, scorer, cfg.draws(), cfg, &mut rng, seen, &mut stats)
                    }
                    Selection::NoveltyOnly => gather_candidates(key, backend, cfg.k, cfg, &mut rng, seen, &mut stats)
                        .map(|mut c| {
                            c.truncate(cfg.k);
                            c
                        }),
                };
                (planned, stats)
            })
            .collect()
    })?;
    let mut table = TransitionTable::new(cfg.k, provenance.to_string());
    let mut report = BuildReport { keys: keys.len(), ..BuildReport::default() };
    for (key, (planned, stats)) in keys.iter().zip(results) {
        report.stats.add(&stats);
        match planned {
            Ok(clusters) => {
                table
                    .insert(key.clone(), clusters)
                    .map_err(|e| PlanError::BadConfig(format!("planner produced an invalid entry: {e}")))?;
                report.built += 1;
            }
            Err(e) => report.failures.push((key.clone(), e.to_string())),
        }
    }
    Ok((table, report))
}

/// Mean alignment score of the selected top-k at each draw count. Every draw
/// count reuses the same per-key stream.
pub fn expected_alignment_gain(
    backend: &dyn NoveltyBackend,
    scorer: &dyn AlignmentScorer,
    keys: &[HistoryKey],
    cfg: &PlannerConfig,
    n_values: &[usize],
) -> Result<Vec<(usize, f64)>, PlanError> {
    cfg.validate()?;
    if n_values.windows(2).any(|w| w[0] > w[1]) || n_values.contains(&0) {
        return Err(PlanError::BadConfig("n_values must be positive and ascending".into()));
    }
    let mut out = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let per_key: Vec<f64> = keys
            .par_iter()
            .map(|key| {
                let mut rng = key_stream(cfg.seed, key);
                let chosen =
                    plan_with_draws(key, backend, scorer, n, cfg, &mut rng, None, &mut PlanStats::default())?;
                let s = scorer.score_many(key, &chosen);
                Ok(s.iter().sum::<f64>() / s.len() as f64)
            })
            .collect::<Result<_, PlanError>>()?;
        let mean = if per_key.is_empty() { 0.0 } else { per_key.iter().sum::<f64>() / per_key.len() as f64 };
        out.push((n, mean));
    }
    Ok(out)
}

/// One row per draw count, ascending.
pub fn gain_to_text(rows: &[(usize, f64)], provenance: &str) -> String {
    let mut out = provenance_line(provenance);
    out.push_str("draws\tmean_selected_score\n");
    let sorted: BTreeMap<usize, f64> = rows.iter().copied().collect();
    for (n, v) in sorted {
        let _ = writeln!(out, "{n}\t{v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::novelty::Generation;
    use rand::Rng;

    fn key(v: &[u32]) -> HistoryKey {
        HistoryKey::from_set(v.iter().copied().map(ClusterId).collect()).unwrap()
    }

    /// Uniform over non-key clusters.
    struct Uniform(usize);

    impl NoveltyBackend for Uniform {
        fn id(&self) -> String {
            "uniform".into()
        }
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn propose(&self, key: &HistoryKey, _t: f64, rng: &mut StreamRng) -> Result<Generation, NoveltyError> {
            loop {
                let c = ClusterId(rng.random_range(0..self.0 as u32));
                if !key.contains(c) {
                    return Ok(Generation::Accepted(c));
                }
            }
        }
    }

    /// Always proposes the same cluster.
    struct Stuck;

    impl NoveltyBackend for Stuck {
        fn id(&self) -> String {
            "stuck".into()
        }
        fn vocab_size(&self) -> usize {
            6
        }
        fn propose(&self, _key: &HistoryKey, _t: f64, _rng: &mut StreamRng) -> Result<Generation, NoveltyError> {
            Ok(Generation::Accepted(ClusterId(5)))
        }
    }

    struct Fixed(Vec<f64>);

    impl AlignmentScorer for Fixed {
        fn id(&self) -> String {
            "fixed".into()
        }
        fn score(&self, _key: &HistoryKey, c: ClusterId) -> f64 {
            self.0[c.index()]
        }
    }

    #[test]
    fn tie_break_by_id() {
        // a=2, b=3 tie at 0.9
        let scorer = Fixed(vec![0.0, 0.0, 0.9, 0.9, 0.2, 0.1]);
        let scored: Vec<(ClusterId, f64)> =
            [3, 5, 2, 4].iter().map(|&c| (ClusterId(c), scorer.score(&key(&[0]), ClusterId(c)))).collect();
        assert_eq!(top_k_by_score(&scored, 3), vec![ClusterId(2), ClusterId(3), ClusterId(4)]);
    }

    #[test]
    fn duplicates_are_topped_up_then_filled() {
        let cfg = PlannerConfig { k: 3, ..PlannerConfig::default() };
        let mut stats = PlanStats::default();
        let mut rng = stream(1, Domain::Planner, 0);
        let got = gather_candidates(&key(&[0, 1]), &Stuck, 15, &cfg, &mut rng, None, &mut stats).unwrap();
        assert_eq!(got, vec![ClusterId(5), ClusterId(2), ClusterId(3)]);
        assert_eq!(stats.topup_rounds, TOPUP_ROUNDS);
        assert_eq!(stats.greedy_fills, 2);
        let err = gather_candidates(&key(&[0, 1, 2, 3]), &Stuck, 15, &cfg, &mut rng, None, &mut stats);
        assert!(matches!(err, Err(PlanError::InsufficientCandidates { available: 2, .. })));
    }

    #[test]
    fn factor_one_is_reorder_of_draws() {
        let scorer = Fixed((0..20).map(|i| ((i * 7) % 20) as f64).collect());
        let cfg = PlannerConfig { k: 3, oversample_factor: 1, ..PlannerConfig::default() };
        let k = key(&[0, 1]);
        let mut rng = key_stream(cfg.seed, &k);
        let draws = gather_candidates(&k, &Uniform(20), 3, &cfg, &mut rng, None, &mut PlanStats::default()).unwrap();
        let mut rng = key_stream(cfg.seed, &k);
        let plan = plan_one(&k, &Uniform(20), &scorer, &cfg, &mut rng).unwrap();
        let mut a = draws.clone();
        let mut b = plan.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(plan.windows(2).all(|w| scorer.score(&k, w[0]) >= scorer.score(&k, w[1])));
    }

    #[test]
    fn table_formats_round_trip_and_validate() {
        let scorer = Fixed((0..12).map(|i| i as f64 / 12.0).collect());
        let keys = crate::taxonomy::enumerate_keys(&crate::Taxonomy::synthetic(12), 2, None, 0).unwrap();
        let cfg = PlannerConfig::default();
        let prov = TableProvenance {
            backend_id: "uniform".into(),
            checkpoint_id: "fixed".into(),
            config: cfg,
            build_timestamp: 0,
            extra: String::new(),
        };
        let (table, report) =
            build_table(&keys, &Uniform(12), Selection::BestOfN(&scorer), &cfg, &prov, 2, None).unwrap();
        assert_eq!(report.built, keys.len());
        table.verify().unwrap();
        assert_eq!(TransitionTable::from_text(&table.to_text()).unwrap(), table);
        assert_eq!(TransitionTable::from_bytes(&table.to_bytes()).unwrap(), table);
        let mut t = TransitionTable::new(3, String::new());
        assert!(t.insert(key(&[0, 1]), vec![ClusterId(1), ClusterId(2), ClusterId(3)]).is_err());
        assert!(t.insert(key(&[0, 1]), vec![ClusterId(2), ClusterId(2), ClusterId(3)]).is_err());
        assert!(t.insert(key(&[0, 1]), vec![ClusterId(2), ClusterId(3)]).is_err());
    }

    #[test]
    fn gain_rows_and_order() {
        let scorer = Fixed((0..30).map(|i| (i as f64 * 1.37).sin()).collect());
        let keys: Vec<HistoryKey> = (0..20).map(|i| key(&[i, i + 1])).collect();
        let cfg = PlannerConfig::default();
        let rows = expected_alignment_gain(&Uniform(30), &scorer, &keys, &cfg, &[3, 15]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].1 >= rows[0].1);
        assert!(expected_alignment_gain(&Uniform(30), &scorer, &keys, &cfg, &[15, 3]).is_err());
    }
}
