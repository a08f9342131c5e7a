//! Query logging and cohort-level label construction.
//!
//! Logged `(key, served, event)` records are counted per `(key, candidate)`
//! pair, then support-filtered, normalized against the corpus prior and
//! rounded to a fixed grid before becoming pointwise or pairwise examples.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use rand::seq::index;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{provenance_line, split_provenance, FormatError};
use crate::rng::{stream, Domain};
use crate::simulator::FeedbackEvent;
use crate::taxonomy::{ClusterId, HistoryKey};

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("no labels to normalize")]
    NoLabels,
    #[error("rounding interval {0} must lie in (0, 1] and divide 1")]
    BadInterval(f64),
    #[error("min_support must be >= 1")]
    BadSupport,
    #[error("served cluster {served} is part of key {key}")]
    ServedInHistory { key: String, served: u32 },
    #[error("unknown signal {0:?}")]
    UnknownSignal(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Signal {
    PositivePlayback,
    Like,
    Share,
    Skip,
}

impl Signal {
    pub const ALL: [Signal; 4] = [Signal::PositivePlayback, Signal::Like, Signal::Share, Signal::Skip];

    pub fn name(self) -> &'static str {
        match self {
            Signal::PositivePlayback => "positive_playback",
            Signal::Like => "like",
            Signal::Share => "share",
            Signal::Skip => "skip",
        }
    }

    pub fn parse(name: &str) -> Result<Signal, FeedbackError> {
        Signal::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| FeedbackError::UnknownSignal(name.to_string()))
    }

    fn index(self) -> usize {
        self as usize
    }

    fn fired(self, event: &FeedbackEvent) -> bool {
        match self {
            Signal::PositivePlayback => event.positive_playback,
            Signal::Like => event.like,
            Signal::Share => event.share,
            Signal::Skip => event.skip,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryLog {
    pub key: HistoryKey,
    pub served: ClusterId,
    pub event: FeedbackEvent,
    pub timestamp: u64,
}

impl QueryLog {
    pub fn new(key: HistoryKey, served: ClusterId, event: FeedbackEvent, timestamp: u64) -> Result<Self, FeedbackError> {
        if key.contains(served) {
            return Err(FeedbackError::ServedInHistory { key: key.to_string(), served: served.0 });
        }
        Ok(QueryLog { key, served, event, timestamp })
    }

    /// Fixed-order, self-describing record line (no trailing newline).
    pub fn to_line(&self) -> String {
        let e = &self.event;
        format!(
            "ts={} key={} served={} playback={} like={} share={} skip={} completion={} dwell_ms={}",
            self.timestamp,
            self.key,
            self.served,
            u8::from(e.positive_playback),
            u8::from(e.like),
            u8::from(e.share),
            u8::from(e.skip),
            e.completion,
            e.dwell_ms
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        const FIELDS: [&str; 9] = ["ts", "key", "served", "playback", "like", "share", "skip", "completion", "dwell_ms"];
        let mut values = [""; 9];
        let mut parts = line.split(' ');
        for (slot, name) in values.iter_mut().zip(FIELDS) {
            let part = parts.next().ok_or_else(|| format!("missing field {name}"))?;
            *slot = part
                .strip_prefix(name)
                .and_then(|p| p.strip_prefix('='))
                .ok_or_else(|| format!("expected field {name}, found {part:?}"))?;
        }
        if parts.next().is_some() {
            return Err("trailing fields".into());
        }
        let flag = |v: &str| match v {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(format!("bad flag {other:?}")),
        };
        let key: HistoryKey = values[1].parse().map_err(|e: crate::taxonomy::TaxonomyError| e.to_string())?;
        let served = ClusterId(values[2].parse().map_err(|_| "bad served id".to_string())?);
        let event = FeedbackEvent {
            positive_playback: flag(values[3])?,
            like: flag(values[4])?,
            share: flag(values[5])?,
            skip: flag(values[6])?,
            completion: values[7].parse().map_err(|_| "bad completion".to_string())?,
            dwell_ms: values[8].parse().map_err(|_| "bad dwell".to_string())?,
        };
        if event.skip && (event.positive_playback || event.completion != 0.0) {
            return Err("skip events carry no playback or completion".into());
        }
        if !(0.0..=1.0).contains(&event.completion) {
            return Err("completion outside [0, 1]".into());
        }
        let timestamp = values[0].parse().map_err(|_| "bad timestamp".to_string())?;
        QueryLog::new(key, served, event, timestamp).map_err(|e| e.to_string())
    }
}

pub fn logs_to_text(logs: &[QueryLog], provenance: &str) -> String {
    let mut out = provenance_line(provenance);
    for log in logs {
        out.push_str(&log.to_line());
        out.push('\n');
    }
    out
}

pub fn logs_from_text(text: &str) -> Result<Vec<QueryLog>, FormatError> {
    let (_, lines) = split_provenance(text);
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(line, l)| QueryLog::parse_line(l).map_err(|reason| FormatError::Line { line, reason }))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct PairCounts {
    impressions: u64,
    positives: [u64; 4],
}

/// Streaming per-pair counter. Memory is bounded by the number of distinct
/// `(key, candidate)` pairs; [`merge`](Aggregator::merge) is commutative and
/// associative, so shards can be reduced in any order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregator {
    counts: HashMap<(HistoryKey, ClusterId), PairCounts>,
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, log: &QueryLog) {
        let entry = self.counts.entry((log.key.clone(), log.served)).or_default();
        entry.impressions += 1;
        for s in Signal::ALL {
            if s.fired(&log.event) {
                entry.positives[s.index()] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: Aggregator) {
        for (pair, c) in other.counts {
            let entry = self.counts.entry(pair).or_default();
            entry.impressions += c.impressions;
            for (a, b) in entry.positives.iter_mut().zip(c.positives) {
                *a += b;
            }
        }
    }

    pub fn pairs(&self) -> usize {
        self.counts.len()
    }

    /// Labels sorted by `(key, candidate)`, with `score` set to the raw primary rate.
    pub fn finish(&self, primary: Signal) -> Vec<AggregatedLabel> {
        let mut labels: Vec<AggregatedLabel> = self
            .counts
            .iter()
            .map(|((key, candidate), c)| {
                let n = c.impressions as f64;
                let raw_rates = c.positives.map(|p| p as f64 / n);
                AggregatedLabel {
                    key: key.clone(),
                    candidate: *candidate,
                    impressions: c.impressions,
                    raw_rates,
                    primary,
                    score: raw_rates[primary.index()],
                }
            })
            .collect();
        labels.sort_by(|a, b| (&a.key, a.candidate).cmp(&(&b.key, b.candidate)));
        labels
    }
}

pub fn aggregate<'a>(logs: impl IntoIterator<Item = &'a QueryLog>, primary: Signal) -> Vec<AggregatedLabel> {
    let mut agg = Aggregator::new();
    for log in logs {
        agg.push(log);
    }
    agg.finish(primary)
}

/// Shard index of a `(key, candidate)` pair.
pub fn shard_of(key: &HistoryKey, candidate: ClusterId, shards: usize) -> usize {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    key.hash(&mut h);
    candidate.hash(&mut h);
    (h.finish() % shards.max(1) as u64) as usize
}

/// Map-reduce aggregation: logs are partitioned by pair hash, counted per
/// shard in parallel, and merged.
pub fn aggregate_sharded(logs: &[QueryLog], primary: Signal, shards: usize) -> Vec<AggregatedLabel> {
    let shards = shards.max(1);
    let partials: Vec<Aggregator> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut agg = Aggregator::new();
            for log in logs.iter().filter(|l| shard_of(&l.key, l.served, shards) == s) {
                agg.push(log);
            }
            agg
        })
        .collect();
    let mut total = Aggregator::new();
    for part in partials {
        total.merge(part);
    }
    total.finish(primary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedLabel {
    pub key: HistoryKey,
    pub candidate: ClusterId,
    pub impressions: u64,
    raw_rates: [f64; 4],
    pub primary: Signal,
    pub score: f64,
}

impl AggregatedLabel {
    pub fn rate(&self, signal: Signal) -> f64 {
        self.raw_rates[signal.index()]
    }

    pub fn primary_rate(&self) -> f64 {
        self.rate(self.primary)
    }

    pub fn raw_rates(&self) -> impl Iterator<Item = (Signal, f64)> + '_ {
        Signal::ALL.into_iter().map(|s| (s, self.rate(s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalization {
    /// `r / (r + rho)` with `rho` the pooled corpus rate.
    PriorRatio,
    /// Empirical CDF of the rate clipped to the `[lower, upper]` quantiles, rescaled to [0, 1].
    Quantile { lower: f64, upper: f64 },
}

impl Normalization {
    pub const QUANTILE_DEFAULT: Normalization = Normalization::Quantile { lower: 0.05, upper: 0.95 };
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn normalize_scores(labels: &mut [AggregatedLabel], method: Normalization) -> Result<(), FeedbackError> {
    if labels.is_empty() {
        return Err(FeedbackError::NoLabels);
    }
    match method {
        Normalization::PriorRatio => {
            let impressions: u64 = labels.iter().map(|l| l.impressions).sum();
            let positives: f64 = labels.iter().map(|l| l.primary_rate() * l.impressions as f64).sum();
            let rho = positives / impressions as f64;
            if !(rho > 0.0) {
                return Err(FeedbackError::DegenerateCorpus("corpus mean rate is zero".into()));
            }
            for l in labels.iter_mut() {
                let r = l.primary_rate();
                l.score = r / (r + rho);
            }
        }
        Normalization::Quantile { lower, upper } => {
            let mut sorted: Vec<f64> = labels.iter().map(AggregatedLabel::primary_rate).collect();
            sorted.sort_by(f64::total_cmp);
            let lo = quantile(&sorted, lower);
            let hi = quantile(&sorted, upper);
            if !(hi > lo) {
                return Err(FeedbackError::DegenerateCorpus("rates are identical within the clipping range".into()));
            }
            let ecdf = |x: f64| sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64;
            let (f_lo, f_hi) = (ecdf(lo), ecdf(hi));
            for l in labels.iter_mut() {
                let r = l.primary_rate().clamp(lo, hi);
                l.score = if f_hi > f_lo {
                    ((ecdf(r) - f_lo) / (f_hi - f_lo)).clamp(0.0, 1.0)
                } else {
                    (r - lo) / (hi - lo)
                };
            }
        }
    }
    Ok(())
}

pub fn filter_support(labels: Vec<AggregatedLabel>, min_support: u64) -> Result<Vec<AggregatedLabel>, FeedbackError> {
    if min_support == 0 {
        return Err(FeedbackError::BadSupport);
    }
    Ok(labels.into_iter().filter(|l| l.impressions >= min_support).collect())
}

const GRID_EPS: f64 = 1e-9;

/// Half-up rounding onto the `interval` grid.
pub fn round_to_grid(score: f64, interval: f64) -> f64 {
    let steps = (score / interval + 0.5 + GRID_EPS).floor();
    (steps * interval).clamp(0.0, 1.0)
}

pub fn round_scores(labels: &mut [AggregatedLabel], interval: f64) -> Result<(), FeedbackError> {
    let per_unit = 1.0 / interval;
    if !(interval > 0.0 && interval <= 1.0) || (per_unit - per_unit.round()).abs() * interval > GRID_EPS {
        return Err(FeedbackError::BadInterval(interval));
    }
    for l in labels.iter_mut() {
        l.score = round_to_grid(l.score, interval);
    }
    Ok(())
}

/// Post-aggregation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelConfig {
    pub min_support: u64,
    pub normalization: Normalization,
    pub rounding_interval: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig { min_support: 50, normalization: Normalization::PriorRatio, rounding_interval: 0.05 }
    }
}

/// Filter, normalize and round, in that order.
pub fn finalize_labels(labels: Vec<AggregatedLabel>, cfg: &LabelConfig) -> Result<Vec<AggregatedLabel>, FeedbackError> {
    let mut labels = filter_support(labels, cfg.min_support)?;
    normalize_scores(&mut labels, cfg.normalization)?;
    round_scores(&mut labels, cfg.rounding_interval)?;
    Ok(labels)
}

const LABEL_HEADER: &str = "key\tcandidate\timpressions\tpositive_playback\tlike\tshare\tskip\tscore";

pub fn labels_to_text(labels: &[AggregatedLabel], provenance: &str) -> String {
    let mut out = provenance_line(provenance);
    out.push_str(LABEL_HEADER);
    out.push('\n');
    for l in labels {
        let _ = write!(out, "{}\t{}\t{}", l.key, l.candidate, l.impressions);
        for r in l.raw_rates {
            let _ = write!(out, "\t{r}");
        }
        let _ = writeln!(out, "\t{}", l.score);
    }
    out
}

pub fn labels_from_text(text: &str, primary: Signal) -> Result<Vec<AggregatedLabel>, FormatError> {
    let (_, mut lines) = split_provenance(text);
    match lines.next() {
        Some((_, header)) if header == LABEL_HEADER => {}
        Some((line, _)) => return Err(FormatError::Line { line, reason: "unexpected header".into() }),
        None => return Err(FormatError::Truncated(0)),
    }
    let mut out = Vec::new();
    for (line, text) in lines {
        if text.is_empty() {
            continue;
        }
        let bad = |reason: &str| FormatError::Line { line, reason: reason.to_string() };
        let cols: Vec<&str> = text.split('\t').collect();
        if cols.len() != 8 {
            return Err(bad("expected 8 columns"));
        }
        let key: HistoryKey = cols[0].parse().map_err(|_| bad("bad key"))?;
        let candidate = ClusterId(cols[1].parse().map_err(|_| bad("bad candidate"))?);
        let impressions = cols[2].parse().map_err(|_| bad("bad impressions"))?;
        let mut raw_rates = [0.0; 4];
        for (slot, col) in raw_rates.iter_mut().zip(&cols[3..7]) {
            *slot = col.parse().map_err(|_| bad("bad rate"))?;
        }
        let score = cols[7].parse().map_err(|_| bad("bad score"))?;
        out.push(AggregatedLabel { key, candidate, impressions, raw_rates, primary, score });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseExample {
    pub key: HistoryKey,
    pub candidate: ClusterId,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseExample {
    pub key: HistoryKey,
    pub winner: ClusterId,
    pub loser: ClusterId,
    pub margin: f64,
}

pub fn make_pointwise(labels: &[AggregatedLabel]) -> Vec<PointwiseExample> {
    labels
        .iter()
        .map(|l| PointwiseExample { key: l.key.clone(), candidate: l.candidate, target: l.score })
        .collect()
}

pub fn pointwise_to_text(examples: &[PointwiseExample], provenance: &str) -> String {
    let mut out = provenance_line(provenance);
    out.push_str("key\tcandidate\ttarget\n");
    for e in examples {
        let _ = writeln!(out, "{}\t{}\t{}", e.key, e.candidate, e.target);
    }
    out
}

fn table_rows<'t>(text: &'t str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'t str>)>, FormatError> {
    let (_, mut lines) = split_provenance(text);
    match lines.next() {
        Some((_, h)) if h == header => {}
        Some((line, _)) => return Err(FormatError::Line { line, reason: "unexpected header".into() }),
        None => return Err(FormatError::Truncated(0)),
    }
    Ok(lines.filter(|(_, l)| !l.is_empty()).map(|(i, l)| (i, l.split('\t').collect())))
}

pub fn pointwise_from_text(text: &str) -> Result<Vec<PointwiseExample>, FormatError> {
    table_rows(text, "key\tcandidate\ttarget")?
        .map(|(line, cols)| {
            let bad = || FormatError::Line { line, reason: "expected key<TAB>candidate<TAB>target".into() };
            if cols.len() != 3 {
                return Err(bad());
            }
            Ok(PointwiseExample {
                key: cols[0].parse().map_err(|_| bad())?,
                candidate: ClusterId(cols[1].parse().map_err(|_| bad())?),
                target: cols[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn pairwise_to_text(examples: &[PairwiseExample], provenance: &str) -> String {
    let mut out = provenance_line(provenance);
    out.push_str("key\twinner\tloser\tmargin\n");
    for e in examples {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.key, e.winner, e.loser, e.margin);
    }
    out
}

pub fn pairwise_from_text(text: &str) -> Result<Vec<PairwiseExample>, FormatError> {
    table_rows(text, "key\twinner\tloser\tmargin")?
        .map(|(line, cols)| {
            let bad = || FormatError::Line { line, reason: "expected key<TAB>winner<TAB>loser<TAB>margin".into() };
            if cols.len() != 4 {
                return Err(bad());
            }
            Ok(PairwiseExample {
                key: cols[0].parse().map_err(|_| bad())?,
                winner: ClusterId(cols[1].parse().map_err(|_| bad())?),
                loser: ClusterId(cols[2].parse().map_err(|_| bad())?),
                margin: cols[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Contrastive pairs per key: every candidate pair whose score gap exceeds
/// `min_margin`, uniformly down-sampled to `max_pairs_per_key`.
pub fn make_pairwise(
    labels: &[AggregatedLabel],
    min_margin: f64,
    max_pairs_per_key: usize,
    seed: u64,
) -> Vec<PairwiseExample> {
    let mut by_key: BTreeMap<&HistoryKey, Vec<&AggregatedLabel>> = BTreeMap::new();
    for l in labels {
        by_key.entry(&l.key).or_default().push(l);
    }
    let mut out = Vec::new();
    for (key, mut group) in by_key {
        group.sort_by_key(|l| l.candidate);
        let mut pairs = Vec::new();
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                let gap = (a.score - b.score).abs();
                if gap > min_margin + GRID_EPS {
                    let (w, l) = if a.score > b.score { (a, b) } else { (b, a) };
                    pairs.push(PairwiseExample { key: key.clone(), winner: w.candidate, loser: l.candidate, margin: gap });
                }
            }
        }
        if pairs.len() > max_pairs_per_key {
            let mut rng = stream(seed, Domain::Pairwise, key.fingerprint());
            let mut keep = index::sample(&mut rng, pairs.len(), max_pairs_per_key).into_vec();
            keep.sort_unstable();
            out.extend(keep.into_iter().map(|i| pairs[i].clone()));
        } else {
            out.extend(pairs);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(v: &[u32]) -> HistoryKey {
        HistoryKey::from_set(v.iter().copied().map(ClusterId).collect()).unwrap()
    }

    fn event(playback: bool) -> FeedbackEvent {
        FeedbackEvent {
            positive_playback: playback,
            like: false,
            share: false,
            skip: !playback,
            completion: if playback { 0.5 } else { 0.0 },
            dwell_ms: if playback { 15000 } else { 0 },
        }
    }

    fn label(k: &[u32], c: u32, impressions: u64, rate: f64) -> AggregatedLabel {
        AggregatedLabel {
            key: key(k),
            candidate: ClusterId(c),
            impressions,
            raw_rates: [rate, 0.0, 0.0, 1.0 - rate],
            primary: Signal::PositivePlayback,
            score: rate,
        }
    }

    #[test]
    fn aggregate_counts_rates() {
        let logs: Vec<QueryLog> = [true, true, false, true]
            .iter()
            .enumerate()
            .map(|(t, &p)| QueryLog::new(key(&[1, 2]), ClusterId(5), event(p), t as u64).unwrap())
            .collect();
        let labels = aggregate(&logs, Signal::PositivePlayback);
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].impressions, 4);
        assert_eq!(labels[0].rate(Signal::PositivePlayback), 0.75);
        assert_eq!(labels[0].rate(Signal::Skip), 0.25);
        assert!(aggregate(&[], Signal::Like).is_empty());
        assert!(QueryLog::new(key(&[1, 2]), ClusterId(2), event(true), 0).is_err());
    }

    #[test]
    fn log_line_round_trip_and_rejects() {
        let log = QueryLog::new(key(&[3, 7]), ClusterId(5), event(true), 42).unwrap();
        let line = log.to_line();
        assert_eq!(line, "ts=42 key=3,7 served=5 playback=1 like=0 share=0 skip=0 completion=0.5 dwell_ms=15000");
        assert_eq!(QueryLog::parse_line(&line).unwrap(), log);
        assert!(QueryLog::parse_line("ts=1 key=3,7 served=3 playback=1 like=0 share=0 skip=0 completion=0.5 dwell_ms=1").is_err());
        assert!(QueryLog::parse_line("ts=1 key=3,7 served=4 playback=0 like=0 share=0 skip=1 completion=0.5 dwell_ms=1").is_err());
        assert!(QueryLog::parse_line("ts=1 served=4").is_err());
    }

    #[test]
    fn prior_ratio_and_quantile() {
        let mut labels = vec![label(&[0, 1], 2, 10, 0.2), label(&[0, 1], 3, 10, 0.0), label(&[0, 1], 4, 10, 0.4)];
        normalize_scores(&mut labels, Normalization::PriorRatio).unwrap();
        // pooled rate is 0.2
        assert!((labels[0].score - 0.5).abs() < 1e-12);
        assert_eq!(labels[1].score, 0.0);
        assert!((labels[2].score - 0.4 / 0.6).abs() < 1e-12);

        let mut q: Vec<AggregatedLabel> = (0..40).map(|i| label(&[0, 1], i + 2, 10, i as f64 / 80.0)).collect();
        normalize_scores(&mut q, Normalization::QUANTILE_DEFAULT).unwrap();
        assert_eq!(q[0].score, 0.0);
        assert_eq!(q[39].score, 1.0);
        assert!(q.windows(2).all(|w| w[0].score <= w[1].score));
        // strictly increasing between the clipping quantiles
        assert!(q[2..38].windows(2).all(|w| w[0].score < w[1].score));

        let mut zero = vec![label(&[0, 1], 2, 10, 0.0)];
        assert!(matches!(normalize_scores(&mut zero, Normalization::PriorRatio), Err(FeedbackError::DegenerateCorpus(_))));
        let mut flat = vec![label(&[0, 1], 2, 10, 0.3), label(&[0, 1], 3, 10, 0.3)];
        assert!(matches!(normalize_scores(&mut flat, Normalization::QUANTILE_DEFAULT), Err(FeedbackError::DegenerateCorpus(_))));
        assert_eq!(normalize_scores(&mut [], Normalization::PriorRatio), Err(FeedbackError::NoLabels));
    }

    #[test]
    fn support_filter() {
        let labels = vec![label(&[0, 1], 2, 3, 0.1), label(&[0, 1], 3, 50, 0.1), label(&[0, 1], 4, 49, 0.1)];
        let kept = filter_support(labels.clone(), 50).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].candidate, ClusterId(3));
        assert_eq!(filter_support(labels.clone(), 1).unwrap(), labels);
        assert_eq!(filter_support(labels, 0), Err(FeedbackError::BadSupport));
    }

    #[test]
    fn rounding_half_up() {
        assert!((round_to_grid(0.07, 0.05) - 0.05).abs() < 1e-12);
        assert!((round_to_grid(0.075, 0.05) - 0.10).abs() < 1e-12);
        assert_eq!(round_to_grid(0.0, 0.05), 0.0);
        assert!((round_to_grid(0.99, 0.05) - 1.0).abs() < 1e-12);
        let mut labels = vec![label(&[0, 1], 2, 3, 0.1)];
        assert!(round_scores(&mut labels, 0.3).is_err());
        assert!(round_scores(&mut labels, 0.0).is_err());
        assert!(round_scores(&mut labels, 0.25).is_ok());
    }

    #[test]
    fn pairwise_excludes_ties() {
        let mut labels = vec![label(&[0, 1], 2, 60, 0.8), label(&[0, 1], 3, 60, 0.5), label(&[0, 1], 4, 60, 0.5)];
        for l in &mut labels {
            l.score = l.primary_rate();
        }
        let pairs = make_pairwise(&labels, 0.0, 100, 1);
        let got: Vec<(u32, u32)> = pairs.iter().map(|p| (p.winner.0, p.loser.0)).collect();
        assert_eq!(got, vec![(2, 3), (2, 4)]);
        assert!(pairs.iter().all(|p| (p.margin - 0.3).abs() < 1e-12));

        let distinct: Vec<AggregatedLabel> = (2..8).map(|c| label(&[0, 1], c, 60, c as f64 / 10.0)).collect();
        assert_eq!(make_pairwise(&distinct, 0.0, 100, 1).len(), 15);
        // one grid step is not a margin beyond 0.05
        let grid = vec![label(&[0, 1], 2, 60, 0.15000000000000002), label(&[0, 1], 3, 60, 0.1)];
        assert!(make_pairwise(&grid, 0.05, 100, 1).is_empty());
        let capped = make_pairwise(&distinct, 0.0, 4, 9);
        assert_eq!(capped.len(), 4);
        assert_eq!(capped, make_pairwise(&distinct, 0.0, 4, 9));
    }

    #[test]
    fn label_table_round_trip() {
        let labels = vec![label(&[0, 1], 2, 60, 0.1 + 0.2), label(&[0, 3], 4, 70, 1.0 / 3.0)];
        let text = labels_to_text(&labels, "stage=aggregate");
        assert!(text.starts_with("# provenance: stage=aggregate\nkey\tcandidate"));
        assert_eq!(labels_from_text(&text, Signal::PositivePlayback).unwrap(), labels);
        let examples = make_pointwise(&labels);
        assert_eq!(pointwise_from_text(&pointwise_to_text(&examples, "p")).unwrap(), examples);
        let same_key = vec![label(&[0, 1], 2, 60, 0.3), label(&[0, 1], 4, 70, 0.6)];
        let pairs = make_pairwise(&same_key, 0.0, 10, 1);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairwise_from_text(&pairwise_to_text(&pairs, "")).unwrap(), pairs);
    }
}
