//! Offline ranking metrics and the simulated live experiment.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::feedback::{AggregatedLabel, QueryLog, Signal};
use crate::planner::TransitionTable;
use crate::rng::{stream, stream2, Domain};
use crate::simulator::{sample_event, GroundTruth, UserProfile};
use crate::taxonomy::{canonicalize, ClusterId, HistoryKey};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("every ground-truth score is zero")]
    ZeroIdealGain,
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("trials must be >= 1")]
    NoTrials,
    #[error("at least two arms are required, got {0}")]
    TooFewArms(usize),
    #[error("unknown arm {0:?}")]
    UnknownArm(String),
    #[error("duplicate arm {0:?}")]
    DuplicateArm(String),
    #[error("arm {arm}: {reason}")]
    Policy { arm: String, reason: String },
}

/// Holdout labels of one key.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledKey {
    pub key: HistoryKey,
    /// Sorted by candidate id.
    pub ground_truth: Vec<(ClusterId, f64)>,
}

impl LabeledKey {
    pub fn candidates(&self) -> impl Iterator<Item = ClusterId> + '_ {
        self.ground_truth.iter().map(|g| g.0)
    }
}

/// Groups labels by key. Keys iterate in ascending order.
pub fn group_labels(labels: &[AggregatedLabel]) -> Vec<LabeledKey> {
    let mut by_key: BTreeMap<&HistoryKey, Vec<(ClusterId, f64)>> = BTreeMap::new();
    for l in labels {
        by_key.entry(&l.key).or_default().push((l.candidate, l.score));
    }
    by_key
        .into_iter()
        .map(|(key, mut gt)| {
            gt.sort_by_key(|g| g.0);
            LabeledKey { key: key.clone(), ground_truth: gt }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingEvalCase {
    pub key: HistoryKey,
    pub ground_truth: Vec<(ClusterId, f64)>,
    pub predicted_ranking: Vec<ClusterId>,
}

/// Top-`k` ids by descending score, ties by ascending id.
pub fn top_k_by_score(scored: &[(ClusterId, f64)], k: usize) -> Vec<ClusterId> {
    let mut order: Vec<(ClusterId, f64)> = scored.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().take(k).map(|g| g.0).collect()
}

pub fn f1_at_k(case: &RankingEvalCase, k: usize) -> Result<f64, EvalError> {
    if case.ground_truth.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let relevant: HashSet<ClusterId> = top_k_by_score(&case.ground_truth, k).into_iter().collect();
    let predicted: HashSet<ClusterId> = case.predicted_ranking.iter().take(k).copied().collect();
    let hits = relevant.intersection(&predicted).count() as f64;
    if hits == 0.0 {
        return Ok(0.0);
    }
    let precision = hits / predicted.len() as f64;
    let recall = hits / relevant.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

fn dcg(gains: impl IntoIterator<Item = f64>) -> f64 {
    gains.into_iter().enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum()
}

pub fn ndcg_at_k(case: &RankingEvalCase, k: usize) -> Result<f64, EvalError> {
    let gain_of = |c: ClusterId| case.ground_truth.iter().find(|g| g.0 == c).map_or(0.0, |g| g.1);
    let mut ideal: Vec<f64> = case.ground_truth.iter().map(|g| g.1).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if !(idcg > 0.0) {
        return Err(EvalError::ZeroIdealGain);
    }
    Ok(dcg(case.predicted_ranking.iter().take(k).map(|&c| gain_of(c))) / idcg)
}

/// Mean metrics over a set of cases. NDCG skips cases with no positive gain.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RankingSummary {
    pub f1: f64,
    pub ndcg: f64,
    pub cases: usize,
    pub ndcg_cases: usize,
}

pub fn summarize(cases: &[RankingEvalCase], k: usize) -> RankingSummary {
    let mut f1 = 0.0;
    let mut ndcg = 0.0;
    let mut n_f1 = 0;
    let mut n_ndcg = 0;
    for case in cases {
        if let Ok(v) = f1_at_k(case, k) {
            f1 += v;
            n_f1 += 1;
        }
        if let Ok(v) = ndcg_at_k(case, k) {
            ndcg += v;
            n_ndcg += 1;
        }
    }
    RankingSummary {
        f1: if n_f1 == 0 { 0.0 } else { f1 / n_f1 as f64 },
        ndcg: if n_ndcg == 0 { 0.0 } else { ndcg / n_ndcg as f64 },
        cases: n_f1,
        ndcg_cases: n_ndcg,
    }
}

/// Ranks each key's labeled candidates by `score` (descending, ties by id).
pub fn rank_cases(holdout: &[LabeledKey], mut score: impl FnMut(&HistoryKey, &[ClusterId]) -> Vec<f64>) -> Vec<RankingEvalCase> {
    holdout
        .iter()
        .map(|lk| {
            let candidates: Vec<ClusterId> = lk.candidates().collect();
            let scores = score(&lk.key, &candidates);
            let scored: Vec<(ClusterId, f64)> = candidates.into_iter().zip(scores).collect();
            RankingEvalCase {
                key: lk.key.clone(),
                ground_truth: lk.ground_truth.clone(),
                predicted_ranking: top_k_by_score(&scored, scored.len()),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineSummary {
    pub f1: f64,
    pub ndcg: f64,
    /// Standard errors of the per-trial means.
    pub f1_se: f64,
    pub ndcg_se: f64,
}

/// Metrics of uniformly random rankings of each case's labeled candidates.
pub fn random_baseline(cases: &[LabeledKey], k: usize, trials: usize, seed: u64) -> Result<BaselineSummary, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let mut f1s = Vec::with_capacity(trials);
    let mut ndcgs = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = stream(seed, Domain::Baseline, t as u64);
        let ranked: Vec<RankingEvalCase> = cases
            .iter()
            .map(|lk| {
                let mut ranking: Vec<ClusterId> = lk.candidates().collect();
                ranking.shuffle(&mut rng);
                RankingEvalCase { key: lk.key.clone(), ground_truth: lk.ground_truth.clone(), predicted_ranking: ranking }
            })
            .collect();
        let s = summarize(&ranked, k);
        f1s.push(s.f1);
        ndcgs.push(s.ndcg);
    }
    let mean_se = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        (mean, (var / n).sqrt())
    };
    let (f1, f1_se) = mean_se(&f1s);
    let (ndcg, ndcg_se) = mean_se(&ndcgs);
    Ok(BaselineSummary { f1, ndcg, f1_se, ndcg_se })
}

pub fn offline_report_to_text(rows: &[(String, RankingSummary)], provenance: &str) -> String {
    let mut out = crate::codec::provenance_line(provenance);
    out.push_str("model\tf1_at_k\tndcg_at_k\tcases\n");
    for (name, s) in rows {
        let _ = writeln!(out, "{name}\t{}\t{}\t{}", s.f1, s.ndcg, s.cases);
    }
    out
}

/// How an arm picks clusters for a user.
#[derive(Clone, Copy)]
pub enum ServingPolicy<'a> {
    /// The table entry for the user's key; exploitation on a miss.
    Table(&'a TransitionTable),
    /// One cluster drawn uniformly from the key's table entry per slot.
    ExplorePool(&'a TransitionTable),
    /// Lifetime-interacted clusters with the highest true affinity to the key.
    Exploitation,
    /// Distinct clusters uniformly from the whole vocabulary.
    Random,
}

pub struct Arm<'a> {
    pub name: String,
    pub policy: ServingPolicy<'a>,
}

impl<'a> Arm<'a> {
    pub fn new(name: impl Into<String>, policy: ServingPolicy<'a>) -> Self {
        Arm { name: name.into(), policy }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub n_rounds: usize,
    /// Clusters served per user per round.
    pub slots: usize,
    pub history_k: usize,
    pub seed: u64,
    /// Signal that makes a (user, cluster) pair count towards UEUC.
    pub engagement: Signal,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { n_rounds: 20, slots: 3, history_k: 2, seed: 17, engagement: Signal::PositivePlayback }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LiveMetrics {
    pub novel_impression_ratio: f64,
    pub positive_playback_rate: f64,
    pub completion_rate: f64,
    pub ueuc: usize,
    pub impressions: usize,
    pub table_misses: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub impressions: usize,
    pub positive_playbacks: usize,
    pub novel_impressions: usize,
    /// Cumulative through this round.
    pub ueuc: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub name: String,
    pub metrics: LiveMetrics,
    pub rounds: Vec<RoundMetrics>,
    /// Positive playbacks per user, in population order.
    pub per_user_positive: Vec<u32>,
}

struct UserState {
    user_id: u64,
    history: Vec<ClusterId>,
    lifetime: BTreeSet<ClusterId>,
}

fn exploitation_pick(gt: &GroundTruth, key: &HistoryKey, lifetime: &BTreeSet<ClusterId>, k: usize) -> Vec<ClusterId> {
    let row = gt.affinity_row(key.clusters());
    let rank = |pool: Vec<ClusterId>| {
        let scored: Vec<(ClusterId, f64)> = pool.into_iter().map(|c| (c, row[c.index()])).collect();
        top_k_by_score(&scored, k)
    };
    let mut picked = rank(lifetime.iter().copied().collect());
    if picked.len() < k {
        let rest = (0..gt.n_clusters() as u32).map(ClusterId).filter(|c| !lifetime.contains(c)).collect();
        picked.extend(rank(rest).into_iter().take(k - picked.len()));
    }
    picked
}

fn pick(
    policy: ServingPolicy<'_>,
    gt: &GroundTruth,
    state: &UserState,
    key: &HistoryKey,
    cfg: &SimConfig,
    round: usize,
    misses: &mut usize,
) -> Vec<ClusterId> {
    match policy {
        ServingPolicy::Table(table) => match table.get(key) {
            Some(entry) => entry.iter().copied().take(cfg.slots).collect(),
            None => {
                *misses += 1;
                exploitation_pick(gt, key, &state.lifetime, cfg.slots)
            }
        },
        ServingPolicy::ExplorePool(table) => match table.get(key) {
            Some(entry) => {
                let mut rng = stream2(cfg.seed, Domain::Policy, state.user_id, round as u64);
                (0..cfg.slots).map(|_| entry[rng.random_range(0..entry.len())]).collect()
            }
            None => {
                *misses += 1;
                exploitation_pick(gt, key, &state.lifetime, cfg.slots)
            }
        },
        ServingPolicy::Exploitation => exploitation_pick(gt, key, &state.lifetime, cfg.slots),
        ServingPolicy::Random => {
            let mut rng = stream2(cfg.seed, Domain::Policy, state.user_id, round as u64);
            index::sample(&mut rng, gt.n_clusters(), cfg.slots.min(gt.n_clusters()))
                .into_iter()
                .map(|i| ClusterId(i as u32))
                .collect()
        }
    }
}

/// Serves every user for `n_rounds`. Feedback for `(user, round, slot)` comes
/// from its own stream, so arms sharing a seed see common random numbers.
/// Positively played clusters are appended to the user's history.
fn run_arm(
    policy: ServingPolicy<'_>,
    name: &str,
    population: &[UserProfile],
    gt: &GroundTruth,
    cfg: &SimConfig,
    mut log: Option<&mut Vec<QueryLog>>,
) -> Result<ArmResult, EvalError> {
    let fail = |reason: String| EvalError::Policy { arm: name.to_string(), reason };
    let mut users: Vec<UserState> = population
        .iter()
        .map(|u| UserState { user_id: u.user_id, history: u.history.clone(), lifetime: u.history.iter().copied().collect() })
        .collect();
    let mut engaged: HashSet<(u64, ClusterId)> = HashSet::new();
    let mut per_user_positive = vec![0u32; users.len()];
    let mut rounds = Vec::with_capacity(cfg.n_rounds);
    let mut completion_sum = 0.0;
    let mut misses = 0;
    let mut total = RoundMetrics::default();
    for round in 0..cfg.n_rounds {
        let mut rm = RoundMetrics { round, ..RoundMetrics::default() };
        for (ui, state) in users.iter_mut().enumerate() {
            let key = canonicalize(&state.history, cfg.history_k).map_err(|e| fail(e.to_string()))?;
            let served = pick(policy, gt, state, &key, cfg, round, &mut misses);
            let mut positives = Vec::new();
            for (slot, &c) in served.iter().enumerate() {
                let p = gt.affinity_to(key.clusters(), c);
                let mut rng = stream2(cfg.seed, Domain::Feedback, state.user_id, (round * cfg.slots + slot) as u64);
                let event = sample_event(gt, p, &mut rng);
                rm.impressions += 1;
                if !state.lifetime.contains(&c) {
                    rm.novel_impressions += 1;
                }
                completion_sum += event.completion;
                if event.positive_playback {
                    rm.positive_playbacks += 1;
                    per_user_positive[ui] += 1;
                    positives.push(c);
                }
                let fired = match cfg.engagement {
                    Signal::PositivePlayback => event.positive_playback,
                    Signal::Like => event.like,
                    Signal::Share => event.share,
                    Signal::Skip => event.skip,
                };
                if fired {
                    engaged.insert((state.user_id, c));
                }
                if let Some(log) = log.as_deref_mut() {
                    let ts = (round * population.len() + ui) as u64;
                    log.push(QueryLog::new(key.clone(), c, event, ts).map_err(|e| fail(e.to_string()))?);
                }
            }
            for c in positives {
                state.history.push(c);
                state.lifetime.insert(c);
            }
        }
        rm.ueuc = engaged.len();
        total.impressions += rm.impressions;
        total.positive_playbacks += rm.positive_playbacks;
        total.novel_impressions += rm.novel_impressions;
        rounds.push(rm);
    }
    let n = total.impressions.max(1) as f64;
    let metrics = LiveMetrics {
        novel_impression_ratio: total.novel_impressions as f64 / n,
        positive_playback_rate: total.positive_playbacks as f64 / n,
        completion_rate: completion_sum / n,
        ueuc: engaged.len(),
        impressions: total.impressions,
        table_misses: misses,
    };
    Ok(ArmResult { name: name.to_string(), metrics, rounds, per_user_positive })
}

/// Runs every arm over the same population and seed.
pub fn run_sim_ab(
    arms: &[Arm<'_>],
    population: &[UserProfile],
    gt: &GroundTruth,
    cfg: &SimConfig,
) -> Result<Vec<ArmResult>, EvalError> {
    if arms.len() < 2 {
        return Err(EvalError::TooFewArms(arms.len()));
    }
    let mut names = HashSet::new();
    if let Some(dup) = arms.iter().find(|a| !names.insert(a.name.as_str())) {
        return Err(EvalError::DuplicateArm(dup.name.clone()));
    }
    arms.par_iter().map(|a| run_arm(a.policy, &a.name, population, gt, cfg, None)).collect()
}

/// Logging traffic: one record per served slot. Only table-backed policies
/// can log, since every record must be novel to its key.
pub fn simulate_traffic(
    policy: ServingPolicy<'_>,
    population: &[UserProfile],
    gt: &GroundTruth,
    cfg: &SimConfig,
) -> Result<(Vec<QueryLog>, ArmResult), EvalError> {
    if !matches!(policy, ServingPolicy::Table(_) | ServingPolicy::ExplorePool(_)) {
        return Err(EvalError::Policy { arm: "traffic".into(), reason: "only table policies can log".into() });
    }
    let mut log = Vec::with_capacity(population.len() * cfg.n_rounds * cfg.slots);
    let result = run_arm(policy, "traffic", population, gt, cfg, Some(&mut log))?;
    if result.metrics.table_misses > 0 {
        return Err(EvalError::Policy {
            arm: "traffic".into(),
            reason: format!("{} lookups missed the table", result.metrics.table_misses),
        });
    }
    Ok((log, result))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontierRow {
    pub arm: String,
    pub delta_novel_ratio: f64,
    pub delta_positive_playback: f64,
}

pub fn novelty_quality_frontier(results: &[ArmResult], base: &str) -> Result<Vec<FrontierRow>, EvalError> {
    let b = results.iter().find(|r| r.name == base).ok_or_else(|| EvalError::UnknownArm(base.to_string()))?;
    Ok(results
        .iter()
        .map(|r| FrontierRow {
            arm: r.name.clone(),
            delta_novel_ratio: r.metrics.novel_impression_ratio - b.metrics.novel_impression_ratio,
            delta_positive_playback: r.metrics.positive_playback_rate - b.metrics.positive_playback_rate,
        })
        .collect())
}

pub fn live_metrics_to_text(results: &[ArmResult], provenance: &str) -> String {
    let mut out = crate::codec::provenance_line(provenance);
    out.push_str("arm\tnovel_impression_ratio\tpositive_playback_rate\tcompletion_rate\tueuc\timpressions\ttable_misses\n");
    for r in results {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.name, m.novel_impression_ratio, m.positive_playback_rate, m.completion_rate, m.ueuc, m.impressions, m.table_misses
        );
    }
    out
}

pub fn rounds_to_text(results: &[ArmResult], provenance: &str) -> String {
    let mut out = crate::codec::provenance_line(provenance);
    out.push_str("arm\tround\timpressions\tpositive_playback_rate\tnovel_impression_ratio\tueuc\n");
    for r in results {
        for rm in &r.rounds {
            let n = rm.impressions.max(1) as f64;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.name,
                rm.round,
                rm.impressions,
                rm.positive_playbacks as f64 / n,
                rm.novel_impressions as f64 / n,
                rm.ueuc
            );
        }
    }
    out
}

pub fn frontier_to_text(rows: &[FrontierRow], base: &str, provenance: &str) -> String {
    let mut out = crate::codec::provenance_line(provenance);
    let _ = writeln!(out, "arm\tdelta_novel_ratio_vs_{base}\tdelta_positive_playback_vs_{base}");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}", r.arm, r.delta_novel_ratio, r.delta_positive_playback);
    }
    out
}
