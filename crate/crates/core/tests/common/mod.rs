#![allow(dead_code)]

use std::sync::Arc;

use clusterplan_core::feedback::{aggregate, AggregatedLabel, QueryLog, Signal};
use clusterplan_core::novelty::{fit_prior, mine_transitions, PriorBackend};
use clusterplan_core::rng::{stream, Domain};
use clusterplan_core::simulator::{spawn_population, FeedbackEvent, GroundTruth, GroundTruthParams, PopulationParams, UserProfile};
use clusterplan_core::{ClusterId, HistoryKey};

pub fn ids(v: &[u32]) -> Vec<ClusterId> {
    v.iter().copied().map(ClusterId).collect()
}

pub fn key(v: &[u32]) -> HistoryKey {
    HistoryKey::from_set(ids(v)).unwrap()
}

pub fn event(playback: bool) -> FeedbackEvent {
    FeedbackEvent {
        positive_playback: playback,
        like: false,
        share: false,
        skip: !playback,
        completion: if playback { 0.5 } else { 0.0 },
        dwell_ms: if playback { 15_000 } else { 0 },
    }
}

pub fn log(k: &HistoryKey, served: u32, playback: bool, ts: u64) -> QueryLog {
    QueryLog::new(k.clone(), ClusterId(served), event(playback), ts).unwrap()
}

/// Labels with exactly the given (positives, impressions) per candidate of one key.
pub fn labels_with_counts(k: &HistoryKey, counts: &[(u32, u64, u64)]) -> Vec<AggregatedLabel> {
    let mut logs = Vec::new();
    for &(c, pos, n) in counts {
        for i in 0..n {
            logs.push(log(k, c, i < pos, i));
        }
    }
    aggregate(&logs, Signal::PositivePlayback)
}

pub struct SmallWorld {
    pub gt: GroundTruth,
    pub population: Vec<UserProfile>,
    pub backend: PriorBackend,
}

pub fn small_world(n_clusters: usize, n_users: usize, seed: u64) -> SmallWorld {
    let params = GroundTruthParams { n_clusters, seed, ..GroundTruthParams::default() };
    let gt = GroundTruth::generate(&params).unwrap();
    let mut rng = stream(seed, Domain::Population, 0);
    let population = spawn_population(&gt, n_users, 2, &PopulationParams::default(), &mut rng).unwrap();
    let prior = fit_prior(&mine_transitions(&population, 2), n_clusters, 0.5).unwrap();
    SmallWorld { gt, population, backend: PriorBackend::new(Arc::new(prior)) }
}
