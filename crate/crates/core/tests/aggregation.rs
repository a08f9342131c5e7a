//! Aggregation on a million-record stream with known per-pair counts.

mod common;

use std::collections::HashMap;

use clusterplan_core::feedback::{aggregate, aggregate_sharded, filter_support, AggregatedLabel, QueryLog, Signal};
use clusterplan_core::rng::{stream, Domain};
use clusterplan_core::simulator::FeedbackEvent;
use clusterplan_core::{enumerate_keys, ClusterId, HistoryKey, Taxonomy};
use rand::seq::SliceRandom;
use rand::Rng;

struct Planted {
    logs: Vec<QueryLog>,
    /// (impressions, playbacks, likes, shares) per pair.
    counts: HashMap<(HistoryKey, ClusterId), [u64; 4]>,
}

fn planted(records: usize) -> Planted {
    let keys = enumerate_keys(&Taxonomy::synthetic(60), 2, Some(400), 1).unwrap();
    let mut rng = stream(99, Domain::Traffic, 0);
    let mut counts: HashMap<(HistoryKey, ClusterId), [u64; 4]> = HashMap::new();
    let mut logs = Vec::with_capacity(records);
    for ts in 0..records as u64 {
        let key = &keys[rng.random_range(0..keys.len())];
        let served = loop {
            let c = ClusterId(rng.random_range(0..60));
            if !key.contains(c) {
                break c;
            }
        };
        // Per-pair playback probability derived from the ids, so pairs differ.
        let p = ((served.0 as f64 + key.clusters()[0].0 as f64) % 17.0) / 17.0;
        let playback = rng.random::<f64>() < p;
        let like = playback && rng.random::<f64>() < 0.2;
        let share = like && rng.random::<f64>() < 0.3;
        let event = FeedbackEvent {
            positive_playback: playback,
            like,
            share,
            skip: !playback,
            completion: if playback { 0.25 } else { 0.0 },
            dwell_ms: if playback { 7500 } else { 0 },
        };
        let c = counts.entry((key.clone(), served)).or_default();
        c[0] += 1;
        c[1] += playback as u64;
        c[2] += like as u64;
        c[3] += share as u64;
        logs.push(QueryLog::new(key.clone(), served, event, ts).unwrap());
    }
    Planted { logs, counts }
}

fn check_rates(labels: &[AggregatedLabel], counts: &HashMap<(HistoryKey, ClusterId), [u64; 4]>) {
    assert_eq!(labels.len(), counts.len());
    for l in labels {
        let c = counts[&(l.key.clone(), l.candidate)];
        assert_eq!(l.impressions, c[0]);
        let n = c[0] as f64;
        for (signal, want) in [
            (Signal::PositivePlayback, c[1] as f64 / n),
            (Signal::Like, c[2] as f64 / n),
            (Signal::Share, c[3] as f64 / n),
            (Signal::Skip, (c[0] - c[1]) as f64 / n),
        ] {
            assert!((l.rate(signal) - want).abs() < 1e-12, "{} -> {}: {signal:?}", l.key, l.candidate);
        }
    }
}

#[test]
fn million_record_stream() {
    let Planted { mut logs, counts } = planted(1_000_000);
    let single = aggregate(&logs, Signal::PositivePlayback);
    check_rates(&single, &counts);
    for shards in [1, 3, 8, 64] {
        assert_eq!(aggregate_sharded(&logs, Signal::PositivePlayback, shards), single, "{shards} shards");
    }
    logs.shuffle(&mut stream(5, Domain::Traffic, 1));
    assert_eq!(aggregate(&logs, Signal::PositivePlayback), single);
    assert_eq!(aggregate_sharded(&logs, Signal::PositivePlayback, 8), single);
}

#[test]
fn counting_examples() {
    let k = common::key(&[1, 2]);
    let logs: Vec<QueryLog> =
        [true, true, false, true].iter().enumerate().map(|(t, &p)| common::log(&k, 5, p, t as u64)).collect();
    let labels = aggregate(&logs, Signal::PositivePlayback);
    assert_eq!(labels.len(), 1);
    assert_eq!(labels[0].rate(Signal::PositivePlayback), 0.75);
    assert!(aggregate(&[], Signal::PositivePlayback).is_empty());
}

#[test]
fn support_filter_matches_recount() {
    let Planted { logs, counts } = planted(50_000);
    let labels = aggregate(&logs, Signal::PositivePlayback);
    for min in [1, 5, 10, 20] {
        let kept = filter_support(labels.clone(), min).unwrap();
        assert_eq!(kept.len(), counts.values().filter(|c| c[0] >= min).count());
        assert!(kept.iter().all(|l| l.impressions >= min));
    }
    assert_eq!(filter_support(labels.clone(), 1).unwrap(), labels);
}
