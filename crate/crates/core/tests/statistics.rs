//! Monte Carlo checks of the samplers against their closed forms.

mod common;

use std::sync::Arc;

use clusterplan_core::evals::{random_baseline, summarize, LabeledKey, RankingEvalCase};
use clusterplan_core::novelty::{fit_prior, mine_transitions, propose_batch, PriorBackend};
use clusterplan_core::rng::{stream, Domain};
use clusterplan_core::simulator::{
    sample_feedback, spawn_population, true_affinity, GroundTruth, GroundTruthParams, PopulationParams,
};
use clusterplan_core::{ClusterId, HistoryKey};
use common::{ids, key};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Chi-square critical values at p = 0.001, from scipy.stats.chi2.ppf(0.999, df).
const CHI2_999_DF2: f64 = 13.815510557964274;
const CHI2_999_DF5: f64 = 20.515005652432873;

fn backend(n: usize, transitions: &[(HistoryKey, ClusterId)], smoothing: f64) -> PriorBackend {
    PriorBackend::new(Arc::new(fit_prior(transitions, n, smoothing).unwrap()))
}

fn counts(backend: &PriorBackend, k: &HistoryKey, n: usize, draws: usize, t: f64, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, Domain::Planner, 0);
    let batch = propose_batch(backend, k, draws, t, 3, &mut rng).unwrap();
    let mut c = vec![0usize; n];
    for id in batch.clusters {
        c[id.index()] += 1;
    }
    c
}

fn softmax_over(logits: &[f64], allowed: &[usize], t: f64) -> Vec<f64> {
    let m = allowed.iter().map(|&i| logits[i] / t).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = allowed.iter().map(|&i| (logits[i] / t - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

#[test]
fn hand_computed_softmax_frequencies() {
    // smoothing 1 with two observations of 4: logits log([1, 1, 3]) over {2, 3, 4}.
    let k = key(&[0, 1]);
    let b = backend(5, &[(k.clone(), ClusterId(4)), (k.clone(), ClusterId(4))], 1.0);
    let draws = 30_000;
    let c = counts(&b, &k, 5, draws, 1.0, 3);
    assert_eq!(c[0] + c[1], 0);
    for (i, want) in [(2, 0.2), (3, 0.2), (4, 0.6)] {
        let f = c[i] as f64 / draws as f64;
        assert!((f - want).abs() <= 0.02, "cluster {i}: {f} vs {want}");
    }
}

#[test]
fn chi_square_goodness_of_fit() {
    let k = key(&[0, 1]);
    let transitions: Vec<(HistoryKey, ClusterId)> =
        [2, 3, 3, 4, 4, 4, 4, 5, 6, 6, 6, 6, 6, 6, 6, 7].iter().map(|&c| (k.clone(), ClusterId(c))).collect();
    let b = backend(8, &transitions, 0.5);
    let logits = b.prior().logits(&k);
    let allowed: Vec<usize> = (2..8).collect();
    let n = 100_000;
    for (i, t) in [0.5, 1.0, 2.0, 4.0].into_iter().enumerate() {
        let probs = softmax_over(&logits, &allowed, t);
        let c = counts(&b, &k, 8, n, t, 100 + i as u64);
        let stat: f64 = allowed
            .iter()
            .zip(&probs)
            .map(|(&j, &p)| {
                let e = p * n as f64;
                (c[j] as f64 - e).powi(2) / e
            })
            .sum();
        assert!(stat < CHI2_999_DF5, "T={t}: chi2 {stat}");
    }

    // An unseen key samples the backoff vector; three options survive masking.
    let small = backend(5, &[(key(&[0, 1]), ClusterId(3)), (key(&[1, 2]), ClusterId(4))], 0.5);
    let unseen = key(&[2, 4]);
    assert!(!small.prior().knows(&unseen));
    let allowed = [0usize, 1, 3];
    let probs = softmax_over(&small.prior().logits(&unseen), &allowed, 1.0);
    let c = counts(&small, &unseen, 5, n, 1.0, 9);
    let stat: f64 = allowed.iter().zip(&probs).map(|(&j, &p)| (c[j] as f64 - p * n as f64).powi(2) / (p * n as f64)).sum();
    assert!(stat < CHI2_999_DF2, "backoff chi2 {stat}");
}

fn entropy(c: &[usize]) -> f64 {
    let n: usize = c.iter().sum();
    c.iter()
        .filter(|&&x| x > 0)
        .map(|&x| {
            let p = x as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

#[test]
fn entropy_grows_with_temperature() {
    let k = key(&[0, 1]);
    let transitions: Vec<(HistoryKey, ClusterId)> =
        [2, 3, 3, 4, 4, 4, 4, 4, 4, 5, 9, 9, 9, 9, 9, 9, 9, 9, 9].iter().map(|&c| (k.clone(), ClusterId(c))).collect();
    let b = backend(12, &transitions, 0.5);
    let mut last = -1.0;
    for t in [0.1, 0.5, 1.0, 2.0, 4.0] {
        let h = entropy(&counts(&b, &k, 12, 20_000, t, 77));
        assert!(h >= last, "entropy {h} at T={t} below {last}");
        last = h;
    }
}

fn default_gt() -> GroundTruth {
    GroundTruth::generate(&GroundTruthParams::default()).unwrap()
}

#[test]
fn playback_rate_converges_to_true_affinity() {
    let gt = default_gt();
    let n = 100_000;
    for (i, (k, c)) in [(key(&[0, 1]), 5), (key(&[10, 40]), 41), (key(&[3, 150]), 90), (key(&[7, 8]), 199)]
        .into_iter()
        .enumerate()
    {
        let p = true_affinity(&gt, &k, ClusterId(c)).unwrap();
        let mut rng = stream(21, Domain::Feedback, i as u64);
        let hits = (0..n).filter(|_| sample_feedback(&gt, &k, ClusterId(c), &mut rng).unwrap().positive_playback).count();
        let f = hits as f64 / n as f64;
        let band = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((f - p).abs() <= band, "{k} -> {c}: {f} vs {p} (band {band})");
    }
}

#[test]
fn even_odds_playback_within_one_point() {
    // Orthogonal embeddings with zero bias give affinity exactly 0.5.
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let gt = GroundTruth::from_embeddings(rows, 4.0, 0.0);
    let k = HistoryKey::from_set(ids(&[0])).unwrap();
    assert_eq!(true_affinity(&gt, &k, ClusterId(2)).unwrap(), 0.5);
    let mut rng = stream(4, Domain::Feedback, 0);
    let n = 100_000;
    let hits = (0..n).filter(|_| sample_feedback(&gt, &k, ClusterId(2), &mut rng).unwrap().positive_playback).count();
    assert!((hits as f64 / n as f64 - 0.5).abs() <= 0.01);
}

#[test]
fn activity_levels_are_heavy_tailed() {
    let gt = default_gt();
    let mut rng = stream(7, Domain::Population, 0);
    let users = spawn_population(&gt, 10_000, 2, &PopulationParams::default(), &mut rng).unwrap();
    let mut a: Vec<f64> = users.iter().map(|u| u.activity_level).collect();
    a.sort_by(f64::total_cmp);
    let ratio = a[a.len() - 1] / a[a.len() / 2];
    assert!(ratio > 5.0, "max/median {ratio}");
}

#[test]
fn mined_pairs_are_novel_and_prior_argmax_is_modal() {
    let gt = default_gt();
    let mut rng = stream(3, Domain::Population, 0);
    let users = spawn_population(&gt, 1000, 2, &PopulationParams::default(), &mut rng).unwrap();
    let mined = mine_transitions(&users, 2);
    assert!(!mined.is_empty());
    assert!(mined.iter().all(|(k, c)| !k.contains(*c)));
    let prior = fit_prior(&mined, 200, 0.5).unwrap();
    let mut by_key: std::collections::HashMap<&HistoryKey, Vec<usize>> = Default::default();
    for (k, c) in &mined {
        by_key.entry(k).or_insert_with(|| vec![0; 200])[c.index()] += 1;
    }
    let mut checked = 0;
    for (k, counts) in by_key {
        let max = *counts.iter().max().unwrap();
        let modes: Vec<usize> = (0..200).filter(|&i| counts[i] == max).collect();
        let logits = prior.logits(k);
        let best = (0..200).filter(|&i| !k.contains(ClusterId(i as u32))).max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a))).unwrap();
        assert!(modes.contains(&best), "key {k}: argmax {best} not among modes {modes:?}");
        checked += 1;
    }
    assert!(checked > 100);
}

fn baseline_cases() -> Vec<LabeledKey> {
    let mut rng = stream(8, Domain::Split, 0);
    (0..40u32)
        .map(|i| {
            use rand::Rng;
            let m = rng.random_range(2..8u32);
            LabeledKey {
                key: key(&[1000 + 2 * i, 1001 + 2 * i]),
                ground_truth: (0..m).map(|c| (ClusterId(c), (rng.random_range(0..=20u32) as f64) * 0.05)).collect(),
            }
        })
        .collect()
}

#[test]
fn random_baseline_matches_independent_monte_carlo() {
    let cases = baseline_cases();
    let k = 3;
    let ours = random_baseline(&cases, k, 2000, 5).unwrap();
    // Second implementation: a different generator and per-case shuffles.
    let mut rng = ChaCha20Rng::seed_from_u64(0xfeed);
    let trials = 2000;
    let mut f1s = Vec::new();
    let mut ndcgs = Vec::new();
    for _ in 0..trials {
        let ranked: Vec<RankingEvalCase> = cases
            .iter()
            .map(|lk| {
                let mut r: Vec<ClusterId> = lk.candidates().collect();
                r.shuffle(&mut rng);
                RankingEvalCase { key: lk.key.clone(), ground_truth: lk.ground_truth.clone(), predicted_ranking: r }
            })
            .collect();
        let s = summarize(&ranked, k);
        f1s.push(s.f1);
        ndcgs.push(s.ndcg);
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt())
    };
    let (f1, f1_se) = stats(&f1s);
    let (ndcg, ndcg_se) = stats(&ndcgs);
    assert!((ours.f1 - f1).abs() <= 2.0 * (ours.f1_se.powi(2) + f1_se.powi(2)).sqrt(), "{} vs {f1}", ours.f1);
    assert!((ours.ndcg - ndcg).abs() <= 2.0 * (ours.ndcg_se.powi(2) + ndcg_se.powi(2)).sqrt(), "{} vs {ndcg}", ours.ndcg);
}

#[test]
fn baseline_spread_shrinks_with_trials() {
    let cases = baseline_cases();
    let spread = |trials: usize| {
        let v: Vec<f64> = (0..20).map(|s| random_baseline(&cases, 3, trials, s).unwrap().f1).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    assert!(spread(1) > spread(10_000));
}

#[test]
fn single_candidate_baseline_is_forced() {
    let cases = vec![LabeledKey { key: key(&[0, 1]), ground_truth: vec![(ClusterId(4), 0.7)] }];
    let b = random_baseline(&cases, 1, 10, 0).unwrap();
    assert_eq!(b.f1, 1.0);
    assert_eq!(b.ndcg, 1.0);
}
