//! The simulated live experiment.

mod common;

use std::sync::OnceLock;

use clusterplan_core::alignment::GroundTruthScorer;
use clusterplan_core::evals::{novelty_quality_frontier, run_sim_ab, simulate_traffic, Arm, ArmResult, ServingPolicy, SimConfig};
use clusterplan_core::planner::{build_table, PlannerConfig, Selection, TableProvenance, TransitionTable};
use clusterplan_core::{enumerate_keys, Taxonomy};
use common::{small_world, SmallWorld};

struct Setup {
    world: SmallWorld,
    aligned: TransitionTable,
    novelty: TransitionTable,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let world = small_world(60, 800, 4);
        let keys = enumerate_keys(&Taxonomy::synthetic(60), 2, None, 0).unwrap();
        let cfg = PlannerConfig::default();
        let prov = TableProvenance {
            backend_id: "prior".into(),
            checkpoint_id: "gt".into(),
            config: cfg,
            build_timestamp: 0,
            extra: String::new(),
        };
        let scorer = GroundTruthScorer(&world.gt);
        let aligned = build_table(&keys, &world.backend, Selection::BestOfN(&scorer), &cfg, &prov, 4, None).unwrap().0;
        let novelty = build_table(&keys, &world.backend, Selection::NoveltyOnly, &cfg, &prov, 4, None).unwrap().0;
        Setup { world, aligned, novelty }
    })
}

fn sim(seed: u64) -> SimConfig {
    SimConfig { n_rounds: 10, seed, ..SimConfig::default() }
}

fn run(arms: &[Arm<'_>], cfg: &SimConfig) -> Vec<ArmResult> {
    let s = setup();
    run_sim_ab(arms, &s.world.population, &s.world.gt, cfg).unwrap()
}

#[test]
fn identical_arms_get_identical_metrics() {
    let s = setup();
    let r = run(&[Arm::new("a", ServingPolicy::Table(&s.aligned)), Arm::new("b", ServingPolicy::Table(&s.aligned))], &sim(1));
    assert_eq!(r[0].metrics, r[1].metrics);
    assert_eq!(r[0].rounds, r[1].rounds);
    assert_eq!(r[0].per_user_positive, r[1].per_user_positive);
}

#[test]
fn ueuc_never_decreases_and_rates_are_bounded() {
    let s = setup();
    let arms = [
        Arm::new("aligned", ServingPolicy::Table(&s.aligned)),
        Arm::new("novelty-only", ServingPolicy::Table(&s.novelty)),
        Arm::new("exploitation", ServingPolicy::Exploitation),
        Arm::new("random", ServingPolicy::Random),
    ];
    for r in run(&arms, &sim(2)) {
        assert!(r.rounds.windows(2).all(|w| w[0].ueuc <= w[1].ueuc), "{}", r.name);
        assert_eq!(r.rounds.last().unwrap().ueuc, r.metrics.ueuc);
        let m = r.metrics;
        for rate in [m.novel_impression_ratio, m.positive_playback_rate, m.completion_rate] {
            assert!((0.0..=1.0).contains(&rate), "{}", r.name);
        }
        assert_eq!(m.impressions, 800 * 10 * 3);
    }
}

#[test]
fn serving_known_clusters_has_no_novel_impressions() {
    // One slot always fits inside the lifetime set, which holds at least K clusters.
    let cfg = SimConfig { slots: 1, ..sim(3) };
    let r = run(&[Arm::new("exploit", ServingPolicy::Exploitation), Arm::new("random", ServingPolicy::Random)], &cfg);
    assert_eq!(r[0].metrics.novel_impression_ratio, 0.0);
    let frontier = novelty_quality_frontier(&r, "random").unwrap();
    assert_eq!(frontier.len(), 2);
    assert!(frontier[0].delta_novel_ratio < 0.0);
    assert_eq!((frontier[1].delta_novel_ratio, frontier[1].delta_positive_playback), (0.0, 0.0));
}

#[test]
fn exploitation_is_least_novel_among_arms() {
    let s = setup();
    let arms = [
        Arm::new("aligned", ServingPolicy::Table(&s.aligned)),
        Arm::new("novelty-only", ServingPolicy::Table(&s.novelty)),
        Arm::new("exploitation", ServingPolicy::Exploitation),
    ];
    let r = run(&arms, &sim(4));
    let f = novelty_quality_frontier(&r, "aligned").unwrap();
    assert!(f[2].delta_novel_ratio < 0.0);
    assert!(r[2].metrics.novel_impression_ratio < r[1].metrics.novel_impression_ratio);
    assert!(r[0].metrics.positive_playback_rate > r[1].metrics.positive_playback_rate);
}

fn diff_variance(a: &ArmResult, b: &ArmResult) -> f64 {
    let d: Vec<f64> = a.per_user_positive.iter().zip(&b.per_user_positive).map(|(&x, &y)| x as f64 - y as f64).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64
}

#[test]
fn common_random_numbers_shrink_paired_variance() {
    let s = setup();
    for seed in [5, 6, 7] {
        let arms = [Arm::new("aligned", ServingPolicy::Table(&s.aligned)), Arm::new("novelty-only", ServingPolicy::Table(&s.novelty))];
        let paired = run(&arms, &sim(seed));
        let other = run(&arms, &sim(seed + 1000));
        let crn = diff_variance(&paired[0], &paired[1]);
        let independent = diff_variance(&paired[0], &other[1]);
        assert!(crn < independent, "seed {seed}: {crn} vs {independent}");
    }
}

#[test]
fn harness_preconditions() {
    let s = setup();
    let one = [Arm::new("a", ServingPolicy::Random)];
    assert!(run_sim_ab(&one, &s.world.population, &s.world.gt, &sim(1)).is_err());
    let dup = [Arm::new("a", ServingPolicy::Random), Arm::new("a", ServingPolicy::Exploitation)];
    assert!(run_sim_ab(&dup, &s.world.population, &s.world.gt, &sim(1)).is_err());
    assert!(simulate_traffic(ServingPolicy::Random, &s.world.population, &s.world.gt, &sim(1)).is_err());
}

#[test]
fn traffic_logs_one_record_per_user_round_slot() {
    let s = setup();
    let cfg = SimConfig { slots: 1, n_rounds: 7, ..sim(8) };
    let (logs, _) = simulate_traffic(ServingPolicy::ExplorePool(&s.novelty), &s.world.population, &s.world.gt, &cfg).unwrap();
    assert_eq!(logs.len(), 800 * 7);
    assert!(logs.iter().all(|l| !l.key.contains(l.served)));
    let again = simulate_traffic(ServingPolicy::ExplorePool(&s.novelty), &s.world.population, &s.world.gt, &cfg).unwrap().0;
    assert_eq!(logs, again);
}
