//! Training on a corpus labeled directly by the simulator's affinity.

use std::sync::OnceLock;

use clusterplan_core::alignment::{
    misorder_rate, select_checkpoint, train, AlignmentModel, CheckpointCriterion, TrainConfig, TrainOutcome,
    TrainingData,
};
use clusterplan_core::evals::{random_baseline, LabeledKey};
use clusterplan_core::feedback::{round_to_grid, PairwiseExample, PointwiseExample};
use clusterplan_core::rng::{stream, Domain};
use clusterplan_core::simulator::{GroundTruth, GroundTruthParams};
use clusterplan_core::{enumerate_keys, ClusterId, HistoryKey, Taxonomy};
use rand::seq::index::sample;

const N: usize = 40;

struct Corpus {
    gt: GroundTruth,
    train: Vec<LabeledKey>,
    holdout: Vec<LabeledKey>,
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let gt = GroundTruth::generate(&GroundTruthParams { n_clusters: N, ..GroundTruthParams::default() }).unwrap();
        let keys = enumerate_keys(&Taxonomy::synthetic(N), 2, Some(300), 5).unwrap();
        let labeled: Vec<LabeledKey> = keys
            .into_iter()
            .map(|key| {
                let mut rng = stream(5, Domain::Catalog, key.fingerprint());
                let novel: Vec<ClusterId> = (0..N as u32).map(ClusterId).filter(|&c| !key.contains(c)).collect();
                let mut gt_row: Vec<(ClusterId, f64)> = sample(&mut rng, novel.len(), 8)
                    .into_iter()
                    .map(|i| (novel[i], round_to_grid(gt.affinity_to(key.clusters(), novel[i]), 0.05)))
                    .collect();
                gt_row.sort_by_key(|g| g.0);
                LabeledKey { key, ground_truth: gt_row }
            })
            .collect();
        let holdout = labeled[240..].to_vec();
        let train = labeled[..240].to_vec();
        Corpus { gt, train, holdout }
    })
}

fn pointwise(keys: &[LabeledKey]) -> TrainingData {
    TrainingData::Pointwise(
        keys.iter()
            .flat_map(|lk| lk.ground_truth.iter().map(|&(c, t)| PointwiseExample { key: lk.key.clone(), candidate: c, target: t }))
            .collect(),
    )
}

fn pairs(keys: &[LabeledKey]) -> Vec<PairwiseExample> {
    let mut out = Vec::new();
    for lk in keys {
        for &(a, sa) in &lk.ground_truth {
            for &(b, sb) in &lk.ground_truth {
                if sa > sb + 0.05 + 1e-9 {
                    out.push(PairwiseExample { key: lk.key.clone(), winner: a, loser: b, margin: sa - sb });
                }
            }
        }
    }
    out
}

fn cfg() -> TrainConfig {
    TrainConfig::default()
}

fn run(data: &TrainingData) -> TrainOutcome {
    let c = corpus();
    train(AlignmentModel::init(N, 16, 11), data, &cfg(), &c.holdout).unwrap()
}

#[test]
fn both_objectives_beat_the_random_baseline() {
    let c = corpus();
    let base = random_baseline(&c.holdout, 3, 500, 1).unwrap();
    for data in [pointwise(&c.train), TrainingData::Pairwise(pairs(&c.train))] {
        let out = run(&data);
        let step = select_checkpoint(&out.curve, CheckpointCriterion::F1_CONVERGED).unwrap();
        let point = out.curve.iter().find(|p| p.step == step).unwrap();
        let best = out.curve.iter().map(|p| p.holdout_f1).fold(0.0, f64::max);
        assert!(step <= out.curve.last().unwrap().step);
        assert!(point.holdout_f1 >= best - 0.005);
        assert!(point.holdout_f1 > base.f1, "{:?}: {} vs {}", data.objective(), point.holdout_f1, base.f1);
        assert!(point.holdout_ndcg > base.ndcg);
    }
}

#[test]
fn trained_scores_follow_true_preferences() {
    let c = corpus();
    let model = run(&pointwise(&c.train)).model;
    let (mut agree, mut total) = (0, 0);
    for lk in &c.holdout {
        for &(a, _) in &lk.ground_truth {
            for &(b, _) in &lk.ground_truth {
                let (ta, tb) = (c.gt.affinity_to(lk.key.clusters(), a), c.gt.affinity_to(lk.key.clusters(), b));
                if ta > tb + 0.3 {
                    total += 1;
                    let z = model.logits(&lk.key, &[a, b]);
                    agree += (z[0] > z[1]) as usize;
                }
            }
        }
    }
    assert!(total > 50);
    assert!(agree as f64 / total as f64 > 0.8, "{agree}/{total}");
}

#[test]
fn pairwise_training_reduces_misordering() {
    let c = corpus();
    let train_pairs = pairs(&c.train);
    let init = AlignmentModel::init(N, 16, 11);
    let before = misorder_rate(&init, &train_pairs);
    let after = misorder_rate(&run(&TrainingData::Pairwise(train_pairs.clone())).model, &train_pairs);
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let c = corpus();
    let init = AlignmentModel::init(N, 16, 3);
    let cfg = TrainConfig { learning_rate: 0.0, steps: 300, eval_every: 100, ..TrainConfig::default() };
    let out = train(init.clone(), &pointwise(&c.train), &cfg, &c.holdout).unwrap();
    assert_eq!(out.model.params(), init.params());
    assert_eq!(out.curve.len(), 4);
    assert!(out.curve.windows(2).all(|w| w[0].train_loss == w[1].train_loss && w[0].holdout_f1 == w[1].holdout_f1));
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let c = corpus();
    let cfg = TrainConfig { steps: 400, eval_every: 100, ..TrainConfig::default() };
    let a = train(AlignmentModel::init(N, 16, 2), &pointwise(&c.train), &cfg, &c.holdout).unwrap();
    let b = train(AlignmentModel::init(N, 16, 2), &pointwise(&c.train), &cfg, &c.holdout).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.curve, b.curve);
    for ckpt in &a.checkpoints {
        let (back, prov) = AlignmentModel::from_bytes(&ckpt.to_bytes("run=x")).unwrap();
        assert_eq!(&back, ckpt);
        assert_eq!(prov, "run=x");
    }
}

#[test]
fn holdout_keys_may_not_appear_in_training() {
    let c = corpus();
    let leaked: Vec<LabeledKey> = c.train[..3].to_vec();
    assert!(train(AlignmentModel::init(N, 16, 1), &pointwise(&c.train), &cfg(), &leaked).is_err());
}

#[test]
fn zero_model_scores_one_half() {
    use clusterplan_core::alignment::AlignmentScorer;
    let m = AlignmentModel::zeros(N, 4);
    let key = HistoryKey::from_set(vec![ClusterId(1), ClusterId(2)]).unwrap();
    assert!((0..N as u32).filter(|&c| c > 2).all(|c| m.score(&key, ClusterId(c)) == 0.5));
}
