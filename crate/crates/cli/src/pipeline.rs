//! In-memory pipeline stages. The binary wires these to files; tests call
//! them directly.

use std::collections::HashSet;
use std::sync::Arc;

use clusterplan_core::alignment::{
    select_checkpoint, split_by_key, train, AlignmentModel, Objective, TrainOutcome, TrainingData,
};
use clusterplan_core::evals::{
    group_labels, random_baseline, run_sim_ab, simulate_traffic, Arm, ArmResult, BaselineSummary, LabeledKey,
    ServingPolicy, SimConfig,
};
use clusterplan_core::feedback::{
    aggregate_sharded, finalize_labels, make_pairwise, make_pointwise, AggregatedLabel, QueryLog,
};
use clusterplan_core::novelty::{fit_prior, mine_transitions, PriorBackend, TransitionPrior};
use clusterplan_core::planner::{build_table, run_in_pool, BuildReport, Selection, TableProvenance, TransitionTable};
use clusterplan_core::rng::{stream, Domain};
use clusterplan_core::serving::Catalog;
use clusterplan_core::simulator::{spawn_population, GroundTruth, UserProfile};
use clusterplan_core::taxonomy::{enumerate_keys, HistoryKey, Taxonomy};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig, TableKeys};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

/// Tags an error with the stage it came from.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: std::fmt::Display> StageContext<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage { stage, message: e.to_string() })
    }
}

pub struct World {
    pub taxonomy: Taxonomy,
    pub gt: GroundTruth,
    pub population: Vec<UserProfile>,
    pub prior: Arc<TransitionPrior>,
    pub catalog: Catalog,
}

pub fn generate(cfg: &PipelineConfig) -> Result<World, PipelineError> {
    let taxonomy = Taxonomy::synthetic(cfg.n_clusters);
    let gt = GroundTruth::generate(&cfg.ground_truth_params()).stage("gen")?;
    let mut rng = stream(cfg.seed, Domain::Population, 0);
    let population =
        spawn_population(&gt, cfg.n_users, cfg.history_k, &cfg.population_params(), &mut rng).stage("gen")?;
    let prior = fit_prior(&mine_transitions(&population, cfg.history_k), cfg.n_clusters, cfg.smoothing).stage("gen")?;
    let catalog = Catalog::synthetic(cfg.n_clusters, cfg.items_per_cluster, cfg.seed);
    Ok(World { taxonomy, gt, population, prior: Arc::new(prior), catalog })
}

pub fn table_keys(cfg: &PipelineConfig, taxonomy: &Taxonomy) -> Result<Vec<HistoryKey>, PipelineError> {
    let limit = match cfg.table_keys {
        TableKeys::All => None,
        TableKeys::Sample(n) => Some(n),
    };
    enumerate_keys(taxonomy, cfg.history_k, limit, cfg.planner_seed).stage("build-table")
}

fn provenance(backend: &PriorBackend, checkpoint: &str, cfg: &clusterplan_core::planner::PlannerConfig, ts: u64, extra: &str) -> TableProvenance {
    use clusterplan_core::novelty::NoveltyBackend;
    TableProvenance {
        backend_id: backend.id(),
        checkpoint_id: checkpoint.to_string(),
        config: *cfg,
        build_timestamp: ts,
        extra: extra.to_string(),
    }
}

/// Per-key exploration pools for logging traffic, over every key.
pub fn build_pool(cfg: &PipelineConfig, world: &World, extra: &str) -> Result<(TransitionTable, BuildReport), PipelineError> {
    let keys = enumerate_keys(&world.taxonomy, cfg.history_k, None, 0).stage("simulate-traffic")?;
    let backend = PriorBackend::new(world.prior.clone());
    let pool_cfg = cfg.pool_config();
    let prov = provenance(&backend, "none", &pool_cfg, cfg.build_timestamp, extra);
    build_table(&keys, &backend, Selection::NoveltyOnly, &pool_cfg, &prov, cfg.workers, None)
        .stage("simulate-traffic")
}

pub fn traffic(cfg: &PipelineConfig, world: &World, pool: &TransitionTable) -> Result<Vec<QueryLog>, PipelineError> {
    let sim = SimConfig {
        n_rounds: cfg.traffic_rounds,
        slots: 1,
        history_k: cfg.history_k,
        seed: cfg.traffic_seed,
        engagement: cfg.ueuc_signal,
    };
    let (logs, _) =
        simulate_traffic(ServingPolicy::ExplorePool(pool), &world.population, &world.gt, &sim).stage("simulate-traffic")?;
    Ok(logs)
}

pub fn aggregate(cfg: &PipelineConfig, logs: &[QueryLog]) -> Result<Vec<AggregatedLabel>, PipelineError> {
    let raw = run_in_pool(cfg.workers, || aggregate_sharded(logs, cfg.primary_signal, cfg.aggregate_shards))
        .stage("aggregate")?;
    finalize_labels(raw, &cfg.label_config()).stage("aggregate")
}

pub fn training_data(cfg: &PipelineConfig, objective: Objective, train_labels: &[AggregatedLabel]) -> TrainingData {
    match objective {
        Objective::Pointwise => TrainingData::Pointwise(make_pointwise(train_labels)),
        Objective::Pairwise => {
            TrainingData::Pairwise(make_pairwise(train_labels, cfg.pairwise_margin, cfg.max_pairs_per_key, cfg.train_seed))
        }
    }
}

pub struct Trained {
    pub outcome: TrainOutcome,
    pub selected_step: usize,
    pub holdout: Vec<LabeledKey>,
    pub baseline: BaselineSummary,
}

impl Trained {
    pub fn selected(&self) -> &AlignmentModel {
        self.outcome.checkpoint_at(self.selected_step).expect("selected step has a checkpoint")
    }

    pub fn selected_point(&self) -> clusterplan_core::alignment::CurvePoint {
        *self.outcome.curve.iter().find(|p| p.step == self.selected_step).expect("selected step is on the curve")
    }
}

pub fn split(cfg: &PipelineConfig, labels: &[AggregatedLabel]) -> Result<(Vec<AggregatedLabel>, Vec<AggregatedLabel>), PipelineError> {
    split_by_key(labels, cfg.holdout_fraction, cfg.train_seed).stage("train")
}

pub fn train_model(
    cfg: &PipelineConfig,
    objective: Objective,
    train_labels: &[AggregatedLabel],
    holdout_labels: &[AggregatedLabel],
) -> Result<Trained, PipelineError> {
    let data = training_data(cfg, objective, train_labels);
    let holdout = group_labels(holdout_labels);
    let init = AlignmentModel::init(cfg.n_clusters, cfg.alignment_dim, cfg.train_seed);
    let outcome = train(init, &data, &cfg.train_config(), &holdout).stage("train")?;
    let selected_step = select_checkpoint(&outcome.curve, cfg.checkpoint).stage("train")?;
    let baseline = random_baseline(&holdout, cfg.eval_k, cfg.baseline_trials, cfg.train_seed).stage("train")?;
    Ok(Trained { outcome, selected_step, holdout, baseline })
}

pub struct Tables {
    pub aligned: TransitionTable,
    pub aligned_report: BuildReport,
    pub novelty: TransitionTable,
    pub novelty_report: BuildReport,
}

pub fn build_tables(
    cfg: &PipelineConfig,
    world: &World,
    model: &AlignmentModel,
    training_pairs: &[(HistoryKey, clusterplan_core::ClusterId)],
    extra: &str,
) -> Result<Tables, PipelineError> {
    use clusterplan_core::alignment::AlignmentScorer;
    let keys = table_keys(cfg, &world.taxonomy)?;
    let backend = PriorBackend::new(world.prior.clone());
    let plan = cfg.planner_config();
    let seen: HashSet<(HistoryKey, clusterplan_core::ClusterId)> = training_pairs.iter().cloned().collect();
    let prov = provenance(&backend, &model.id(), &plan, cfg.build_timestamp, extra);
    let (aligned, aligned_report) =
        build_table(&keys, &backend, Selection::BestOfN(model), &plan, &prov, cfg.workers, Some(&seen)).stage("build-table")?;
    let prov = provenance(&backend, "none", &plan, cfg.build_timestamp, extra);
    let (novelty, novelty_report) =
        build_table(&keys, &backend, Selection::NoveltyOnly, &plan, &prov, cfg.workers, Some(&seen)).stage("build-table")?;
    Ok(Tables { aligned, aligned_report, novelty, novelty_report })
}

pub fn eval_ab(cfg: &PipelineConfig, world: &World, tables: &Tables) -> Result<Vec<ArmResult>, PipelineError> {
    let arms: Vec<Arm<'_>> = cfg
        .arms
        .iter()
        .map(|name| {
            let policy = match name.as_str() {
                "aligned" => ServingPolicy::Table(&tables.aligned),
                "novelty-only" => ServingPolicy::Table(&tables.novelty),
                "exploitation" => ServingPolicy::Exploitation,
                _ => ServingPolicy::Random,
            };
            Arm::new(name.clone(), policy)
        })
        .collect();
    let sim = SimConfig {
        n_rounds: cfg.ab_rounds,
        slots: cfg.k,
        history_k: cfg.history_k,
        seed: cfg.ab_seed,
        engagement: cfg.ueuc_signal,
    };
    run_in_pool(cfg.workers, || run_sim_ab(&arms, &world.population, &world.gt, &sim))
        .stage("eval-ab")?
        .stage("eval-ab")
}

/// Every stage in memory, for tests and calibration.
pub struct RunOutputs {
    pub world: World,
    pub logs: Vec<QueryLog>,
    pub labels: Vec<AggregatedLabel>,
    pub train_labels: Vec<AggregatedLabel>,
    pub holdout_labels: Vec<AggregatedLabel>,
    pub trained: Trained,
    pub tables: Tables,
    pub ab: Vec<ArmResult>,
}

pub fn run_all(cfg: &PipelineConfig) -> Result<RunOutputs, PipelineError> {
    cfg.validate()?;
    let world = generate(cfg)?;
    let (pool, _) = build_pool(cfg, &world, "")?;
    let logs = traffic(cfg, &world, &pool)?;
    let labels = aggregate(cfg, &logs)?;
    let (train_labels, holdout_labels) = split(cfg, &labels)?;
    let trained = train_model(cfg, cfg.objective, &train_labels, &holdout_labels)?;
    let pairs: Vec<_> = train_labels.iter().map(|l| (l.key.clone(), l.candidate)).collect();
    let tables = build_tables(cfg, &world, trained.selected(), &pairs, "")?;
    let ab = eval_ab(cfg, &world, &tables)?;
    Ok(RunOutputs { world, logs, labels, train_labels, holdout_labels, trained, tables, ab })
}
