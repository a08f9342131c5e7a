//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;

use clusterplan_core::alignment::{CheckpointCriterion, Objective, TrainConfig};
use clusterplan_core::feedback::{LabelConfig, Normalization, Signal};
use clusterplan_core::planner::PlannerConfig;
use clusterplan_core::simulator::{GroundTruthParams, PopulationParams};
use clusterplan_core::taxonomy::binomial;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableKeys {
    All,
    Sample(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Binary,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_clusters: usize,
    pub history_k: usize,
    pub dim: usize,
    pub n_topics: usize,
    pub topic_spread: f64,
    pub affinity_scale: f64,
    pub affinity_bias: f64,
    pub like_factor: f64,
    pub share_factor: f64,
    pub completion_concentration: f64,

    pub n_users: usize,
    pub min_history: usize,
    pub max_history: usize,
    pub attachment: f64,
    pub activity_sigma: f64,
    pub smoothing: f64,
    pub items_per_cluster: usize,

    pub traffic_seed: u64,
    pub traffic_rounds: usize,
    pub log_pool: usize,
    pub log_temperature: f64,

    pub primary_signal: Signal,
    pub min_support: u64,
    pub rounding_interval: f64,
    pub normalization: Normalization,
    pub pairwise_margin: f64,
    pub max_pairs_per_key: usize,
    pub aggregate_shards: usize,

    pub objective: Objective,
    pub train_seed: u64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_k: usize,
    pub alignment_dim: usize,
    pub holdout_fraction: f64,
    pub checkpoint: CheckpointCriterion,
    pub baseline_trials: usize,

    pub k: usize,
    pub oversample_factor: usize,
    pub temperature: f64,
    pub planner_seed: u64,
    pub retry_budget: usize,
    pub table_keys: TableKeys,
    pub table_format: TableFormat,
    pub build_timestamp: u64,

    pub serve_items: usize,

    pub ab_seed: u64,
    pub ab_rounds: usize,
    pub arms: Vec<String>,
    pub frontier_base: String,
    pub ueuc_signal: Signal,

    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let gt = GroundTruthParams::default();
        let pop = PopulationParams::default();
        let label = LabelConfig::default();
        let train = TrainConfig::default();
        let plan = PlannerConfig::default();
        PipelineConfig {
            seed: gt.seed,
            n_clusters: gt.n_clusters,
            history_k: 2,
            dim: gt.dim,
            n_topics: gt.n_topics,
            topic_spread: gt.topic_spread,
            affinity_scale: gt.affinity_scale,
            affinity_bias: gt.affinity_bias,
            like_factor: gt.like_factor,
            share_factor: gt.share_factor,
            completion_concentration: gt.completion_concentration,
            n_users: 10_000,
            min_history: pop.min_history,
            max_history: pop.max_history,
            attachment: pop.attachment,
            activity_sigma: pop.activity_sigma,
            smoothing: 0.5,
            items_per_cluster: 10,
            traffic_seed: 101,
            traffic_rounds: 50,
            log_pool: 10,
            log_temperature: 2.0,
            primary_signal: Signal::PositivePlayback,
            min_support: label.min_support,
            rounding_interval: label.rounding_interval,
            normalization: label.normalization,
            pairwise_margin: 0.05,
            max_pairs_per_key: 45,
            aggregate_shards: 8,
            objective: Objective::Pointwise,
            train_seed: train.seed,
            learning_rate: train.learning_rate,
            steps: train.steps,
            batch_size: train.batch_size,
            eval_every: train.eval_every,
            eval_k: train.eval_k,
            alignment_dim: 16,
            holdout_fraction: 0.2,
            checkpoint: CheckpointCriterion::F1_CONVERGED,
            baseline_trials: 200,
            k: plan.k,
            oversample_factor: plan.oversample_factor,
            temperature: plan.temperature,
            planner_seed: plan.seed,
            retry_budget: plan.retry_budget,
            table_keys: TableKeys::All,
            table_format: TableFormat::Binary,
            build_timestamp: 0,
            serve_items: 5,
            ab_seed: 202,
            ab_rounds: 20,
            arms: ["aligned", "novelty-only", "exploitation", "random"].map(String::from).to_vec(),
            frontier_base: "novelty-only".into(),
            ueuc_signal: Signal::PositivePlayback,
            workers: 4,
        }
    }
}

pub const ARM_NAMES: [&str; 4] = ["aligned", "novelty-only", "exploitation", "random"];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid { key: key.into(), reason: format!("cannot parse {value:?}") })
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), reason: reason.into() }
}

fn signal(key: &str, value: &str) -> Result<Signal, ConfigError> {
    Signal::parse(value).map_err(|e| invalid(key, e.to_string()))
}

impl PipelineConfig {
    /// Parses a config file over the defaults. Does not validate.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if value.is_empty() {
            return Err(invalid(key, "value is empty"));
        }
        let v = value;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "n_clusters" => self.n_clusters = parse_num(key, v)?,
            "history_k" => self.history_k = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "n_topics" => self.n_topics = parse_num(key, v)?,
            "topic_spread" => self.topic_spread = parse_num(key, v)?,
            "affinity_scale" => self.affinity_scale = parse_num(key, v)?,
            "affinity_bias" => self.affinity_bias = parse_num(key, v)?,
            "like_factor" => self.like_factor = parse_num(key, v)?,
            "share_factor" => self.share_factor = parse_num(key, v)?,
            "completion_concentration" => self.completion_concentration = parse_num(key, v)?,
            "n_users" => self.n_users = parse_num(key, v)?,
            "min_history" => self.min_history = parse_num(key, v)?,
            "max_history" => self.max_history = parse_num(key, v)?,
            "attachment" => self.attachment = parse_num(key, v)?,
            "activity_sigma" => self.activity_sigma = parse_num(key, v)?,
            "smoothing" => self.smoothing = parse_num(key, v)?,
            "items_per_cluster" => self.items_per_cluster = parse_num(key, v)?,
            "traffic_seed" => self.traffic_seed = parse_num(key, v)?,
            "traffic_rounds" => self.traffic_rounds = parse_num(key, v)?,
            "log_pool" => self.log_pool = parse_num(key, v)?,
            "log_temperature" => self.log_temperature = parse_num(key, v)?,
            "primary_signal" => self.primary_signal = signal(key, v)?,
            "min_support" => self.min_support = parse_num(key, v)?,
            "rounding_interval" => self.rounding_interval = parse_num(key, v)?,
            "normalization" => {
                self.normalization = match v {
                    "prior-ratio" => Normalization::PriorRatio,
                    "quantile" => Normalization::QUANTILE_DEFAULT,
                    _ => return Err(invalid(key, "expected prior-ratio or quantile")),
                }
            }
            "pairwise_margin" => self.pairwise_margin = parse_num(key, v)?,
            "max_pairs_per_key" => self.max_pairs_per_key = parse_num(key, v)?,
            "aggregate_shards" => self.aggregate_shards = parse_num(key, v)?,
            "objective" => {
                self.objective = Objective::parse(v).ok_or_else(|| invalid(key, "expected pointwise or pairwise"))?
            }
            "train_seed" => self.train_seed = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_k" => self.eval_k = parse_num(key, v)?,
            "alignment_dim" => self.alignment_dim = parse_num(key, v)?,
            "holdout_fraction" => self.holdout_fraction = parse_num(key, v)?,
            "checkpoint" => {
                self.checkpoint = match v {
                    "f1-converged" => CheckpointCriterion::F1_CONVERGED,
                    "last" => CheckpointCriterion::Last,
                    _ => return Err(invalid(key, "expected f1-converged or last")),
                }
            }
            "baseline_trials" => self.baseline_trials = parse_num(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "oversample_factor" => self.oversample_factor = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "planner_seed" => self.planner_seed = parse_num(key, v)?,
            "retry_budget" => self.retry_budget = parse_num(key, v)?,
            "table_keys" => {
                self.table_keys = if v == "all" { TableKeys::All } else { TableKeys::Sample(parse_num(key, v)?) }
            }
            "table_format" => {
                self.table_format = match v {
                    "binary" => TableFormat::Binary,
                    "text" => TableFormat::Text,
                    _ => return Err(invalid(key, "expected binary or text")),
                }
            }
            "build_timestamp" => self.build_timestamp = parse_num(key, v)?,
            "serve_items" => self.serve_items = parse_num(key, v)?,
            "ab_seed" => self.ab_seed = parse_num(key, v)?,
            "ab_rounds" => self.ab_rounds = parse_num(key, v)?,
            "arms" => self.arms = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "frontier_base" => self.frontier_base = v.to_string(),
            "ueuc_signal" => self.ueuc_signal = signal(key, v)?,
            "workers" => self.workers = parse_num(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &str, v: usize| if v == 0 { Err(invalid(key, "must be >= 1")) } else { Ok(()) };
        for (key, v) in [
            ("n_clusters", self.n_clusters),
            ("history_k", self.history_k),
            ("dim", self.dim),
            ("n_topics", self.n_topics),
            ("n_users", self.n_users),
            ("items_per_cluster", self.items_per_cluster),
            ("traffic_rounds", self.traffic_rounds),
            ("log_pool", self.log_pool),
            ("max_pairs_per_key", self.max_pairs_per_key),
            ("aggregate_shards", self.aggregate_shards),
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_k", self.eval_k),
            ("alignment_dim", self.alignment_dim),
            ("baseline_trials", self.baseline_trials),
            ("k", self.k),
            ("oversample_factor", self.oversample_factor),
            ("ab_rounds", self.ab_rounds),
            ("workers", self.workers),
        ] {
            positive(key, v)?;
        }
        let finite_pos = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, "must be a positive finite number"))
            }
        };
        finite_pos("temperature", self.temperature)?;
        finite_pos("log_temperature", self.log_temperature)?;
        finite_pos("smoothing", self.smoothing)?;
        finite_pos("completion_concentration", self.completion_concentration)?;
        finite_pos("activity_sigma", self.activity_sigma)?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be a finite non-negative number"));
        }
        if self.min_support == 0 {
            return Err(invalid("min_support", "must be >= 1"));
        }
        let per_unit = 1.0 / self.rounding_interval;
        if !(self.rounding_interval > 0.0 && self.rounding_interval <= 1.0) || (per_unit - per_unit.round()).abs() > 1e-6 {
            return Err(invalid("rounding_interval", "must lie in (0, 1] and divide 1"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(invalid("holdout_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.like_factor) {
            return Err(invalid("like_factor", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.share_factor) {
            return Err(invalid("share_factor", "must lie in [0, 1]"));
        }
        if !(self.pairwise_margin >= 0.0) {
            return Err(invalid("pairwise_margin", "must be >= 0"));
        }
        if self.min_history < self.history_k {
            return Err(invalid("min_history", "must be >= history_k"));
        }
        if self.max_history < self.min_history {
            return Err(invalid("max_history", "must be >= min_history"));
        }
        if self.history_k + self.k > self.n_clusters {
            return Err(invalid("k", "history_k + k exceeds n_clusters"));
        }
        if self.history_k + self.log_pool > self.n_clusters {
            return Err(invalid("log_pool", "history_k + log_pool exceeds n_clusters"));
        }
        if let TableKeys::Sample(n) = self.table_keys {
            if n == 0 || n as u64 > binomial(self.n_clusters, self.history_k) {
                return Err(invalid("table_keys", "sample size must be in 1..=C(n_clusters, history_k)"));
            }
        }
        if self.arms.len() < 2 {
            return Err(invalid("arms", "at least two arms are required"));
        }
        for (i, a) in self.arms.iter().enumerate() {
            if !ARM_NAMES.contains(&a.as_str()) {
                return Err(invalid("arms", format!("unknown arm {a:?}")));
            }
            if self.arms[..i].contains(a) {
                return Err(invalid("arms", format!("duplicate arm {a:?}")));
            }
        }
        if !self.arms.contains(&self.frontier_base) {
            return Err(invalid("frontier_base", "must name one of the arms"));
        }
        Ok(())
    }

    /// Canonical text of every key; hashing it identifies a run.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("n_clusters", self.n_clusters.to_string());
        put("history_k", self.history_k.to_string());
        put("dim", self.dim.to_string());
        put("n_topics", self.n_topics.to_string());
        put("topic_spread", self.topic_spread.to_string());
        put("affinity_scale", self.affinity_scale.to_string());
        put("affinity_bias", self.affinity_bias.to_string());
        put("like_factor", self.like_factor.to_string());
        put("share_factor", self.share_factor.to_string());
        put("completion_concentration", self.completion_concentration.to_string());
        put("n_users", self.n_users.to_string());
        put("min_history", self.min_history.to_string());
        put("max_history", self.max_history.to_string());
        put("attachment", self.attachment.to_string());
        put("activity_sigma", self.activity_sigma.to_string());
        put("smoothing", self.smoothing.to_string());
        put("items_per_cluster", self.items_per_cluster.to_string());
        put("traffic_seed", self.traffic_seed.to_string());
        put("traffic_rounds", self.traffic_rounds.to_string());
        put("log_pool", self.log_pool.to_string());
        put("log_temperature", self.log_temperature.to_string());
        put("primary_signal", self.primary_signal.name().to_string());
        put("min_support", self.min_support.to_string());
        put("rounding_interval", self.rounding_interval.to_string());
        put(
            "normalization",
            match self.normalization {
                Normalization::PriorRatio => "prior-ratio",
                Normalization::Quantile { .. } => "quantile",
            }
            .into(),
        );
        put("pairwise_margin", self.pairwise_margin.to_string());
        put("max_pairs_per_key", self.max_pairs_per_key.to_string());
        put("aggregate_shards", self.aggregate_shards.to_string());
        put("objective", self.objective.name().into());
        put("train_seed", self.train_seed.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("eval_every", self.eval_every.to_string());
        put("eval_k", self.eval_k.to_string());
        put("alignment_dim", self.alignment_dim.to_string());
        put("holdout_fraction", self.holdout_fraction.to_string());
        put(
            "checkpoint",
            match self.checkpoint {
                CheckpointCriterion::Last => "last",
                CheckpointCriterion::F1Converged { .. } => "f1-converged",
            }
            .into(),
        );
        put("baseline_trials", self.baseline_trials.to_string());
        put("k", self.k.to_string());
        put("oversample_factor", self.oversample_factor.to_string());
        put("temperature", self.temperature.to_string());
        put("planner_seed", self.planner_seed.to_string());
        put("retry_budget", self.retry_budget.to_string());
        put(
            "table_keys",
            match self.table_keys {
                TableKeys::All => "all".into(),
                TableKeys::Sample(n) => n.to_string(),
            },
        );
        put(
            "table_format",
            match self.table_format {
                TableFormat::Binary => "binary",
                TableFormat::Text => "text",
            }
            .into(),
        );
        put("build_timestamp", self.build_timestamp.to_string());
        put("serve_items", self.serve_items.to_string());
        put("ab_seed", self.ab_seed.to_string());
        put("ab_rounds", self.ab_rounds.to_string());
        put("arms", self.arms.join(","));
        put("frontier_base", self.frontier_base.clone());
        put("ueuc_signal", self.ueuc_signal.name().into());
        // `workers` is deliberately left out: it must not change any output.
        out
    }

    pub fn ground_truth_params(&self) -> GroundTruthParams {
        GroundTruthParams {
            n_clusters: self.n_clusters,
            dim: self.dim,
            n_topics: self.n_topics,
            topic_spread: self.topic_spread,
            affinity_scale: self.affinity_scale,
            affinity_bias: self.affinity_bias,
            novelty_penalty: 0.0,
            like_factor: self.like_factor,
            share_factor: self.share_factor,
            completion_concentration: self.completion_concentration,
            seed: self.seed,
        }
    }

    pub fn population_params(&self) -> PopulationParams {
        PopulationParams {
            min_history: self.min_history,
            max_history: self.max_history,
            attachment: self.attachment,
            activity_sigma: self.activity_sigma,
        }
    }

    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            min_support: self.min_support,
            normalization: self.normalization,
            rounding_interval: self.rounding_interval,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.train_seed,
            eval_every: self.eval_every,
            eval_k: self.eval_k,
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            k: self.k,
            oversample_factor: self.oversample_factor,
            temperature: self.temperature,
            seed: self.planner_seed,
            retry_budget: self.retry_budget,
        }
    }

    /// Logging pool: `log_pool` distinct novelty draws per key.
    pub fn pool_config(&self) -> PlannerConfig {
        PlannerConfig {
            k: self.log_pool,
            oversample_factor: 1,
            temperature: self.log_temperature,
            seed: self.planner_seed ^ 0x706f_6f6c,
            retry_budget: self.retry_budget,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let mut back = PipelineConfig::parse(&cfg.to_text()).unwrap();
        back.workers = cfg.workers;
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert_eq!(PipelineConfig::parse("bogus = 1"), Err(ConfigError::UnknownKey("bogus".into())));
        assert_eq!(PipelineConfig::parse("k 3"), Err(ConfigError::Syntax { line: 1 }));
        let err = PipelineConfig::parse("steps =").unwrap_err();
        assert!(err.to_string().contains("steps"));
        let one_arm = PipelineConfig::parse("arms = aligned\nfrontier_base = aligned").unwrap();
        assert!(matches!(one_arm.validate(), Err(ConfigError::Invalid { key, .. }) if key == "arms"));
        let bad = PipelineConfig::parse("temperature = 0").unwrap();
        assert!(matches!(bad.validate(), Err(ConfigError::Invalid { key, .. }) if key == "temperature"));
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = PipelineConfig::parse("# header\nk = 4  # served\n\nobjective = pairwise\n").unwrap();
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.objective, Objective::Pairwise);
        cfg.set("k", "2").unwrap();
        assert_eq!(cfg.k, 2);
    }
}
