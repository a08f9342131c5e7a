//! Subcommands as file-to-file stages inside one output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clusterplan_core::alignment::{curve_from_text, curve_to_text, evaluate, AlignmentModel, AlignmentScorer, GroundTruthScorer};
use clusterplan_core::evals::{
    frontier_to_text, group_labels, live_metrics_to_text, novelty_quality_frontier, offline_report_to_text,
    random_baseline, rank_cases, rounds_to_text, summarize, RankingSummary,
};
use clusterplan_core::feedback::{
    labels_from_text, labels_to_text, logs_from_text, logs_to_text, make_pairwise, make_pointwise, pairwise_to_text,
    pointwise_to_text,
};
use clusterplan_core::novelty::TransitionPrior;
use clusterplan_core::planner::TransitionTable;
use clusterplan_core::serving::{key_coverage, parse_histories, results_to_text, serve_batch, Catalog, Source};
use clusterplan_core::simulator::{population_from_text, population_to_text, GroundTruth};
use clusterplan_core::taxonomy::{join_ids, Taxonomy};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, TableFormat};
use crate::pipeline::{self, PipelineError, StageContext, Tables, World};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads and writes artifacts in `dir`, tracking input hashes for provenance.
pub struct Workspace {
    pub dir: PathBuf,
    pub cfg: PipelineConfig,
    config_hash: String,
    pub emit_plot_data: bool,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>, cfg: PipelineConfig, emit_plot_data: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let dir = dir.into();
        fs::create_dir_all(&dir).stage("io")?;
        let config_hash = sha256_hex(cfg.to_text().as_bytes());
        Ok(Workspace { dir, cfg, config_hash, emit_plot_data })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read(&self, stage: &'static str, name: &str) -> Result<(Vec<u8>, String), PipelineError> {
        let bytes = fs::read(self.path(name))
            .map_err(|e| PipelineError::Stage { stage, message: format!("missing artifact {name}: {e}") })?;
        let hash = sha256_hex(&bytes);
        Ok((bytes, format!("{name}:{}", &hash[..16])))
    }

    fn read_text(&self, stage: &'static str, name: &str) -> Result<(String, String), PipelineError> {
        let (bytes, tag) = self.read(stage, name)?;
        let text = String::from_utf8(bytes).map_err(|e| PipelineError::Stage { stage, message: format!("{name}: {e}") })?;
        Ok((text, tag))
    }

    fn write(&self, stage: &'static str, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).stage(stage)?;
        }
        fs::write(&path, bytes).map_err(|e| PipelineError::Stage { stage, message: format!("writing {name}: {e}") })
    }

    pub fn provenance(&self, stage: &str, inputs: &[String]) -> String {
        let mut p = format!("stage={stage} config={}", &self.config_hash[..16]);
        if !inputs.is_empty() {
            let _ = write!(p, " inputs={}", inputs.join(","));
        }
        p
    }

    fn report(&self, stage: &'static str, name: &str, inputs: &[String], fields: &[(&str, String)]) -> Result<(), PipelineError> {
        let mut out = clusterplan_core::codec::provenance_line(&self.provenance(stage, inputs));
        for (k, v) in fields {
            let _ = writeln!(out, "{k}={v}");
        }
        self.write(stage, name, out)
    }

    fn table_name(&self, base: &str) -> String {
        match self.cfg.table_format {
            TableFormat::Binary => format!("{base}.bin"),
            TableFormat::Text => format!("{base}.tsv"),
        }
    }

    fn write_table(&self, stage: &'static str, base: &str, table: &TransitionTable) -> Result<(), PipelineError> {
        match self.cfg.table_format {
            TableFormat::Binary => self.write(stage, &self.table_name(base), table.to_bytes()),
            TableFormat::Text => self.write(stage, &self.table_name(base), table.to_text()),
        }
    }

    fn read_table(&self, stage: &'static str, base: &str) -> Result<(TransitionTable, String), PipelineError> {
        let name = self.table_name(base);
        let (bytes, tag) = self.read(stage, &name)?;
        let table = match self.cfg.table_format {
            TableFormat::Binary => TransitionTable::from_bytes(&bytes).stage(stage)?,
            TableFormat::Text => TransitionTable::from_text(&String::from_utf8_lossy(&bytes)).stage(stage)?,
        };
        Ok((table, tag))
    }

    fn load_world(&self, stage: &'static str) -> Result<(World, Vec<String>), PipelineError> {
        let (tax, t1) = self.read_text(stage, "taxonomy.tsv")?;
        let (gt, t2) = self.read(stage, "ground_truth.bin")?;
        let (pop, t3) = self.read_text(stage, "population.txt")?;
        let (prior, t4) = self.read(stage, "prior.bin")?;
        let (cat, t5) = self.read_text(stage, "catalog.tsv")?;
        let world = World {
            taxonomy: Taxonomy::from_text(&tax).stage(stage)?,
            gt: GroundTruth::from_bytes(&gt).stage(stage)?,
            population: population_from_text(&pop).stage(stage)?,
            prior: Arc::new(TransitionPrior::from_bytes(&prior).stage(stage)?),
            catalog: Catalog::from_text(&cat).stage(stage)?,
        };
        Ok((world, vec![t1, t2, t3, t4, t5]))
    }
}

pub fn gen(ws: &Workspace) -> Result<String, PipelineError> {
    let world = pipeline::generate(&ws.cfg)?;
    let prov = ws.provenance("gen", &[]);
    ws.write("gen", "taxonomy.tsv", world.taxonomy.to_text(&prov))?;
    ws.write("gen", "ground_truth.bin", world.gt.to_bytes(&prov))?;
    ws.write("gen", "population.txt", population_to_text(&world.population, &prov))?;
    ws.write("gen", "prior.bin", world.prior.to_bytes(&prov))?;
    ws.write("gen", "catalog.tsv", world.catalog.to_text(&prov))?;
    let known = world.prior.known_keys().count();
    ws.report(
        "gen",
        "gen_report.txt",
        &[],
        &[
            ("clusters", world.taxonomy.len().to_string()),
            ("users", world.population.len().to_string()),
            ("prior_keys", known.to_string()),
            ("catalog_items", world.catalog.items().len().to_string()),
        ],
    )?;
    Ok(format!(
        "gen: {} clusters, {} users, {} keys with mined transitions",
        world.taxonomy.len(),
        world.population.len(),
        known
    ))
}

pub fn simulate_traffic(ws: &Workspace) -> Result<String, PipelineError> {
    let stage = "simulate-traffic";
    let (world, inputs) = ws.load_world(stage)?;
    let prov = ws.provenance(stage, &inputs);
    let (pool, report) = pipeline::build_pool(&ws.cfg, &world, &format!("role=logging-pool {prov}"))?;
    ws.write_table(stage, "logging_pool", &pool)?;
    let logs = pipeline::traffic(&ws.cfg, &world, &pool)?;
    ws.write(stage, "query_log.txt", logs_to_text(&logs, &prov))?;
    let positives = logs.iter().filter(|l| l.event.positive_playback).count();
    ws.report(
        stage,
        "traffic_report.txt",
        &inputs,
        &[
            ("records", logs.len().to_string()),
            ("users", world.population.len().to_string()),
            ("rounds", ws.cfg.traffic_rounds.to_string()),
            ("positive_playback_rate", (positives as f64 / logs.len().max(1) as f64).to_string()),
            ("pool_keys", pool.len().to_string()),
            ("pool_failures", report.failures.len().to_string()),
        ],
    )?;
    Ok(format!("simulate-traffic: {} records over {} pool keys", logs.len(), pool.len()))
}

pub fn aggregate(ws: &Workspace) -> Result<String, PipelineError> {
    let stage = "aggregate";
    let (text, tag) = ws.read_text(stage, "query_log.txt")?;
    let logs = logs_from_text(&text).stage(stage)?;
    let labels = pipeline::aggregate(&ws.cfg, &logs)?;
    let inputs = [tag];
    let prov = ws.provenance(stage, &inputs);
    ws.write(stage, "labels.tsv", labels_to_text(&labels, &prov))?;
    let keys: std::collections::HashSet<_> = labels.iter().map(|l| &l.key).collect();
    ws.report(
        stage,
        "aggregate_report.txt",
        &inputs,
        &[
            ("records", logs.len().to_string()),
            ("labels", labels.len().to_string()),
            ("keys", keys.len().to_string()),
        ],
    )?;
    Ok(format!("aggregate: {} records -> {} labels over {} keys", logs.len(), labels.len(), keys.len()))
}

fn checkpoint_name(step: usize) -> String {
    format!("checkpoints/step_{step:07}.ckpt")
}

pub fn train(ws: &Workspace) -> Result<String, PipelineError> {
    let stage = "train";
    let (text, tag) = ws.read_text(stage, "labels.tsv")?;
    let labels = labels_from_text(&text, ws.cfg.primary_signal).stage(stage)?;
    let (train_labels, holdout_labels) = pipeline::split(&ws.cfg, &labels)?;
    let trained = pipeline::train_model(&ws.cfg, ws.cfg.objective, &train_labels, &holdout_labels)?;
    let inputs = [tag];
    let prov = ws.provenance(stage, &inputs);
    ws.write(stage, "train_labels.tsv", labels_to_text(&train_labels, &prov))?;
    ws.write(stage, "holdout_labels.tsv", labels_to_text(&holdout_labels, &prov))?;
    ws.write(stage, "pointwise.tsv", pointwise_to_text(&make_pointwise(&train_labels), &prov))?;
    let pairs = make_pairwise(&train_labels, ws.cfg.pairwise_margin, ws.cfg.max_pairs_per_key, ws.cfg.train_seed);
    ws.write(stage, "pairwise.tsv", pairwise_to_text(&pairs, &prov))?;
    for ckpt in &trained.outcome.checkpoints {
        ws.write(stage, &checkpoint_name(ckpt.version as usize), ckpt.to_bytes(&prov))?;
    }
    ws.write(stage, "model.ckpt", trained.selected().to_bytes(&prov))?;
    ws.write(stage, "curve.tsv", curve_to_text(&trained.outcome.curve, &prov))?;
    let sel = trained.selected_point();
    ws.report(
        stage,
        "train_report.txt",
        &inputs,
        &[
            ("objective", ws.cfg.objective.name().to_string()),
            ("train_labels", train_labels.len().to_string()),
            ("holdout_labels", holdout_labels.len().to_string()),
            ("selected_step", trained.selected_step.to_string()),
            ("selected_f1", sel.holdout_f1.to_string()),
            ("selected_ndcg", sel.holdout_ndcg.to_string()),
            ("baseline_f1", trained.baseline.f1.to_string()),
            ("baseline_ndcg", trained.baseline.ndcg.to_string()),
        ],
    )?;
    Ok(format!(
        "train: selected step {} with holdout F1@{} {:.4} (random {:.4}), NDCG {:.4} (random {:.4})",
        trained.selected_step, ws.cfg.eval_k, sel.holdout_f1, trained.baseline.f1, sel.holdout_ndcg, trained.baseline.ndcg
    ))
}

pub fn build_table(ws: &Workspace) -> Result<String, PipelineError> {
    let stage = "build-table";
    let (world, mut inputs) = ws.load_world(stage)?;
    let (ckpt, t1) = ws.read(stage, "model.ckpt")?;
    let (model, _) = AlignmentModel::from_bytes(&ckpt).stage(stage)?;
    let (train_text, t2) = ws.read_text(stage, "train_labels.tsv")?;
    let train_labels = labels_from_text(&train_text, ws.cfg.primary_signal).stage(stage)?;
    inputs.extend([t1, t2]);
    let prov = ws.provenance(stage, &inputs);
    let pairs: Vec<_> = train_labels.iter().map(|l| (l.key.clone(), l.candidate)).collect();
    let tables = pipeline::build_tables(&ws.cfg, &world, &model, &pairs, &prov)?;
    ws.write_table(stage, "table", &tables.aligned)?;
    ws.write_table(stage, "novelty_table", &tables.novelty)?;
    ws.write(stage, "build_report.txt", tables.aligned_report.to_text(&prov))?;
    ws.write(stage, "novelty_build_report.txt", tables.novelty_report.to_text(&prov))?;
    Ok(format!(
        "build-table: {} entries ({} failures), format-valid rate {:.4}",
        tables.aligned.len(),
        tables.aligned_report.failures.len(),
        tables.aligned_report.stats.format_valid_rate()
    ))
}

/// Serves `input` (one raw history per line), or every user's history when absent.
pub fn serve_batch_stage(ws: &Workspace, input: Option<&Path>) -> Result<String, PipelineError> {
    let stage = "serve-batch";
    let (world, mut inputs) = ws.load_world(stage)?;
    let (table, t1) = ws.read_table(stage, "table")?;
    inputs.push(t1);
    let histories = match input {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| PipelineError::Stage { stage, message: format!("reading {}: {e}", path.display()) })?;
            inputs.push(format!("histories:{}", &sha256_hex(text.as_bytes())[..16]));
            parse_histories(&text).stage(stage)?
        }
        None => world.population.iter().map(|u| u.history.clone()).collect(),
    };
    let results = serve_batch(&table, &world.catalog, &histories, ws.cfg.history_k, ws.cfg.serve_items, &world.gt);
    let prov = ws.provenance(stage, &inputs);
    ws.write(stage, "serve_results.txt", results_to_text(&results, &prov))?;
    let hits = results.iter().filter(|r| r.source == Source::TableHit).count();
    ws.report(
        stage,
        "serve_report.txt",
        &inputs,
        &[
            ("requests", results.len().to_string()),
            ("table_hits", hits.to_string()),
            ("key_coverage", key_coverage(&table, &histories, ws.cfg.history_k).to_string()),
        ],
    )?;
    Ok(format!("serve-batch: {} requests, {} table hits", results.len(), hits))
}

pub fn eval_offline(ws: &Workspace) -> Result<String, PipelineError> {
    let stage = "eval-offline";
    let (ckpt, t1) = ws.read(stage, "model.ckpt")?;
    let (model, _) = AlignmentModel::from_bytes(&ckpt).stage(stage)?;
    let (holdout_text, t2) = ws.read_text(stage, "holdout_labels.tsv")?;
    let holdout = group_labels(&labels_from_text(&holdout_text, ws.cfg.primary_signal).stage(stage)?);
    let (curve_text, t3) = ws.read_text(stage, "curve.tsv")?;
    let curve = curve_from_text(&curve_text).stage(stage)?;
    let (gt_bytes, t4) = ws.read(stage, "ground_truth.bin")?;
    let gt = GroundTruth::from_bytes(&gt_bytes).stage(stage)?;
    let inputs = [t1, t2, t3, t4];
    let k = ws.cfg.eval_k;
    let (f1, ndcg) = evaluate(&model, &holdout, k);
    let model_row = RankingSummary { f1, ndcg, cases: holdout.len(), ndcg_cases: 0 };
    let oracle = GroundTruthScorer(&gt);
    let oracle_row = summarize(&rank_cases(&holdout, |key, c| oracle.score_many(key, c)), k);
    let base = random_baseline(&holdout, k, ws.cfg.baseline_trials, ws.cfg.train_seed).stage(stage)?;
    let base_row = RankingSummary { f1: base.f1, ndcg: base.ndcg, cases: holdout.len(), ndcg_cases: 0 };
    let prov = ws.provenance(stage, &inputs);
    let rows = vec![
        (model.id(), model_row),
        ("ground-truth".to_string(), oracle_row),
        ("random".to_string(), base_row),
    ];
    ws.write(stage, "offline_metrics.tsv", offline_report_to_text(&rows, &prov))?;
    if ws.emit_plot_data {
        let mut out = clusterplan_core::codec::provenance_line(&prov);
        out.push_str("step\tholdout_f1\tholdout_ndcg\trandom_f1\trandom_ndcg\n");
        for p in &curve {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", p.step, p.holdout_f1, p.holdout_ndcg, base.f1, base.ndcg);
        }
        ws.write(stage, "plot_offline_curve.tsv", out)?;
    }
    Ok(format!("eval-offline: F1@{k} {f1:.4} vs random {:.4}, NDCG@{k} {ndcg:.4} vs random {:.4}", base.f1, base.ndcg))
}

pub fn eval_ab(ws: &Workspace) -> Result<String, PipelineError> {
    let stage = "eval-ab";
    let (world, mut inputs) = ws.load_world(stage)?;
    let (aligned, t1) = ws.read_table(stage, "table")?;
    let (novelty, t2) = ws.read_table(stage, "novelty_table")?;
    inputs.extend([t1, t2]);
    let tables = Tables {
        aligned,
        aligned_report: Default::default(),
        novelty,
        novelty_report: Default::default(),
    };
    let results = pipeline::eval_ab(&ws.cfg, &world, &tables)?;
    let frontier = novelty_quality_frontier(&results, &ws.cfg.frontier_base).stage(stage)?;
    let prov = ws.provenance(stage, &inputs);
    ws.write(stage, "ab_metrics.tsv", live_metrics_to_text(&results, &prov))?;
    ws.write(stage, "ab_rounds.tsv", rounds_to_text(&results, &prov))?;
    ws.write(stage, "frontier.tsv", frontier_to_text(&frontier, &ws.cfg.frontier_base, &prov))?;
    if ws.emit_plot_data {
        let mut out = clusterplan_core::codec::provenance_line(&prov);
        out.push_str("arm\tnovel_impression_ratio\tpositive_playback_rate\tcompletion_rate\tueuc\n");
        for r in &results {
            let m = &r.metrics;
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.name, m.novel_impression_ratio, m.positive_playback_rate, m.completion_rate, m.ueuc);
        }
        ws.write(stage, "plot_live_metrics.tsv", out)?;
    }
    let mut summary = String::from("eval-ab:");
    for r in &results {
        let _ = write!(
            summary,
            " {} [novel {:.3} playback {:.3} ueuc {}]",
            r.name, r.metrics.novel_impression_ratio, r.metrics.positive_playback_rate, r.metrics.ueuc
        );
    }
    Ok(summary)
}

/// Every stage in order, as the CLI would run them one by one.
pub fn run_all(ws: &Workspace) -> Result<Vec<String>, PipelineError> {
    Ok(vec![
        gen(ws)?,
        simulate_traffic(ws)?,
        aggregate(ws)?,
        train(ws)?,
        build_table(ws)?,
        serve_batch_stage(ws, None)?,
        eval_offline(ws)?,
        eval_ab(ws)?,
    ])
}

/// Canonical text of a key list, for small ad-hoc inputs.
pub fn histories_to_text(histories: &[Vec<clusterplan_core::ClusterId>]) -> String {
    histories.iter().map(|h| join_ids(h) + "\n").collect()
}
