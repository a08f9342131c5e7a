//! The alignment scorer: cluster embeddings and a bilinear head trained on
//! aggregated feedback.
//!
//! `logit(key, c) = mean(E[key])ᵀ · W · E[c] + b[c]`, `score = sigmoid(logit)`.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::codec::{provenance_line, split_provenance, Decoder, Encoder, FormatError};
use crate::evals::{rank_cases, summarize, LabeledKey};
use crate::feedback::{AggregatedLabel, PairwiseExample, PointwiseExample};
use crate::rng::{stream, Domain};
use crate::simulator::{sigmoid, GroundTruth};
use crate::taxonomy::{ClusterId, HistoryKey};

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("loss became non-finite at step {0}")]
    DivergenceDetected(usize),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("no training examples")]
    NoExamples,
    #[error("cluster {0} is outside the model vocabulary")]
    OutOfVocabulary(u32),
    #[error("pairwise example has winner == loser ({0})")]
    DegeneratePair(u32),
    #[error("target {0} outside [0, 1]")]
    BadTarget(f64),
    #[error("train and holdout share key {0}")]
    KeyLeakage(String),
    #[error("empty training curve")]
    EmptyCurve,
}

/// Anything that ranks candidates for a cohort key.
pub trait AlignmentScorer: Sync {
    fn id(&self) -> String;

    fn score(&self, key: &HistoryKey, candidate: ClusterId) -> f64;

    fn score_many(&self, key: &HistoryKey, candidates: &[ClusterId]) -> Vec<f64> {
        candidates.iter().map(|&c| self.score(key, c)).collect()
    }
}

/// Scores with the simulator's true affinity. Used as an oracle.
pub struct GroundTruthScorer<'a>(pub &'a GroundTruth);

impl AlignmentScorer for GroundTruthScorer<'_> {
    fn id(&self) -> String {
        "ground-truth".into()
    }

    fn score(&self, key: &HistoryKey, candidate: ClusterId) -> f64 {
        self.0.affinity_to(key.clusters(), candidate)
    }

    fn score_many(&self, key: &HistoryKey, candidates: &[ClusterId]) -> Vec<f64> {
        let row = self.0.affinity_row(key.clusters());
        candidates.iter().map(|c| row[c.index()]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    n: usize,
    dim: usize,
    /// `E` (n·dim), then `W` (dim·dim, row-major), then `b` (n).
    params: Vec<f64>,
    /// Training step this model was taken at.
    pub version: u64,
}

const CKPT_MAGIC: &[u8; 4] = b"CPAM";
const CKPT_VERSION: u32 = 1;

impl AlignmentModel {
    pub fn zeros(n: usize, dim: usize) -> Self {
        AlignmentModel { n, dim, params: vec![0.0; n * dim + dim * dim + n], version: 0 }
    }

    /// Training start point: Gaussian embeddings, zero head. Every score is 0.5.
    pub fn init(n: usize, dim: usize, seed: u64) -> Self {
        let mut model = Self::zeros(n, dim);
        let mut rng = stream(seed, Domain::Training, u64::MAX);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid sigma");
        for p in &mut model.params[..n * dim] {
            *p = normal.sample(&mut rng);
        }
        model
    }

    /// Every parameter drawn from `N(0, sigma²)`.
    pub fn random(n: usize, dim: usize, sigma: f64, seed: u64) -> Self {
        let mut model = Self::zeros(n, dim);
        let mut rng = stream(seed, Domain::Training, u64::MAX - 1);
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        for p in &mut model.params {
            *p = normal.sample(&mut rng);
        }
        model
    }

    pub fn n_clusters(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w_offset(&self) -> usize {
        self.n * self.dim
    }

    fn b_offset(&self) -> usize {
        self.n * self.dim + self.dim * self.dim
    }

    fn embedding(&self, c: ClusterId) -> &[f64] {
        &self.params[c.index() * self.dim..(c.index() + 1) * self.dim]
    }

    fn pooled(&self, key: &HistoryKey) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for &c in key.clusters() {
            m.iter_mut().zip(self.embedding(c)).for_each(|(a, e)| *a += e);
        }
        let inv = 1.0 / key.len().max(1) as f64;
        m.iter_mut().for_each(|a| *a *= inv);
        m
    }

    /// `Wᵀ m`, the vector whose dot with `E[c]` gives the bilinear term.
    fn projected(&self, m: &[f64]) -> Vec<f64> {
        let w = &self.params[self.w_offset()..self.b_offset()];
        let mut out = vec![0.0; self.dim];
        for (i, &mi) in m.iter().enumerate() {
            let row = &w[i * self.dim..(i + 1) * self.dim];
            out.iter_mut().zip(row).for_each(|(o, wij)| *o += mi * wij);
        }
        out
    }

    pub fn logit(&self, key: &HistoryKey, candidate: ClusterId) -> f64 {
        let v = self.projected(&self.pooled(key));
        self.logit_with(&v, candidate)
    }

    fn logit_with(&self, projected: &[f64], c: ClusterId) -> f64 {
        let dot: f64 = projected.iter().zip(self.embedding(c)).map(|(a, b)| a * b).sum();
        dot + self.params[self.b_offset() + c.index()]
    }

    pub fn logits(&self, key: &HistoryKey, candidates: &[ClusterId]) -> Vec<f64> {
        let v = self.projected(&self.pooled(key));
        candidates.iter().map(|&c| self.logit_with(&v, c)).collect()
    }

    /// Accumulates `scale · ∂logit/∂θ` into `grad`.
    fn accumulate_grad(&self, key: &HistoryKey, c: ClusterId, scale: f64, grad: &mut [f64]) {
        let d = self.dim;
        let m = self.pooled(key);
        let e_c = self.embedding(c).to_vec();
        let wo = self.w_offset();
        let w = &self.params[wo..self.b_offset()];
        // ∂/∂W_ij = m_i e_j
        for i in 0..d {
            for j in 0..d {
                grad[wo + i * d + j] += scale * m[i] * e_c[j];
            }
        }
        // ∂/∂E[c] = Wᵀ m
        let v = self.projected(&m);
        for j in 0..d {
            grad[c.index() * d + j] += scale * v[j];
        }
        // ∂/∂E[k] = (W e_c) / K for each history cluster
        let inv = scale / key.len().max(1) as f64;
        let mut we = vec![0.0; d];
        for i in 0..d {
            we[i] = w[i * d..(i + 1) * d].iter().zip(&e_c).map(|(a, b)| a * b).sum();
        }
        for &k in key.clusters() {
            for i in 0..d {
                grad[k.index() * d + i] += inv * we[i];
            }
        }
        grad[self.b_offset() + c.index()] += scale;
    }

    fn check_id(&self, c: ClusterId) -> Result<(), AlignmentError> {
        if c.index() < self.n {
            Ok(())
        } else {
            Err(AlignmentError::OutOfVocabulary(c.0))
        }
    }

    fn check_key(&self, key: &HistoryKey) -> Result<(), AlignmentError> {
        key.clusters().iter().try_for_each(|&c| self.check_id(c))
    }

    pub fn to_bytes(&self, provenance: &str) -> Vec<u8> {
        let mut enc = Encoder::new(CKPT_MAGIC, CKPT_VERSION);
        enc.str(provenance).u32(self.n as u32).u32(self.dim as u32).u64(self.version).f64s(&self.params);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String), FormatError> {
        let (mut dec, version) = Decoder::open(bytes, CKPT_MAGIC)?;
        if version != CKPT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let provenance = dec.str()?;
        let n = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let step = dec.u64()?;
        let params = dec.f64s(n * dim + dim * dim + n)?;
        dec.finish()?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FormatError::Invalid("non-finite parameter".into()));
        }
        Ok((AlignmentModel { n, dim, params, version: step }, provenance))
    }
}

impl AlignmentScorer for AlignmentModel {
    fn id(&self) -> String {
        format!("bilinear-n{}-d{}@{}", self.n, self.dim, self.version)
    }

    fn score(&self, key: &HistoryKey, candidate: ClusterId) -> f64 {
        sigmoid(self.logit(key, candidate))
    }

    fn score_many(&self, key: &HistoryKey, candidates: &[ClusterId]) -> Vec<f64> {
        self.logits(key, candidates).into_iter().map(sigmoid).collect()
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean soft-target cross-entropy from logits, and its gradient.
pub fn pointwise_loss(model: &AlignmentModel, batch: &[PointwiseExample]) -> Result<(f64, Vec<f64>), AlignmentError> {
    if batch.is_empty() {
        return Err(AlignmentError::NoExamples);
    }
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for ex in batch {
        if !(0.0..=1.0).contains(&ex.target) {
            return Err(AlignmentError::BadTarget(ex.target));
        }
        model.check_key(&ex.key)?;
        model.check_id(ex.candidate)?;
        let z = model.logit(&ex.key, ex.candidate);
        // −[t log σ(z) + (1−t) log(1−σ(z))] = softplus(z) − t z
        loss += softplus(z) - ex.target * z;
        model.accumulate_grad(&ex.key, ex.candidate, inv * (sigmoid(z) - ex.target), &mut grad);
    }
    Ok((loss * inv, grad))
}

/// Mean Bradley–Terry loss `softplus(z_loser − z_winner)`, and its gradient.
pub fn pairwise_loss(model: &AlignmentModel, batch: &[PairwiseExample]) -> Result<(f64, Vec<f64>), AlignmentError> {
    if batch.is_empty() {
        return Err(AlignmentError::NoExamples);
    }
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for ex in batch {
        if ex.winner == ex.loser {
            return Err(AlignmentError::DegeneratePair(ex.winner.0));
        }
        model.check_key(&ex.key)?;
        model.check_id(ex.winner)?;
        model.check_id(ex.loser)?;
        let zs = model.logits(&ex.key, &[ex.winner, ex.loser]);
        let delta = zs[1] - zs[0];
        loss += softplus(delta);
        let g = inv * sigmoid(delta);
        model.accumulate_grad(&ex.key, ex.loser, g, &mut grad);
        model.accumulate_grad(&ex.key, ex.winner, -g, &mut grad);
    }
    Ok((loss * inv, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainingData {
    Pointwise(Vec<PointwiseExample>),
    Pairwise(Vec<PairwiseExample>),
}

impl TrainingData {
    pub fn len(&self) -> usize {
        match self {
            TrainingData::Pointwise(v) => v.len(),
            TrainingData::Pairwise(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn objective(&self) -> Objective {
        match self {
            TrainingData::Pointwise(_) => Objective::Pointwise,
            TrainingData::Pairwise(_) => Objective::Pairwise,
        }
    }

    fn keys(&self) -> HashSet<&HistoryKey> {
        match self {
            TrainingData::Pointwise(v) => v.iter().map(|e| &e.key).collect(),
            TrainingData::Pairwise(v) => v.iter().map(|e| &e.key).collect(),
        }
    }

    fn loss(&self, model: &AlignmentModel, idx: &[usize]) -> Result<(f64, Vec<f64>), AlignmentError> {
        match self {
            TrainingData::Pointwise(v) => pointwise_loss(model, &idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>()),
            TrainingData::Pairwise(v) => pairwise_loss(model, &idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>()),
        }
    }

    fn full_loss(&self, model: &AlignmentModel) -> Result<f64, AlignmentError> {
        match self {
            TrainingData::Pointwise(v) => pointwise_loss(model, v).map(|r| r.0),
            TrainingData::Pairwise(v) => pairwise_loss(model, v).map(|r| r.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Pointwise,
    Pairwise,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Pointwise => "pointwise",
            Objective::Pairwise => "pairwise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pointwise" => Some(Objective::Pointwise),
            "pairwise" => Some(Objective::Pairwise),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Ranking cutoff for the holdout metrics.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, steps: 20_000, batch_size: 32, seed: 11, eval_every: 500, eval_k: 3 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        let bad = |m: &str| Err(AlignmentError::BadConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if self.eval_k == 0 {
            return bad("eval_k must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub holdout_f1: f64,
    pub holdout_ndcg: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AlignmentModel,
    pub curve: Vec<CurvePoint>,
    /// One snapshot per curve point, same order.
    pub checkpoints: Vec<AlignmentModel>,
    pub seconds_per_step: f64,
}

impl TrainOutcome {
    pub fn checkpoint_at(&self, step: usize) -> Option<&AlignmentModel> {
        self.checkpoints.iter().find(|m| m.version == step as u64)
    }
}

pub fn evaluate(model: &AlignmentModel, holdout: &[LabeledKey], k: usize) -> (f64, f64) {
    let cases = rank_cases(holdout, |key, cands| model.logits(key, cands));
    let s = summarize(&cases, k);
    (s.f1, s.ndcg)
}

/// Minibatch SGD. Evaluates at step 0, every `eval_every` steps, and at the end.
pub fn train(
    init: AlignmentModel,
    data: &TrainingData,
    cfg: &TrainConfig,
    holdout: &[LabeledKey],
) -> Result<TrainOutcome, AlignmentError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AlignmentError::NoExamples);
    }
    let train_keys = data.keys();
    if let Some(shared) = holdout.iter().find(|h| train_keys.contains(&h.key)) {
        return Err(AlignmentError::KeyLeakage(shared.key.to_string()));
    }
    let mut model = init;
    model.version = 0;
    let mut curve = Vec::new();
    let mut checkpoints = Vec::new();
    let mut record = |model: &AlignmentModel, step: usize| -> Result<(), AlignmentError> {
        let train_loss = data.full_loss(model)?;
        if !train_loss.is_finite() {
            return Err(AlignmentError::DivergenceDetected(step));
        }
        let (holdout_f1, holdout_ndcg) = evaluate(model, holdout, cfg.eval_k);
        curve.push(CurvePoint { step, train_loss, holdout_f1, holdout_ndcg });
        let mut snap = model.clone();
        snap.version = step as u64;
        checkpoints.push(snap);
        Ok(())
    };
    record(&model, 0)?;
    let mut rng = stream(cfg.seed, Domain::Training, 0);
    let mut idx = vec![0usize; cfg.batch_size];
    let started = std::time::Instant::now();
    for step in 1..=cfg.steps {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..data.len()));
        let (loss, grad) = data.loss(&model, &idx)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(AlignmentError::DivergenceDetected(step));
        }
        model.params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= cfg.learning_rate * g);
        model.version = step as u64;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            record(&model, step)?;
        }
    }
    let seconds_per_step = started.elapsed().as_secs_f64() / cfg.steps as f64;
    Ok(TrainOutcome { model, curve, checkpoints, seconds_per_step })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckpointCriterion {
    /// Earliest point whose F1 and that of the next `patience` points all lie
    /// within `tolerance` of the best F1.
    F1Converged { tolerance: f64, patience: usize },
    Last,
}

impl CheckpointCriterion {
    pub const F1_CONVERGED: CheckpointCriterion = CheckpointCriterion::F1Converged { tolerance: 0.005, patience: 3 };
}

/// Step of the selected checkpoint.
pub fn select_checkpoint(curve: &[CurvePoint], criterion: CheckpointCriterion) -> Result<usize, AlignmentError> {
    let last = curve.last().ok_or(AlignmentError::EmptyCurve)?;
    match criterion {
        CheckpointCriterion::Last => Ok(last.step),
        CheckpointCriterion::F1Converged { tolerance, patience } => {
            let best = curve.iter().map(|p| p.holdout_f1).fold(f64::NEG_INFINITY, f64::max);
            let ok = |p: &CurvePoint| p.holdout_f1 >= best - tolerance;
            for i in 0..curve.len() {
                let end = (i + patience).min(curve.len() - 1);
                if curve[i..=end].iter().all(ok) {
                    return Ok(curve[i].step);
                }
            }
            let first_best = curve.iter().find(|p| p.holdout_f1 == best).expect("curve has a maximum");
            Ok(first_best.step)
        }
    }
}

pub fn curve_to_text(curve: &[CurvePoint], provenance: &str) -> String {
    let mut out = provenance_line(provenance);
    out.push_str("step\ttrain_loss\tholdout_f1\tholdout_ndcg\n");
    for p in curve {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", p.step, p.train_loss, p.holdout_f1, p.holdout_ndcg);
    }
    out
}

pub fn curve_from_text(text: &str) -> Result<Vec<CurvePoint>, FormatError> {
    let (_, lines) = split_provenance(text);
    lines
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(line, l)| {
            let bad = || FormatError::Line { line, reason: "expected 4 numeric columns".into() };
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            Ok(CurvePoint {
                step: cols[0].parse().map_err(|_| bad())?,
                train_loss: cols[1].parse().map_err(|_| bad())?,
                holdout_f1: cols[2].parse().map_err(|_| bad())?,
                holdout_ndcg: cols[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Splits labels by key; a key lands in the holdout with probability
/// `holdout_fraction`, decided by its own stream.
pub fn split_by_key(
    labels: &[AggregatedLabel],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<AggregatedLabel>, Vec<AggregatedLabel>), AlignmentError> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(AlignmentError::BadConfig("holdout_fraction must lie in [0, 1)".into()));
    }
    let (holdout, train): (Vec<AggregatedLabel>, Vec<AggregatedLabel>) = labels
        .iter()
        .cloned()
        .partition(|l| stream(seed, Domain::Split, l.key.fingerprint()).random::<f64>() < holdout_fraction);
    let train_keys: HashSet<&HistoryKey> = train.iter().map(|l| &l.key).collect();
    if let Some(l) = holdout.iter().find(|l| train_keys.contains(&l.key)) {
        return Err(AlignmentError::KeyLeakage(l.key.to_string()));
    }
    Ok((train, holdout))
}

/// Fraction of pairs the model orders wrongly (ties count as wrong).
pub fn misorder_rate(model: &AlignmentModel, pairs: &[PairwiseExample]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let wrong = pairs
        .iter()
        .filter(|p| {
            let z = model.logits(&p.key, &[p.winner, p.loser]);
            z[0] <= z[1]
        })
        .count();
    wrong as f64 / pairs.len() as f64
}
