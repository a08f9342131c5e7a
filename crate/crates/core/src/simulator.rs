//! Synthetic user population with a known transition-affinity function.
//!
//! Cluster embeddings are drawn around a handful of latent topic centers, so
//! affinity has learnable structure. The affinity of a cohort `key` for a
//! candidate cluster `c` is
//!
//! ```text
//! sigmoid(scale * cos(mean(E[key]), E[c]) + bias)
//! ```
//!
//! and every feedback event is a draw parameterised by that number.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, StandardNormal};
use thiserror::Error;

use crate::codec::{provenance_line, split_provenance, Decoder, Encoder, FormatError};
use crate::rng::{stream, Domain, StreamRng};
use crate::taxonomy::{canonicalize, join_ids, parse_ids, ClusterId, HistoryKey};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("candidate {candidate} is part of history key {key}")]
    CandidateInHistory { key: String, candidate: u32 },
    #[error("invalid simulator parameter: {0}")]
    InvalidParameter(String),
}

/// Parameters that determine a [`GroundTruth`] completely.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthParams {
    pub n_clusters: usize,
    pub dim: usize,
    pub n_topics: usize,
    /// Per-cluster noise scale around its topic center.
    pub topic_spread: f64,
    pub affinity_scale: f64,
    pub affinity_bias: f64,
    /// Reserved for repeat-exposure fatigue; unused.
    pub novelty_penalty: f64,
    pub like_factor: f64,
    pub share_factor: f64,
    /// Beta concentration of the completion draw.
    pub completion_concentration: f64,
    pub seed: u64,
}

impl Default for GroundTruthParams {
    fn default() -> Self {
        GroundTruthParams {
            n_clusters: 200,
            dim: 16,
            n_topics: 12,
            topic_spread: 0.8,
            affinity_scale: 5.0,
            affinity_bias: -2.0,
            novelty_penalty: 0.0,
            like_factor: 0.1,
            share_factor: 0.03,
            completion_concentration: 8.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    n: usize,
    dim: usize,
    embeddings: Vec<f64>,
    pub affinity_scale: f64,
    pub affinity_bias: f64,
    pub novelty_penalty: f64,
    pub like_factor: f64,
    pub share_factor: f64,
    pub completion_concentration: f64,
    pub seed: u64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

const GT_MAGIC: &[u8; 4] = b"CPGT";
const GT_VERSION: u32 = 1;

impl GroundTruth {
    pub fn generate(params: &GroundTruthParams) -> Result<Self, SimError> {
        if params.n_clusters == 0 || params.dim == 0 || params.n_topics == 0 {
            return Err(SimError::InvalidParameter("sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&params.like_factor)
            || !(0.0..=1.0).contains(&params.share_factor)
        {
            return Err(SimError::InvalidParameter("like/share factors must lie in [0, 1]".into()));
        }
        if params.novelty_penalty < 0.0 || params.completion_concentration <= 0.0 {
            return Err(SimError::InvalidParameter("penalty must be >= 0 and concentration > 0".into()));
        }
        let mut rng = stream(params.seed, Domain::Embeddings, 0);
        let dim = params.dim;
        let mut centers = vec![0.0; params.n_topics * dim];
        for c in centers.chunks_mut(dim) {
            c.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            normalize(c);
        }
        let noise = params.topic_spread / (dim as f64).sqrt();
        let mut embeddings = vec![0.0; params.n_clusters * dim];
        for row in embeddings.chunks_mut(dim) {
            let topic = rng.random_range(0..params.n_topics);
            let center = &centers[topic * dim..(topic + 1) * dim];
            for (x, &m) in row.iter_mut().zip(center) {
                let z: f64 = rng.sample(StandardNormal);
                *x = m + noise * z;
            }
            normalize(row);
        }
        Ok(GroundTruth {
            n: params.n_clusters,
            dim,
            embeddings,
            affinity_scale: params.affinity_scale,
            affinity_bias: params.affinity_bias,
            novelty_penalty: params.novelty_penalty,
            like_factor: params.like_factor,
            share_factor: params.share_factor,
            completion_concentration: params.completion_concentration,
            seed: params.seed,
        })
    }

    /// Ground truth over explicit unit embeddings (rows are normalized).
    pub fn from_embeddings(rows: Vec<Vec<f64>>, affinity_scale: f64, affinity_bias: f64) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let mut embeddings = Vec::with_capacity(n * dim);
        for mut row in rows {
            assert_eq!(row.len(), dim, "ragged embedding rows");
            normalize(&mut row);
            embeddings.extend(row);
        }
        let defaults = GroundTruthParams::default();
        GroundTruth {
            n,
            dim,
            embeddings,
            affinity_scale,
            affinity_bias,
            novelty_penalty: 0.0,
            like_factor: defaults.like_factor,
            share_factor: defaults.share_factor,
            completion_concentration: defaults.completion_concentration,
            seed: 0,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, c: ClusterId) -> &[f64] {
        &self.embeddings[c.index() * self.dim..(c.index() + 1) * self.dim]
    }

    /// `cos(mean(E[clusters]), E[candidate])`; 0 when the mean vanishes.
    pub fn cosine_to_mean(&self, clusters: &[ClusterId], candidate: ClusterId) -> f64 {
        let mut mean = vec![0.0; self.dim];
        for &c in clusters {
            mean.iter_mut().zip(self.embedding(c)).for_each(|(m, e)| *m += e);
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return 0.0;
        }
        let dot: f64 = mean.iter().zip(self.embedding(candidate)).map(|(m, e)| m * e).sum();
        (dot / norm).clamp(-1.0, 1.0)
    }

    /// Affinity of an arbitrary cluster set for `candidate`, with no novelty check.
    pub fn affinity_to(&self, clusters: &[ClusterId], candidate: ClusterId) -> f64 {
        sigmoid(self.affinity_scale * self.cosine_to_mean(clusters, candidate) + self.affinity_bias)
    }

    /// `cos(mean(E[clusters]), E[c])` for every cluster in the vocabulary.
    pub fn cosine_row(&self, clusters: &[ClusterId]) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for &c in clusters {
            mean.iter_mut().zip(self.embedding(c)).for_each(|(m, e)| *m += e);
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.embeddings
            .chunks(self.dim)
            .map(|row| {
                if norm < 1e-12 {
                    0.0
                } else {
                    (mean.iter().zip(row).map(|(m, e)| m * e).sum::<f64>() / norm).clamp(-1.0, 1.0)
                }
            })
            .collect()
    }

    /// Affinity of `clusters` for every cluster in the vocabulary.
    pub fn affinity_row(&self, clusters: &[ClusterId]) -> Vec<f64> {
        self.cosine_row(clusters)
            .into_iter()
            .map(|cos| sigmoid(self.affinity_scale * cos + self.affinity_bias))
            .collect()
    }

    pub fn to_bytes(&self, provenance: &str) -> Vec<u8> {
        let mut enc = Encoder::new(GT_MAGIC, GT_VERSION);
        enc.str(provenance)
            .u32(self.n as u32)
            .u32(self.dim as u32)
            .u64(self.seed)
            .f64(self.affinity_scale)
            .f64(self.affinity_bias)
            .f64(self.novelty_penalty)
            .f64(self.like_factor)
            .f64(self.share_factor)
            .f64(self.completion_concentration)
            .f64s(&self.embeddings);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (mut dec, version) = Decoder::open(bytes, GT_MAGIC)?;
        if version != GT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let _provenance = dec.str()?;
        let n = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let seed = dec.u64()?;
        let affinity_scale = dec.f64()?;
        let affinity_bias = dec.f64()?;
        let novelty_penalty = dec.f64()?;
        let like_factor = dec.f64()?;
        let share_factor = dec.f64()?;
        let completion_concentration = dec.f64()?;
        let embeddings = dec.f64s(n * dim)?;
        dec.finish()?;
        for row in embeddings.chunks(dim.max(1)) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(FormatError::Invalid(format!("embedding norm {norm} is not 1")));
            }
        }
        Ok(GroundTruth {
            n,
            dim,
            embeddings,
            affinity_scale,
            affinity_bias,
            novelty_penalty,
            like_factor,
            share_factor,
            completion_concentration,
            seed,
        })
    }
}

/// The true engagement probability for serving `candidate` to cohort `key`.
pub fn true_affinity(gt: &GroundTruth, key: &HistoryKey, candidate: ClusterId) -> Result<f64, SimError> {
    if key.contains(candidate) {
        return Err(SimError::CandidateInHistory { key: key.to_string(), candidate: candidate.0 });
    }
    Ok(gt.affinity_to(key.clusters(), candidate))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedbackEvent {
    pub positive_playback: bool,
    pub like: bool,
    pub share: bool,
    pub skip: bool,
    pub completion: f64,
    pub dwell_ms: u64,
}

/// Nominal clip length used to turn completion into dwell time.
pub const CLIP_MS: f64 = 30_000.0;

/// Draws one feedback event for an engagement probability `p`. Consumes the
/// stream in a fixed order: playback, like, share, then completion.
pub fn sample_event(gt: &GroundTruth, p: f64, rng: &mut StreamRng) -> FeedbackEvent {
    let positive_playback = rng.random::<f64>() < p;
    let like = rng.random::<f64>() < gt.like_factor * p;
    let share = rng.random::<f64>() < gt.share_factor * p;
    let skip = !positive_playback;
    let completion = if skip {
        0.0
    } else {
        let c = p.clamp(1e-6, 1.0 - 1e-6);
        let kappa = gt.completion_concentration;
        let beta = Beta::new(kappa * c, kappa * (1.0 - c)).expect("positive beta parameters");
        beta.sample(rng).clamp(0.0, 1.0)
    };
    FeedbackEvent {
        positive_playback,
        like,
        share,
        skip,
        completion,
        dwell_ms: (completion * CLIP_MS).round() as u64,
    }
}

pub fn sample_feedback(
    gt: &GroundTruth,
    key: &HistoryKey,
    served: ClusterId,
    rng: &mut StreamRng,
) -> Result<FeedbackEvent, SimError> {
    let p = true_affinity(gt, key, served)?;
    Ok(sample_event(gt, p, rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub user_id: u64,
    pub history: Vec<ClusterId>,
    pub activity_level: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationParams {
    pub min_history: usize,
    pub max_history: usize,
    /// Exponent on cluster visit counts in the attachment weight.
    pub attachment: f64,
    /// Log-normal sigma of activity levels.
    pub activity_sigma: f64,
}

impl Default for PopulationParams {
    fn default() -> Self {
        PopulationParams { min_history: 4, max_history: 12, attachment: 1.0, activity_sigma: 1.0 }
    }
}

fn draw_weighted(weights: &[f64], rng: &mut StreamRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).expect("some positive weight")
}

/// Generates users by a preferential-attachment walk: the next cluster is drawn
/// with weight `(visits(c) + 1)^attachment * exp(a * cos(recent history, c))`,
/// the affinity logit up to its constant bias. `visits` counts earlier draws
/// across the whole population.
pub fn spawn_population(
    gt: &GroundTruth,
    n_users: usize,
    k: usize,
    params: &PopulationParams,
    rng: &mut StreamRng,
) -> Result<Vec<UserProfile>, SimError> {
    if n_users == 0 {
        return Err(SimError::InvalidParameter("n_users must be >= 1".into()));
    }
    if params.min_history < k || params.max_history < params.min_history || k > gt.n_clusters() {
        return Err(SimError::InvalidParameter(format!(
            "history length range {}..={} incompatible with K = {k}",
            params.min_history, params.max_history
        )));
    }
    let n = gt.n_clusters();
    let activity = LogNormal::new(0.0, params.activity_sigma)
        .map_err(|e| SimError::InvalidParameter(e.to_string()))?;
    let mut visits = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    let mut users = Vec::with_capacity(n_users);
    for user_id in 0..n_users as u64 {
        let len = rng.random_range(params.min_history..=params.max_history);
        let mut history: Vec<ClusterId> = Vec::with_capacity(len);
        while history.len() < len {
            let recent: Vec<ClusterId> = match canonicalize(&history, k.min(distinct(&history))) {
                Ok(key) => key.clusters().to_vec(),
                Err(_) => Vec::new(),
            };
            let need_new = distinct(&history) < k;
            let cosine = if recent.is_empty() { vec![0.0; n] } else { gt.cosine_row(&recent) };
            for (i, w) in weights.iter_mut().enumerate() {
                let c = ClusterId(i as u32);
                let base = (visits[i] + 1.0).powf(params.attachment);
                *w = if need_new && history.contains(&c) { 0.0 } else { base * (gt.affinity_scale * cosine[i]).exp() };
            }
            let next = draw_weighted(&weights, rng);
            visits[next] += 1.0;
            history.push(ClusterId(next as u32));
        }
        users.push(UserProfile { user_id, history, activity_level: activity.sample(rng) });
    }
    Ok(users)
}

fn distinct(history: &[ClusterId]) -> usize {
    let mut seen: Vec<ClusterId> = history.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// One `user=<id> activity=<level> history=<ids>` line per user.
pub fn population_to_text(users: &[UserProfile], provenance: &str) -> String {
    let mut out = provenance_line(provenance);
    for u in users {
        let _ = writeln!(out, "user={} activity={} history={}", u.user_id, u.activity_level, join_ids(&u.history));
    }
    out
}

pub fn population_from_text(text: &str) -> Result<Vec<UserProfile>, FormatError> {
    let (_, lines) = split_provenance(text);
    let mut users = Vec::new();
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| FormatError::Line { line: line_no, reason: reason.to_string() };
        let mut fields = line.split(' ');
        let mut field = |name: &str| {
            fields
                .next()
                .and_then(|f| f.strip_prefix(name))
                .and_then(|f| f.strip_prefix('='))
                .ok_or_else(|| bad(&format!("expected field {name}")))
        };
        let user_id = field("user")?.parse().map_err(|_| bad("bad user id"))?;
        let activity_level: f64 = field("activity")?.parse().map_err(|_| bad("bad activity"))?;
        let history = parse_ids(field("history")?).ok_or_else(|| bad("bad history"))?;
        if history.is_empty() || !(activity_level > 0.0) {
            return Err(bad("history must be non-empty and activity positive"));
        }
        users.push(UserProfile { user_id, history, activity_level });
    }
    Ok(users)
}
