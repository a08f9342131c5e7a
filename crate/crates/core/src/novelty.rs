//! Novelty generation: proposals of clusters outside a cohort's history.
//!
//! The built-in backend is a smoothed count model over transitions mined from
//! user histories, sampled by temperature softmax with the history masked out.
//! [`TextCompletionBackend`] adapts any free-text generator; its outputs are
//! validated against the vocabulary and rejected generations are retried.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::codec::{Decoder, Encoder, FormatError};
use crate::rng::StreamRng;
use crate::simulator::UserProfile;
use crate::taxonomy::{canonicalize, ClusterId, HistoryKey, Taxonomy};

/// Attempts per slot beyond the first before an invalid slot is dropped.
pub const DEFAULT_RETRY_BUDGET: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum NoveltyError {
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("key {0} leaves no novel cluster to propose")]
    NothingProposable(String),
    #[error("no transitions to fit")]
    NoTransitions,
    #[error("smoothing must be positive, got {0}")]
    BadSmoothing(f64),
    #[error("diagnostics need at least one generation")]
    EmptyRun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rejection {
    NotInVocabulary,
    NotNovel,
    Empty,
}

/// What a backend produced for one request.
#[derive(Clone, Debug, PartialEq)]
pub enum Generation {
    Accepted(ClusterId),
    Rejected { reason: Rejection, raw: String },
}

pub trait NoveltyBackend: Sync {
    fn id(&self) -> String;

    fn vocab_size(&self) -> usize;

    fn propose(&self, key: &HistoryKey, temperature: f64, rng: &mut StreamRng) -> Result<Generation, NoveltyError>;

    /// `n` independent proposals. Must consume `rng` exactly as `n` calls to
    /// [`propose`](Self::propose) would.
    fn propose_n(
        &self,
        key: &HistoryKey,
        n: usize,
        temperature: f64,
        rng: &mut StreamRng,
    ) -> Result<Vec<Generation>, NoveltyError> {
        (0..n).map(|_| self.propose(key, temperature, rng)).collect()
    }

    /// Deterministic order used to fill slots when sampling keeps repeating itself.
    fn fallback_order(&self, key: &HistoryKey) -> Vec<ClusterId> {
        (0..self.vocab_size() as u32).map(ClusterId).filter(|c| !key.contains(*c)).collect()
    }
}

/// Mined `(history key, next novel cluster)` pairs. Each prefix of a user's
/// history is keyed by its `k` most recent distinct clusters; pairs whose
/// next cluster falls inside the key are dropped.
pub fn mine_transitions(population: &[UserProfile], k: usize) -> Vec<(HistoryKey, ClusterId)> {
    let mut out = Vec::new();
    for user in population {
        for j in 1..user.history.len() {
            let Ok(key) = canonicalize(&user.history[..j], k) else { continue };
            let next = user.history[j];
            if !key.contains(next) {
                out.push((key, next));
            }
        }
    }
    out
}

/// Smoothed transition counts, `logits(key)[c] = ln(count(key, c) + smoothing)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionPrior {
    n: usize,
    smoothing: f64,
    counts: BTreeMap<HistoryKey, Vec<(ClusterId, u32)>>,
    global: Vec<u32>,
    pub training_count: u64,
}

const PRIOR_MAGIC: &[u8; 4] = b"CPTP";
const PRIOR_VERSION: u32 = 1;

pub fn fit_prior(
    transitions: &[(HistoryKey, ClusterId)],
    n_clusters: usize,
    smoothing: f64,
) -> Result<TransitionPrior, NoveltyError> {
    if transitions.is_empty() {
        return Err(NoveltyError::NoTransitions);
    }
    if !(smoothing > 0.0) || !smoothing.is_finite() {
        return Err(NoveltyError::BadSmoothing(smoothing));
    }
    let mut per_key: BTreeMap<HistoryKey, BTreeMap<ClusterId, u32>> = BTreeMap::new();
    let mut global = vec![0u32; n_clusters];
    for (key, next) in transitions {
        *per_key.entry(key.clone()).or_default().entry(*next).or_default() += 1;
        global[next.index()] += 1;
    }
    let counts = per_key.into_iter().map(|(k, m)| (k, m.into_iter().collect())).collect();
    Ok(TransitionPrior { n: n_clusters, smoothing, counts, global, training_count: transitions.len() as u64 })
}

impl TransitionPrior {
    pub fn n_clusters(&self) -> usize {
        self.n
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn knows(&self, key: &HistoryKey) -> bool {
        self.counts.contains_key(key)
    }

    pub fn known_keys(&self) -> impl Iterator<Item = &HistoryKey> {
        self.counts.keys()
    }

    /// Unmasked logits for `key`, falling back to the global backoff vector.
    pub fn logits(&self, key: &HistoryKey) -> Vec<f64> {
        match self.counts.get(key) {
            Some(sparse) => {
                let mut out = vec![self.smoothing.ln(); self.n];
                for &(c, count) in sparse {
                    out[c.index()] = (f64::from(count) + self.smoothing).ln();
                }
                out
            }
            None => self.backoff(),
        }
    }

    pub fn backoff(&self) -> Vec<f64> {
        self.global.iter().map(|&c| (f64::from(c) + self.smoothing).ln()).collect()
    }

    pub fn to_bytes(&self, provenance: &str) -> Vec<u8> {
        let mut enc = Encoder::new(PRIOR_MAGIC, PRIOR_VERSION);
        let k = self.counts.keys().next().map_or(0, HistoryKey::len);
        enc.str(provenance)
            .u32(self.n as u32)
            .u32(k as u32)
            .f64(self.smoothing)
            .u64(self.training_count);
        for &g in &self.global {
            enc.u32(g);
        }
        enc.u64(self.counts.len() as u64);
        for (key, sparse) in &self.counts {
            for c in key.clusters() {
                enc.u32(c.0);
            }
            enc.u32(sparse.len() as u32);
            for &(c, count) in sparse {
                enc.u32(c.0).u32(count);
            }
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (mut dec, version) = Decoder::open(bytes, PRIOR_MAGIC)?;
        if version != PRIOR_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let _provenance = dec.str()?;
        let n = dec.u32()? as usize;
        let k = dec.u32()? as usize;
        let smoothing = dec.f64()?;
        let training_count = dec.u64()?;
        let global = (0..n).map(|_| dec.u32()).collect::<Result<Vec<_>, _>>()?;
        let n_keys = dec.u64()?;
        let mut counts = BTreeMap::new();
        for _ in 0..n_keys {
            let ids = (0..k).map(|_| dec.u32().map(ClusterId)).collect::<Result<Vec<_>, _>>()?;
            let key = HistoryKey::new(ids).map_err(|e| FormatError::Invalid(e.to_string()))?;
            let len = dec.u32()? as usize;
            let mut sparse = Vec::with_capacity(len);
            for _ in 0..len {
                let c = ClusterId(dec.u32()?);
                if c.index() >= n {
                    return Err(FormatError::Invalid(format!("cluster {c} out of range")));
                }
                sparse.push((c, dec.u32()?));
            }
            counts.insert(key, sparse);
        }
        dec.finish()?;
        Ok(TransitionPrior { n, smoothing, counts, global, training_count })
    }
}

/// Softmax of `logits / temperature` with `key` masked out. Returns cumulative weights.
fn masked_cumulative(logits: &[f64], key: &HistoryKey, temperature: f64) -> Result<Vec<f64>, NoveltyError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(NoveltyError::BadTemperature(temperature));
    }
    let open = |i: usize| !key.contains(ClusterId(i as u32));
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| open(*i))
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NoveltyError::NothingProposable(key.to_string()));
    }
    let mut acc = 0.0;
    Ok(logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if open(i) {
                acc += ((l - max) / temperature).exp();
            }
            acc
        })
        .collect())
}

fn draw_cumulative(cumulative: &[f64], key: &HistoryKey, rng: &mut StreamRng) -> ClusterId {
    let total = *cumulative.last().expect("non-empty vocabulary");
    let u = rng.random::<f64>() * total;
    let idx = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
    let mut c = ClusterId(idx as u32);
    // floating-point edge: never land on a masked slot
    if key.contains(c) {
        c = (0..cumulative.len())
            .rev()
            .map(|i| ClusterId(i as u32))
            .find(|c| !key.contains(*c))
            .expect("an open slot exists");
    }
    c
}

/// Temperature sampling from a [`TransitionPrior`].
#[derive(Clone, Debug)]
pub struct PriorBackend {
    prior: Arc<TransitionPrior>,
}

impl PriorBackend {
    pub fn new(prior: Arc<TransitionPrior>) -> Self {
        PriorBackend { prior }
    }

    pub fn prior(&self) -> &TransitionPrior {
        &self.prior
    }
}

impl NoveltyBackend for PriorBackend {
    fn id(&self) -> String {
        format!(
            "prior(n={},transitions={},smoothing={})",
            self.prior.n, self.prior.training_count, self.prior.smoothing
        )
    }

    fn vocab_size(&self) -> usize {
        self.prior.n
    }

    fn propose(&self, key: &HistoryKey, temperature: f64, rng: &mut StreamRng) -> Result<Generation, NoveltyError> {
        let cumulative = masked_cumulative(&self.prior.logits(key), key, temperature)?;
        Ok(Generation::Accepted(draw_cumulative(&cumulative, key, rng)))
    }

    fn propose_n(
        &self,
        key: &HistoryKey,
        n: usize,
        temperature: f64,
        rng: &mut StreamRng,
    ) -> Result<Vec<Generation>, NoveltyError> {
        let cumulative = masked_cumulative(&self.prior.logits(key), key, temperature)?;
        Ok((0..n).map(|_| Generation::Accepted(draw_cumulative(&cumulative, key, rng))).collect())
    }

    fn fallback_order(&self, key: &HistoryKey) -> Vec<ClusterId> {
        let logits = self.prior.logits(key);
        let mut order: Vec<ClusterId> =
            (0..self.prior.n as u32).map(ClusterId).filter(|c| !key.contains(*c)).collect();
        order.sort_by(|a, b| logits[b.index()].total_cmp(&logits[a.index()]).then(a.cmp(b)));
        order
    }
}

/// Exact case-insensitive name match that must also be novel for `key`.
pub fn validate_generation(taxonomy: &Taxonomy, key: &HistoryKey, raw: &str) -> Result<ClusterId, Rejection> {
    if raw.trim().is_empty() {
        return Err(Rejection::Empty);
    }
    let id = taxonomy.lookup(raw).ok_or(Rejection::NotInVocabulary)?;
    if key.contains(id) {
        return Err(Rejection::NotNovel);
    }
    Ok(id)
}

/// A free-text generator, e.g. a hosted language model.
pub trait TextCompleter: Sync {
    fn id(&self) -> String;
    fn complete(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, NoveltyError>;
}

pub fn render_prompt(taxonomy: &Taxonomy, key: &HistoryKey) -> String {
    let names: Vec<&str> = key.clusters().iter().map(|&c| taxonomy.name(c)).collect();
    format!(
        "Users recently engaged with these interest clusters: {}.\n\
         Name one different interest cluster they are likely to enjoy next.\n\
         Answer with the cluster name only.\n",
        names.join(", ")
    )
}

/// Adapts a [`TextCompleter`] into a backend by validating its text.
pub struct TextCompletionBackend<C> {
    taxonomy: Arc<Taxonomy>,
    completer: C,
}

impl<C: TextCompleter> TextCompletionBackend<C> {
    pub fn new(taxonomy: Arc<Taxonomy>, completer: C) -> Self {
        TextCompletionBackend { taxonomy, completer }
    }
}

impl<C: TextCompleter> NoveltyBackend for TextCompletionBackend<C> {
    fn id(&self) -> String {
        format!("text({})", self.completer.id())
    }

    fn vocab_size(&self) -> usize {
        self.taxonomy.len()
    }

    fn propose(&self, key: &HistoryKey, temperature: f64, rng: &mut StreamRng) -> Result<Generation, NoveltyError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(NoveltyError::BadTemperature(temperature));
        }
        let prompt = render_prompt(&self.taxonomy, key);
        let raw = self.completer.complete(&prompt, temperature, rng.random())?;
        Ok(match validate_generation(&self.taxonomy, key, &raw) {
            Ok(c) => Generation::Accepted(c),
            Err(reason) => Generation::Rejected { reason, raw },
        })
    }
}

/// Runs an external program per request: the prompt goes to stdin, the
/// answer is read from stdout. `CLUSTERPLAN_TEMPERATURE` and `CLUSTERPLAN_SEED`
/// are set in its environment.
#[derive(Clone, Debug)]
pub struct CommandCompleter {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl TextCompleter for CommandCompleter {
    fn id(&self) -> String {
        format!("cmd:{}", self.program)
    }

    fn complete(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, NoveltyError> {
        let fail = |what: &str, e: std::io::Error| NoveltyError::BackendFailure(format!("{}: {what}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .env("CLUSTERPLAN_TEMPERATURE", temperature.to_string())
            .env("CLUSTERPLAN_SEED", seed.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| fail("spawn", e))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(prompt.as_bytes())
            .map_err(|e| fail("write prompt", e))?;
        let started = Instant::now();
        loop {
            match child.try_wait().map_err(|e| fail("wait", e))? {
                Some(status) if status.success() => break,
                Some(status) => {
                    return Err(NoveltyError::BackendFailure(format!("{} exited with {status}", self.program)))
                }
                None if started.elapsed() > self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(NoveltyError::BackendFailure(format!(
                        "{} timed out after {:?}",
                        self.program, self.timeout
                    )));
                }
                None => std::thread::sleep(Duration::from_millis(2)),
            }
        }
        let mut out = String::new();
        child
            .stdout
            .take()
            .expect("piped stdout")
            .read_to_string(&mut out)
            .map_err(|e| fail("read answer", e))?;
        Ok(out)
    }
}

/// One generation attempt and its result.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutcome {
    pub key: HistoryKey,
    pub result: Result<ClusterId, Rejection>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalBatch {
    /// Accepted proposals in draw order; duplicates are kept.
    pub clusters: Vec<ClusterId>,
    pub outcomes: Vec<GenerationOutcome>,
    /// Slots abandoned after exhausting the retry budget.
    pub dropped: usize,
}

/// `n` independent draws for `key`. Rejected generations are retried up to
/// `retry_budget` more times per slot, then the slot is dropped.
pub fn propose_batch(
    backend: &dyn NoveltyBackend,
    key: &HistoryKey,
    n: usize,
    temperature: f64,
    retry_budget: usize,
    rng: &mut StreamRng,
) -> Result<ProposalBatch, NoveltyError> {
    let mut batch = ProposalBatch::default();
    if n == 0 {
        return Ok(batch);
    }
    let first = backend.propose_n(key, n, temperature, rng)?;
    for generation in first {
        let mut generation = generation;
        let mut retries = 0;
        loop {
            match generation {
                Generation::Accepted(c) => {
                    debug_assert!(!key.contains(c), "backend proposed a history cluster");
                    batch.outcomes.push(GenerationOutcome { key: key.clone(), result: Ok(c) });
                    batch.clusters.push(c);
                    break;
                }
                Generation::Rejected { reason, .. } => {
                    batch.outcomes.push(GenerationOutcome { key: key.clone(), result: Err(reason) });
                    if retries == retry_budget {
                        batch.dropped += 1;
                        break;
                    }
                    retries += 1;
                    generation = backend.propose(key, temperature, rng)?;
                }
            }
        }
    }
    Ok(batch)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationDiagnostics {
    /// Accepted generations over all generations.
    pub format_valid_rate: f64,
    /// Accepted generations that replay a training pair, over accepted generations.
    pub repetition_rate: f64,
    pub vocab_violation_count: usize,
    pub generations: usize,
}

pub fn diagnostics(
    run: &[GenerationOutcome],
    training_set: &[(HistoryKey, ClusterId)],
) -> Result<GenerationDiagnostics, NoveltyError> {
    if run.is_empty() {
        return Err(NoveltyError::EmptyRun);
    }
    let seen: HashSet<(&HistoryKey, ClusterId)> = training_set.iter().map(|(k, c)| (k, *c)).collect();
    let mut accepted = 0usize;
    let mut repeated = 0usize;
    let mut violations = 0usize;
    for outcome in run {
        match outcome.result {
            Ok(c) => {
                accepted += 1;
                if seen.contains(&(&outcome.key, c)) {
                    repeated += 1;
                }
            }
            Err(Rejection::NotInVocabulary) => violations += 1,
            Err(_) => {}
        }
    }
    Ok(GenerationDiagnostics {
        format_valid_rate: accepted as f64 / run.len() as f64,
        repetition_rate: if accepted == 0 { 0.0 } else { repeated as f64 / accepted as f64 },
        vocab_violation_count: violations,
        generations: run.len(),
    })
}
