//! Reward providers.
//!
//! An [`Oracle`] maps a (query, candidate) pair to the IoU a segmentation
//! backbone reaches on the query when prompted with the candidate. Three
//! providers are available: a precomputed IoU matrix, seeded simulations for
//! desk-scale experiments, and a JSON-over-HTTP client for a remote backbone
//! wrapper. [`CachedOracle`] memoizes any of them.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::features::{cosine_slices, FeatureSet};
use crate::rng;

/// Reward for a candidate sharing the query's latent class.
pub const CLASS_MATCH_HIT: f64 = 0.8;
/// Reward for a candidate of another class.
pub const CLASS_MATCH_MISS: f64 = 0.2;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("transport failure scoring ({query_id:?}, {candidate_id:?}): {message}")]
    Transport {
        query_id: String,
        candidate_id: String,
        message: String,
    },
    #[error("score {value} for ({query_id:?}, {candidate_id:?}) is outside [0, 1]")]
    OutOfRange {
        query_id: String,
        candidate_id: String,
        value: f64,
    },
    #[error("invalid oracle input: {0}")]
    Invalid(String),
    #[error("malformed IoU table at line {line}: {reason}")]
    Table { line: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = OracleError> = std::result::Result<T, E>;

/// IoU rewards of every pool member for one query, aligned with pool order.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardRecord {
    query_id: String,
    ious: Vec<f64>,
    avg: f64,
}

impl RewardRecord {
    /// Validates the scores and computes their mean as the baseline.
    ///
    /// The mean is accumulated relative to the first score, so a record
    /// whose scores are all equal has a baseline exactly equal to them.
    pub fn new(query_id: impl Into<String>, ious: Vec<f64>) -> Result<Self> {
        let query_id = query_id.into();
        if ious.is_empty() {
            return Err(OracleError::Invalid(format!("empty reward record for {query_id:?}")));
        }
        if let Some(&v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(OracleError::OutOfRange {
                query_id,
                candidate_id: String::new(),
                value: v,
            });
        }
        let first = ious[0];
        let avg = first + ious.iter().map(|u| u - first).sum::<f64>() / ious.len() as f64;
        Ok(Self { query_id, ious, avg })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn ious(&self) -> &[f64] {
        &self.ious
    }

    pub fn avg(&self) -> f64 {
        self.avg
    }

    pub fn len(&self) -> usize {
        self.ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ious.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.ious.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `u_m - avg`, evaluated as `(u_m - u_0) - sum(u - u_0) / P` so that
    /// equal scores give exact zeros and a common shift of all scores
    /// cancels whenever the differences are exact.
    pub fn advantages(&self) -> Vec<f64> {
        let first = self.ious[0];
        let offset = self.ious.iter().map(|u| u - first).sum::<f64>() / self.ious.len() as f64;
        self.ious.iter().map(|u| (u - first) - offset).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub deterministic: bool,
    pub batched: bool,
}

pub trait Oracle: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Stable description used to key memoized scores.
    fn identity(&self) -> String;

    fn score_pair(&self, query_id: &str, candidate_id: &str) -> Result<f64>;

    fn score_batch(&self, query_id: &str, candidate_ids: &[String]) -> Result<RewardRecord> {
        let ious = candidate_ids
            .iter()
            .map(|c| self.score_pair(query_id, c))
            .collect::<Result<Vec<_>>>()?;
        RewardRecord::new(query_id, ious)
    }
}

impl<T: Oracle + ?Sized> Oracle for Box<T> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn identity(&self) -> String {
        (**self).identity()
    }

    fn score_pair(&self, query_id: &str, candidate_id: &str) -> Result<f64> {
        (**self).score_pair(query_id, candidate_id)
    }

    fn score_batch(&self, query_id: &str, candidate_ids: &[String]) -> Result<RewardRecord> {
        (**self).score_batch(query_id, candidate_ids)
    }
}

fn check_range(query_id: &str, candidate_id: &str, value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(OracleError::OutOfRange {
            query_id: query_id.to_string(),
            candidate_id: candidate_id.to_string(),
            value,
        })
    }
}

/// Measured IoUs: query ids by candidate ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixOracle {
    queries: Vec<String>,
    candidates: Vec<String>,
    query_index: HashMap<String, usize>,
    candidate_index: HashMap<String, usize>,
    values: Vec<f64>,
    source: String,
}

fn index_ids(ids: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(OracleError::Invalid(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(index)
}

impl MatrixOracle {
    /// `values` is row-major with one row per query.
    pub fn new(queries: Vec<String>, candidates: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != queries.len() * candidates.len() {
            return Err(OracleError::Invalid(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                queries.len(),
                candidates.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            check_range(&queries[i / candidates.len()], &candidates[i % candidates.len()], v)?;
        }
        Ok(Self {
            query_index: index_ids(&queries, "query")?,
            candidate_index: index_ids(&candidates, "candidate")?,
            queries,
            candidates,
            values,
            source: String::from("inline"),
        })
    }

    /// Parses the CSV layout: first row candidate ids after a corner cell,
    /// then one row per query.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(OracleError::Table {
            line: 1,
            reason: "empty file".into(),
        })?;
        let candidates: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        if candidates.is_empty() {
            return Err(OracleError::Table {
                line: 1,
                reason: "no candidate columns".into(),
            });
        }
        let mut queries = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines {
            let mut cells = line.split(',');
            let qid = cells.next().unwrap_or_default().trim().to_string();
            let row: Vec<&str> = cells.collect();
            if row.len() != candidates.len() {
                return Err(OracleError::Table {
                    line: i + 1,
                    reason: format!("expected {} cells, found {}", candidates.len(), row.len()),
                });
            }
            for cell in row {
                let v: f64 = cell.trim().parse().map_err(|_| OracleError::Table {
                    line: i + 1,
                    reason: format!("unparseable value {cell:?}"),
                })?;
                values.push(v);
            }
            queries.push(qid);
        }
        Self::new(queries, candidates, values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| OracleError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut oracle = Self::parse_csv(&text)?;
        oracle.source = path.display().to_string();
        Ok(oracle)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id");
        for c in &self.candidates {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (q, row) in self.queries.iter().zip(self.values.chunks(self.candidates.len().max(1))) {
            out.push_str(q);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn queries(&self) -> &[String] {
        &self.queries
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }
}

impl Oracle for MatrixOracle {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deterministic: true,
            batched: false,
        }
    }

    fn identity(&self) -> String {
        format!("matrix:{}", self.source)
    }

    fn score_pair(&self, query_id: &str, candidate_id: &str) -> Result<f64> {
        let q = self
            .query_index
            .get(query_id)
            .ok_or_else(|| OracleError::UnknownId(query_id.to_string()))?;
        let c = self
            .candidate_index
            .get(candidate_id)
            .ok_or_else(|| OracleError::UnknownId(candidate_id.to_string()))?;
        Ok(self.values[q * self.candidates.len() + c])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimulatedMode {
    /// `CLASS_MATCH_HIT` when the latent classes agree, `CLASS_MATCH_MISS` otherwise.
    ClassMatch { labels: HashMap<String, usize> },
    /// `sigmoid(alpha * cos(query, candidate) + beta)`.
    CosineSigmoid {
        features: HashMap<String, Vec<f64>>,
        alpha: f64,
        beta: f64,
    },
}

/// Seeded stand-in for a segmentation backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedOracle {
    mode: SimulatedMode,
    noise_scale: f64,
    seed: u64,
}

impl SimulatedOracle {
    pub fn class_match(labels: impl IntoIterator<Item = (String, usize)>, noise_scale: f64, seed: u64) -> Result<Self> {
        Self::new(
            SimulatedMode::ClassMatch {
                labels: labels.into_iter().collect(),
            },
            noise_scale,
            seed,
        )
    }

    /// Looks up vectors by id across `sets`; an id present in several sets
    /// must carry the same vector in each.
    pub fn cosine_sigmoid(sets: &[&FeatureSet], alpha: f64, beta: f64, noise_scale: f64, seed: u64) -> Result<Self> {
        let mut features: HashMap<String, Vec<f64>> = HashMap::new();
        for set in sets {
            for v in set.iter() {
                match features.get(v.id()) {
                    Some(existing) if existing.as_slice() != v.values() => {
                        return Err(OracleError::Invalid(format!("id {:?} appears with two different vectors", v.id())))
                    }
                    Some(_) => {}
                    None => {
                        features.insert(v.id().to_string(), v.values().to_vec());
                    }
                }
            }
        }
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(OracleError::Invalid("alpha and beta must be finite".into()));
        }
        Self::new(SimulatedMode::CosineSigmoid { features, alpha, beta }, noise_scale, seed)
    }

    pub fn new(mode: SimulatedMode, noise_scale: f64, seed: u64) -> Result<Self> {
        if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
            return Err(OracleError::Invalid(format!("noise_scale must be finite and >= 0, got {noise_scale}")));
        }
        Ok(Self { mode, noise_scale, seed })
    }

    pub fn mode(&self) -> &SimulatedMode {
        &self.mode
    }

    fn noise(&self, query_id: &str, candidate_id: &str) -> f64 {
        if self.noise_scale == 0.0 {
            return 0.0;
        }
        let seed = rng::mix_seed(self.seed, [query_id.as_bytes(), candidate_id.as_bytes()]);
        let eps: f64 = rng::seeded(seed).sample(StandardNormal);
        self.noise_scale * eps
    }
}

impl Oracle for SimulatedOracle {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deterministic: true,
            batched: false,
        }
    }

    fn identity(&self) -> String {
        match &self.mode {
            SimulatedMode::ClassMatch { .. } => {
                format!("simulated:class_match:noise={}:seed={}", self.noise_scale, self.seed)
            }
            SimulatedMode::CosineSigmoid { alpha, beta, .. } => format!(
                "simulated:cosine_sigmoid:alpha={alpha}:beta={beta}:noise={}:seed={}",
                self.noise_scale, self.seed
            ),
        }
    }

    fn score_pair(&self, query_id: &str, candidate_id: &str) -> Result<f64> {
        let base = match &self.mode {
            SimulatedMode::ClassMatch { labels } => {
                let lq = labels.get(query_id).ok_or_else(|| OracleError::UnknownId(query_id.to_string()))?;
                let lc = labels
                    .get(candidate_id)
                    .ok_or_else(|| OracleError::UnknownId(candidate_id.to_string()))?;
                if lq == lc {
                    CLASS_MATCH_HIT
                } else {
                    CLASS_MATCH_MISS
                }
            }
            SimulatedMode::CosineSigmoid { features, alpha, beta } => {
                let fq = features.get(query_id).ok_or_else(|| OracleError::UnknownId(query_id.to_string()))?;
                let fc = features
                    .get(candidate_id)
                    .ok_or_else(|| OracleError::UnknownId(candidate_id.to_string()))?;
                let cos = cosine_slices(fq, fc).ok_or_else(|| {
                    OracleError::Invalid(format!("zero vector in pair ({query_id:?}, {candidate_id:?})"))
                })?;
                1.0 / (1.0 + (-(alpha * cos + beta)).exp())
            }
        };
        Ok((base + self.noise(query_id, candidate_id)).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

/// Counting gate bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for `POST {endpoint}/v1/score`.
pub struct RemoteOracle {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    gate: InFlight,
}

impl std::fmt::Debug for RemoteOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteOracle")
            .field("endpoint", &self.endpoint)
            .field("retry", &self.retry)
            .field("max_in_flight", &self.gate.limit)
            .finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(OracleError),
}

impl RemoteOracle {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retry: RetryPolicy, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            retry,
            gate: InFlight {
                limit: max_in_flight.max(1),
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }

    pub fn url(&self) -> String {
        format!("{}/v1/score", self.endpoint)
    }

    fn attempt(&self, body: &str, query_id: &str, candidate_ids: &[String]) -> std::result::Result<Vec<f64>, Attempt> {
        let _slot = self.gate.acquire();
        let mut resp = self
            .agent
            .post(&self.url())
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status != 200 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        let parsed: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Attempt::Retry(format!("malformed body: {e}")))?;
        let ious = parsed
            .get("ious")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Attempt::Retry("malformed body: missing \"ious\" array".into()))?;
        if ious.len() != candidate_ids.len() {
            return Err(Attempt::Retry(format!(
                "malformed body: {} ious for {} pairs",
                ious.len(),
                candidate_ids.len()
            )));
        }
        ious.iter()
            .zip(candidate_ids)
            .map(|(v, c)| {
                let x = v
                    .as_f64()
                    .ok_or_else(|| Attempt::Retry(format!("malformed body: non-numeric iou for {c:?}")))?;
                check_range(query_id, c, x).map_err(Attempt::Fatal)
            })
            .collect()
    }
}

impl Oracle for RemoteOracle {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deterministic: false,
            batched: true,
        }
    }

    fn identity(&self) -> String {
        format!("remote:{}", self.endpoint)
    }

    fn score_pair(&self, query_id: &str, candidate_id: &str) -> Result<f64> {
        let record = self.score_batch(query_id, &[candidate_id.to_string()])?;
        Ok(record.ious()[0])
    }

    fn score_batch(&self, query_id: &str, candidate_ids: &[String]) -> Result<RewardRecord> {
        let pairs: Vec<serde_json::Value> = candidate_ids
            .iter()
            .map(|c| serde_json::json!({ "query_id": query_id, "candidate_id": c }))
            .collect();
        let body = serde_json::json!({ "pairs": pairs }).to_string();
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff);
            }
            match self.attempt(&body, query_id, candidate_ids) {
                Ok(ious) => return RewardRecord::new(query_id, ious),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(OracleError::Transport {
            query_id: query_id.to_string(),
            candidate_id: candidate_ids.join(";"),
            message: format!("{} attempts failed; last error: {last}", self.retry.max_retries + 1),
        })
    }
}

const SIDECAR_HEADER: &str = "oracle,query_id,candidate_id,iou";

/// Memoizes scores per (query, candidate) for one inner oracle.
#[derive(Debug)]
pub struct CachedOracle<O> {
    inner: O,
    cache: Mutex<HashMap<(String, String), f64>>,
}

impl<O: Oracle> CachedOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<(String, String), f64>> {
        self.cache.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Loads rows of the sidecar that belong to this oracle's identity.
    pub fn load_sidecar(&self, path: &Path) -> Result<usize> {
        let text = std::fs::read_to_string(path).map_err(|source| OracleError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let identity = self.inner.identity();
        let mut cache = self.lock();
        let mut loaded = 0;
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let mut f = line.rsplitn(4, ',');
            let (Some(iou), Some(c), Some(q), Some(o)) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(OracleError::Table {
                    line: i + 1,
                    reason: "expected 4 fields".into(),
                });
            };
            if o != identity {
                continue;
            }
            let v: f64 = iou.parse().map_err(|_| OracleError::Table {
                line: i + 1,
                reason: format!("bad iou {iou:?}"),
            })?;
            cache.insert((q.to_string(), c.to_string()), check_range(q, c, v)?);
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Writes every memoized score, sorted by (query, candidate).
    pub fn save_sidecar(&self, path: &Path) -> Result<()> {
        let identity = self.inner.identity();
        let sorted: BTreeMap<(String, String), f64> = self.lock().iter().map(|(k, v)| (k.clone(), *v)).collect();
        let mut out = format!("{SIDECAR_HEADER}\n");
        for ((q, c), v) in sorted {
            let _ = writeln!(out, "{identity},{q},{c},{v}");
        }
        std::fs::write(path, out).map_err(|source| OracleError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl<O: Oracle> Oracle for CachedOracle<O> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn score_pair(&self, query_id: &str, candidate_id: &str) -> Result<f64> {
        let key = (query_id.to_string(), candidate_id.to_string());
        if let Some(&v) = self.lock().get(&key) {
            return Ok(v);
        }
        let v = self.inner.score_pair(query_id, candidate_id)?;
        self.lock().insert(key, v);
        Ok(v)
    }

    fn score_batch(&self, query_id: &str, candidate_ids: &[String]) -> Result<RewardRecord> {
        let mut ious: Vec<Option<f64>> = {
            let cache = self.lock();
            candidate_ids
                .iter()
                .map(|c| cache.get(&(query_id.to_string(), c.clone())).copied())
                .collect()
        };
        let missing: Vec<String> = candidate_ids
            .iter()
            .zip(&ious)
            .filter(|(_, v)| v.is_none())
            .map(|(c, _)| c.clone())
            .collect();
        if !missing.is_empty() {
            let fetched = self.inner.score_batch(query_id, &missing)?;
            let mut cache = self.lock();
            let mut it = fetched.ious().iter();
            for (slot, c) in ious.iter_mut().zip(candidate_ids) {
                if slot.is_none() {
                    let v = *it.next().expect("one score per missing candidate");
                    cache.insert((query_id.to_string(), c.clone()), v);
                    *slot = Some(v);
                }
            }
        }
        RewardRecord::new(query_id, ious.into_iter().map(|v| v.expect("filled")).collect())
    }
}
