//! The search agent: one shared MLP scores every `[candidate; query]`
//! concatenation, and a softmax over the pool turns scores into selection
//! probabilities.
//!
//! Parameters are stored flat, layer by layer, each layer as a row-major
//! `fan_out x fan_in` weight matrix followed by its bias. Gradients and
//! optimizer moments share that layout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::pool::CandidatePool;
use crate::rng;

const CHECKPOINT_MAGIC: &str = "SCSA 1";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {context} expects {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("non-finite score for candidate {0:?}; parameters have diverged")]
    NonFinite(String),
    #[error("requested top-{n} of a pool of {pool}")]
    TooMany { n: usize, pool: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl AgentConfig {
    /// Two layers with a 512-wide ReLU hidden layer.
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden_dims: vec![512],
            activation: Activation::Relu,
            init_seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(AgentError::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(AgentError::InvalidConfig("hidden layers must have positive width".into()));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<LayerShape> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden_dims);
        widths.push(1);
        widths
            .windows(2)
            .map(|w| LayerShape {
                fan_in: w[0],
                fan_out: w[1],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    feature_dim: usize,
    seed: u64,
    shapes: Vec<LayerShape>,
    values: Vec<f64>,
}

/// Activations retained from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// Input of every layer; `inputs[0]` is the concatenated feature pair.
    inputs: Vec<Vec<f64>>,
    pub(crate) output: f64,
}

impl AgentParams {
    /// Parameters with every weight and bias set to zero.
    pub fn zeros(cfg: &AgentConfig) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.shapes();
        let n = shapes.iter().map(LayerShape::len).sum();
        Ok(Self {
            feature_dim: cfg.feature_dim,
            seed: cfg.init_seed,
            shapes,
            values: vec![0.0; n],
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, LayerShape)> + '_ {
        self.shapes.iter().scan(0, |off, &s| {
            let start = *off;
            *off += s.len();
            Some((start, s))
        })
    }

    /// Weights (row-major, `fan_out x fan_in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (start, s) = self.offsets().nth(l).expect("layer index in range");
        let w_end = start + s.fan_out * s.fan_in;
        (&self.values[start..w_end], &self.values[w_end..w_end + s.fan_out])
    }

    /// Forward pass over one `[candidate; query]` pair.
    pub fn forward(&self, candidate: &[f64], query: &[f64]) -> f64 {
        self.forward_cached(candidate, query).output
    }

    pub(crate) fn forward_cached(&self, candidate: &[f64], query: &[f64]) -> ForwardCache {
        let mut x: Vec<f64> = candidate.iter().chain(query).copied().collect();
        let mut inputs = Vec::with_capacity(self.shapes.len());
        let last = self.shapes.len() - 1;
        for (l, (start, s)) in self.offsets().enumerate() {
            let w = &self.values[start..start + s.fan_out * s.fan_in];
            let b = &self.values[start + s.fan_out * s.fan_in..start + s.len()];
            let mut z: Vec<f64> = w
                .chunks_exact(s.fan_in)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if l != last {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        ForwardCache {
            inputs,
            output: x[0],
        }
    }

    /// Adds `d_output * d(output)/d(params)` into `grad`.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_output: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.values.len());
        let layers: Vec<(usize, LayerShape)> = self.offsets().collect();
        let mut delta = vec![d_output];
        for (l, &(start, s)) in layers.iter().enumerate().rev() {
            let input = &cache.inputs[l];
            let w_len = s.fan_out * s.fan_in;
            let (gw, gb) = grad[start..start + s.len()].split_at_mut(w_len);
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                if d != 0.0 {
                    for (g, &a) in gw[o * s.fan_in..(o + 1) * s.fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // `input` is the ReLU output of the previous layer, so its
            // positivity is the activation mask.
            let w = &self.values[start..start + w_len];
            let mut prev = vec![0.0; s.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (p, &wv) in prev.iter_mut().zip(&w[o * s.fan_in..(o + 1) * s.fan_in]) {
                        *p += d * wv;
                    }
                }
            }
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// SHA-256 over the little-endian `f64` parameter bytes, as hex.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Serializes as an `SCSA` checkpoint: text header, then `f32` blocks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        let _ = writeln!(head, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(head, "feature_dim={}", self.feature_dim);
        let _ = writeln!(head, "seed={}", self.seed);
        let _ = writeln!(head, "activation=relu");
        let layers: Vec<String> = self.shapes.iter().map(|s| format!("{}x{}", s.fan_in, s.fan_out)).collect();
        let _ = writeln!(head, "layers={}", layers.join(","));
        head.push('\n');
        let mut out = head.into_bytes();
        out.reserve(self.values.len() * 4);
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| AgentError::Malformed(m.to_string());
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing end of header"))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = head.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("bad magic, expected SCSA 1"));
        }
        let (mut feature_dim, mut seed, mut shapes) = (None, None, None);
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("header line without '='"))?;
            match k {
                "feature_dim" => feature_dim = Some(v.parse::<usize>().map_err(|_| bad("bad feature_dim"))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("bad seed"))?),
                "activation" if v == "relu" => {}
                "activation" => return Err(bad("unsupported activation")),
                "layers" => {
                    let parsed = v
                        .split(',')
                        .map(|s| {
                            let (i, o) = s.split_once('x')?;
                            Some(LayerShape {
                                fan_in: i.parse().ok()?,
                                fan_out: o.parse().ok()?,
                            })
                        })
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad("bad layers"))?;
                    shapes = Some(parsed);
                }
                _ => return Err(AgentError::Malformed(format!("unknown header key {k}"))),
            }
        }
        let feature_dim = feature_dim.ok_or_else(|| bad("missing feature_dim"))?;
        let seed = seed.ok_or_else(|| bad("missing seed"))?;
        let shapes: Vec<LayerShape> = shapes.ok_or_else(|| bad("missing layers"))?;
        let chained = !shapes.is_empty()
            && shapes[0].fan_in == 2 * feature_dim
            && shapes.last().is_some_and(|s| s.fan_out == 1)
            && shapes.windows(2).all(|w| w[0].fan_out == w[1].fan_in)
            && shapes.iter().all(|s| s.fan_in > 0 && s.fan_out > 0);
        if !chained {
            return Err(bad("layer shapes do not chain from 2*feature_dim to 1"));
        }
        let n: usize = shapes.iter().map(LayerShape::len).sum();
        let body = &bytes[split + 2..];
        if body.len() != n * 4 {
            return Err(AgentError::Malformed(format!("expected {} weight bytes, found {}", n * 4, body.len())));
        }
        let values: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite weight"));
        }
        Ok(Self {
            feature_dim,
            seed,
            shapes,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| AgentError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| AgentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Seeded uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
pub fn init_agent(cfg: &AgentConfig) -> Result<AgentParams> {
    let mut params = AgentParams::zeros(cfg)?;
    let mut rng = rng::seeded(cfg.init_seed);
    let layers: Vec<(usize, LayerShape)> = params.offsets().collect();
    for (start, s) in layers {
        let bound = 1.0 / (s.fan_in as f64).sqrt();
        for w in &mut params.values[start..start + s.fan_out * s.fan_in] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(params)
}

/// Softmax distribution of the agent over one candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDistribution {
    pool_ids: Vec<String>,
    scores: Vec<f64>,
    probs: Vec<f64>,
}

impl SelectionDistribution {
    /// Builds the distribution from raw scores with a max-shifted softmax.
    pub fn from_scores(pool_ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if pool_ids.is_empty() {
            return Err(AgentError::EmptyPool);
        }
        if pool_ids.len() != scores.len() {
            return Err(AgentError::DimensionMismatch {
                context: "scores".into(),
                expected: pool_ids.len(),
                found: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(AgentError::NonFinite(pool_ids[i].clone()));
        }
        let probs = softmax(&scores);
        Ok(Self {
            pool_ids,
            scores,
            probs,
        })
    }

    pub fn pool_ids(&self) -> &[String] {
        &self.pool_ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Pool positions ordered by probability, descending, ties by id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| {
            self.probs[b]
                .total_cmp(&self.probs[a])
                .then_with(|| self.pool_ids[a].cmp(&self.pool_ids[b]))
        });
        order
    }
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn check_inputs(params: &AgentParams, pool: &CandidatePool, query: &FeatureVector) -> Result<()> {
    if pool.is_empty() {
        return Err(AgentError::EmptyPool);
    }
    if pool.dim() != params.feature_dim {
        return Err(AgentError::DimensionMismatch {
            context: "candidate pool".into(),
            expected: params.feature_dim,
            found: pool.dim(),
        });
    }
    if query.dim() != params.feature_dim {
        return Err(AgentError::DimensionMismatch {
            context: format!("query {:?}", query.id()),
            expected: params.feature_dim,
            found: query.dim(),
        });
    }
    Ok(())
}

/// Scores every pool member against `query` and normalizes with softmax.
pub fn score_candidates(params: &AgentParams, pool: &CandidatePool, query: &FeatureVector) -> Result<SelectionDistribution> {
    check_inputs(params, pool, query)?;
    let scores = pool
        .vectors()
        .iter()
        .map(|c| params.forward(c.values(), query.values()))
        .collect();
    SelectionDistribution::from_scores(pool.ids(), scores)
}

/// Ids of the `n` most probable candidates, descending.
pub fn select_top_n(dist: &SelectionDistribution, n: usize) -> Result<Vec<String>> {
    if n == 0 || n > dist.len() {
        return Err(AgentError::TooMany { n, pool: dist.len() });
    }
    Ok(dist.ranking().into_iter().take(n).map(|i| dist.pool_ids[i].clone()).collect())
}
