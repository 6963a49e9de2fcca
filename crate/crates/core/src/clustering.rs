//! Lloyd k-means over a [`FeatureSet`].
//!
//! The fit works internally on samples sorted by id, so the resulting
//! partition does not depend on the order of the input set. The objective is
//! the sum of squared Euclidean distances from each sample to the centroid of
//! its cluster.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::features::{self, squared_distance, FeatureError, FeatureSet, FeatureVector};
use crate::rng;

const MODEL_MAGIC: &str = "SCSK 1";

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot cluster an empty feature set")]
    EmptySet,
    #[error("num_clusters M = {m} exceeds the number of samples N = {n} (M must be <= N)")]
    TooManyClusters { m: usize, n: usize },
    #[error("invalid k-means configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: model has d = {expected}, vector {id:?} has {found}")]
    DimensionMismatch { id: String, expected: usize, found: usize },
    #[error("sample {0:?} has no cluster assignment")]
    Unassigned(String),
    #[error("assignment of {id:?} to cluster {cluster} is out of range")]
    BadCluster { id: String, cluster: usize },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMethod {
    /// Uniformly sampled distinct input vectors.
    #[default]
    Random,
    KMeansPlusPlus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub num_clusters: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Stop when the objective improves by less than this. Zero disables
    /// the check, leaving the assignment fixpoint and `max_iters`.
    pub tol: f64,
    pub init: InitMethod,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            num_clusters: 10,
            max_iters: 300,
            seed: 0,
            tol: 0.0,
            init: InitMethod::Random,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 {
            return Err(ClusterError::InvalidConfig("num_clusters must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(ClusterError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(ClusterError::InvalidConfig(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// A fitted partition: `M` centroids and the cluster of every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    dim: usize,
    centroids: Vec<Vec<f64>>,
    assignments: BTreeMap<String, usize>,
    objective: f64,
    iterations_run: usize,
    converged: bool,
}

impl KMeansModel {
    /// Builds a model from fixed centroids by assigning every sample of
    /// `set` to its nearest centroid. No Lloyd iterations are run.
    pub fn from_centroids(centroids: Vec<Vec<f64>>, set: &FeatureSet) -> Result<Self> {
        if centroids.is_empty() {
            return Err(ClusterError::InvalidConfig("at least one centroid is required".into()));
        }
        let dim = set.dim();
        if let Some(c) = centroids.iter().find(|c| c.len() != dim) {
            return Err(ClusterError::DimensionMismatch {
                id: "centroid".into(),
                expected: dim,
                found: c.len(),
            });
        }
        let mut assignments = BTreeMap::new();
        let mut objective = 0.0;
        for v in set {
            let (k, d2) = nearest(&centroids, v.values());
            assignments.insert(v.id().to_string(), k);
            objective += d2;
        }
        Ok(Self {
            dim,
            centroids,
            assignments,
            objective,
            iterations_run: 0,
            converged: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn centroid(&self, cluster: usize) -> &[f64] {
        &self.centroids[cluster]
    }

    pub fn assignments(&self) -> &BTreeMap<String, usize> {
        &self.assignments
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn iterations_run(&self) -> usize {
        self.iterations_run
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &k in self.assignments.values() {
            sizes[k] += 1;
        }
        sizes
    }

    /// Serializes as a key-value header, an `SCSF` centroid block and an
    /// `id,cluster` CSV table.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::new();
        let _ = writeln!(head, "{MODEL_MAGIC}");
        let _ = writeln!(head, "M={}", self.centroids.len());
        let _ = writeln!(head, "d={}", self.dim);
        let _ = writeln!(head, "iterations={}", self.iterations_run);
        let _ = writeln!(head, "objective={:?}", self.objective);
        let _ = writeln!(head, "converged={}", self.converged);
        head.push('\n');
        let items = self
            .centroids
            .iter()
            .enumerate()
            .map(|(k, c)| FeatureVector::new(format!("centroid_{k}"), c.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let block = features::encode_scsf(&FeatureSet::new(self.dim, items)?)?;
        let mut out = head.into_bytes();
        out.extend_from_slice(&block);
        let mut table = String::from("id,cluster\n");
        for (id, k) in &self.assignments {
            let _ = writeln!(table, "{id},{k}");
        }
        out.extend_from_slice(table.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |m: &str| ClusterError::Malformed(m.to_string());
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| malformed("missing end of header"))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| malformed("header is not UTF-8"))?;
        let mut lines = head.lines();
        if lines.next() != Some(MODEL_MAGIC) {
            return Err(malformed("bad magic, expected SCSK 1"));
        }
        let mut kv = BTreeMap::new();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| malformed("header line without '='"))?;
            kv.insert(k.trim(), v.trim());
        }
        let field = |k: &str| kv.get(k).copied().ok_or_else(|| ClusterError::Malformed(format!("missing header key {k}")));
        let parse_err = |k: &str| ClusterError::Malformed(format!("bad value for {k}"));
        let m: usize = field("M")?.parse().map_err(|_| parse_err("M"))?;
        let dim: usize = field("d")?.parse().map_err(|_| parse_err("d"))?;
        let iterations_run: usize = field("iterations")?.parse().map_err(|_| parse_err("iterations"))?;
        let objective: f64 = field("objective")?.parse().map_err(|_| parse_err("objective"))?;
        let converged: bool = field("converged")?.parse().map_err(|_| parse_err("converged"))?;

        let (block, used) = features::decode_scsf_prefix(&bytes[split + 2..])?;
        if block.len() != m || block.dim() != dim {
            return Err(malformed("centroid block disagrees with header"));
        }
        let centroids: Vec<Vec<f64>> = block.iter().map(|v| v.values().to_vec()).collect();
        let table = std::str::from_utf8(&bytes[split + 2 + used..]).map_err(|_| malformed("table is not UTF-8"))?;
        let mut rows = table.lines();
        if rows.next() != Some("id,cluster") {
            return Err(malformed("missing id,cluster table header"));
        }
        let mut assignments = BTreeMap::new();
        for row in rows.filter(|r| !r.is_empty()) {
            let (id, k) = row.rsplit_once(',').ok_or_else(|| malformed("bad table row"))?;
            let k: usize = k.parse().map_err(|_| malformed("bad cluster index"))?;
            if k >= m {
                return Err(ClusterError::BadCluster { id: id.to_string(), cluster: k });
            }
            if assignments.insert(id.to_string(), k).is_some() {
                return Err(ClusterError::Feature(FeatureError::DuplicateId(id.to_string())));
            }
        }
        Ok(Self {
            dim,
            centroids,
            assignments,
            objective,
            iterations_run,
            converged,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|source| ClusterError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ClusterError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Index and squared distance of the nearest centroid; ties go to the
/// lowest index.
fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, squared_distance(&centroids[0], v));
    for (k, c) in centroids.iter().enumerate().skip(1) {
        let d2 = squared_distance(c, v);
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best
}

pub fn assign(model: &KMeansModel, v: &FeatureVector) -> Result<usize> {
    if v.dim() != model.dim {
        return Err(ClusterError::DimensionMismatch {
            id: v.id().to_string(),
            expected: model.dim,
            found: v.dim(),
        });
    }
    Ok(nearest(&model.centroids, v.values()).0)
}

/// Sum of squared distances from every sample in `set` to its assigned
/// centroid.
pub fn objective(model: &KMeansModel, set: &FeatureSet) -> Result<f64> {
    let mut total = 0.0;
    for v in set {
        let k = model.cluster_of(v.id()).ok_or_else(|| ClusterError::Unassigned(v.id().to_string()))?;
        let c = model.centroids.get(k).ok_or_else(|| ClusterError::BadCluster {
            id: v.id().to_string(),
            cluster: k,
        })?;
        if c.len() != v.dim() {
            return Err(ClusterError::DimensionMismatch {
                id: v.id().to_string(),
                expected: c.len(),
                found: v.dim(),
            });
        }
        total += squared_distance(c, v.values());
    }
    Ok(total)
}

pub fn kmeans_fit(set: &FeatureSet, cfg: &KMeansConfig) -> Result<KMeansModel> {
    kmeans_fit_traced(set, cfg).map(|(model, _)| model)
}

/// Fits k-means and also returns the objective after every assignment step.
pub fn kmeans_fit_traced(set: &FeatureSet, cfg: &KMeansConfig) -> Result<(KMeansModel, Vec<f64>)> {
    cfg.validate()?;
    let n = set.len();
    let m = cfg.num_clusters;
    if n == 0 {
        return Err(ClusterError::EmptySet);
    }
    if m > n {
        return Err(ClusterError::TooManyClusters { m, n });
    }

    let mut sorted: Vec<&FeatureVector> = set.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    let points: Vec<&[f64]> = sorted.iter().map(|v| v.values()).collect();

    let mut rng = rng::seeded(cfg.seed);
    let mut centroids: Vec<Vec<f64>> = match cfg.init {
        InitMethod::Random => index::sample(&mut rng, n, m)
            .into_iter()
            .map(|i| points[i].to_vec())
            .collect(),
        InitMethod::KMeansPlusPlus => plus_plus_init(&points, m, &mut rng),
    };

    let mut labels = vec![usize::MAX; n];
    let mut dist2 = vec![0.0; n];
    let mut trace = Vec::new();
    let mut converged = false;

    for iter in 0..cfg.max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (k, d2) = nearest(&centroids, p);
            changed |= labels[i] != k;
            labels[i] = k;
            dist2[i] = d2;
        }
        let obj: f64 = dist2.iter().sum();
        let prev = trace.last().copied();
        trace.push(obj);
        if !changed {
            converged = true;
            break;
        }
        if cfg.tol > 0.0 && prev.is_some_and(|p| p - obj < cfg.tol) {
            converged = true;
            break;
        }
        if iter + 1 == cfg.max_iters {
            break;
        }
        centroids = update_centroids(&points, &labels, &centroids);
    }

    let assignments = sorted
        .iter()
        .zip(&labels)
        .map(|(v, &k)| (v.id().to_string(), k))
        .collect();
    let model = KMeansModel {
        dim: set.dim(),
        objective: *trace.last().expect("at least one iteration"),
        iterations_run: trace.len(),
        centroids,
        assignments,
        converged,
    };
    Ok((model, trace))
}

fn plus_plus_init(points: &[&[f64]], m: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, points[chosen[0]])).collect();
    while chosen.len() < m {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every remaining point coincides with a centroid.
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

/// Moves every centroid to the mean of its members. A cluster left without
/// members is reseeded at the sample farthest from its own (updated)
/// centroid, so exactly `M` clusters survive.
fn update_centroids(points: &[&[f64]], labels: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = old.len();
    let dim = old[0].len();
    let mut sums = vec![vec![0.0; dim]; m];
    let mut counts = vec![0usize; m];
    for (p, &k) in points.iter().zip(labels) {
        counts[k] += 1;
        for (s, x) in sums[k].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    let mut centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .zip(old)
        .map(|((s, &c), o)| {
            if c == 0 {
                o.clone()
            } else {
                s.into_iter().map(|x| x / c as f64).collect()
            }
        })
        .collect();

    let empty: Vec<usize> = (0..m).filter(|&k| counts[k] == 0).collect();
    if !empty.is_empty() {
        let mut spread: Vec<(f64, usize)> = points
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (p, &k))| (squared_distance(p, &centroids[k]), i))
            .collect();
        // Farthest first, lowest index on ties.
        spread.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (k, (_, i)) in empty.into_iter().zip(spread) {
            centroids[k] = points[i].to_vec();
        }
    }
    centroids
}
