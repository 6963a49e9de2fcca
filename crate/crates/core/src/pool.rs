//! Candidate pool construction.
//!
//! From every cluster the member nearest to its centroid and the member
//! farthest from it are kept. With `M` clusters of at least two members the
//! pool holds `2M` samples; a singleton cluster contributes one. Only pool
//! members need ground-truth masks, and the pool ids are written to an
//! annotation manifest for that purpose.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::clustering::KMeansModel;
use crate::features::{cosine_similarity, squared_distance, FeatureError, FeatureSet, FeatureVector};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("sample {0:?} is not covered by the model")]
    UnknownId(String),
    #[error("model assigns {0:?}, which is missing from the feature set")]
    MissingSample(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid pool: {0}")]
    Invalid(String),
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T, E = PoolError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rank {
    Nearest,
    Farthest,
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rank::Nearest => "nearest",
            Rank::Farthest => "farthest",
        })
    }
}

impl FromStr for Rank {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Rank::Nearest),
            "farthest" => Ok(Rank::Farthest),
            other => Err(format!("unknown rank {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEntry {
    pub id: String,
    pub cluster: usize,
    pub rank: Rank,
    /// Euclidean distance to the cluster centroid.
    pub distance: f64,
}

/// The typical samples of every cluster, with their features in entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    entries: Vec<CandidateEntry>,
    features: FeatureSet,
}

impl CandidatePool {
    /// Assembles a pool, checking ordering, uniqueness and alignment of
    /// `features` with `entries`.
    pub fn from_parts(entries: Vec<CandidateEntry>, features: FeatureSet) -> Result<Self> {
        if entries.len() != features.len() {
            return Err(PoolError::Invalid(format!(
                "{} entries but {} feature vectors",
                entries.len(),
                features.len()
            )));
        }
        for (i, (e, v)) in entries.iter().zip(features.iter()).enumerate() {
            if e.id != v.id() {
                return Err(PoolError::Invalid(format!("entry {i} is {:?} but feature row is {:?}", e.id, v.id())));
            }
            if !(e.distance >= 0.0) {
                return Err(PoolError::Invalid(format!("negative distance for {:?}", e.id)));
            }
        }
        for w in entries.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if (a.cluster, a.rank) >= (b.cluster, b.rank) {
                return Err(PoolError::Invalid(format!(
                    "entries out of order: ({}, {}) before ({}, {})",
                    a.cluster, a.rank, b.cluster, b.rank
                )));
            }
            if a.cluster == b.cluster && a.distance > b.distance {
                return Err(PoolError::Invalid(format!("cluster {}: nearest is farther than farthest", a.cluster)));
            }
        }
        Ok(Self { entries, features })
    }

    pub fn entries(&self) -> &[CandidateEntry] {
        &self.entries
    }

    pub fn features(&self) -> &FeatureSet {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn vectors(&self) -> &[FeatureVector] {
        self.features.items()
    }

    /// Renders the annotation manifest: `id,cluster,rank,distance`.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("id,cluster,rank,distance\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{}", e.id, e.cluster, e.rank, e.distance);
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest_csv()).map_err(|source| PoolError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<CandidateEntry>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "id,cluster,rank,distance")) => {}
        _ => {
            return Err(PoolError::Manifest {
                line: 1,
                reason: "expected header id,cluster,rank,distance".into(),
            })
        }
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| PoolError::Manifest {
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut f = line.rsplitn(4, ',');
        let distance = f.next().ok_or_else(|| bad("missing distance"))?;
        let rank = f.next().ok_or_else(|| bad("missing rank"))?;
        let cluster = f.next().ok_or_else(|| bad("missing cluster"))?;
        let id = f.next().ok_or_else(|| bad("missing id"))?;
        entries.push(CandidateEntry {
            id: id.to_string(),
            cluster: cluster.parse().map_err(|_| bad("bad cluster"))?,
            rank: rank.parse().map_err(|e: String| bad(&e))?,
            distance: distance.parse().map_err(|_| bad("bad distance"))?,
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<CandidateEntry>> {
    let text = std::fs::read_to_string(path).map_err(|source| PoolError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text)
}

/// Picks the nearest and farthest member of every cluster. Members are
/// ordered by distance to the centroid, ties by id.
pub fn build_pool(model: &KMeansModel, set: &FeatureSet) -> Result<CandidatePool> {
    if model.dim() != set.dim() {
        return Err(PoolError::DimensionMismatch {
            expected: model.dim(),
            found: set.dim(),
        });
    }
    let mut members: Vec<Vec<(f64, &str)>> = vec![Vec::new(); model.num_clusters()];
    for v in set {
        let k = model.cluster_of(v.id()).ok_or_else(|| PoolError::UnknownId(v.id().to_string()))?;
        let d = squared_distance(model.centroid(k), v.values()).sqrt();
        members[k].push((d, v.id()));
    }
    if let Some(id) = model.assignments().keys().find(|id| set.index_of(id).is_none()) {
        return Err(PoolError::MissingSample(id.clone()));
    }

    let mut entries = Vec::with_capacity(2 * model.num_clusters());
    for (cluster, mut list) in members.into_iter().enumerate() {
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let Some(&(d_near, near)) = list.first() else {
            continue;
        };
        entries.push(CandidateEntry {
            id: near.to_string(),
            cluster,
            rank: Rank::Nearest,
            distance: d_near,
        });
        if list.len() >= 2 {
            let &(d_far, far) = list.last().expect("len >= 2");
            entries.push(CandidateEntry {
                id: far.to_string(),
                cluster,
                rank: Rank::Farthest,
                distance: d_far,
            });
        }
    }
    let ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
    let features = set.subset(&ids)?;
    CandidatePool::from_parts(entries, features)
}

/// Cosine similarity of `query` to every pool member, in pool order.
pub fn pool_distances(pool: &CandidatePool, query: &FeatureVector) -> Result<Vec<(String, f64)>> {
    if query.dim() != pool.dim() {
        return Err(PoolError::DimensionMismatch {
            expected: pool.dim(),
            found: query.dim(),
        });
    }
    pool.vectors()
        .iter()
        .map(|c| Ok((c.id().to_string(), cosine_similarity(query, c)?)))
        .collect()
}
