//! Embedding vectors: validation, storage, normalization and cosine geometry.
//!
//! Features are precomputed by an external image encoder and ingested either
//! from the little-endian `SCSF` binary format or from headerless CSV.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng;

/// Magic bytes opening an `SCSF` feature file.
pub const SCSF_MAGIC: &[u8; 4] = b"SCSF";
/// Current `SCSF` version.
pub const SCSF_VERSION: u32 = 1;
/// Size of the fixed `SCSF` header: magic, version, N, d.
pub const SCSF_HEADER_LEN: usize = 16;

/// Vectors with an L2 norm below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed body: {0}")]
    MalformedBody(String),
    #[error("dimension mismatch at {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value in {id:?} at coordinate {index}")]
    NonFinite { id: String, index: usize },
    #[error("unparseable value {value:?} on line {line}")]
    Parse { line: usize, value: String },
    #[error("vector {id:?} has near-zero norm ({norm:e})")]
    ZeroNorm { id: String, norm: f64 },
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// Serialization format of a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureFormat {
    #[default]
    Binary,
    Csv,
}

impl FeatureFormat {
    /// Guesses the format from a file extension; anything but `.csv` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

/// One embedding with its stable sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    id: String,
    values: Vec<f64>,
}

impl FeatureVector {
    /// Builds a vector, rejecting empty or non-finite input.
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if values.is_empty() {
            return Err(FeatureError::DimensionMismatch {
                context: format!("vector {id:?}"),
                expected: 1,
                found: 0,
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { id, index });
        }
        Ok(Self { id, values })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }
}

/// An ordered collection of same-dimension vectors with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    items: Vec<FeatureVector>,
    normalized: bool,
    index: HashMap<String, usize>,
}

impl FeatureSet {
    pub fn new(dim: usize, items: Vec<FeatureVector>) -> Result<Self> {
        if dim == 0 {
            return Err(FeatureError::InvalidConfig("feature dimension must be >= 1".into()));
        }
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.dim() != dim {
                return Err(FeatureError::DimensionMismatch {
                    context: format!("vector {:?}", item.id),
                    expected: dim,
                    found: item.dim(),
                });
            }
            if index.insert(item.id.clone(), i).is_some() {
                return Err(FeatureError::DuplicateId(item.id.clone()));
            }
        }
        Ok(Self {
            dim,
            items,
            normalized: false,
            index,
        })
    }

    /// Builds a set whose dimension is taken from the first item.
    pub fn from_items(items: Vec<FeatureVector>) -> Result<Self> {
        let dim = items
            .first()
            .map(FeatureVector::dim)
            .ok_or_else(|| FeatureError::InvalidConfig("cannot infer dimension of an empty set".into()))?;
        Self::new(dim, items)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn items(&self) -> &[FeatureVector] {
        &self.items
    }

    pub fn iter(&self) -> std::slice::Iter<'_, FeatureVector> {
        self.items.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|v| v.id.as_str())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.index_of(id).map(|i| &self.items[i])
    }

    /// Restricts the set to `ids`, in the given order.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<FeatureSet> {
        let items = ids
            .iter()
            .map(|id| {
                self.get(id.as_ref())
                    .cloned()
                    .ok_or_else(|| FeatureError::UnknownId(id.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = FeatureSet::new(self.dim, items)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Concatenates two sets of equal dimension. Ids must stay unique.
    pub fn concat(&self, other: &FeatureSet) -> Result<FeatureSet> {
        if self.dim != other.dim {
            return Err(FeatureError::DimensionMismatch {
                context: "set concatenation".into(),
                expected: self.dim,
                found: other.dim,
            });
        }
        let items = self.items.iter().chain(other.items.iter()).cloned().collect();
        let mut out = FeatureSet::new(self.dim, items)?;
        out.normalized = self.normalized && other.normalized;
        Ok(out)
    }

    pub fn into_items(self) -> Vec<FeatureVector> {
        self.items
    }
}

impl<'a> IntoIterator for &'a FeatureSet {
    type Item = &'a FeatureVector;
    type IntoIter = std::slice::Iter<'a, FeatureVector>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Scales every vector to unit L2 norm.
pub fn l2_normalize(set: &FeatureSet) -> Result<FeatureSet> {
    let items = set
        .items
        .iter()
        .map(|v| {
            let norm = v.norm();
            if !(norm >= MIN_NORM) {
                return Err(FeatureError::ZeroNorm {
                    id: v.id.clone(),
                    norm,
                });
            }
            Ok(FeatureVector {
                id: v.id.clone(),
                values: v.values.iter().map(|x| x / norm).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSet {
        dim: set.dim,
        items,
        normalized: true,
        index: set.index.clone(),
    })
}

/// Cosine similarity of two slices, clamped to `[-1, 1]`.
///
/// Written so that the result is bitwise symmetric in its arguments and
/// exactly 1 for identical inputs.
pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a);
    let nb = dot(b, b);
    if na.sqrt() < MIN_NORM || nb.sqrt() < MIN_NORM {
        return None;
    }
    Some((dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(FeatureError::DimensionMismatch {
            context: format!("cosine({:?}, {:?})", a.id, b.id),
            expected: a.dim(),
            found: b.dim(),
        });
    }
    cosine_slices(&a.values, &b.values).ok_or_else(|| {
        let zero = if a.norm() < MIN_NORM { a } else { b };
        FeatureError::ZeroNorm {
            id: zero.id.clone(),
            norm: zero.norm(),
        }
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    match format {
        FeatureFormat::Binary => decode_scsf(&bytes),
        FeatureFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|e| FeatureError::MalformedBody(format!("CSV is not UTF-8: {e}")))?;
            parse_csv(&text)
        }
    }
}

pub fn save_features(set: &FeatureSet, path: &Path, format: FeatureFormat) -> Result<()> {
    let bytes = match format {
        FeatureFormat::Binary => encode_scsf(set)?,
        FeatureFormat::Csv => render_csv(set).into_bytes(),
    };
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Encodes a set as `SCSF v1`. Coordinates are stored as `f32`.
pub fn encode_scsf(set: &FeatureSet) -> Result<Vec<u8>> {
    let n = u32::try_from(set.len())
        .map_err(|_| FeatureError::InvalidConfig("too many vectors for SCSF".into()))?;
    let d = u32::try_from(set.dim)
        .map_err(|_| FeatureError::InvalidConfig("dimension too large for SCSF".into()))?;
    let mut out = Vec::with_capacity(SCSF_HEADER_LEN + set.len() * set.dim * 4);
    out.extend_from_slice(SCSF_MAGIC);
    out.extend_from_slice(&SCSF_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for item in &set.items {
        for &v in &item.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for item in &set.items {
        let len = u16::try_from(item.id.len())
            .map_err(|_| FeatureError::InvalidConfig(format!("id longer than 65535 bytes: {:?}", item.id)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(item.id.as_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FeatureError::MalformedBody(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Decodes an `SCSF v1` buffer.
pub fn decode_scsf(bytes: &[u8]) -> Result<FeatureSet> {
    let (set, used) = decode_scsf_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FeatureError::MalformedBody(format!(
            "{} trailing bytes after SCSF block",
            bytes.len() - used
        )));
    }
    Ok(set)
}

/// Decodes an `SCSF` block at the start of `bytes`, returning the set and
/// the number of bytes consumed. Used where the block is embedded in a
/// larger file.
pub fn decode_scsf_prefix(bytes: &[u8]) -> Result<(FeatureSet, usize)> {
    if bytes.len() < SCSF_HEADER_LEN {
        return Err(FeatureError::MalformedHeader(format!(
            "file is {} bytes, shorter than the {SCSF_HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != SCSF_MAGIC {
        return Err(FeatureError::MalformedHeader("bad magic, expected SCSF".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != SCSF_VERSION {
        return Err(FeatureError::MalformedHeader(format!("unsupported version {version}")));
    }
    let n = r.u32("N")? as usize;
    let d = r.u32("d")? as usize;
    if d == 0 {
        return Err(FeatureError::MalformedHeader("dimension d = 0".into()));
    }
    let payload_len = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| FeatureError::MalformedHeader("N * d overflows".into()))?;
    let payload = r.take(payload_len, "payload")?;
    let mut rows: Vec<Vec<f64>> = payload
        .chunks_exact(d * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        })
        .collect();
    let mut items = Vec::with_capacity(n);
    for values in rows.drain(..) {
        let len = u16::from_le_bytes(r.take(2, "id length")?.try_into().expect("2 bytes")) as usize;
        let id = std::str::from_utf8(r.take(len, "id bytes")?)
            .map_err(|e| FeatureError::MalformedBody(format!("id is not UTF-8: {e}")))?
            .to_string();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { id, index });
        }
        items.push(FeatureVector { id, values });
    }
    Ok((FeatureSet::new(d, items)?, r.pos))
}

/// Parses headerless CSV: `id,v1,...,vd` per line.
pub fn parse_csv(text: &str) -> Result<FeatureSet> {
    let mut items = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().trim().to_string();
        if id.is_empty() {
            return Err(FeatureError::MalformedBody(format!("empty id on line {line_no}")));
        }
        let values = fields
            .map(|f| {
                let f = f.trim();
                f.parse::<f64>().map_err(|_| FeatureError::Parse {
                    line: line_no,
                    value: f.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected || expected == 0 {
            return Err(FeatureError::DimensionMismatch {
                context: format!("line {line_no} (id {id:?})"),
                expected,
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { id, index });
        }
        items.push(FeatureVector { id, values });
    }
    let dim = dim.ok_or_else(|| FeatureError::MalformedBody("CSV has no rows; dimension unknown".into()))?;
    FeatureSet::new(dim, items)
}

pub fn render_csv(set: &FeatureSet) -> String {
    let mut out = String::new();
    for item in &set.items {
        out.push_str(&item.id);
        for v in &item.values {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Parameters of a seeded synthetic feature world.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.dim == 0 {
            return Err(FeatureError::InvalidConfig(
                "num_classes, samples_per_class and dim must be positive".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(FeatureError::InvalidConfig(format!(
                "noise_scale must be finite and >= 0, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Latent class of every synthetic sample.
pub type ClassLabels = BTreeMap<String, usize>;

/// Id of the `index`-th sample of `class` in a synthetic world.
pub fn synthetic_id(class: usize, index: usize) -> String {
    format!("c{class:03}_{index:05}")
}

/// Draws class prototypes from a standard normal and scatters samples
/// around them. Coordinates are rounded to `f32` so the set survives an
/// `SCSF` round trip unchanged.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig) -> Result<(FeatureSet, ClassLabels)> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| (0..cfg.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut items = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    let mut labels = ClassLabels::new();
    for (class, proto) in prototypes.iter().enumerate() {
        for index in 0..cfg.samples_per_class {
            let values = proto
                .iter()
                .map(|&p| {
                    let eps: f64 = rng.sample(StandardNormal);
                    (p + cfg.noise_scale * eps) as f32 as f64
                })
                .collect();
            let id = synthetic_id(class, index);
            labels.insert(id.clone(), class);
            items.push(FeatureVector::new(id, values)?);
        }
    }
    Ok((FeatureSet::new(cfg.dim, items)?, labels))
}

impl fmt::Display for FeatureFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureFormat::Binary => f.write_str("binary"),
            FeatureFormat::Csv => f.write_str("csv"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(id: &str, v: &[f64]) -> FeatureVector {
        FeatureVector::new(id, v.to_vec()).unwrap()
    }

    #[test]
    fn csv_parses_ids_and_values() {
        let set = parse_csv("a,1.0,2.0\nb,3.0,4.0").unwrap();
        assert_eq!(set.dim(), 2);
        assert_eq!(set.ids().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(set.get("b").unwrap().values(), &[3.0, 4.0]);
        assert!(!set.is_normalized());
    }

    #[test]
    fn csv_ragged_rows_are_dimension_mismatch() {
        let err = parse_csv("a,1.0,2.0\nb,3.0").unwrap_err();
        assert!(matches!(err, FeatureError::DimensionMismatch { expected: 2, found: 1, .. }));
    }

    #[test]
    fn csv_errors_are_distinct() {
        assert!(matches!(parse_csv("a,1\na,2").unwrap_err(), FeatureError::DuplicateId(id) if id == "a"));
        assert!(matches!(parse_csv("a,1,NaN").unwrap_err(), FeatureError::NonFinite { index: 1, .. }));
        assert!(matches!(parse_csv("a,1,x").unwrap_err(), FeatureError::Parse { line: 1, .. }));
        assert!(matches!(parse_csv("a,1,inf").unwrap_err(), FeatureError::NonFinite { .. }));
    }

    #[test]
    fn binary_header_errors() {
        assert!(matches!(decode_scsf(b"SCS").unwrap_err(), FeatureError::MalformedHeader(_)));
        let mut bad = encode_scsf(&FeatureSet::empty(3).unwrap()).unwrap();
        bad[0] = b'X';
        assert!(matches!(decode_scsf(&bad).unwrap_err(), FeatureError::MalformedHeader(_)));
        let mut v2 = encode_scsf(&FeatureSet::empty(3).unwrap()).unwrap();
        v2[4] = 2;
        assert!(matches!(decode_scsf(&v2).unwrap_err(), FeatureError::MalformedHeader(_)));
    }

    #[test]
    fn binary_rejects_nonfinite_and_duplicates() {
        let set = FeatureSet::new(2, vec![fv("a", &[1.0, 0.0]), fv("b", &[0.0, 1.0])]).unwrap();
        let mut bytes = encode_scsf(&set).unwrap();
        bytes[SCSF_HEADER_LEN + 4..SCSF_HEADER_LEN + 8].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_scsf(&bytes).unwrap_err(), FeatureError::NonFinite { index: 1, .. }));

        let mut dup = encode_scsf(&set).unwrap();
        let last = dup.len() - 1;
        dup[last] = b'a';
        assert!(matches!(decode_scsf(&dup).unwrap_err(), FeatureError::DuplicateId(_)));
    }

    #[test]
    fn binary_two_rows_round_trip() {
        let set = FeatureSet::new(3, vec![fv("x", &[1.0, 0.0, 0.0]), fv("y", &[0.0, 1.0, 0.0])]).unwrap();
        let back = decode_scsf(&encode_scsf(&set).unwrap()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn empty_set_encodes_n_zero() {
        let set = FeatureSet::empty(4).unwrap();
        let bytes = encode_scsf(&set).unwrap();
        assert_eq!(bytes.len(), SCSF_HEADER_LEN);
        let back = decode_scsf(&bytes).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn file_size_matches_format_definition() {
        let items = (0..100)
            .map(|i| FeatureVector::new(format!("s{i}"), vec![0.5; 1024]).unwrap())
            .collect();
        let set = FeatureSet::new(1024, items).unwrap();
        let ids: usize = set.ids().map(|id| 2 + id.len()).sum();
        assert_eq!(encode_scsf(&set).unwrap().len(), 16 + 100 * 1024 * 4 + ids);
    }

    #[test]
    fn normalize_examples() {
        let set = FeatureSet::new(2, vec![fv("a", &[3.0, 4.0])]).unwrap();
        let n = l2_normalize(&set).unwrap();
        assert!(n.is_normalized());
        let v = n.get("a").unwrap().values();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let unit = FeatureSet::new(2, vec![fv("u", &[0.0, 1.0])]).unwrap();
        assert_eq!(l2_normalize(&unit).unwrap().get("u").unwrap().values(), &[0.0, 1.0]);

        let zero = FeatureSet::new(2, vec![fv("z", &[0.0, 0.0])]).unwrap();
        assert!(matches!(l2_normalize(&zero).unwrap_err(), FeatureError::ZeroNorm { id, .. } if id == "z"));
    }

    #[test]
    fn cosine_examples() {
        let a = fv("a", &[1.0, 0.0]);
        let b = fv("b", &[0.0, 1.0]);
        let c = fv("c", &[1.0, 1.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert!((cosine_similarity(&c, &a).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(cosine_similarity(&a, &fv("z", &[0.0, 0.0])).is_err());
        assert!(matches!(
            cosine_similarity(&a, &fv("d", &[1.0, 2.0, 3.0])).unwrap_err(),
            FeatureError::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let cfg = SyntheticWorldConfig {
            num_classes: 5,
            samples_per_class: 20,
            dim: 8,
            noise_scale: 0.1,
            seed: 3,
        };
        let (a, la) = generate_synthetic(&cfg).unwrap();
        let (b, lb) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la[&synthetic_id(4, 19)], 4);
    }

    #[test]
    fn zero_noise_world_is_degenerate() {
        let cfg = SyntheticWorldConfig {
            num_classes: 3,
            samples_per_class: 4,
            dim: 6,
            noise_scale: 0.0,
            seed: 11,
        };
        let (set, labels) = generate_synthetic(&cfg).unwrap();
        let n = l2_normalize(&set).unwrap();
        for a in n.iter() {
            for b in n.iter() {
                if labels[a.id()] == labels[b.id()] {
                    assert_eq!(a.values(), b.values());
                    assert_eq!(cosine_similarity(a, b).unwrap(), 1.0);
                }
            }
        }
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let cfg = SyntheticWorldConfig {
            num_classes: 2,
            samples_per_class: 2,
            dim: 2,
            noise_scale: -1.0,
            seed: 0,
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    fn arb_set() -> impl Strategy<Value = FeatureSet> {
        (1usize..6, 0usize..8).prop_flat_map(|(d, n)| {
            prop::collection::vec(prop::collection::vec(-1e3f32..1e3, d), n).prop_map(move |rows| {
                let items = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| FeatureVector::new(format!("id{i}"), r.into_iter().map(f64::from).collect()).unwrap())
                    .collect();
                FeatureSet::new(d, items).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn scsf_round_trip_is_identity(set in arb_set()) {
            prop_assert_eq!(decode_scsf(&encode_scsf(&set).unwrap()).unwrap(), set);
        }

        #[test]
        fn csv_round_trip_within_tolerance(set in arb_set().prop_filter("nonempty", |s| !s.is_empty())) {
            let back = parse_csv(&render_csv(&set)).unwrap();
            for (a, b) in set.iter().zip(back.iter()) {
                prop_assert_eq!(a.id(), b.id());
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn normalize_idempotent_and_scale_invariant(
            v in prop::collection::vec(-10.0f64..10.0, 1..8),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3);
            let dim = v.len();
            let set = FeatureSet::new(dim, vec![FeatureVector::new("v", v.clone()).unwrap()]).unwrap();
            let scaled = FeatureSet::new(dim, vec![FeatureVector::new("v", v.iter().map(|x| x * c).collect()).unwrap()]).unwrap();
            let once = l2_normalize(&set).unwrap();
            let twice = l2_normalize(&once).unwrap();
            let from_scaled = l2_normalize(&scaled).unwrap();
            for ((a, b), s) in once.items()[0].values().iter().zip(twice.items()[0].values()).zip(from_scaled.items()[0].values()) {
                prop_assert!((a - b).abs() <= 1e-9);
                prop_assert!((a - s).abs() <= 1e-9);
            }
            prop_assert!((once.items()[0].norm() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            pair in (1usize..8).prop_flat_map(|d| (prop::collection::vec(-5.0f64..5.0, d), prop::collection::vec(-5.0f64..5.0, d))),
            c in 0.01f64..100.0,
        ) {
            let (a, b) = pair;
            prop_assume!(dot(&a, &a) > 1e-6 && dot(&b, &b) > 1e-6);
            let va = FeatureVector::new("a", a.clone()).unwrap();
            let vb = FeatureVector::new("b", b).unwrap();
            let vc = FeatureVector::new("c", a.iter().map(|x| x * c).collect()).unwrap();
            let ab = cosine_similarity(&va, &vb).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&vb, &va).unwrap());
            prop_assert!((ab - cosine_similarity(&vc, &vb).unwrap()).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
