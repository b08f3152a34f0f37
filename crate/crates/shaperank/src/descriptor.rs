//! Global shape descriptors: the built-in D2 shape distribution and an
//! ingestion path for externally computed feature files.
//!
//! The retrieval pipeline places no constraint on where features come from
//! beyond dimensional consistency; any encoder that emits one fixed-length
//! vector per shape can drive the feature-ranking stage.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pointcloud::{distance, PointCloud};
use crate::scalar::{cast, Scalar};

/// Default D2 histogram resolution.
pub const DEFAULT_D2_BINS: usize = 64;
/// Default number of sampled point pairs per D2 descriptor.
pub const DEFAULT_D2_PAIRS: usize = 4096;

/// Errors from descriptor computation and feature-file handling.
#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cloud `{id}` has {got} points, need at least {needed} for the descriptor")]
    TooFewPoints { id: String, needed: usize, got: usize },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate feature id `{0}`")]
    DuplicateId(String),
    #[error("invalid feature id `{0}` (must be non-empty, no whitespace)")]
    InvalidId(String),
    #[error("non-finite feature value at index {index}")]
    NonFinite { index: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// A d-dimensional global shape descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<S: Scalar> {
    values: Vec<S>,
}

impl<S: Scalar> FeatureVector<S> {
    /// Builds a vector, validating that every entry is finite.
    pub fn new(values: Vec<S>) -> Result<Self, FeatureError> {
        if values.is_empty() {
            return Err(FeatureError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        for (index, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(FeatureError::NonFinite { index });
            }
        }
        Ok(FeatureVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }
}

/// Where a feature set came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSource {
    /// The built-in D2 shape distribution descriptor.
    BuiltinD2,
    /// Features ingested from an external file, tagged with its name.
    External(String),
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::BuiltinD2 => f.write_str("builtin-d2"),
            FeatureSource::External(name) => write!(f, "external:{name}"),
        }
    }
}

/// Features for a set of shapes, all of one dimension, keyed by id.
#[derive(Debug, Clone)]
pub struct FeatureSet<S: Scalar> {
    features: BTreeMap<String, FeatureVector<S>>,
    dim: usize,
    source: FeatureSource,
}

impl<S: Scalar> FeatureSet<S> {
    pub fn new(source: FeatureSource) -> Self {
        FeatureSet {
            features: BTreeMap::new(),
            dim: 0,
            source,
        }
    }

    /// Inserts a feature vector, enforcing unique ids and a uniform
    /// dimension (set by the first insertion).
    pub fn insert(&mut self, id: impl Into<String>, vector: FeatureVector<S>) -> Result<(), FeatureError> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(FeatureError::InvalidId(id));
        }
        if self.features.is_empty() {
            self.dim = vector.dim();
        } else if vector.dim() != self.dim {
            return Err(FeatureError::DimensionMismatch {
                expected: self.dim,
                got: vector.dim(),
            });
        }
        if self.features.contains_key(&id) {
            return Err(FeatureError::DuplicateId(id));
        }
        self.features.insert(id, vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> &FeatureSource {
        &self.source
    }

    pub fn get(&self, id: &str) -> Option<&FeatureVector<S>> {
        self.features.get(id)
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureVector<S>)> {
        self.features.iter().map(|(id, v)| (id.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(|s| s.as_str())
    }
}

/// Computes the D2 shape distribution: a histogram of Euclidean distances
/// between `pairs` seeded-random point pairs, binned uniformly on `[0, 2]`
/// (the maximum distance inside a unit-radius cloud) and L1-normalized.
///
/// Pair sampling draws point *indices*, never coordinates, so the descriptor
/// is invariant under rigid rotation of the cloud. The two indices of a pair
/// are always distinct. The top bin is right-closed: a distance of exactly 2
/// lands in the last bin, as do distances beyond 2 from un-normalized input.
pub fn compute_d2<S: Scalar>(
    cloud: &PointCloud<S>,
    bins: usize,
    pairs: usize,
    seed: u64,
) -> Result<FeatureVector<S>, FeatureError> {
    assert!(bins >= 2, "need at least 2 histogram bins");
    assert!(pairs >= 1, "need at least 1 sampled pair");
    let n = cloud.len();
    if n < 2 {
        return Err(FeatureError::TooFewPoints {
            id: cloud.id().to_string(),
            needed: 2,
            got: n,
        });
    }

    let points = cloud.points();
    let bin_width = cast::<S>(2.0) / S::from_usize(bins).expect("bins fit scalar");
    let mut histogram = vec![0u64; bins];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let d = distance(&points[i], &points[j]);
        let mut bin = (d / bin_width).to_usize().unwrap_or(bins - 1);
        if bin >= bins {
            bin = bins - 1;
        }
        histogram[bin] += 1;
    }

    let total = S::from_usize(pairs).expect("pairs fit scalar");
    let values = histogram
        .iter()
        .map(|&count| S::from_u64(count).expect("count fits scalar") / total)
        .collect();
    FeatureVector::new(values)
}

/// Euclidean distance between two feature vectors of equal dimension.
pub fn feature_distance<S: Scalar>(
    a: &FeatureVector<S>,
    b: &FeatureVector<S>,
) -> Result<S, FeatureError> {
    if a.dim() != b.dim() {
        return Err(FeatureError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mut acc = S::zero();
    for (x, y) in a.values().iter().zip(b.values()) {
        let diff = *x - *y;
        acc += diff * diff;
    }
    Ok(acc.sqrt())
}

/// Loads a feature file: one record per line, `<id> <v1> ... <vd>`,
/// whitespace-separated, `#` comment lines ignored. The dimension is
/// inferred from the first record and enforced on the rest; pass
/// `expected_dim` to reject a file of the wrong dimension outright.
pub fn load_features<S: Scalar>(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<FeatureSet<S>, FeatureError> {
    let text = fs::read_to_string(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("features")
        .to_string();
    let mut set = FeatureSet::new(FeatureSource::External(name));
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let id = tokens.next().expect("non-empty line has a first token");
        let mut values = Vec::new();
        for token in tokens {
            let v: S = token.parse().map_err(|_| FeatureError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("invalid feature value `{token}`"),
            })?;
            values.push(v);
        }
        if values.is_empty() {
            return Err(FeatureError::Parse {
                path: path.to_path_buf(),
                line,
                message: "record has no feature values".into(),
            });
        }
        if let Some(expected) = expected_dim {
            if values.len() != expected {
                return Err(FeatureError::DimensionMismatch {
                    expected,
                    got: values.len(),
                });
            }
        }
        let vector = FeatureVector::new(values).map_err(|e| match e {
            FeatureError::NonFinite { index } => FeatureError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("non-finite feature value at column {}", index + 2),
            },
            other => other,
        })?;
        set.insert(id, vector)?;
    }
    Ok(set)
}

/// Writes a feature set in the same format [`load_features`] reads.
/// Records are emitted in ascending id order with round-trip formatting.
pub fn save_features<S: Scalar>(set: &FeatureSet<S>, path: &Path) -> Result<(), FeatureError> {
    let mut buf = Vec::new();
    for (id, vector) in set.iter() {
        write!(buf, "{id}").expect("write to Vec cannot fail");
        for v in vector.values() {
            write!(buf, " {v}").expect("write to Vec cannot fail");
        }
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })
}
