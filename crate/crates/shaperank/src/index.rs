//! Exact k-nearest-neighbor index over database feature vectors.
//!
//! Low-dimensional feature sets get a kd-tree; past
//! [`KDTREE_MAX_DIM`] dimensions kd-tree pruning stops paying for itself
//! (every query degenerates toward a full traversal), so the index switches
//! to a dense linear scan. Both backends return identical, exact results
//! ordered by (distance, id).

use std::fs;
use std::io::{self};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::descriptor::{FeatureSet, FeatureVector};
use crate::kdtree::FlatKdTree;
use crate::scalar::{cmp_scores, Scalar};

/// Above this dimension the index uses a dense linear scan instead of a
/// kd-tree.
pub const KDTREE_MAX_DIM: usize = 32;

const MAGIC: [u8; 4] = *b"SRNK";
const FORMAT_VERSION: u16 = 1;

/// Errors from index queries and persistence.
#[derive(Debug, Error)]
pub enum IndexError {
    #[error("query dimension mismatch: index has {expected}, query has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{path}: unsupported index format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u16,
        expected: u16,
    },
    #[error("{path}: corrupt index file: {detail}")]
    CorruptFile { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// What the scores in a [`CandidateSet`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Euclidean distance between feature vectors.
    FeatureDistance,
    /// A point-set distance between clouds.
    GeometricDistance,
}

/// An ordered list of (model id, score) pairs, ascending by score with ties
/// broken by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<S: Scalar> {
    kind: ScoreKind,
    entries: Vec<(String, S)>,
}

impl<S: Scalar> CandidateSet<S> {
    /// Builds a candidate set from unordered entries. Sorts by
    /// (score, id) and rejects duplicate ids.
    pub fn new(kind: ScoreKind, mut entries: Vec<(String, S)>) -> Result<Self, IndexError> {
        entries.sort_by(|a, b| cmp_scores(a.1, b.1).then_with(|| a.0.cmp(&b.0)));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(IndexError::CorruptFile {
                    path: PathBuf::new(),
                    detail: format!("duplicate candidate id `{}`", pair[0].0),
                });
            }
        }
        Ok(CandidateSet { kind, entries })
    }

    pub(crate) fn from_sorted(kind: ScoreKind, entries: Vec<(String, S)>) -> Self {
        debug_assert!(entries
            .windows(2)
            .all(|w| cmp_scores(w[0].1, w[1].1).then_with(|| w[0].0.cmp(&w[1].0)).is_le()));
        CandidateSet { kind, entries }
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn entries(&self) -> &[(String, S)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// The best-ranked entry.
    pub fn first(&self) -> Option<(&str, S)> {
        self.entries.first().map(|(id, s)| (id.as_str(), *s))
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|(e, _)| e == id).map(|p| p + 1)
    }

    /// Whether `id` appears within the first `k` entries.
    pub fn contains_in_top(&self, id: &str, k: usize) -> bool {
        self.entries.iter().take(k).any(|(e, _)| e == id)
    }
}

enum Backend<S> {
    Tree(FlatKdTree<S>),
    Linear(Vec<S>),
}

/// Exact kNN index over all database features. Immutable after build;
/// concurrent queries are safe and lock-free.
pub struct FeatureIndex<S: Scalar> {
    dim: usize,
    /// Model ids in ascending order; tree/scan positions map back here, so
    /// position order doubles as the deterministic tie-break order.
    ids: Vec<String>,
    vectors: Vec<S>,
    backend: Backend<S>,
}

impl<S: Scalar> FeatureIndex<S> {
    /// Builds the index over a feature set. Deterministic for a given set.
    pub fn build(features: &FeatureSet<S>) -> Self {
        assert!(!features.is_empty(), "cannot index an empty feature set");
        let dim = features.dim();
        let mut ids = Vec::with_capacity(features.len());
        let mut vectors = Vec::with_capacity(features.len() * dim);
        for (id, vector) in features.iter() {
            ids.push(id.to_string());
            vectors.extend_from_slice(vector.values());
        }
        let backend = if dim > KDTREE_MAX_DIM {
            Backend::Linear(vectors.clone())
        } else {
            Backend::Tree(FlatKdTree::build(dim, &vectors))
        };
        FeatureIndex {
            dim,
            ids,
            vectors,
            backend,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether this index runs on the dense linear-scan backend.
    pub fn is_linear_scan(&self) -> bool {
        matches!(self.backend, Backend::Linear(_))
    }

    /// Model ids in index order (ascending).
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(|s| s.as_str())
    }

    /// The exact `min(k, len)` nearest entries to `query` by feature
    /// distance, ties broken by ascending model id.
    pub fn knn(&self, query: &FeatureVector<S>, k: usize) -> Result<CandidateSet<S>, IndexError> {
        assert!(k >= 1, "k must be at least 1");
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let k = k.min(self.ids.len());
        let hits: Vec<(S, u32)> = match &self.backend {
            Backend::Tree(tree) => tree.knn(query.values(), k),
            Backend::Linear(data) => {
                let mut all: Vec<(S, u32)> = (0..self.ids.len())
                    .map(|i| {
                        let base = i * self.dim;
                        let mut acc = S::zero();
                        for (a, q) in query.values().iter().enumerate() {
                            let diff = data[base + a] - *q;
                            acc += diff * diff;
                        }
                        (acc, i as u32)
                    })
                    .collect();
                all.sort_by(|x, y| cmp_scores(x.0, y.0).then(x.1.cmp(&y.1)));
                all.truncate(k);
                all
            }
        };
        let entries = hits
            .into_iter()
            .map(|(d2, idx)| (self.ids[idx as usize].clone(), d2.sqrt()))
            .collect();
        Ok(CandidateSet::from_sorted(ScoreKind::FeatureDistance, entries))
    }
}

/// Serializes the index: magic `SRNK`, format version, dimension, entry
/// count, the id table, a little-endian f64 payload of all vectors, and a
/// trailing CRC32 of everything before it.
pub fn save_index<S: Scalar>(index: &FeatureIndex<S>, path: &Path) -> Result<(), IndexError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(index.ids.len() as u64).to_le_bytes());
    for id in &index.ids {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for v in &index.vectors {
        let v = v.to_f64().expect("scalar converts to f64");
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = crc32fast::hash(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, buf).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.pos + n > self.bytes.len() {
            return Err(IndexError::CorruptFile {
                path: self.path.to_path_buf(),
                detail: "unexpected end of file".into(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, IndexError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads an index written by [`save_index`]. The tree is rebuilt from the
/// stored vectors; construction is deterministic, so the loaded index
/// answers every query identically to the saved one.
pub fn load_index<S: Scalar>(path: &Path) -> Result<FeatureIndex<S>, IndexError> {
    let bytes = fs::read(path).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |detail: &str| IndexError::CorruptFile {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };

    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(IndexError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }

    if bytes.len() < 4 {
        return Err(corrupt("missing checksum"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(corrupt("checksum mismatch"));
    }

    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    if dim == 0 || count == 0 {
        return Err(corrupt("empty index"));
    }
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("id is not valid UTF-8"))?
            .to_string();
        ids.push(id);
    }
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(corrupt("ids not strictly ascending"));
    }
    let mut vectors = Vec::with_capacity(count * dim);
    for _ in 0..count * dim {
        let v = r.f64()?;
        vectors.push(S::from_f64(v).ok_or_else(|| corrupt("payload value out of range"))?);
    }
    if r.pos != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }

    let backend = if dim > KDTREE_MAX_DIM {
        Backend::Linear(vectors.clone())
    } else {
        Backend::Tree(FlatKdTree::build(dim, &vectors))
    };
    Ok(FeatureIndex {
        dim,
        ids,
        vectors,
        backend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::FeatureSource;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_from(entries: &[(&str, &[f64])]) -> FeatureSet<f64> {
        let mut set = FeatureSet::new(FeatureSource::BuiltinD2);
        for (id, values) in entries {
            set.insert(*id, FeatureVector::new(values.to_vec()).unwrap())
                .unwrap();
        }
        set
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureSet<f64> {
        let mut set = FeatureSet::new(FeatureSource::BuiltinD2);
        for i in 0..n {
            let values: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            set.insert(
                format!("m{i:05}"),
                FeatureVector::new(values).unwrap(),
            )
            .unwrap();
        }
        set
    }

    fn brute_knn(set: &FeatureSet<f64>, query: &FeatureVector<f64>, k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = set
            .iter()
            .map(|(id, v)| (id.to_string(), feature_distance_raw(v, query)))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.truncate(k.min(all.len()));
        all
    }

    fn feature_distance_raw(a: &FeatureVector<f64>, b: &FeatureVector<f64>) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn knn_hand_case() {
        let set = set_from(&[("a", &[0.0]), ("b", &[1.0]), ("c", &[3.0])]);
        let index = FeatureIndex::build(&set);
        let result = index
            .knn(&FeatureVector::new(vec![0.9]).unwrap(), 2)
            .unwrap();
        let entries = result.entries();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, "b");
        assert!((entries[0].1 - 0.1).abs() < 1e-12);
        assert_eq!(entries[1].0, "a");
        assert!((entries[1].1 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn knn_exact_match_and_clamping() {
        let set = set_from(&[("a", &[0.0, 0.0]), ("b", &[1.0, 1.0])]);
        let index = FeatureIndex::build(&set);
        let hit = index
            .knn(&FeatureVector::new(vec![1.0, 1.0]).unwrap(), 1)
            .unwrap();
        assert_eq!(hit.first().unwrap(), ("b", 0.0));
        // k beyond the database size returns everything, fully sorted.
        let all = index
            .knn(&FeatureVector::new(vec![0.0, 0.0]).unwrap(), 10)
            .unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all.entries()[0].0, "a");
    }

    #[test]
    fn knn_rejects_dimension_mismatch() {
        let set = set_from(&[("a", &[0.0, 0.0])]);
        let index = FeatureIndex::build(&set);
        assert!(matches!(
            index.knn(&FeatureVector::new(vec![1.0]).unwrap(), 1),
            Err(IndexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn knn_matches_linear_scan_over_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for &dim in &[8usize, 64] {
            let set = random_set(&mut rng, 300, dim);
            let index = FeatureIndex::build(&set);
            assert_eq!(index.is_linear_scan(), dim > KDTREE_MAX_DIM);
            for _ in 0..25 {
                let q = FeatureVector::new(
                    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                let got = index.knn(&q, 10).unwrap();
                let want = brute_knn(&set, &q, 10);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.entries().iter().zip(&want) {
                    assert_eq!(g.0, w.0);
                    assert_eq!(g.1.to_bits(), w.1.to_bits());
                }
            }
        }
    }

    #[test]
    fn knn_tie_break_by_ascending_id() {
        // Two entries at identical distance from the query.
        let set = set_from(&[("z", &[1.0]), ("a", &[-1.0]), ("m", &[3.0])]);
        let index = FeatureIndex::build(&set);
        let result = index
            .knn(&FeatureVector::new(vec![0.0]).unwrap(), 2)
            .unwrap();
        assert_eq!(result.entries()[0].0, "a");
        assert_eq!(result.entries()[1].0, "z");
    }

    #[test]
    fn build_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let set = random_set(&mut rng, 200, 16);
        let a = FeatureIndex::build(&set);
        let b = FeatureIndex::build(&set);
        for _ in 0..20 {
            let q = FeatureVector::new(
                (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            assert_eq!(a.knn(&q, 7).unwrap(), b.knn(&q, 7).unwrap());
        }
    }

    #[test]
    fn candidate_set_sorts_and_rejects_duplicates() {
        let set = CandidateSet::new(
            ScoreKind::GeometricDistance,
            vec![
                ("b".to_string(), 0.5),
                ("a".to_string(), 0.5),
                ("c".to_string(), 0.1),
            ],
        )
        .unwrap();
        let ids: Vec<&str> = set.ids().collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert!(CandidateSet::new(
            ScoreKind::GeometricDistance,
            vec![("a".to_string(), 0.5), ("a".to_string(), 0.1)],
        )
        .is_err());
    }

    #[test]
    fn persistence_roundtrip_answers_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let set = random_set(&mut rng, 150, 24);
        let index = FeatureIndex::build(&set);
        let path = dir.path().join("features.srnk");
        save_index(&index, &path).unwrap();
        let loaded: FeatureIndex<f64> = load_index(&path).unwrap();
        for _ in 0..50 {
            let q = FeatureVector::new(
                (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            assert_eq!(index.knn(&q, 9).unwrap(), loaded.knn(&q, 9).unwrap());
        }
    }

    #[test]
    fn persistence_is_byte_identical_across_saves() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let set = random_set(&mut rng, 50, 8);
        let index = FeatureIndex::build(&set);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.srnk");
        let p2 = dir.path().join("b.srnk");
        save_index(&index, &p1).unwrap();
        save_index(&FeatureIndex::build(&set), &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn persistence_rejects_truncation_and_version_bump() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let set = random_set(&mut rng, 20, 4);
        let index = FeatureIndex::build(&set);
        let path = dir.path().join("index.srnk");
        save_index(&index, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let truncated = dir.path().join("truncated.srnk");
        fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_index::<f64>(&truncated),
            Err(IndexError::CorruptFile { .. })
        ));

        let mut bumped = bytes.clone();
        bumped[4] = bumped[4].wrapping_add(1);
        let versioned = dir.path().join("versioned.srnk");
        fs::write(&versioned, &bumped).unwrap();
        assert!(matches!(
            load_index::<f64>(&versioned),
            Err(IndexError::VersionMismatch { found: 2, .. })
        ));

        let mut flipped = bytes.clone();
        let payload_mid = bytes.len() / 2;
        flipped[payload_mid] ^= 0xff;
        let corrupted = dir.path().join("corrupted.srnk");
        fs::write(&corrupted, &flipped).unwrap();
        assert!(matches!(
            load_index::<f64>(&corrupted),
            Err(IndexError::CorruptFile { .. })
        ));
    }
}
