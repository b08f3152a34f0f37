//! Point clouds, the database of models, and cloud file I/O.
//!
//! Clouds are plain lists of 3D points. Query scans and database models use
//! the same representation; [`PointCloud::normalize`] puts both on a common
//! footing (centroid at the origin, maximum point norm 1) so that distance
//! scores are comparable across shapes of different physical size.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dashmap::DashMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::SpatialIndex;
use crate::scalar::Scalar;

/// A 3D point in the working precision.
pub type Point3<S> = [S; 3];

/// Squared Euclidean distance between two points.
#[inline]
pub fn squared_distance<S: Scalar>(a: &Point3<S>, b: &Point3<S>) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Euclidean distance between two points.
#[inline]
pub fn distance<S: Scalar>(a: &Point3<S>, b: &Point3<S>) -> S {
    squared_distance(a, b).sqrt()
}

#[inline]
fn norm<S: Scalar>(p: &Point3<S>) -> S {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Errors from cloud construction, I/O and preprocessing.
#[derive(Debug, Error)]
pub enum CloudError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("`{id}`: cloud contains no points")]
    EmptyCloud { id: String },
    #[error("`{id}`: non-finite coordinate at point {index}")]
    NonFiniteCoordinate { id: String, index: usize },
    #[error("`{id}`: all points coincide, scale is undefined")]
    DegenerateCloud { id: String },
}

/// Supported cloud file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    /// One point per line, three whitespace-separated decimals, `#` comments.
    XyzText,
    /// ASCII PLY, vertex elements only.
    PlyAscii,
}

impl CloudFormat {
    /// Picks the format from a file extension (`.xyz` or `.ply`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("xyz") => Some(CloudFormat::XyzText),
            Some(ext) if ext.eq_ignore_ascii_case("ply") => Some(CloudFormat::PlyAscii),
            _ => None,
        }
    }
}

/// An ordered list of 3D points with an opaque identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<S: Scalar> {
    id: String,
    points: Vec<Point3<S>>,
}

impl<S: Scalar> PointCloud<S> {
    /// Builds a cloud, validating that it is non-empty and fully finite.
    pub fn new(id: impl Into<String>, points: Vec<Point3<S>>) -> Result<Self, CloudError> {
        let id = id.into();
        if points.is_empty() {
            return Err(CloudError::EmptyCloud { id });
        }
        for (index, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(CloudError::NonFiniteCoordinate { id, index });
            }
        }
        Ok(PointCloud { id, points })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[Point3<S>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false: the constructor rejects empty clouds.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Returns a copy with a different id.
    pub fn with_id(&self, id: impl Into<String>) -> Self {
        PointCloud {
            id: id.into(),
            points: self.points.clone(),
        }
    }

    /// Arithmetic mean of the points.
    pub fn centroid(&self) -> Point3<S> {
        let mut sum = [S::zero(); 3];
        for p in &self.points {
            sum[0] += p[0];
            sum[1] += p[1];
            sum[2] += p[2];
        }
        let n = S::from_usize(self.points.len()).expect("point count fits scalar");
        [sum[0] / n, sum[1] / n, sum[2] / n]
    }

    /// Largest point norm, measured from the origin.
    pub fn max_radius(&self) -> S {
        self.points
            .iter()
            .map(norm)
            .fold(S::zero(), |acc, r| if r > acc { r } else { acc })
    }

    /// Centers the cloud on its centroid and scales it so the maximum point
    /// norm is exactly 1. Relative geometry is preserved up to the uniform
    /// scale and translation.
    pub fn normalize(&self) -> Result<Self, CloudError> {
        let c = self.centroid();
        let mut points: Vec<Point3<S>> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let max_r = points
            .iter()
            .map(norm)
            .fold(S::zero(), |acc, r| if r > acc { r } else { acc });
        if max_r == S::zero() {
            return Err(CloudError::DegenerateCloud {
                id: self.id.clone(),
            });
        }
        for p in &mut points {
            p[0] = p[0] / max_r;
            p[1] = p[1] / max_r;
            p[2] = p[2] / max_r;
        }
        Ok(PointCloud {
            id: self.id.clone(),
            points,
        })
    }

    /// Takes a uniform random subset of exactly `target` points, preserving
    /// the input order of the surviving points. Clouds at or below the target
    /// size are returned unchanged. Deterministic for a fixed seed.
    pub fn downsample(&self, target: usize, seed: u64) -> Self {
        assert!(target >= 1, "downsample target must be at least 1");
        let n = self.points.len();
        if n <= target {
            return self.clone();
        }
        // Partial Fisher-Yates over the index set, then restore input order.
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..target {
            let j = rng.random_range(i..n);
            indices.swap(i, j);
        }
        let mut chosen = indices[..target].to_vec();
        chosen.sort_unstable();
        PointCloud {
            id: self.id.clone(),
            points: chosen.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Standard preprocessing applied to every cloud entering the pipeline:
    /// resample down to the working resolution, then normalize.
    pub fn prepare(&self, resolution: usize, seed: u64) -> Result<Self, CloudError> {
        self.downsample(resolution, seed).normalize()
    }
}

/// Loads a cloud from a file. The cloud id is the file stem.
pub fn load_point_cloud<S: Scalar>(
    path: &Path,
    format: CloudFormat,
) -> Result<PointCloud<S>, CloudError> {
    let text = fs::read_to_string(path).map_err(|source| CloudError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cloud")
        .to_string();
    let points: Vec<Point3<S>> = match format {
        CloudFormat::XyzText => parse_xyz(path, &text)?,
        CloudFormat::PlyAscii => parse_ply_ascii(path, &text)?,
    };
    if points.is_empty() {
        return Err(CloudError::EmptyCloud { id });
    }
    for (index, p) in points.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(CloudError::NonFiniteCoordinate { id, index });
        }
    }
    Ok(PointCloud { id, points })
}

/// Writes a cloud in the xyz-text format.
///
/// Coordinates use the shortest representation that parses back to the same
/// value, so a save/load cycle is bit-identical.
pub fn write_xyz<S: Scalar, W: Write>(cloud: &PointCloud<S>, mut out: W) -> io::Result<()> {
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p[0], p[1], p[2])?;
    }
    Ok(())
}

/// Saves a cloud to an xyz-text file. See [`write_xyz`].
pub fn save_xyz<S: Scalar>(cloud: &PointCloud<S>, path: &Path) -> Result<(), CloudError> {
    let mut buf = Vec::new();
    write_xyz(cloud, &mut buf).expect("write to Vec cannot fail");
    fs::write(path, buf).map_err(|source| CloudError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_scalar<S: Scalar>(path: &Path, line: usize, token: &str) -> Result<S, CloudError> {
    token.parse::<S>().map_err(|_| CloudError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid number `{token}`"),
    })
}

fn parse_xyz<S: Scalar>(path: &Path, text: &str) -> Result<Vec<Point3<S>>, CloudError> {
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let mut point = [S::zero(); 3];
        for coord in &mut point {
            let token = tokens.next().ok_or_else(|| CloudError::Parse {
                path: path.to_path_buf(),
                line,
                message: "expected 3 coordinates".into(),
            })?;
            *coord = parse_scalar(path, line, token)?;
        }
        if tokens.next().is_some() {
            return Err(CloudError::Parse {
                path: path.to_path_buf(),
                line,
                message: "trailing tokens after 3 coordinates".into(),
            });
        }
        points.push(point);
    }
    Ok(points)
}

fn parse_ply_ascii<S: Scalar>(path: &Path, text: &str) -> Result<Vec<Point3<S>>, CloudError> {
    let err = |line: usize, message: String| CloudError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(err(1, "missing `ply` magic line".into())),
    }

    // Header: elements in declaration order, plus the x/y/z column positions
    // within the vertex element's properties.
    let mut elements: Vec<(String, usize)> = Vec::new();
    let mut vertex_props: Vec<String> = Vec::new();
    let mut format_ok = false;
    let mut header_done = false;
    let mut last_line = 1;
    for (line, raw) in &mut lines {
        last_line = line;
        let tokens: Vec<&str> = raw.trim().split_whitespace().collect();
        match tokens.as_slice() {
            [] | ["comment", ..] => {}
            ["format", "ascii", _version] => format_ok = true,
            ["format", other, ..] => {
                return Err(err(line, format!("unsupported PLY format `{other}`")));
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| err(line, format!("invalid element count `{count}`")))?;
                elements.push((name.to_string(), count));
            }
            ["property", "list", ..] => {
                if matches!(elements.last(), Some((name, _)) if name == "vertex") {
                    return Err(err(line, "list property on vertex element".into()));
                }
            }
            ["property", _ty, name] => {
                if matches!(elements.last(), Some((el, _)) if el == "vertex") {
                    vertex_props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(err(line, format!("unrecognized header line `{}`", raw.trim()))),
        }
    }
    if !header_done {
        return Err(err(last_line, "missing `end_header`".into()));
    }
    if !format_ok {
        return Err(err(last_line, "missing `format ascii` declaration".into()));
    }

    let axis_col = |axis: &str| vertex_props.iter().position(|p| p == axis);
    let (Some(xi), Some(yi), Some(zi)) = (axis_col("x"), axis_col("y"), axis_col("z")) else {
        return Err(err(last_line, "vertex element lacks x/y/z properties".into()));
    };

    let mut points = Vec::new();
    for (name, count) in &elements {
        if name != "vertex" {
            // Non-vertex elements are skipped line by line.
            for _ in 0..*count {
                if lines.next().is_none() {
                    return Err(err(last_line, format!("truncated `{name}` element data")));
                }
            }
            continue;
        }
        points.reserve(*count);
        for _ in 0..*count {
            let Some((line, raw)) = lines.next() else {
                return Err(err(last_line, "truncated vertex element data".into()));
            };
            last_line = line;
            let tokens: Vec<&str> = raw.trim().split_whitespace().collect();
            if tokens.len() != vertex_props.len() {
                return Err(err(
                    line,
                    format!(
                        "expected {} vertex properties, found {}",
                        vertex_props.len(),
                        tokens.len()
                    ),
                ));
            }
            points.push([
                parse_scalar(path, line, tokens[xi])?,
                parse_scalar(path, line, tokens[yi])?,
                parse_scalar(path, line, tokens[zi])?,
            ]);
        }
    }
    Ok(points)
}

/// Errors from database construction and lookup.
#[derive(Debug, Error)]
pub enum DatabaseError {
    #[error("database contains no models")]
    Empty,
    #[error("duplicate model id `{0}`")]
    DuplicateId(String),
    #[error("unknown model id `{0}`")]
    UnknownModelId(String),
}

/// The model database: clouds plus category labels, immutable after
/// construction. Spatial indices over individual models are built lazily on
/// first use and cached, since they are query-independent.
pub struct Database<S: Scalar> {
    models: BTreeMap<String, PointCloud<S>>,
    categories: BTreeMap<String, String>,
    spatial_cache: DashMap<String, Arc<SpatialIndex<S>>>,
}

impl<S: Scalar> Database<S> {
    pub fn new(
        entries: impl IntoIterator<Item = (PointCloud<S>, String)>,
    ) -> Result<Self, DatabaseError> {
        let mut models = BTreeMap::new();
        let mut categories = BTreeMap::new();
        for (cloud, category) in entries {
            let id = cloud.id().to_string();
            if models.insert(id.clone(), cloud).is_some() {
                return Err(DatabaseError::DuplicateId(id));
            }
            categories.insert(id, category);
        }
        if models.is_empty() {
            return Err(DatabaseError::Empty);
        }
        Ok(Database {
            models,
            categories,
            spatial_cache: DashMap::new(),
        })
    }

    /// Number of models, `S` in the retrieval formulas.
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Model ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(|s| s.as_str())
    }

    /// Models in ascending id order.
    pub fn models(&self) -> impl Iterator<Item = &PointCloud<S>> {
        self.models.values()
    }

    pub fn get(&self, id: &str) -> Option<&PointCloud<S>> {
        self.models.get(id)
    }

    pub fn model(&self, id: &str) -> Result<&PointCloud<S>, DatabaseError> {
        self.models
            .get(id)
            .ok_or_else(|| DatabaseError::UnknownModelId(id.to_string()))
    }

    pub fn category(&self, id: &str) -> Option<&str> {
        self.categories.get(id).map(|s| s.as_str())
    }

    /// The spatial index over one model's cloud, built on first request.
    /// Construction is deterministic, so concurrent builds are idempotent.
    pub fn spatial_index(&self, id: &str) -> Result<Arc<SpatialIndex<S>>, DatabaseError> {
        if let Some(index) = self.spatial_cache.get(id) {
            return Ok(Arc::clone(&index));
        }
        let cloud = self.model(id)?;
        let entry = self
            .spatial_cache
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(SpatialIndex::build(cloud)));
        Ok(Arc::clone(&entry))
    }

    /// Number of spatial indices currently cached.
    pub fn cached_spatial_indices(&self) -> usize {
        self.spatial_cache.len()
    }
}
