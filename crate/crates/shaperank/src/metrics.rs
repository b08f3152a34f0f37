//! Point-set distances between clouds: CD, SCD and MSCD.
//!
//! All three reduce a per-point nearest-neighbor distance vector:
//!
//! * `chamfer` — symmetric sum of mean squared nearest-neighbor distances,
//!   both directions.
//! * `scd` — the one-way half of `chamfer`: mean squared entry of the
//!   distance vector from source to target.
//! * `mscd` — mean unsquared entry of the same vector. Squaring amplifies
//!   outlier points; dropping it makes the score far less sensitive to stray
//!   scan points, which is what makes it the re-ranking metric of choice.
//!
//! Every distance has two interchangeable backends: the kd-tree accelerated
//! path and the [`brute`] double-loop oracle. Both are exact; `brute` exists
//! as an independent reference the accelerated path is validated against.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kdtree::FlatKdTree;
use crate::pointcloud::{squared_distance, Point3, PointCloud};
use crate::scalar::Scalar;

/// Below this size the per-point nearest-neighbor map stays sequential;
/// splitting tiny workloads costs more than it saves.
const PAR_MIN_POINTS: usize = 512;

/// The point-set distance used for geometric re-ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cd,
    Scd,
    Mscd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cd, Metric::Scd, Metric::Mscd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cd => "cd",
            Metric::Scd => "scd",
            Metric::Mscd => "mscd",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cd" => Ok(Metric::Cd),
            "scd" => Ok(Metric::Scd),
            "mscd" => Ok(Metric::Mscd),
            other => Err(format!("unknown metric `{other}` (expected cd, scd or mscd)")),
        }
    }
}

/// Exact nearest-neighbor acceleration structure over one target cloud.
/// Immutable after build; queries return the true minimum distance.
pub struct SpatialIndex<S: Scalar> {
    tree: FlatKdTree<S>,
}

impl<S: Scalar> SpatialIndex<S> {
    /// Builds the index over a target cloud.
    pub fn build(target: &PointCloud<S>) -> Self {
        let mut flat = Vec::with_capacity(target.len() * 3);
        for p in target.points() {
            flat.extend_from_slice(p);
        }
        SpatialIndex {
            tree: FlatKdTree::build(3, &flat),
        }
    }

    /// Number of indexed points.
    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.len() == 0
    }

    /// Exact Euclidean distance from `p` to the nearest indexed point.
    pub fn nearest_distance(&self, p: &Point3<S>) -> S {
        self.tree.nearest_sq(p).sqrt()
    }
}

/// Convenience alias for [`SpatialIndex::build`].
pub fn build_spatial_index<S: Scalar>(target: &PointCloud<S>) -> SpatialIndex<S> {
    SpatialIndex::build(target)
}

/// Per-source-point nearest-neighbor distances to a target set; entry `i`
/// is the exact Euclidean distance from source point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceVector<S>(Vec<S>);

impl<S: Scalar> DistanceVector<S> {
    pub fn entries(&self) -> &[S] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mean entry: the MSCD reduction. Accumulates in source-point order so
    /// the result does not depend on thread count.
    pub fn mean(&self) -> S {
        let mut sum = S::zero();
        for &d in &self.0 {
            sum += d;
        }
        sum / S::from_usize(self.0.len()).expect("length fits scalar")
    }

    /// Mean squared entry: the SCD reduction, `(1/n) * ||d||^2`.
    pub fn mean_square(&self) -> S {
        let mut sum = S::zero();
        for &d in &self.0 {
            sum += d * d;
        }
        sum / S::from_usize(self.0.len()).expect("length fits scalar")
    }
}

/// The exact distance vector from each source point to the indexed target.
///
/// Entries are computed independently per point (parallel for large sources),
/// so the output is bitwise identical regardless of thread count.
pub fn nn_distances<S: Scalar>(
    source: &PointCloud<S>,
    index: &SpatialIndex<S>,
) -> DistanceVector<S> {
    let points = source.points();
    let entries = if points.len() >= PAR_MIN_POINTS {
        points
            .par_iter()
            .map(|p| index.nearest_distance(p))
            .collect()
    } else {
        points.iter().map(|p| index.nearest_distance(p)).collect()
    };
    DistanceVector(entries)
}

/// One-way mean squared nearest-neighbor distance against a prebuilt index.
pub fn scd_indexed<S: Scalar>(source: &PointCloud<S>, index: &SpatialIndex<S>) -> S {
    nn_distances(source, index).mean_square()
}

/// One-way mean nearest-neighbor distance against a prebuilt index.
pub fn mscd_indexed<S: Scalar>(source: &PointCloud<S>, index: &SpatialIndex<S>) -> S {
    nn_distances(source, index).mean()
}

/// Symmetric Chamfer distance using prebuilt indices over both clouds.
pub fn chamfer_indexed<S: Scalar>(
    p: &PointCloud<S>,
    q: &PointCloud<S>,
    p_index: &SpatialIndex<S>,
    q_index: &SpatialIndex<S>,
) -> S {
    scd_indexed(p, q_index) + scd_indexed(q, p_index)
}

/// Symmetric Chamfer distance:
/// `(1/|P|) Σ min ||p-q||² + (1/|Q|) Σ min ||q-p||²`.
pub fn chamfer<S: Scalar>(p: &PointCloud<S>, q: &PointCloud<S>) -> S {
    let p_index = SpatialIndex::build(p);
    let q_index = SpatialIndex::build(q);
    chamfer_indexed(p, q, &p_index, &q_index)
}

/// Single-direction Chamfer distance, source → target:
/// `(1/|P|) Σ min ||p-q||²`. Not symmetric.
pub fn scd<S: Scalar>(p: &PointCloud<S>, q: &PointCloud<S>) -> S {
    scd_indexed(p, &SpatialIndex::build(q))
}

/// Modified single-direction Chamfer distance, source → target:
/// `(1/|P|) Σ min ||p-q||`. Not symmetric; robust to outlier source points.
pub fn mscd<S: Scalar>(p: &PointCloud<S>, q: &PointCloud<S>) -> S {
    mscd_indexed(p, &SpatialIndex::build(q))
}

/// Dispatches one of the three distances by name.
pub fn metric_distance<S: Scalar>(metric: Metric, p: &PointCloud<S>, q: &PointCloud<S>) -> S {
    match metric {
        Metric::Cd => chamfer(p, q),
        Metric::Scd => scd(p, q),
        Metric::Mscd => mscd(p, q),
    }
}

/// Brute-force O(|P|·|Q|) reference backend.
///
/// Part of the public surface, not test scaffolding: the accelerated path is
/// accepted only because it matches these double-loop results.
pub mod brute {
    use super::*;

    /// Distance vector by exhaustive scan over the target cloud.
    pub fn nn_distances<S: Scalar>(
        source: &PointCloud<S>,
        target: &PointCloud<S>,
    ) -> DistanceVector<S> {
        let entries = source
            .points()
            .iter()
            .map(|p| {
                let mut best = S::infinity();
                for q in target.points() {
                    let d2 = squared_distance(p, q);
                    if d2 < best {
                        best = d2;
                    }
                }
                best.sqrt()
            })
            .collect();
        DistanceVector(entries)
    }

    pub fn scd<S: Scalar>(p: &PointCloud<S>, q: &PointCloud<S>) -> S {
        nn_distances(p, q).mean_square()
    }

    pub fn mscd<S: Scalar>(p: &PointCloud<S>, q: &PointCloud<S>) -> S {
        nn_distances(p, q).mean()
    }

    pub fn chamfer<S: Scalar>(p: &PointCloud<S>, q: &PointCloud<S>) -> S {
        scd(p, q) + scd(q, p)
    }
}
