//! Procedural benchmark datasets: parametric shape classes with per-instance
//! dimension jitter, plus partial, noisy, outlier-laden queries with known
//! ground truth.
//!
//! The generator exists so the retrieval pipeline can be exercised end to
//! end at desk scale with a known answer key: each query is manufactured
//! from one database model by cropping away a half-space of its surface,
//! perturbing the survivors, and optionally sprinkling in stray points.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::eval::{EvalError, GroundTruth};
use crate::pointcloud::{Database, PointCloud};
use crate::scalar::{cast, Scalar};

/// Hard cap on the outlier fraction a query may carry.
pub const MAX_OUTLIER_FRACTION: f64 = 0.2;

/// Generator parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Number of database models (>= 2).
    pub models: usize,
    /// Number of shape classes (>= 1).
    pub classes: usize,
    /// Number of queries (>= 1).
    pub queries: usize,
    /// Surface samples per cloud.
    pub points: usize,
    /// Fraction of each query's points removed by a half-space crop, in
    /// [0, 0.9].
    pub crop_fraction: f64,
    /// Standard deviation of per-coordinate Gaussian noise on query points.
    pub noise_sigma: f64,
    /// Fraction of uniform outlier points added to each query, in
    /// [0, `MAX_OUTLIER_FRACTION`].
    pub outlier_fraction: f64,
    /// Relative per-axis dimension jitter between instances of a class, in
    /// [0, 0.5]. Larger values spread the instances of a class further
    /// apart in shape space.
    pub dim_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            models: 200,
            classes: 4,
            queries: 50,
            points: 2048,
            crop_fraction: 0.3,
            noise_sigma: 0.01,
            outlier_fraction: 0.0,
            dim_jitter: 0.12,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let fail = |msg: String| Err(EvalError::InvalidSpec(msg));
        if self.models < 2 {
            return fail(format!("need at least 2 models, got {}", self.models));
        }
        if self.classes < 1 {
            return fail("need at least 1 class".into());
        }
        if self.classes > self.models {
            return fail(format!(
                "more classes ({}) than models ({})",
                self.classes, self.models
            ));
        }
        if self.queries < 1 {
            return fail("need at least 1 query".into());
        }
        if self.points < 16 {
            return fail(format!("need at least 16 points per cloud, got {}", self.points));
        }
        if !(0.0..=0.9).contains(&self.crop_fraction) {
            return fail(format!(
                "crop fraction {} outside [0, 0.9]",
                self.crop_fraction
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return fail(format!("invalid noise sigma {}", self.noise_sigma));
        }
        if !(0.0..=MAX_OUTLIER_FRACTION).contains(&self.outlier_fraction) {
            return fail(format!(
                "outlier fraction {} outside [0, {MAX_OUTLIER_FRACTION}]",
                self.outlier_fraction
            ));
        }
        if !(0.0..=0.5).contains(&self.dim_jitter) {
            return fail(format!("dimension jitter {} outside [0, 0.5]", self.dim_jitter));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Family {
    Box,
    Cylinder,
    Ellipsoid,
    LShape,
}

const FAMILIES: [Family; 4] = [
    Family::Box,
    Family::Cylinder,
    Family::Ellipsoid,
    Family::LShape,
];

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Cylinder => "cylinder",
            Family::Ellipsoid => "ellipsoid",
            Family::LShape => "lshape",
        }
    }

    fn base_params(self) -> Vec<f64> {
        match self {
            // Half extents.
            Family::Box => vec![0.8, 0.55, 0.35],
            // Radius, half height.
            Family::Cylinder => vec![0.45, 0.8],
            // Semi axes.
            Family::Ellipsoid => vec![0.75, 0.5, 0.35],
            // Arm lengths a (along y) and b (along x), thickness, depth.
            Family::LShape => vec![1.0, 0.7, 0.3, 0.45],
        }
    }
}

struct ShapeClass {
    family: Family,
    params: Vec<f64>,
    category: String,
}

fn shape_classes(count: usize) -> Vec<ShapeClass> {
    (0..count)
        .map(|c| {
            let family = FAMILIES[c % FAMILIES.len()];
            let variant = c / FAMILIES.len();
            let mut params = family.base_params();
            // Repeat classes beyond the four families get a distinct aspect.
            params[0] *= 1.0 + 0.35 * variant as f64;
            let category = if variant == 0 {
                family.name().to_string()
            } else {
                format!("{}{}", family.name(), variant + 1)
            };
            ShapeClass {
                family,
                params,
                category,
            }
        })
        .collect()
}

fn unit_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-12 {
            return [v[0] / len, v[1] / len, v[2] / len];
        }
    }
}

/// Uniform sample on the surface of an axis-aligned box.
fn sample_aabb_surface(min: [f64; 3], max: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let ext = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
    // Face-pair areas for axes x, y, z.
    let weights = [ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]];
    let total = weights[0] + weights[1] + weights[2];
    let mut t = rng.random_range(0.0..total);
    let mut axis = 0;
    for (i, w) in weights.iter().enumerate() {
        if t < *w {
            axis = i;
            break;
        }
        t -= w;
        axis = i + 1;
    }
    let axis = axis.min(2);
    let mut p = [
        rng.random_range(min[0]..max[0]),
        rng.random_range(min[1]..max[1]),
        rng.random_range(min[2]..max[2]),
    ];
    p[axis] = if rng.random::<bool>() { max[axis] } else { min[axis] };
    p
}

fn sample_cylinder(radius: f64, half_height: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let lateral = TAU * radius * 2.0 * half_height;
    let caps = TAU * radius * radius; // both caps together
    let theta = rng.random_range(0.0..TAU);
    if rng.random_range(0.0..lateral + caps) < lateral {
        [
            radius * theta.cos(),
            radius * theta.sin(),
            rng.random_range(-half_height..half_height),
        ]
    } else {
        let r = radius * rng.random::<f64>().sqrt();
        let z = if rng.random::<bool>() {
            half_height
        } else {
            -half_height
        };
        [r * theta.cos(), r * theta.sin(), z]
    }
}

fn sample_ellipsoid(axes: &[f64], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (a, b, c) = (axes[0], axes[1], axes[2]);
    // Rejection against the local area distortion keeps the surface density
    // close to uniform.
    let bound = (a * b).max(b * c).max(a * c);
    loop {
        let u = unit_direction(rng);
        let w = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        if rng.random_range(0.0..bound) < w {
            return [a * u[0], b * u[1], c * u[2]];
        }
    }
}

fn sample_lshape(params: &[f64], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (arm_a, arm_b, depth) = (params[0], params[1], params[3]);
    // Keep the thickness clearly below both arm lengths so the arms stay
    // distinct under jitter.
    let t = params[2].min(0.75 * arm_a).min(0.75 * arm_b);
    let upright = ([0.0, 0.0, 0.0], [t, arm_a, depth]);
    let foot = ([t, 0.0, 0.0], [arm_b, t, depth]);
    let area = |(min, max): ([f64; 3], [f64; 3])| {
        let e = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
        2.0 * (e[0] * e[1] + e[0] * e[2] + e[1] * e[2])
    };
    let w_upright = area(upright);
    let pick = rng.random_range(0.0..w_upright + area(foot));
    let (min, max) = if pick < w_upright { upright } else { foot };
    sample_aabb_surface(min, max, rng)
}

fn sample_shape(class: &ShapeClass, params: &[f64], rng: &mut ChaCha8Rng) -> [f64; 3] {
    match class.family {
        Family::Box => sample_aabb_surface(
            [-params[0], -params[1], -params[2]],
            [params[0], params[1], params[2]],
            rng,
        ),
        Family::Cylinder => sample_cylinder(params[0], params[1], rng),
        Family::Ellipsoid => sample_ellipsoid(params, rng),
        Family::LShape => sample_lshape(params, rng),
    }
}

/// Number of structural detail studs per instance.
const DETAILS_PER_INSTANCE: usize = 8;
/// Fraction of a cloud's points allocated to each detail stud.
const DETAIL_POINT_FRACTION: f64 = 0.04;
/// Detail stud half-extent range, in raw model units.
const DETAIL_HALF_MIN: f64 = 0.04;
const DETAIL_HALF_MAX: f64 = 0.09;

/// Per-instance low-frequency surface warp. Unlike the localized studs,
/// the warp displaces every surface point a little, so instance identity
/// is spread across the whole cloud instead of concentrated in a few
/// far-off patches.
struct Warp {
    wave: [[f64; 3]; 3],
    phase: [f64; 3],
    amp: [[f64; 3]; 3],
}

impl Warp {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut wave = [[0.0; 3]; 3];
        let mut phase = [0.0; 3];
        let mut amp = [[0.0; 3]; 3];
        for j in 0..3 {
            let dir = unit_direction(rng);
            let freq = rng.random_range(2.0..5.0);
            wave[j] = [dir[0] * freq, dir[1] * freq, dir[2] * freq];
            phase[j] = rng.random_range(0.0..TAU);
            let adir = unit_direction(rng);
            let mag = rng.random_range(0.03..0.08);
            amp[j] = [adir[0] * mag, adir[1] * mag, adir[2] * mag];
        }
        Warp { wave, phase, amp }
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = p;
        for j in 0..3 {
            let arg = self.wave[j][0] * p[0]
                + self.wave[j][1] * p[1]
                + self.wave[j][2] * p[2]
                + self.phase[j];
            let s = arg.sin();
            out[0] += self.amp[j][0] * s;
            out[1] += self.amp[j][1] * s;
            out[2] += self.amp[j][2] * s;
        }
        out
    }
}

/// A small box attached to the main surface. Details are what tell
/// instances of one class apart: aspect jitter morphs a shape smoothly, but
/// studs sit at per-instance anchors that no amount of uniform rescaling of
/// another instance can reproduce.
struct Detail {
    min: [f64; 3],
    max: [f64; 3],
}

fn make_details(class: &ShapeClass, params: &[f64], rng: &mut ChaCha8Rng) -> Vec<Detail> {
    (0..DETAILS_PER_INSTANCE)
        .map(|_| {
            let anchor = sample_shape(class, params, rng);
            let half = [
                rng.random_range(DETAIL_HALF_MIN..DETAIL_HALF_MAX),
                rng.random_range(DETAIL_HALF_MIN..DETAIL_HALF_MAX),
                rng.random_range(DETAIL_HALF_MIN..DETAIL_HALF_MAX),
            ];
            // Push the stud outward along the anchor direction so it
            // protrudes from the surface instead of hiding inside it.
            let len = (anchor[0] * anchor[0] + anchor[1] * anchor[1] + anchor[2] * anchor[2])
                .sqrt();
            let dir = if len > 1e-9 {
                [anchor[0] / len, anchor[1] / len, anchor[2] / len]
            } else {
                [0.0, 0.0, 1.0]
            };
            let bulge = (half[0] + half[1] + half[2]) / 3.0;
            let center = [
                anchor[0] + bulge * dir[0],
                anchor[1] + bulge * dir[1],
                anchor[2] + bulge * dir[2],
            ];
            Detail {
                min: [
                    center[0] - half[0],
                    center[1] - half[1],
                    center[2] - half[2],
                ],
                max: [
                    center[0] + half[0],
                    center[1] + half[1],
                    center[2] + half[2],
                ],
            }
        })
        .collect()
}

/// Samples one instance's full cloud: the jittered main surface plus its
/// detail studs.
fn sample_instance(
    class: &ShapeClass,
    params: &[f64],
    details: &[Detail],
    points: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 3]> {
    let per_detail = ((points as f64 * DETAIL_POINT_FRACTION).round() as usize).max(1);
    let main = points.saturating_sub(per_detail * details.len()).max(1);
    let mut cloud = Vec::with_capacity(points);
    for _ in 0..main {
        cloud.push(sample_shape(class, params, rng));
    }
    for detail in details {
        for _ in 0..per_detail {
            cloud.push(sample_aabb_surface(detail.min, detail.max, rng));
        }
    }
    cloud.truncate(points);
    cloud
}

fn to_scalar_points<S: Scalar>(points: &[[f64; 3]]) -> Vec<[S; 3]> {
    points.iter().map(|p| p.map(|c| cast::<S>(c))).collect()
}

/// Generates a database of jittered parametric models, a set of partial
/// noisy queries derived from them, and the query-to-model ground truth.
/// Bitwise deterministic for a fixed spec and seed.
pub fn generate_synthetic<S: Scalar>(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(Database<S>, Vec<PointCloud<S>>, GroundTruth), EvalError> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let model_base: u64 = master.random();
    let query_base: u64 = master.random();

    let classes = shape_classes(spec.classes);
    let mut class_counts = vec![0usize; spec.classes];
    let mut models: Vec<(String, Vec<[f64; 3]>, String)> = Vec::with_capacity(spec.models);
    for m in 0..spec.models {
        let class = &classes[m % spec.classes];
        let mut rng = ChaCha8Rng::seed_from_u64(model_base.wrapping_add(m as u64));
        let params: Vec<f64> = class
            .params
            .iter()
            .map(|p| p * (1.0 + spec.dim_jitter * rng.random_range(-1.0..1.0)))
            .collect();
        let details = make_details(class, &params, &mut rng);
        let warp = Warp::random(&mut rng);
        let mut points = sample_instance(class, &params, &details, spec.points, &mut rng);
        for p in &mut points {
            *p = warp.apply(*p);
        }
        let index = class_counts[m % spec.classes];
        class_counts[m % spec.classes] += 1;
        let id = format!("{}_{index:04}", class.category);
        models.push((id, points, class.category.clone()));
    }

    let mut queries = Vec::with_capacity(spec.queries);
    let mut gt = GroundTruth::new();
    for qi in 0..spec.queries {
        let mut rng = ChaCha8Rng::seed_from_u64(query_base.wrapping_add(qi as u64));
        let (source_id, source_points, category) = &models[rng.random_range(0..models.len())];

        // Half-space crop: drop the `crop_fraction` tail along a random
        // direction, keeping the surviving points in input order.
        let mut points: Vec<[f64; 3]> = if spec.crop_fraction > 0.0 {
            let dir = unit_direction(&mut rng);
            let keep = (source_points.len()
                - (spec.crop_fraction * source_points.len() as f64).floor() as usize)
                .max(1);
            let mut order: Vec<usize> = (0..source_points.len()).collect();
            order.sort_unstable_by(|&i, &j| {
                let pi = source_points[i];
                let pj = source_points[j];
                let proj_i = pi[0] * dir[0] + pi[1] * dir[1] + pi[2] * dir[2];
                let proj_j = pj[0] * dir[0] + pj[1] * dir[1] + pj[2] * dir[2];
                proj_i.total_cmp(&proj_j).then(i.cmp(&j))
            });
            let mut kept = order[..keep].to_vec();
            kept.sort_unstable();
            kept.iter().map(|&i| source_points[i]).collect()
        } else {
            source_points.clone()
        };

        if spec.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
            for p in &mut points {
                for c in p.iter_mut() {
                    *c += normal.sample(&mut rng);
                }
            }
        }

        let outliers = (spec.outlier_fraction * points.len() as f64).round() as usize;
        if outliers > 0 {
            // Floating artifacts hover in the outer shell of the scan's
            // bounding ball: far from the object surface, but never beyond
            // the scan's own radius, so they do not distort the scale
            // normalization downstream.
            let n = points.len() as f64;
            let mut centroid = [0.0f64; 3];
            for p in &points {
                centroid[0] += p[0];
                centroid[1] += p[1];
                centroid[2] += p[2];
            }
            centroid = centroid.map(|c| c / n);
            let radius = points
                .iter()
                .map(|p| {
                    let d = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .fold(0.0f64, f64::max);
            for _ in 0..outliers {
                let dir = unit_direction(&mut rng);
                let r = radius * rng.random::<f64>().cbrt();
                points.push([
                    centroid[0] + r * dir[0],
                    centroid[1] + r * dir[1],
                    centroid[2] + r * dir[2],
                ]);
            }
        }

        let query_id = format!("q{qi:04}");
        queries.push(
            PointCloud::new(&query_id, to_scalar_points::<S>(&points))
                .expect("generated query is non-empty and finite"),
        );
        gt.insert(&query_id, source_id, category)?;
    }

    let database = Database::new(models.iter().map(|(id, points, category)| {
        (
            PointCloud::new(id, to_scalar_points::<S>(points))
                .expect("generated model is non-empty and finite"),
            category.clone(),
        )
    }))
    .expect("generated database is non-empty and unique");
    gt.validate_against(&database)?;
    Ok((database, queries, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    #[test]
    fn validation_rejects_bad_specs() {
        let base = SyntheticSpec::default();
        for spec in [
            SyntheticSpec { models: 1, ..base },
            SyntheticSpec { classes: 0, ..base },
            SyntheticSpec { queries: 0, ..base },
            SyntheticSpec {
                outlier_fraction: 0.5,
                ..base
            },
            SyntheticSpec {
                crop_fraction: 0.95,
                ..base
            },
            SyntheticSpec {
                dim_jitter: 0.9,
                ..base
            },
        ] {
            assert!(matches!(spec.validate(), Err(EvalError::InvalidSpec(_))));
        }
    }

    #[test]
    fn emits_exact_requested_counts() {
        let spec = SyntheticSpec {
            models: 200,
            classes: 4,
            queries: 50,
            points: 128,
            ..SyntheticSpec::default()
        };
        let (db, queries, gt) = generate_synthetic::<f64>(&spec, 3).unwrap();
        assert_eq!(db.len(), 200);
        assert_eq!(queries.len(), 50);
        assert_eq!(gt.len(), 50);
        let mut categories: Vec<&str> = db.ids().map(|id| db.category(id).unwrap()).collect();
        categories.sort_unstable();
        categories.dedup();
        assert_eq!(categories, ["box", "cylinder", "ellipsoid", "lshape"]);
        for cloud in db.models() {
            assert_eq!(cloud.len(), 128);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SyntheticSpec {
            models: 12,
            classes: 3,
            queries: 6,
            points: 64,
            outlier_fraction: 0.1,
            ..SyntheticSpec::default()
        };
        let (db_a, queries_a, _) = generate_synthetic::<f64>(&spec, 9).unwrap();
        let (db_b, queries_b, _) = generate_synthetic::<f64>(&spec, 9).unwrap();
        for (a, b) in db_a.models().zip(db_b.models()) {
            assert_eq!(a.id(), b.id());
            for (pa, pb) in a.points().iter().zip(b.points()) {
                assert_eq!(pa.map(f64::to_bits), pb.map(f64::to_bits));
            }
        }
        for (a, b) in queries_a.iter().zip(&queries_b) {
            for (pa, pb) in a.points().iter().zip(b.points()) {
                assert_eq!(pa.map(f64::to_bits), pb.map(f64::to_bits));
            }
        }
        // A different seed produces different clouds.
        let (db_c, _, _) = generate_synthetic::<f64>(&spec, 10).unwrap();
        let first_a = db_a.models().next().unwrap();
        let first_c = db_c.models().next().unwrap();
        assert_ne!(first_a.points()[0], first_c.points()[0]);
    }

    #[test]
    fn pristine_queries_match_their_source_exactly() {
        let spec = SyntheticSpec {
            models: 10,
            classes: 2,
            queries: 5,
            points: 96,
            crop_fraction: 0.0,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            ..SyntheticSpec::default()
        };
        let (db, queries, gt) = generate_synthetic::<f64>(&spec, 1).unwrap();
        for query in &queries {
            let entry = gt.get(query.id()).unwrap();
            let source = db.get(&entry.model_id).unwrap();
            assert_eq!(metrics::mscd(query, source), 0.0);
            // The source is the strict MSCD argmin among all models.
            for other in db.ids().filter(|id| *id != entry.model_id) {
                assert!(metrics::mscd(query, db.get(other).unwrap()) > 0.0);
            }
        }
    }

    #[test]
    fn crop_noise_outliers_change_query_size() {
        let spec = SyntheticSpec {
            models: 4,
            classes: 2,
            queries: 8,
            points: 100,
            crop_fraction: 0.3,
            noise_sigma: 0.01,
            outlier_fraction: 0.1,
            ..SyntheticSpec::default()
        };
        let (_, queries, _) = generate_synthetic::<f64>(&spec, 5).unwrap();
        for q in &queries {
            // 70 survivors plus 7 outliers.
            assert_eq!(q.len(), 77);
        }
    }
}
