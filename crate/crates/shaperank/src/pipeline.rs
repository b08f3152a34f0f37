//! The two-step retrieval pipeline: feature-based ranking over the whole
//! database, then geometry-based re-ranking of the candidate neighborhood.
//!
//! Feature search narrows thousands of models down to `k` candidates that
//! are mostly of the right semantic class; the point-set distance then sorts
//! that neighborhood by actual geometric agreement with the query scan,
//! which is where instance-level differences live.

use rayon::prelude::*;
use thiserror::Error;

use crate::descriptor::FeatureVector;
use crate::index::{CandidateSet, FeatureIndex, IndexError, ScoreKind};
use crate::metrics::{mscd_indexed, scd_indexed, Metric, SpatialIndex};
use crate::pointcloud::{Database, DatabaseError, PointCloud};
use crate::scalar::{cmp_scores, Scalar};

/// Errors from pipeline execution.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Database(#[from] DatabaseError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Retrieval parameters. Defaults: 90 candidates, MSCD re-ranking on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalConfig {
    /// Number of feature-space nearest neighbors to re-rank.
    pub k: usize,
    /// Point-set distance used for re-ranking.
    pub metric: Metric,
    /// Whether to run the geometric re-ranking stage at all.
    pub rerank: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 90,
            metric: Metric::Mscd,
            rerank: true,
        }
    }
}

/// The outcome of one retrieval: the feature-ranked candidates and their
/// geometric re-ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<S: Scalar> {
    pub query_id: String,
    /// Feature-distance ordering straight out of the kNN search.
    pub initial: CandidateSet<S>,
    /// Final ordering after geometric re-ranking; equals `initial` when
    /// re-ranking is disabled. Always the same id multiset as `initial`.
    pub reranked: CandidateSet<S>,
}

impl<S: Scalar> RetrievalResult<S> {
    /// Picks the final or the initial ordering.
    pub fn selected(&self, use_final: bool) -> &CandidateSet<S> {
        if use_final {
            &self.reranked
        } else {
            &self.initial
        }
    }
}

/// Feature-based ranking: the exact kNN of the query feature.
pub fn rank<S: Scalar>(
    query_feature: &FeatureVector<S>,
    index: &FeatureIndex<S>,
    k: usize,
) -> Result<CandidateSet<S>, PipelineError> {
    Ok(index.knn(query_feature, k)?)
}

/// Geometry-based re-ranking: re-orders `candidates` by ascending point-set
/// distance from the query scan to each candidate model (scan → CAD
/// direction), ties broken by ascending id. Scores are replaced by the
/// geometric distances.
///
/// Candidate spatial indices come from the database cache, so repeated
/// queries against the same models skip the rebuild. Scores are computed
/// independently per candidate and sorting is sequential, making the result
/// independent of thread count.
pub fn rerank<S: Scalar>(
    query_cloud: &PointCloud<S>,
    candidates: &CandidateSet<S>,
    database: &Database<S>,
    metric: Metric,
) -> Result<CandidateSet<S>, PipelineError> {
    // Validate ids up front so the parallel stage cannot fail.
    for id in candidates.ids() {
        database.model(id)?;
    }
    // CD needs the reverse direction too; one index over the query serves
    // every candidate.
    let query_index = match metric {
        Metric::Cd => Some(SpatialIndex::build(query_cloud)),
        _ => None,
    };

    let mut scored: Vec<(String, S)> = candidates
        .entries()
        .par_iter()
        .map(|(id, _)| {
            let model_index = database
                .spatial_index(id)
                .expect("candidate id validated above");
            let score = match metric {
                Metric::Mscd => mscd_indexed(query_cloud, &model_index),
                Metric::Scd => scd_indexed(query_cloud, &model_index),
                Metric::Cd => {
                    let model = database.get(id).expect("candidate id validated above");
                    scd_indexed(query_cloud, &model_index)
                        + scd_indexed(model, query_index.as_ref().expect("built for cd"))
                }
            };
            (id.clone(), score)
        })
        .collect();
    scored.sort_by(|a, b| cmp_scores(a.1, b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(CandidateSet::from_sorted(
        ScoreKind::GeometricDistance,
        scored,
    ))
}

/// Full two-step retrieval for one query.
pub fn retrieve<S: Scalar>(
    query: &PointCloud<S>,
    query_feature: &FeatureVector<S>,
    index: &FeatureIndex<S>,
    database: &Database<S>,
    config: &RetrievalConfig,
) -> Result<RetrievalResult<S>, PipelineError> {
    assert!(config.k >= 1, "candidate count must be at least 1");
    let initial = rank(query_feature, index, config.k)?;
    let reranked = if config.rerank {
        rerank(query, &initial, database, config.metric)?
    } else {
        initial.clone()
    };
    Ok(RetrievalResult {
        query_id: query.id().to_string(),
        initial,
        reranked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{FeatureSet, FeatureSource};
    use crate::metrics;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point_cloud(id: &str, points: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::new(id, points.to_vec()).unwrap()
    }

    fn feature(values: &[f64]) -> FeatureVector<f64> {
        FeatureVector::new(values.to_vec()).unwrap()
    }

    /// Database of single-point models at chosen distances from the origin,
    /// with 1-d features in insertion order.
    fn fixture() -> (Database<f64>, FeatureIndex<f64>) {
        let models = [
            ("m1", 0.5, 1.0),
            ("m2", 0.1, 2.0),
            ("m3", 0.3, 3.0),
        ];
        let mut set = FeatureSet::new(FeatureSource::BuiltinD2);
        let mut entries = Vec::new();
        for (id, offset, feat) in models {
            entries.push((
                point_cloud(id, &[[offset, 0.0, 0.0]]),
                "synthetic".to_string(),
            ));
            set.insert(id, feature(&[feat])).unwrap();
        }
        (
            Database::new(entries).unwrap(),
            FeatureIndex::build(&set),
        )
    }

    #[test]
    fn rank_delegates_to_knn_and_clamps() {
        let (_, index) = fixture();
        let ranked = rank(&feature(&[0.9]), &index, 2).unwrap();
        assert_eq!(ranked.entries()[0].0, "m1");
        let all = rank(&feature(&[0.9]), &index, 99).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn rerank_singleton_keeps_entry_with_metric_score() {
        let (db, _) = fixture();
        let single = CandidateSet::new(
            ScoreKind::FeatureDistance,
            vec![("m3".to_string(), 0.7)],
        )
        .unwrap();
        let query = point_cloud("q", &[[0.0, 0.0, 0.0]]);
        let out = rerank(&query, &single, &db, Metric::Mscd).unwrap();
        assert_eq!(out.len(), 1);
        let (id, score) = out.first().unwrap();
        assert_eq!(id, "m3");
        assert_eq!(score, 0.3);
        assert_eq!(out.kind(), ScoreKind::GeometricDistance);
    }

    #[test]
    fn rerank_orders_by_hand_computed_mscd() {
        // Query at the origin puts the models at MSCD 0.5, 0.1, 0.3.
        let (db, index) = fixture();
        let query = point_cloud("q", &[[0.0, 0.0, 0.0]]);
        let initial = rank(&feature(&[0.9]), &index, 3).unwrap();
        let out = rerank(&query, &initial, &db, Metric::Mscd).unwrap();
        let ids: Vec<&str> = out.ids().collect();
        assert_eq!(ids, ["m2", "m3", "m1"]);
        // Scores agree with the metric oracle.
        for (id, score) in out.entries() {
            let expected = metrics::brute::mscd(&query, db.get(id).unwrap());
            assert_eq!(score.to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn rerank_rejects_unknown_candidate() {
        let (db, _) = fixture();
        let bogus = CandidateSet::new(
            ScoreKind::FeatureDistance,
            vec![("ghost".to_string(), 0.0)],
        )
        .unwrap();
        let query = point_cloud("q", &[[0.0, 0.0, 0.0]]);
        assert!(matches!(
            rerank(&query, &bogus, &db, Metric::Mscd),
            Err(PipelineError::Database(DatabaseError::UnknownModelId(_)))
        ));
    }

    #[test]
    fn rerank_identical_cloud_wins_with_zero_score() {
        let (db, index) = fixture();
        let query = point_cloud("q", &[[0.3, 0.0, 0.0]]); // same points as m3
        let initial = rank(&feature(&[0.9]), &index, 3).unwrap();
        let out = rerank(&query, &initial, &db, Metric::Mscd).unwrap();
        let (id, score) = out.first().unwrap();
        assert_eq!(id, "m3");
        assert_eq!(score, 0.0);
    }

    #[test]
    fn retrieve_passthrough_without_rerank() {
        let (db, index) = fixture();
        let query = point_cloud("q", &[[0.0, 0.0, 0.0]]);
        let config = RetrievalConfig {
            k: 3,
            metric: Metric::Mscd,
            rerank: false,
        };
        let result = retrieve(&query, &feature(&[0.9]), &index, &db, &config).unwrap();
        assert_eq!(result.initial, result.reranked);
        assert_eq!(result.query_id, "q");
    }

    #[test]
    fn retrieve_single_model_database() {
        let cloud = point_cloud("only", &[[0.2, 0.0, 0.0]]);
        let db = Database::new([(cloud, "solo".to_string())]).unwrap();
        let mut set = FeatureSet::new(FeatureSource::BuiltinD2);
        set.insert("only", feature(&[1.0])).unwrap();
        let index = FeatureIndex::build(&set);
        let query = point_cloud("q", &[[0.0, 0.0, 0.0]]);
        let result = retrieve(
            &query,
            &feature(&[5.0]),
            &index,
            &db,
            &RetrievalConfig::default(),
        )
        .unwrap();
        assert_eq!(result.initial.len(), 1);
        assert_eq!(result.reranked.first().unwrap().0, "only");
    }

    #[test]
    fn rerank_promotes_geometric_match_over_feature_rank() {
        // Feature space puts the true model last of five; its cloud is an
        // exact copy of the query, so MSCD pulls it to the front.
        let mut entries = Vec::new();
        let mut set = FeatureSet::new(FeatureSource::BuiltinD2);
        for i in 1..=5 {
            let id = format!("m{i}");
            let offset = if i == 5 { 0.0 } else { i as f64 * 0.2 };
            entries.push((
                point_cloud(&id, &[[offset, 0.0, 0.0], [offset + 0.1, 0.3, 0.0]]),
                "synthetic".to_string(),
            ));
            set.insert(&id, feature(&[i as f64])).unwrap();
        }
        let db = Database::new(entries).unwrap();
        let index = FeatureIndex::build(&set);
        let query = point_cloud("q", &[[0.0, 0.0, 0.0], [0.1, 0.3, 0.0]]);

        let config = RetrievalConfig {
            k: 5,
            metric: Metric::Mscd,
            rerank: true,
        };
        let result = retrieve(&query, &feature(&[0.9]), &index, &db, &config).unwrap();
        assert_eq!(result.initial.rank_of("m5"), Some(5));
        assert_eq!(result.reranked.rank_of("m5"), Some(1));
        assert_eq!(result.reranked.first().unwrap().1, 0.0);
    }

    #[test]
    fn rerank_is_a_permutation_and_sorted_by_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut entries = Vec::new();
        let mut set = FeatureSet::new(FeatureSource::BuiltinD2);
        for i in 0..20 {
            let id = format!("m{i:02}");
            let points: Vec<[f64; 3]> = (0..32)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect();
            entries.push((
                PointCloud::new(&id, points).unwrap(),
                "random".to_string(),
            ));
            set.insert(
                &id,
                feature(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
            )
            .unwrap();
        }
        let db = Database::new(entries).unwrap();
        let index = FeatureIndex::build(&set);
        let query_points: Vec<[f64; 3]> = (0..32)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let query = PointCloud::new("q", query_points).unwrap();

        for metric in Metric::ALL {
            let config = RetrievalConfig {
                k: 12,
                metric,
                rerank: true,
            };
            let result = retrieve(&query, &feature(&[0.0, 0.0]), &index, &db, &config).unwrap();
            let mut initial_ids: Vec<&str> = result.initial.ids().collect();
            let mut final_ids: Vec<&str> = result.reranked.ids().collect();
            initial_ids.sort_unstable();
            final_ids.sort_unstable();
            assert_eq!(initial_ids, final_ids);
            // Adjacent scores are non-decreasing and match the metric oracle.
            let entries = result.reranked.entries();
            for pair in entries.windows(2) {
                assert!(pair[0].1 <= pair[1].1);
            }
            for (id, score) in entries {
                let expected = metrics::metric_distance(metric, &query, db.get(id).unwrap());
                let rel = (score - expected).abs() / expected.max(f64::MIN_POSITIVE);
                assert!(rel < 1e-9);
            }
        }
    }

    #[test]
    fn retrieve_is_bitwise_identical_across_thread_counts() {
        let (db1, index) = fixture();
        let query = point_cloud("q", &[[0.05, 0.0, 0.0]]);
        let run = |threads: usize, db: &Database<f64>| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                retrieve(
                    &query,
                    &feature(&[0.9]),
                    &index,
                    db,
                    &RetrievalConfig {
                        k: 3,
                        metric: Metric::Cd,
                        rerank: true,
                    },
                )
                .unwrap()
            })
        };
        let single = run(1, &db1);
        let multi = run(4, &db1);
        for (a, b) in single
            .reranked
            .entries()
            .iter()
            .zip(multi.reranked.entries())
        {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
    }
}
