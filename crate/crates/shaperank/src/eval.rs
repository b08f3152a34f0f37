//! Retrieval evaluation: top-k accuracy, top-1 geometric distance to ground
//! truth, ground-truth ranking, category ratio, and class/instance averaging.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::metrics::mscd_indexed;
use crate::pipeline::RetrievalResult;
use crate::pointcloud::Database;
use crate::scalar::Scalar;

/// Errors from evaluation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query `{0}` has no ground truth")]
    MissingGroundTruth(String),
    #[error("unknown model id `{0}`")]
    UnknownModelId(String),
    #[error("no category label for `{0}`")]
    MissingCategory(String),
    #[error("duplicate query id `{0}`")]
    DuplicateQuery(String),
    #[error("query `{0}` produced an empty candidate set")]
    EmptyCandidateSet(String),
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
}

/// Ground truth for one query: its true database model and category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtEntry {
    pub model_id: String,
    pub category: String,
}

/// Ground-truth assignment for a query set.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    entries: BTreeMap<String, GtEntry>,
}

impl GroundTruth {
    pub fn new() -> Self {
        GroundTruth::default()
    }

    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        model_id: impl Into<String>,
        category: impl Into<String>,
    ) -> Result<(), EvalError> {
        let query_id = query_id.into();
        if self.entries.contains_key(&query_id) {
            return Err(EvalError::DuplicateQuery(query_id));
        }
        self.entries.insert(
            query_id,
            GtEntry {
                model_id: model_id.into(),
                category: category.into(),
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, query_id: &str) -> Option<&GtEntry> {
        self.entries.get(query_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &GtEntry)> {
        self.entries.iter().map(|(q, e)| (q.as_str(), e))
    }

    /// Checks that every referenced model exists in the database.
    pub fn validate_against<S: Scalar>(&self, database: &Database<S>) -> Result<(), EvalError> {
        for entry in self.entries.values() {
            if database.get(&entry.model_id).is_none() {
                return Err(EvalError::UnknownModelId(entry.model_id.clone()));
            }
        }
        Ok(())
    }

    fn require(&self, query_id: &str) -> Result<&GtEntry, EvalError> {
        self.entries
            .get(query_id)
            .ok_or_else(|| EvalError::MissingGroundTruth(query_id.to_string()))
    }
}

/// Fraction of queries whose ground-truth model appears within the first
/// `k` entries of the chosen candidate set.
pub fn topk_accuracy<S: Scalar>(
    results: &[RetrievalResult<S>],
    gt: &GroundTruth,
    k: usize,
    use_final: bool,
) -> Result<f64, EvalError> {
    assert!(k >= 1, "k must be at least 1");
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut hits = 0usize;
    for result in results {
        let entry = gt.require(&result.query_id)?;
        if result
            .selected(use_final)
            .contains_in_top(&entry.model_id, k)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

fn top1_geometric<S: Scalar>(
    results: &[RetrievalResult<S>],
    gt: &GroundTruth,
    database: &Database<S>,
    use_final: bool,
) -> Result<S, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut sum = S::zero();
    for result in results {
        let entry = gt.require(&result.query_id)?;
        let (top1, _) = result
            .selected(use_final)
            .first()
            .ok_or_else(|| EvalError::EmptyCandidateSet(result.query_id.clone()))?;
        let retrieved = database
            .get(top1)
            .ok_or_else(|| EvalError::UnknownModelId(top1.to_string()))?;
        // Direction: retrieved model is the source, ground truth the target.
        let gt_index = database
            .spatial_index(&entry.model_id)
            .map_err(|_| EvalError::UnknownModelId(entry.model_id.clone()))?;
        sum += mscd_indexed(retrieved, &gt_index);
    }
    Ok(sum / S::from_usize(results.len()).expect("count fits scalar"))
}

/// Mean MSCD between each query's top-1 retrieved model and its ground-truth
/// model, over the final candidate ordering.
pub fn top1_chamfer<S: Scalar>(
    results: &[RetrievalResult<S>],
    gt: &GroundTruth,
    database: &Database<S>,
) -> Result<S, EvalError> {
    top1_geometric(results, gt, database, true)
}

/// Ground-truth ranking summary. Queries whose ground truth does not appear
/// in the candidate set at all cannot be ranked; they are excluded from the
/// mean and counted separately rather than imputed, which would silently
/// bias comparisons.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GtRanking {
    /// Mean 1-based rank over the counted queries; NaN if none counted.
    pub mean_rank: f64,
    pub counted: usize,
    pub excluded: usize,
}

/// Mean 1-based position of the ground-truth model in the chosen set.
pub fn gt_ranking<S: Scalar>(
    results: &[RetrievalResult<S>],
    gt: &GroundTruth,
    use_final: bool,
) -> Result<GtRanking, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut sum = 0usize;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for result in results {
        let entry = gt.require(&result.query_id)?;
        match result.selected(use_final).rank_of(&entry.model_id) {
            Some(rank) => {
                sum += rank;
                counted += 1;
            }
            None => excluded += 1,
        }
    }
    let mean_rank = if counted == 0 {
        f64::NAN
    } else {
        sum as f64 / counted as f64
    };
    Ok(GtRanking {
        mean_rank,
        counted,
        excluded,
    })
}

/// Fraction, over all (query, top-k candidate) pairs of the final ordering,
/// of candidates whose category matches the query's ground-truth category.
pub fn category_ratio<S: Scalar>(
    results: &[RetrievalResult<S>],
    database: &Database<S>,
    gt: &GroundTruth,
    k: usize,
) -> Result<f64, EvalError> {
    assert!(k >= 1, "k must be at least 1");
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut matching = 0usize;
    let mut total = 0usize;
    for result in results {
        let entry = gt.require(&result.query_id)?;
        for (candidate, _) in result.reranked.entries().iter().take(k) {
            let category = database
                .category(candidate)
                .ok_or_else(|| EvalError::MissingCategory(candidate.clone()))?;
            if category == entry.category {
                matching += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::NoQueries);
    }
    Ok(matching as f64 / total as f64)
}

/// A per-query metric aggregated two ways: the instance average (mean over
/// all queries) and the class average (unweighted mean of per-class means).
#[derive(Debug, Clone, Serialize)]
pub struct ClassInstanceAverages {
    pub instance_avg: f64,
    pub class_avg: f64,
    pub per_class: BTreeMap<String, f64>,
}

/// Aggregates per-query values into class and instance averages.
/// `categories` maps query id to class label.
pub fn class_and_instance_averages(
    per_query: &[(String, f64)],
    categories: &BTreeMap<String, String>,
) -> Result<ClassInstanceAverages, EvalError> {
    if per_query.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (query_id, value) in per_query {
        let category = categories
            .get(query_id)
            .ok_or_else(|| EvalError::MissingCategory(query_id.clone()))?;
        let slot = sums.entry(category).or_insert((0.0, 0));
        slot.0 += value;
        slot.1 += 1;
        total += value;
    }
    let per_class: BTreeMap<String, f64> = sums
        .iter()
        .map(|(&cat, &(sum, n))| (cat.to_string(), sum / n as f64))
        .collect();
    let class_avg = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ClassInstanceAverages {
        instance_avg: total / per_query.len() as f64,
        class_avg,
        per_class,
    })
}

/// Top-k accuracy at one `k`, aggregated over classes, for both orderings.
#[derive(Debug, Clone, Serialize)]
pub struct RaRow {
    pub k: usize,
    pub initial: ClassInstanceAverages,
    #[serde(rename = "final")]
    pub reranked: ClassInstanceAverages,
}

/// The full evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Name of the re-ranking metric the results were produced with.
    pub metric: String,
    pub queries: usize,
    /// Queries dropped before retrieval (for example by the minimum point
    /// count filter); not part of any mean.
    pub skipped_queries: usize,
    pub ra: Vec<RaRow>,
    pub top1_chamfer_initial: f64,
    #[serde(rename = "top1_chamfer_final")]
    pub top1_chamfer_reranked: f64,
    pub gt_rank_initial: GtRanking,
    #[serde(rename = "gt_rank_final")]
    pub gt_rank_reranked: GtRanking,
    pub category_ratio_top5: f64,
}

impl EvalReport {
    /// Renders the deterministic key-sorted text form: one metric per line,
    /// keys in ascending order, 4-decimal fixed formatting for real values.
    pub fn render_text(&self) -> String {
        let mut lines: Vec<(String, String)> = Vec::new();
        lines.push(("metric".into(), self.metric.clone()));
        lines.push(("queries".into(), self.queries.to_string()));
        lines.push(("skipped_queries".into(), self.skipped_queries.to_string()));
        lines.push((
            "category_ratio.top5".into(),
            format!("{:.4}", self.category_ratio_top5),
        ));
        lines.push((
            "top1_chamfer.initial".into(),
            format!("{:.4}", self.top1_chamfer_initial),
        ));
        lines.push((
            "top1_chamfer.final".into(),
            format!("{:.4}", self.top1_chamfer_reranked),
        ));
        for (tag, rank) in [
            ("initial", &self.gt_rank_initial),
            ("final", &self.gt_rank_reranked),
        ] {
            lines.push((
                format!("gt_rank.{tag}.mean"),
                format!("{:.4}", rank.mean_rank),
            ));
            lines.push((format!("gt_rank.{tag}.counted"), rank.counted.to_string()));
            lines.push((format!("gt_rank.{tag}.excluded"), rank.excluded.to_string()));
        }
        for row in &self.ra {
            for (tag, avg) in [("initial", &row.initial), ("final", &row.reranked)] {
                let base = format!("ra.k{:03}.{tag}", row.k);
                lines.push((
                    format!("{base}.instance_avg"),
                    format!("{:.4}", avg.instance_avg),
                ));
                lines.push((format!("{base}.class_avg"), format!("{:.4}", avg.class_avg)));
                for (class, value) in &avg.per_class {
                    lines.push((format!("{base}.class.{class}"), format!("{value:.4}")));
                }
            }
        }
        lines.sort();
        let mut out = String::new();
        for (key, value) in lines {
            let _ = writeln!(out, "{key} {value}");
        }
        out
    }
}

/// Computes the full report over a result set.
pub fn evaluate<S: Scalar>(
    results: &[RetrievalResult<S>],
    gt: &GroundTruth,
    database: &Database<S>,
    ks: &[usize],
    metric_name: &str,
) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let categories: BTreeMap<String, String> = results
        .iter()
        .map(|r| {
            gt.require(&r.query_id)
                .map(|e| (r.query_id.clone(), e.category.clone()))
        })
        .collect::<Result<_, _>>()?;

    let mut ra = Vec::with_capacity(ks.len());
    let mut ks_sorted: Vec<usize> = ks.to_vec();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();
    for &k in &ks_sorted {
        let mut per_query_initial = Vec::with_capacity(results.len());
        let mut per_query_reranked = Vec::with_capacity(results.len());
        for result in results {
            let entry = gt.require(&result.query_id)?;
            let hit = |use_final: bool| {
                result
                    .selected(use_final)
                    .contains_in_top(&entry.model_id, k) as u8 as f64
            };
            per_query_initial.push((result.query_id.clone(), hit(false)));
            per_query_reranked.push((result.query_id.clone(), hit(true)));
        }
        ra.push(RaRow {
            k,
            initial: class_and_instance_averages(&per_query_initial, &categories)?,
            reranked: class_and_instance_averages(&per_query_reranked, &categories)?,
        });
    }

    Ok(EvalReport {
        metric: metric_name.to_string(),
        queries: results.len(),
        skipped_queries: 0,
        ra,
        top1_chamfer_initial: top1_geometric(results, gt, database, false)?
            .to_f64()
            .expect("score converts to f64"),
        top1_chamfer_reranked: top1_geometric(results, gt, database, true)?
            .to_f64()
            .expect("score converts to f64"),
        gt_rank_initial: gt_ranking(results, gt, false)?,
        gt_rank_reranked: gt_ranking(results, gt, true)?,
        category_ratio_top5: category_ratio(results, database, gt, 5)?,
    })
}
