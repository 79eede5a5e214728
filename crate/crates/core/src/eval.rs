//! Retrieval-quality metrics: MAP@R, radius-parameterized precision-recall
//! curves, and precision@top-R curves, all under the shared-label relevance
//! rule (a database item is relevant to a query iff they share at least one
//! semantic label).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::hashing::RankedResult;
use crate::matrix::{dot, Matrix};
use crate::{Error, Result};

/// Relevance oracle backed by multi-hot label matrices for the query and
/// database sets.
#[derive(Debug, Clone)]
pub struct RelevanceJudge {
    query_labels: Matrix,
    db_labels: Matrix,
}

impl RelevanceJudge {
    pub fn new(query_labels: Matrix, db_labels: Matrix) -> Result<Self> {
        if query_labels.cols() != db_labels.cols() {
            return Err(Error::Shape(format!(
                "query labels have {} classes, database labels {}",
                query_labels.cols(),
                db_labels.cols()
            )));
        }
        Ok(RelevanceJudge {
            query_labels,
            db_labels,
        })
    }

    pub fn queries(&self) -> usize {
        self.query_labels.rows()
    }

    pub fn db_len(&self) -> usize {
        self.db_labels.rows()
    }

    pub fn is_relevant(&self, query: usize, db_item: usize) -> bool {
        dot(self.query_labels.row(query), self.db_labels.row(db_item)) != 0.0
    }

    /// Count of relevant database items for one query.
    pub fn total_relevant(&self, query: usize) -> usize {
        (0..self.db_len())
            .filter(|&d| self.is_relevant(query, d))
            .count()
    }
}

/// Shared-label relevance on raw label rows.
pub fn relevant(q_labels: &[f64], d_labels: &[f64]) -> Result<bool> {
    if q_labels.len() != d_labels.len() {
        return Err(Error::Shape(format!(
            "label dims {} and {} differ",
            q_labels.len(),
            d_labels.len()
        )));
    }
    Ok(dot(q_labels, d_labels) != 0.0)
}

/// Average precision at cutoff `r`:
/// `AP@R = (1/min(R, total_relevant)) * sum over relevant ranks <= R of
/// precision@rank`. Returns 0 when the query has no relevant items (the
/// caller excludes such queries from the mean).
pub fn average_precision(
    ranked_relevance: &[bool],
    r: usize,
    total_relevant: usize,
) -> Result<f64> {
    if r == 0 {
        return Err(Error::Config("cutoff R must be positive".into()));
    }
    if total_relevant == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &rel) in ranked_relevance.iter().take(r).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / r.min(total_relevant) as f64)
}

/// Mean AP@R plus how many queries were eligible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapAtR {
    pub mean: f64,
    /// Queries with at least one relevant database item.
    pub evaluated: usize,
    /// Queries excluded because nothing in the database is relevant to them.
    pub excluded: usize,
}

fn validate_rankings(rankings: &[RankedResult], judge: &RelevanceJudge) -> Result<()> {
    if rankings.len() != judge.queries() {
        return Err(Error::Shape(format!(
            "{} rankings for {} queries",
            rankings.len(),
            judge.queries()
        )));
    }
    for (q, ranking) in rankings.iter().enumerate() {
        if ranking.len() != judge.db_len() {
            return Err(Error::Shape(format!(
                "query {q} ranking covers {} of {} database items",
                ranking.len(),
                judge.db_len()
            )));
        }
    }
    Ok(())
}

/// Mean average precision at cutoff `r` over all queries that have at least
/// one relevant item; errors when no query is eligible.
pub fn map_at_r(rankings: &[RankedResult], judge: &RelevanceJudge, r: usize) -> Result<MapAtR> {
    validate_rankings(rankings, judge)?;
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for (q, ranking) in rankings.iter().enumerate() {
        let total = judge.total_relevant(q);
        if total == 0 {
            excluded += 1;
            continue;
        }
        let rel: Vec<bool> = ranking
            .iter()
            .take(r)
            .map(|hit| judge.is_relevant(q, hit.index))
            .collect();
        sum += average_precision(&rel, r, total)?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::UndefinedMetric(
            "no query has a relevant database item".into(),
        ));
    }
    Ok(MapAtR {
        mean: sum / evaluated as f64,
        evaluated,
        excluded,
    })
}

/// An x-monotone curve with y values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoints {
    points: Vec<(f64, f64)>,
}

impl CurvePoints {
    /// Validates monotonicity (x strictly increasing) and the y range.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Input(format!(
                    "curve x values must strictly increase: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some((x, y)) = points.iter().find(|(_, y)| !(0.0..=1.0).contains(y)) {
            return Err(Error::Input(format!(
                "curve y value {y} at x = {x} outside [0, 1]"
            )));
        }
        Ok(CurvePoints { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Writes `x,y` rows under a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "x,y")?;
        for (x, y) in &self.points {
            writeln!(out, "{x},{y}")?;
        }
        Ok(())
    }
}

/// Precision-recall curve parameterized by the Hamming radius `t = 0..=bits`:
/// at each radius the retrieved set is every item within distance `t`. Points
/// average precision and recall over queries with at least one relevant item;
/// an empty retrieved set contributes precision 1 by convention. Radii whose
/// mean recall repeats an earlier value are dropped so x strictly increases.
pub fn precision_recall_curve(
    rankings: &[RankedResult],
    judge: &RelevanceJudge,
    bits: usize,
) -> Result<CurvePoints> {
    validate_rankings(rankings, judge)?;
    let eligible: Vec<usize> = (0..judge.queries())
        .filter(|&q| judge.total_relevant(q) > 0)
        .collect();
    if eligible.is_empty() {
        return Err(Error::UndefinedMetric(
            "no query has a relevant database item".into(),
        ));
    }

    let mut points: Vec<(f64, f64)> = Vec::with_capacity(bits + 1);
    for t in 0..=bits as u32 {
        let mut precision_sum = 0.0;
        let mut recall_sum = 0.0;
        for &q in &eligible {
            let total = judge.total_relevant(q);
            let mut retrieved = 0usize;
            let mut hits = 0usize;
            for hit in &rankings[q] {
                if hit.distance > t {
                    break;
                }
                retrieved += 1;
                hits += usize::from(judge.is_relevant(q, hit.index));
            }
            precision_sum += if retrieved == 0 {
                1.0
            } else {
                hits as f64 / retrieved as f64
            };
            recall_sum += hits as f64 / total as f64;
        }
        let precision = precision_sum / eligible.len() as f64;
        let recall = recall_sum / eligible.len() as f64;
        if points.last().is_none_or(|&(x, _)| recall > x) {
            points.push((recall, precision));
        }
    }
    CurvePoints::new(points)
}

/// Precision@top-R averaged over all queries, at each cutoff in `grid`
/// (which must be strictly ascending and positive).
pub fn precision_at_top_r(
    rankings: &[RankedResult],
    judge: &RelevanceJudge,
    grid: &[usize],
) -> Result<CurvePoints> {
    validate_rankings(rankings, judge)?;
    if grid.is_empty() {
        return Err(Error::Config("cutoff grid must be nonempty".into()));
    }
    for w in grid.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Config("cutoff grid must strictly ascend".into()));
        }
    }
    if grid[0] == 0 {
        return Err(Error::Config("cutoffs must be positive".into()));
    }
    if judge.queries() == 0 {
        return Err(Error::UndefinedMetric("no queries".into()));
    }

    let mut points = Vec::with_capacity(grid.len());
    for &r in grid {
        let mut sum = 0.0;
        for (q, ranking) in rankings.iter().enumerate() {
            let take = r.min(ranking.len());
            let hits = ranking
                .iter()
                .take(take)
                .filter(|hit| judge.is_relevant(q, hit.index))
                .count();
            sum += hits as f64 / r as f64;
        }
        points.push((r as f64, sum / judge.queries() as f64));
    }
    CurvePoints::new(points)
}

/// Writes metrics as `key=value` lines.
pub fn write_key_values(path: &Path, items: &[(&str, String)]) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    for (key, value) in items {
        writeln!(out, "{key}={value}")?;
    }
    Ok(())
}
