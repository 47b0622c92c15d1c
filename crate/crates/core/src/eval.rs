//! Exact search, recall metrics, throughput timing and
//! Johnson-Lindenstrauss diagnostics.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{NeighborLists, VectorDataset};
use crate::error::{Error, Result};
use crate::metric::{l2_squared, Scored, TopK};

/// Exact Euclidean top-`k` per query, ties to the lower id. `k` saturates at
/// the base size.
pub fn brute_force_knn(base: &VectorDataset, queries: &VectorDataset, k: usize) -> Result<NeighborLists> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if base.is_empty() {
        return Err(Error::InvalidArgument("base set is empty".into()));
    }
    if queries.count() > 0 && queries.dim() != base.dim() {
        return Err(Error::DimMismatch {
            expected: base.dim(),
            actual: queries.dim(),
        });
    }
    let k = k.min(base.count());
    let rows: Vec<Vec<(u32, f32)>> = (0..queries.count())
        .into_par_iter()
        .map(|q| {
            let query = queries.row(q);
            let mut top = TopK::new(k);
            for (i, row) in base.rows().enumerate() {
                top.push(Scored {
                    dist: l2_squared(query, row),
                    id: i as u32,
                });
            }
            top.into_sorted().iter().map(|s| (s.id, s.dist.sqrt())).collect()
        })
        .collect();
    if rows.is_empty() {
        return NeighborLists::new(0, k, Vec::new(), Some(Vec::new()));
    }
    Ok(NeighborLists::from_rows(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recall {
    /// Fraction of queries whose true nearest neighbor is among the first
    /// `R` results.
    OneAt(usize),
    /// Mean overlap between the first `K` results and the true top `K`,
    /// divided by `K`.
    Overlap(usize),
}

impl std::fmt::Display for Recall {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Recall::OneAt(r) => write!(f, "1@{r}"),
            Recall::Overlap(k) => write!(f, "{k}@{k}"),
        }
    }
}

pub fn recall_at(results: &NeighborLists, ground_truth: &NeighborLists, variant: Recall) -> Result<f64> {
    let nq = results.query_count();
    if nq != ground_truth.query_count() {
        return Err(Error::InvalidArgument(format!(
            "results cover {nq} queries but ground truth covers {}",
            ground_truth.query_count()
        )));
    }
    if nq == 0 {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let (need_results, need_gt) = match variant {
        Recall::OneAt(r) => (r, 1),
        Recall::Overlap(k) => (k, k),
    };
    if need_results == 0 {
        return Err(Error::InvalidArgument(format!("{variant} is undefined")));
    }
    if results.k() < need_results {
        return Err(Error::InvalidArgument(format!(
            "{variant} needs {need_results} results per query, lists hold {}",
            results.k()
        )));
    }
    if ground_truth.k() < need_gt {
        return Err(Error::InvalidArgument(format!(
            "{variant} needs {need_gt} ground-truth neighbors per query, lists hold {}",
            ground_truth.k()
        )));
    }
    // Integer hit counts keep the result independent of query order.
    let mut hits = 0usize;
    for q in 0..nq {
        let got = &results.ids(q)[..need_results];
        let truth = &ground_truth.ids(q)[..need_gt];
        hits += match variant {
            Recall::OneAt(_) => usize::from(got.contains(&truth[0])),
            Recall::Overlap(_) => {
                let mut t = truth.to_vec();
                t.sort_unstable();
                got.iter().filter(|id| t.binary_search(id).is_ok()).count()
            }
        };
    }
    let per_query = match variant {
        Recall::OneAt(_) => 1,
        Recall::Overlap(k) => k,
    };
    Ok(hits as f64 / (nq * per_query) as f64)
}

/// `(d * sqrt(1 - eps), d * sqrt(1 + eps))`: where a distance `d` can land
/// after a random projection with distortion `eps`.
pub fn distortion_interval(distance: f64, epsilon: f64) -> Result<(f64, f64)> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(distance >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be non-negative, got {distance}")));
    }
    Ok((distance * (1.0 - epsilon).sqrt(), distance * (1.0 + epsilon).sqrt()))
}

/// Smallest `eps` in (0, 1) with `d_out > 4 ln(m) / (eps^2/2 - eps^3/3)`,
/// to 1e-6 by bisection; `None` if even `eps -> 1` does not satisfy it.
pub fn jl_min_epsilon(m: f64, d_out: usize) -> Option<f64> {
    if !(m >= 2.0) || d_out == 0 {
        return None;
    }
    let needed = |eps: f64| 4.0 * m.ln() / (eps * eps / 2.0 - eps * eps * eps / 3.0);
    let d = d_out as f64;
    // The denominator grows on (0, 1), so the requirement shrinks with eps.
    if d <= needed(1.0) {
        return None;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if d > needed(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpsMeasurement {
    pub queries_per_second: f64,
    pub repetitions: usize,
}

/// Runs `search` over every query `repetitions` times on the calling thread
/// and reports the mean throughput.
pub fn measure_qps(mut search: impl FnMut(&[f32]), queries: &VectorDataset, repetitions: usize) -> Result<QpsMeasurement> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to time".into()));
    }
    let start = Instant::now();
    for _ in 0..repetitions {
        for q in queries.rows() {
            search(q);
        }
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(QpsMeasurement {
        queries_per_second: (queries.count() * repetitions) as f64 / secs,
        repetitions,
    })
}

/// One row of a recall table. Metrics that the result lists are too short
/// for are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub index: String,
    /// Search parameter echo such as `ef=100` or `nprobe=4`.
    pub params: String,
    pub compression_factor: Option<f64>,
    pub queries: usize,
    pub recall_1_at_1: Option<f64>,
    pub recall_1_at_5: Option<f64>,
    pub recall_1_at_10: Option<f64>,
    pub recall_1_at_50: Option<f64>,
    pub recall_100_at_100: Option<f64>,
    pub queries_per_second: Option<f64>,
    pub qps_repetitions: Option<usize>,
}

impl RecallReport {
    pub fn compute(
        index: impl Into<String>,
        params: impl Into<String>,
        compression_factor: Option<f64>,
        results: &NeighborLists,
        ground_truth: &NeighborLists,
    ) -> Result<Self> {
        let get = |v: Recall| -> Result<Option<f64>> {
            let (need_r, need_gt) = match v {
                Recall::OneAt(r) => (r, 1),
                Recall::Overlap(k) => (k, k),
            };
            if results.k() < need_r || ground_truth.k() < need_gt {
                return Ok(None);
            }
            recall_at(results, ground_truth, v).map(Some)
        };
        if results.query_count() != ground_truth.query_count() {
            return Err(Error::InvalidArgument(format!(
                "results cover {} queries but ground truth covers {}",
                results.query_count(),
                ground_truth.query_count()
            )));
        }
        Ok(RecallReport {
            index: index.into(),
            params: params.into(),
            compression_factor,
            queries: results.query_count(),
            recall_1_at_1: get(Recall::OneAt(1))?,
            recall_1_at_5: get(Recall::OneAt(5))?,
            recall_1_at_10: get(Recall::OneAt(10))?,
            recall_1_at_50: get(Recall::OneAt(50))?,
            recall_100_at_100: get(Recall::Overlap(100))?,
            queries_per_second: None,
            qps_repetitions: None,
        })
    }

    pub fn with_qps(mut self, m: QpsMeasurement) -> Self {
        self.queries_per_second = Some(m.queries_per_second);
        self.qps_repetitions = Some(m.repetitions);
        self
    }
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Aligned plain-text table.
pub fn format_table(reports: &[RecallReport]) -> String {
    let header = ["index", "params", "C_F", "1@1", "1@5", "1@10", "1@50", "100@100", "qps"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.index.clone(),
                r.params.clone(),
                cell(r.compression_factor, 1),
                cell(r.recall_1_at_1, 4),
                cell(r.recall_1_at_5, 4),
                cell(r.recall_1_at_10, 4),
                cell(r.recall_1_at_50, 4),
                cell(r.recall_100_at_100, 4),
                cell(r.queries_per_second, 1),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// One JSON object per line.
pub fn format_jsonl(reports: &[RecallReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lists(rows: Vec<Vec<u32>>) -> NeighborLists {
        NeighborLists::from_rows(rows.into_iter().map(|r| r.into_iter().map(|i| (i, 0.0)).collect()).collect())
    }

    #[test]
    fn one_dimensional_hand_case() {
        let base = VectorDataset::from_rows(&[[0.0f32], [1.0], [3.0]]).unwrap();
        let q = VectorDataset::from_rows(&[[2.4f32]]).unwrap();
        let r = brute_force_knn(&base, &q, 2).unwrap();
        assert_eq!(r.ids(0), &[2, 1]);
        assert_eq!(brute_force_knn(&base, &q, 10).unwrap().k(), 3);
    }

    #[test]
    fn self_search() {
        let base = VectorDataset::from_rows(&[[0.0f32, 1.0], [2.0, 2.0], [5.0, -1.0]]).unwrap();
        let r = brute_force_knn(&base, &base, 1).unwrap();
        for q in 0..3 {
            assert_eq!(r.ids(q), &[q as u32]);
            assert_eq!(r.distances(q).unwrap(), &[0.0]);
        }
    }

    #[test]
    fn ties_go_to_lower_id() {
        let base = VectorDataset::from_rows(&[[1.0f32], [-1.0], [1.0]]).unwrap();
        let q = VectorDataset::from_rows(&[[0.0f32]]).unwrap();
        assert_eq!(brute_force_knn(&base, &q, 3).unwrap().ids(0), &[0, 1, 2]);
    }

    #[test]
    fn recall_variants() {
        let gt = lists(vec![vec![1, 2], vec![3, 4]]);
        assert_eq!(recall_at(&gt, &gt, Recall::OneAt(1)).unwrap(), 1.0);
        let res = lists(vec![vec![2, 1], vec![5, 6]]);
        assert_eq!(recall_at(&res, &gt, Recall::OneAt(1)).unwrap(), 0.0);
        assert_eq!(recall_at(&res, &gt, Recall::OneAt(2)).unwrap(), 0.5);
        assert_eq!(recall_at(&res, &gt, Recall::Overlap(2)).unwrap(), 0.5);
        assert!(recall_at(&res, &gt, Recall::OneAt(3)).is_err());
    }

    #[test]
    fn overlap_mean_of_three() {
        let truth: Vec<Vec<u32>> = (0..3).map(|q| (q * 1000..q * 1000 + 100).collect()).collect();
        let res = vec![
            truth[0].clone(),
            truth[1][..50].iter().copied().chain(5000..5050).collect(),
            (7000..7100).collect(),
        ];
        let r = recall_at(&lists(res), &lists(truth), Recall::Overlap(100)).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn epsilon_monotone_and_none() {
        let a = jl_min_epsilon(1e6, 480).unwrap();
        let b = jl_min_epsilon(1e6, 960).unwrap();
        assert!(b < a);
        assert_eq!(jl_min_epsilon(1e6, 2), None);
        assert!(distortion_interval(1.0, 1.0).is_err());
        let (lo, hi) = distortion_interval(2.0, 1e-12).unwrap();
        assert!((lo - 2.0).abs() < 1e-9 && (hi - 2.0).abs() < 1e-9);
    }

    #[test]
    fn table_and_jsonl() {
        let gt = lists(vec![vec![1, 2, 3, 4, 5]]);
        let rep = RecallReport::compute("flat", "", None, &gt, &gt).unwrap();
        assert_eq!(rep.recall_1_at_5, Some(1.0));
        assert_eq!(rep.recall_1_at_10, None);
        let t = format_table(std::slice::from_ref(&rep));
        assert!(t.lines().next().unwrap().starts_with("index"));
        let j = format_jsonl(std::slice::from_ref(&rep));
        let back: RecallReport = serde_json::from_str(j.trim()).unwrap();
        assert_eq!(back, rep);
    }
}
