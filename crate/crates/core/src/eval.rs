//! Aggregate metrics and report data for registration experiments.
//!
//! Turns per-case outcomes into the standard summary numbers: success rate
//! and capture range at the 2 mm criterion, their gross (10 mm)
//! counterparts, accuracy statistics over successful cases,
//! projection-error histograms, and per-bin summaries of where the coarsest
//! level leaves a registration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::RegistrationTrace;

/// A registration counts as successful when the final mean reprojection
/// distance is at or below this threshold.
pub const SUCCESS_MRPD_MM: f64 = 2.0;

/// Relaxed threshold separating gross failures from near-misses.
pub const GROSS_SUCCESS_MRPD_MM: f64 = 10.0;

/// Default width of the initial-error bins behind the capture range.
pub const DEFAULT_BIN_WIDTH_MM: f64 = 1.0;

/// Minimum fraction of successful cases a bin needs to extend the
/// capture range.
const CAPTURE_PASS_FRACTION: f64 = 0.95;

/// Outcome of a single registration case, ready for aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Caller-chosen case identifier, carried through to reports.
    pub case_id: u64,
    /// Method variant the case was run with.
    pub variant: String,
    /// Mean target registration error of the start pose, millimetres.
    pub initial_mtre_mm: f64,
    /// Mean reprojection distance of the final pose, millimetres.
    pub final_mrpd_mm: f64,
    /// Mean target registration error of the final pose, millimetres.
    pub final_mtre_mm: f64,
    /// Solver iterations spent across all levels.
    pub iterations: usize,
    /// Whether the case met the 2 mm criterion.
    pub success_2mm: bool,
    /// Whether the case met the relaxed 10 mm criterion.
    pub success_10mm: bool,
}

impl EvalRecord {
    /// Builds a record, deriving both success flags from the final
    /// reprojection distance.
    pub fn new(
        case_id: u64,
        variant: impl Into<String>,
        initial_mtre_mm: f64,
        final_mrpd_mm: f64,
        final_mtre_mm: f64,
        iterations: usize,
    ) -> Result<Self> {
        let record = EvalRecord {
            case_id,
            variant: variant.into(),
            initial_mtre_mm,
            final_mrpd_mm,
            final_mtre_mm,
            iterations,
            success_2mm: final_mrpd_mm <= SUCCESS_MRPD_MM,
            success_10mm: final_mrpd_mm <= GROSS_SUCCESS_MRPD_MM,
        };
        record.validate()?;
        Ok(record)
    }

    /// Checks metric ranges and flag consistency.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("initial mTRE", self.initial_mtre_mm),
            ("final mRPD", self.final_mrpd_mm),
            ("final mTRE", self.final_mtre_mm),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::BadParams(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.success_2mm != (self.final_mrpd_mm <= SUCCESS_MRPD_MM)
            || self.success_10mm != (self.final_mrpd_mm <= GROSS_SUCCESS_MRPD_MM)
        {
            return Err(Error::BadParams(format!(
                "success flags disagree with a final error of {} mm",
                self.final_mrpd_mm
            )));
        }
        Ok(())
    }
}

/// Aggregate numbers for one group of records (typically one variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// How many records went into the summary.
    pub count: usize,
    /// Fraction of cases with final error ≤ 2 mm.
    pub success_rate: f64,
    /// Fraction of cases with final error ≤ 10 mm.
    pub gross_success_rate: f64,
    /// Largest initial error below which every bin keeps at least 95%
    /// success at the 2 mm criterion, millimetres.
    pub capture_range_mm: f64,
    /// The same sweep against the 10 mm criterion.
    pub gross_capture_range_mm: f64,
    /// Mean final error over the 2 mm successes, when any exist.
    pub accuracy_mean_mm: Option<f64>,
    /// Sample standard deviation of the final error over the same cases.
    pub accuracy_std_mm: Option<f64>,
    /// Bin width the capture ranges were computed with.
    pub bin_width_mm: f64,
}

/// Summarizes a batch of registration outcomes.
///
/// The capture range scans initial-error bins `[k·w, (k+1)·w)` upward from
/// zero and reports the left edge of the first bin that is empty or drops
/// below 95% success; empty bins end the scan because they leave the
/// success rate at that misalignment unknown.
pub fn compute_metrics(records: &[EvalRecord], bin_width_mm: f64) -> Result<MetricsSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !bin_width_mm.is_finite() || bin_width_mm <= 0.0 {
        return Err(Error::BadParams(format!(
            "bin width must be positive, got {bin_width_mm}"
        )));
    }
    for r in records {
        r.validate()?;
    }

    let n = records.len() as f64;
    let success_rate = records.iter().filter(|r| r.success_2mm).count() as f64 / n;
    let gross_success_rate = records.iter().filter(|r| r.success_10mm).count() as f64 / n;

    let successes: Vec<f64> = records
        .iter()
        .filter(|r| r.success_2mm)
        .map(|r| r.final_mrpd_mm)
        .collect();
    let (accuracy_mean_mm, accuracy_std_mm) = if successes.is_empty() {
        (None, None)
    } else {
        let m = successes.len() as f64;
        let mean = successes.iter().sum::<f64>() / m;
        let var = if successes.len() < 2 {
            0.0
        } else {
            successes.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        };
        (Some(mean), Some(var.sqrt()))
    };

    Ok(MetricsSummary {
        count: records.len(),
        success_rate,
        gross_success_rate,
        capture_range_mm: capture_range(records, |r| r.success_2mm, bin_width_mm),
        gross_capture_range_mm: capture_range(records, |r| r.success_10mm, bin_width_mm),
        accuracy_mean_mm,
        accuracy_std_mm,
        bin_width_mm,
    })
}

/// Groups records by variant name and summarizes each group.
///
/// Groups come back sorted by name so reports are reproducible regardless
/// of input order.
pub fn metrics_by_variant(
    records: &[EvalRecord],
    bin_width_mm: f64,
) -> Result<Vec<(String, MetricsSummary)>> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut names: Vec<&str> = records.iter().map(|r| r.variant.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names
        .into_iter()
        .map(|name| {
            let group: Vec<EvalRecord> = records
                .iter()
                .filter(|r| r.variant == name)
                .cloned()
                .collect();
            compute_metrics(&group, bin_width_mm).map(|s| (name.to_string(), s))
        })
        .collect()
}

fn capture_range(
    records: &[EvalRecord],
    success: impl Fn(&EvalRecord) -> bool,
    width: f64,
) -> f64 {
    let last_bin = records
        .iter()
        .map(|r| (r.initial_mtre_mm / width).floor() as usize)
        .max()
        .expect("caller checks for records");
    let mut totals = vec![0usize; last_bin + 1];
    let mut good = vec![0usize; last_bin + 1];
    for r in records {
        let k = (r.initial_mtre_mm / width).floor() as usize;
        totals[k] += 1;
        if success(r) {
            good[k] += 1;
        }
    }
    let mut passing = 0usize;
    for (t, g) in totals.iter().zip(&good) {
        if *t == 0 || (*g as f64) / (*t as f64) < CAPTURE_PASS_FRACTION {
            break;
        }
        passing += 1;
    }
    passing as f64 * width
}

/// Paired histograms of projection error before and after registration,
/// in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    /// Ascending edges; bin `i` covers `[edges[i], edges[i+1])`.
    pub bin_edges: Vec<f64>,
    /// Counts of initial errors per bin.
    pub initial: Vec<usize>,
    /// Counts of result errors per bin.
    pub result: Vec<usize>,
}

/// Bins (initial, result) projection-error pairs into two aligned
/// histograms.
///
/// Values outside the edge range are clamped into the first or last bin,
/// so each histogram's total mass equals the number of pairs.
pub fn pe_histogram(pairs: &[(f64, f64)], bin_edges: &[f64]) -> Result<HistogramPair> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    validate_edges(bin_edges)?;
    for &(a, b) in pairs {
        if !a.is_finite() || !b.is_finite() || a < 0.0 || b < 0.0 {
            return Err(Error::BadParams(format!(
                "projection errors must be finite and non-negative, got ({a}, {b})"
            )));
        }
    }
    let bins = bin_edges.len() - 1;
    let mut initial = vec![0usize; bins];
    let mut result = vec![0usize; bins];
    for &(a, b) in pairs {
        initial[clamped_bin(bin_edges, a)] += 1;
        result[clamped_bin(bin_edges, b)] += 1;
    }
    Ok(HistogramPair {
        bin_edges: bin_edges.to_vec(),
        initial,
        result,
    })
}

fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::BadParams(format!(
            "need at least two bin edges, got {}",
            edges.len()
        )));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::BadParams(
            "bin edges must be finite and strictly ascending".into(),
        ));
    }
    Ok(())
}

fn clamped_bin(edges: &[f64], value: f64) -> usize {
    let k = edges.partition_point(|&e| e <= value);
    k.saturating_sub(1).min(edges.len() - 2)
}

/// One initial-error bin of the convergence summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceBin {
    /// Left edge of the initial-error bin, millimetres.
    pub lo_mm: f64,
    /// Right edge of the initial-error bin, millimetres.
    pub hi_mm: f64,
    /// Traces whose initial error fell in the bin.
    pub total: usize,
    /// How many of those ended successfully.
    pub successes: usize,
    /// 25/50/75% quantiles of the reprojection distance at the end of the
    /// coarsest level, successes only; `None` when the bin holds no
    /// successful trace.
    pub coarse_mrpd_quartiles_mm: Option<[f64; 3]>,
    /// Mean iteration count spent on the coarsest level, successes only.
    pub mean_coarse_iterations: Option<f64>,
}

/// Where the coarsest level leaves successful registrations, by initial
/// error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    /// One entry per consecutive pair of input edges.
    pub bins: Vec<ConvergenceBin>,
    /// Mean coarsest-level iteration count over all successful traces.
    pub mean_coarse_iterations: Option<f64>,
}

/// Summarizes the coarsest-level result of successful registrations.
///
/// Each item pairs a trace with the initial mean target registration error
/// of its case. Items are grouped into `[lo, hi)` bins formed by
/// consecutive `mtre_bin_edges`; items outside the edge range are dropped
/// (these bins describe where a case started, so clamping would lie).
/// A trace counts as successful when it completed, its last recorded
/// reprojection distance is within the 2 mm criterion, and it recorded at
/// least one coarsest-level step.
pub fn convergence_summary(
    items: &[(f64, &RegistrationTrace)],
    mtre_bin_edges: &[f64],
) -> Result<ConvergenceSummary> {
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    validate_edges(mtre_bin_edges)?;
    for &(mtre, _) in items {
        if !mtre.is_finite() || mtre < 0.0 {
            return Err(Error::BadParams(format!(
                "initial error must be finite and non-negative, got {mtre}"
            )));
        }
    }

    let bin_count = mtre_bin_edges.len() - 1;
    let mut members: Vec<Vec<&RegistrationTrace>> = vec![Vec::new(); bin_count];
    let lo = mtre_bin_edges[0];
    let hi = mtre_bin_edges[bin_count];
    for &(mtre, trace) in items {
        if mtre < lo || mtre >= hi {
            continue;
        }
        members[clamped_bin(mtre_bin_edges, mtre)].push(trace);
    }

    let mut all_iters: Vec<f64> = Vec::new();
    let bins = members
        .iter()
        .enumerate()
        .map(|(i, traces)| {
            let mut coarse_mrpds = Vec::new();
            let mut coarse_iters = Vec::new();
            for t in traces {
                let last = t.steps.last();
                let success =
                    t.succeeded() && last.is_some_and(|s| s.mrpd_mm <= SUCCESS_MRPD_MM);
                if !success {
                    continue;
                }
                let Some(coarse_end) = t.steps.iter().rev().find(|s| s.level == 0) else {
                    continue;
                };
                coarse_mrpds.push(coarse_end.mrpd_mm);
                coarse_iters.push(t.steps.iter().filter(|s| s.level == 0).count() as f64);
            }
            coarse_mrpds.sort_by(f64::total_cmp);
            all_iters.extend_from_slice(&coarse_iters);
            ConvergenceBin {
                lo_mm: mtre_bin_edges[i],
                hi_mm: mtre_bin_edges[i + 1],
                total: traces.len(),
                successes: coarse_mrpds.len(),
                coarse_mrpd_quartiles_mm: if coarse_mrpds.is_empty() {
                    None
                } else {
                    Some([
                        quantile(&coarse_mrpds, 0.25),
                        quantile(&coarse_mrpds, 0.5),
                        quantile(&coarse_mrpds, 0.75),
                    ])
                },
                mean_coarse_iterations: mean(&coarse_iters),
            }
        })
        .collect();

    Ok(ConvergenceSummary {
        bins,
        mean_coarse_iterations: mean(&all_iters),
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Linearly interpolated quantile of pre-sorted data (the convention most
/// statistics packages default to).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty(), "quantile of nothing");
    let pos = q * (sorted.len() - 1) as f64;
    let below = pos.floor() as usize;
    let above = pos.ceil() as usize;
    sorted[below] + (sorted[above] - sorted[below]) * (pos - below as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{MotionVector, RigidTransform, Vec3};
    use crate::pipeline::{CaseStatus, IterationRecord, WeightStats};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(initial: f64, final_mrpd: f64) -> EvalRecord {
        EvalRecord::new(0, "V", initial, final_mrpd, final_mrpd, 5).unwrap()
    }

    /// Independent capture-range oracle: for every candidate prefix length
    /// it re-scans the full record list per bin with explicit interval
    /// comparisons instead of the incremental single-pass tally.
    fn capture_range_rescan(records: &[EvalRecord], width: f64, threshold: f64) -> f64 {
        let mut passing = 0usize;
        for k in 0.. {
            let lo = k as f64 * width;
            let hi = (k + 1) as f64 * width;
            let members: Vec<&EvalRecord> = records
                .iter()
                .filter(|r| r.initial_mtre_mm >= lo && r.initial_mtre_mm < hi)
                .collect();
            if records.iter().all(|r| r.initial_mtre_mm < lo) {
                break;
            }
            let good = members
                .iter()
                .filter(|r| r.final_mrpd_mm <= threshold)
                .count();
            if members.is_empty() || (good as f64) / (members.len() as f64) < 0.95 {
                return lo;
            }
            passing = k + 1;
        }
        passing as f64 * width
    }

    #[test]
    fn capture_range_matches_an_exhaustive_rescan() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..6 {
            let records: Vec<EvalRecord> = (0..600)
                .map(|i| {
                    let initial: f64 = rng.random_range(0.0..35.0);
                    let p_success = (1.0 - initial / 40.0).max(0.05);
                    let final_mrpd = if rng.random::<f64>() < p_success {
                        rng.random_range(0.0..2.0)
                    } else {
                        rng.random_range(2.5..30.0)
                    };
                    EvalRecord::new(i, "V", initial, final_mrpd, final_mrpd, 4).unwrap()
                })
                .collect();
            for width in [1.0, 2.5] {
                let summary = compute_metrics(&records, width).unwrap();
                assert_eq!(
                    summary.capture_range_mm,
                    capture_range_rescan(&records, width, SUCCESS_MRPD_MM),
                    "2 mm sweep diverged from the rescan (trial {trial}, width {width})"
                );
                assert_eq!(
                    summary.gross_capture_range_mm,
                    capture_range_rescan(&records, width, GROSS_SUCCESS_MRPD_MM),
                    "10 mm sweep diverged from the rescan (trial {trial}, width {width})"
                );
                let sr =
                    records.iter().filter(|r| r.final_mrpd_mm <= 2.0).count() as f64 / 600.0;
                assert_eq!(summary.success_rate, sr, "success rate disagrees with recount");
            }
        }
    }

    #[test]
    fn full_success_extends_the_capture_range_to_the_last_bin() {
        let records: Vec<EvalRecord> = (0..60)
            .map(|i| record(i as f64 * 0.5 + 0.25, 0.5))
            .collect();
        let summary = compute_metrics(&records, 1.0).unwrap();
        assert_eq!(summary.capture_range_mm, 30.0);
        assert_eq!(summary.gross_capture_range_mm, 30.0);
        assert_eq!(summary.success_rate, 1.0);
    }

    #[test]
    fn capture_range_stops_at_the_first_bin_below_95_percent() {
        // Twenty cases per bin; bins under 13 mm keep one failure (19/20 =
        // 95%), the bin [13, 14) takes two (18/20 = 90%), and later bins go
        // back to perfect so only contiguity can explain the answer.
        let mut records = Vec::new();
        for bin in 0..20 {
            let failures = match bin {
                b if b < 13 => 1,
                13 => 2,
                _ => 0,
            };
            for j in 0..20 {
                let initial = bin as f64 + (j as f64 + 0.5) / 20.0;
                let mrpd = if j < failures { 9.0 } else { 0.4 };
                records.push(record(initial, mrpd));
            }
        }
        let summary = compute_metrics(&records, 1.0).unwrap();
        assert_eq!(summary.capture_range_mm, 13.0);
        assert_eq!(
            summary.gross_capture_range_mm, 20.0,
            "9 mm misses count as gross successes"
        );
    }

    #[test]
    fn an_empty_interior_bin_ends_the_capture_range() {
        let mut records: Vec<EvalRecord> =
            (0..50).map(|i| record(i as f64 / 10.0, 0.3)).collect();
        records.push(record(8.5, 0.3));
        let summary = compute_metrics(&records, 1.0).unwrap();
        assert_eq!(
            summary.capture_range_mm, 5.0,
            "the gap at [5, 8) leaves those misalignments unmeasured"
        );
    }

    #[test]
    fn accuracy_statistics_cover_only_the_2mm_successes() {
        let records = vec![
            record(3.0, 1.0),
            record(4.0, 2.0),
            record(5.0, 9.0),
            record(6.0, 30.0),
        ];
        let summary = compute_metrics(&records, 1.0).unwrap();
        assert_eq!(summary.accuracy_mean_mm, Some(1.5));
        assert_eq!(summary.accuracy_std_mm, Some(0.5f64.sqrt()));
        assert_eq!(summary.success_rate, 0.5);
        assert_eq!(summary.gross_success_rate, 0.75);
    }

    #[test]
    fn accuracy_is_absent_without_successes_and_exact_with_one() {
        let none = compute_metrics(&[record(3.0, 25.0)], 1.0).unwrap();
        assert_eq!(none.accuracy_mean_mm, None);
        assert_eq!(none.accuracy_std_mm, None);
        let one = compute_metrics(&[record(3.0, 1.25)], 1.0).unwrap();
        assert_eq!(one.accuracy_mean_mm, Some(1.25));
        assert_eq!(one.accuracy_std_mm, Some(0.0));
    }

    #[test]
    fn record_constructor_sets_consistent_flags() {
        let hit = record(5.0, 2.0);
        assert!(hit.success_2mm && hit.success_10mm, "2.0 mm is inclusive");
        let near = record(5.0, 7.0);
        assert!(!near.success_2mm && near.success_10mm);
        let miss = record(5.0, 40.0);
        assert!(!miss.success_2mm && !miss.success_10mm);

        let mut fiddled = hit;
        fiddled.success_2mm = false;
        assert!(fiddled.validate().is_err(), "inconsistent flags must fail");
        assert!(
            EvalRecord::new(0, "V", -1.0, 0.5, 0.5, 1).is_err(),
            "negative metrics must fail"
        );
    }

    #[test]
    fn metric_inputs_are_validated() {
        assert!(matches!(compute_metrics(&[], 1.0), Err(Error::EmptyInput)));
        assert!(matches!(
            compute_metrics(&[record(1.0, 1.0)], 0.0),
            Err(Error::BadParams(_))
        ));
        assert!(matches!(
            compute_metrics(&[record(1.0, 1.0)], f64::NAN),
            Err(Error::BadParams(_))
        ));
        assert!(matches!(metrics_by_variant(&[], 1.0), Err(Error::EmptyInput)));
    }

    #[test]
    fn variant_grouping_is_sorted_and_complete() {
        let mut records = Vec::new();
        for (variant, mrpd) in [("B", 0.5), ("A", 9.0), ("B", 1.0), ("A", 8.0)] {
            records.push(EvalRecord::new(0, variant, 2.0, mrpd, mrpd, 3).unwrap());
        }
        let groups = metrics_by_variant(&records, 1.0).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].0, "A");
        assert_eq!(groups[1].0, "B");
        assert_eq!(groups[0].1.success_rate, 0.0);
        assert_eq!(groups[1].1.success_rate, 1.0);
        assert_eq!(groups[0].1.count + groups[1].1.count, records.len());
    }

    /// Naive per-value linear scan used as the binning oracle.
    fn naive_bin(edges: &[f64], v: f64) -> usize {
        let bins = edges.len() - 1;
        if v < edges[0] {
            return 0;
        }
        for i in 0..bins {
            if v >= edges[i] && v < edges[i + 1] {
                return i;
            }
        }
        bins - 1
    }

    #[test]
    fn histograms_match_a_naive_binning_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pairs: Vec<(f64, f64)> = (0..10_000)
            .map(|_| (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0)))
            .collect();
        let mut edges: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..55.0)).collect();
        edges.sort_by(f64::total_cmp);
        edges.dedup();

        let hist = pe_histogram(&pairs, &edges).unwrap();
        let bins = edges.len() - 1;
        let mut want_initial = vec![0usize; bins];
        let mut want_result = vec![0usize; bins];
        for &(a, b) in &pairs {
            want_initial[naive_bin(&edges, a)] += 1;
            want_result[naive_bin(&edges, b)] += 1;
        }
        assert_eq!(hist.initial, want_initial);
        assert_eq!(hist.result, want_result);
        assert_eq!(hist.initial.iter().sum::<usize>(), pairs.len());
        assert_eq!(hist.result.iter().sum::<usize>(), pairs.len());
    }

    #[test]
    fn a_single_pair_lands_in_the_expected_bins() {
        let edges = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
        let hist = pe_histogram(&[(10.0, 1.0)], &edges).unwrap();
        assert_eq!(hist.initial, vec![0, 0, 0, 0, 0, 1]);
        assert_eq!(hist.result, vec![1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn zero_pairs_pile_into_the_first_bin() {
        let edges = [0.0, 1.0, 2.0];
        let hist = pe_histogram(&[(0.0, 0.0); 7], &edges).unwrap();
        assert_eq!(hist.initial, vec![7, 0]);
        assert_eq!(hist.result, vec![7, 0]);
    }

    #[test]
    fn out_of_range_values_clamp_into_the_end_bins() {
        let edges = [5.0, 6.0, 7.0];
        let hist = pe_histogram(&[(1.0, 250.0), (7.0, 5.5)], &edges).unwrap();
        assert_eq!(hist.initial, vec![1, 1], "below-range and the right edge");
        assert_eq!(hist.result, vec![1, 1], "above-range clamps to the last bin");
    }

    #[test]
    fn histogram_inputs_are_validated() {
        let edges = [0.0, 1.0];
        assert!(matches!(pe_histogram(&[], &edges), Err(Error::EmptyInput)));
        assert!(matches!(
            pe_histogram(&[(0.1, 0.1)], &[3.0]),
            Err(Error::BadParams(_))
        ));
        assert!(matches!(
            pe_histogram(&[(0.1, 0.1)], &[1.0, 1.0]),
            Err(Error::BadParams(_))
        ));
        assert!(matches!(
            pe_histogram(&[(f64::NAN, 0.1)], &edges),
            Err(Error::BadParams(_))
        ));
    }

    /// Hand-built trace: `level_iters[i]` iterations recorded on level `i`,
    /// with the given reprojection distance at the end of level 0 and at
    /// the very end.
    fn trace(level_iters: &[usize], coarse_end_mrpd: f64, final_mrpd: f64) -> RegistrationTrace {
        let mut steps = Vec::new();
        for (level, &n) in level_iters.iter().enumerate() {
            for i in 0..n {
                let mut mrpd = 25.0;
                if level == 0 && i == n - 1 {
                    mrpd = coarse_end_mrpd;
                }
                if level == level_iters.len() - 1 && i == n - 1 {
                    mrpd = final_mrpd;
                }
                steps.push(IterationRecord {
                    level,
                    delta: MotionVector::new(Vec3::zeros(), Vec3::zeros()),
                    pe_mm: mrpd,
                    mrpd_mm: mrpd,
                    weights: WeightStats {
                        mean: 1.0,
                        max: 1.0,
                        zero_fraction: 0.0,
                    },
                });
            }
        }
        RegistrationTrace {
            steps,
            final_pose: RigidTransform::identity(),
            status: CaseStatus::Completed,
        }
    }

    #[test]
    fn constructed_quartiles_are_reproduced_exactly() {
        // Five successes at 1..=5 in one bin: linear interpolation puts the
        // quartiles exactly on 2, 3, 4. Four successes at 1..=4 in the
        // other: positions 0.75/1.5/2.25 give 1.75, 2.5, 3.25.
        let mut traces = Vec::new();
        for v in 1..=5 {
            traces.push((2.0, trace(&[v, 2], v as f64, 0.5)));
        }
        for v in 1..=4 {
            traces.push((12.0, trace(&[3, 1], v as f64, 0.5)));
        }
        let items: Vec<(f64, &RegistrationTrace)> =
            traces.iter().map(|(m, t)| (*m, t)).collect();
        let summary = convergence_summary(&items, &[0.0, 10.0, 20.0]).unwrap();

        assert_eq!(summary.bins.len(), 2);
        assert_eq!(summary.bins[0].coarse_mrpd_quartiles_mm, Some([2.0, 3.0, 4.0]));
        assert_eq!(
            summary.bins[1].coarse_mrpd_quartiles_mm,
            Some([1.75, 2.5, 3.25])
        );
        assert_eq!(summary.bins[0].mean_coarse_iterations, Some(3.0));
        assert_eq!(summary.bins[1].mean_coarse_iterations, Some(3.0));
        assert_eq!(summary.bins[0].total, 5);
        assert_eq!(summary.bins[0].successes, 5);
        // Overall mean over 5 + 4 successes: (1+2+3+4+5 + 3*4) / 9.
        assert_eq!(summary.mean_coarse_iterations, Some(27.0 / 9.0));
    }

    #[test]
    fn fully_converged_traces_give_tiny_quartiles() {
        let eps = 1e-4;
        let traces: Vec<(f64, RegistrationTrace)> = (0..10)
            .map(|i| (i as f64, trace(&[4, 3], eps * 0.5, eps * 0.25)))
            .collect();
        let items: Vec<(f64, &RegistrationTrace)> =
            traces.iter().map(|(m, t)| (*m, t)).collect();
        let summary = convergence_summary(&items, &[0.0, 5.0, 10.0]).unwrap();
        for bin in &summary.bins {
            let q = bin.coarse_mrpd_quartiles_mm.expect("successes in every bin");
            assert!(q.iter().all(|v| *v < eps), "quartiles {q:?} above {eps}");
        }
    }

    #[test]
    fn bins_without_successes_are_flagged_absent() {
        let good = trace(&[2, 2], 1.0, 0.5);
        let failed = RegistrationTrace {
            status: CaseStatus::Failed {
                reason: "pose left the numeric domain".into(),
            },
            ..trace(&[2, 2], 1.0, 0.5)
        };
        let big = trace(&[2, 2], 30.0, 30.0);
        let items = vec![(1.0, &good), (7.0, &failed), (8.0, &big)];
        let summary = convergence_summary(&items, &[0.0, 5.0, 10.0]).unwrap();

        assert_eq!(summary.bins[0].successes, 1);
        assert_eq!(summary.bins[1].total, 2);
        assert_eq!(summary.bins[1].successes, 0);
        assert_eq!(summary.bins[1].coarse_mrpd_quartiles_mm, None);
        assert_eq!(summary.bins[1].mean_coarse_iterations, None);
        assert_eq!(summary.mean_coarse_iterations, Some(2.0));
    }

    #[test]
    fn out_of_range_initial_errors_are_dropped_not_clamped() {
        let t = trace(&[2], 0.5, 0.5);
        let items = vec![(1.0, &t), (25.0, &t), (9.99, &t)];
        let summary = convergence_summary(&items, &[0.0, 5.0, 10.0]).unwrap();
        assert_eq!(summary.bins[0].total + summary.bins[1].total, 2);
        assert!(matches!(
            convergence_summary(&[], &[0.0, 1.0]),
            Err(Error::EmptyInput)
        ));
        assert!(matches!(
            convergence_summary(&items, &[1.0]),
            Err(Error::BadParams(_))
        ));
        assert!(matches!(
            convergence_summary(&[(f64::NAN, &t)], &[0.0, 1.0]),
            Err(Error::BadParams(_))
        ));
    }

    proptest! {
        #[test]
        fn capture_range_is_monotone_in_failures(
            raw in proptest::collection::vec((0.0..30.0f64, 0.0..20.0f64), 1..60),
            pick in 0usize..60,
        ) {
            let records: Vec<EvalRecord> = raw
                .iter()
                .enumerate()
                .map(|(i, &(m, e))| EvalRecord::new(i as u64, "V", m, e, e, 3).unwrap())
                .collect();
            let base = compute_metrics(&records, 1.0).unwrap();

            prop_assert!(base.success_rate >= 0.0 && base.success_rate <= 1.0);
            prop_assert!(base.gross_success_rate >= base.success_rate,
                "the 10 mm criterion is weaker");
            prop_assert!(base.gross_capture_range_mm >= base.capture_range_mm);

            let failures: Vec<usize> = records
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.success_2mm)
                .map(|(i, _)| i)
                .collect();
            if !failures.is_empty() && records.len() > 1 {
                let mut fewer = records.clone();
                fewer.remove(failures[pick % failures.len()]);
                let better = compute_metrics(&fewer, 1.0).unwrap();
                prop_assert!(better.capture_range_mm >= base.capture_range_mm,
                    "removing a failure shrank the capture range");
            }

            let mut more = records.clone();
            more.push(EvalRecord::new(999, "V", (pick as f64 * 0.7) % 30.0, 15.0, 15.0, 3).unwrap());
            let worse = compute_metrics(&more, 1.0).unwrap();
            prop_assert!(worse.capture_range_mm <= base.capture_range_mm,
                "adding a failure grew the capture range");
        }

        #[test]
        fn histogram_mass_is_conserved(
            values in proptest::collection::vec((0.0..100.0f64, 0.0..100.0f64), 1..200),
        ) {
            let edges = [0.0, 5.0, 20.0, 50.0];
            let hist = pe_histogram(&values, &edges).unwrap();
            prop_assert_eq!(hist.initial.iter().sum::<usize>(), values.len());
            prop_assert_eq!(hist.result.iter().sum::<usize>(), values.len());
        }
    }
}
