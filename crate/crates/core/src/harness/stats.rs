//! Summary statistics and CSV output.

use std::io::Write;

use serde::Serialize;

use super::{AttackReport, HarnessError};

/// Column order of the per-iteration CSV.
pub const REPORT_COLUMNS: [&str; 12] = [
    "scenario",
    "load_level",
    "iteration",
    "seed",
    "success",
    "reaction_ms",
    "tracked_pages",
    "filtered_pages",
    "extracted_pages",
    "observation_s",
    "search_s",
    "requests",
];

pub const HISTOGRAM_COLUMNS: [&str; 3] = ["bin_ms", "count", "normalized"];

/// Median of a sample; the mean of the two middle values for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Median absolute deviation from the median.
pub fn mad(values: &[f64]) -> Option<f64> {
    let m = median(values)?;
    let dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    /// Lower edge of a one-millisecond bin.
    pub bin_ms: i64,
    pub count: u64,
    /// Count relative to the fullest bin.
    pub normalized: f64,
}

/// One-millisecond histogram covering every bin from the smallest to the
/// largest occupied one.
pub fn histogram(values_ms: &[f64]) -> Vec<HistogramBin> {
    let bins: Vec<i64> = values_ms
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| v.floor() as i64)
        .collect();
    let (Some(&lo), Some(&hi)) = (bins.iter().min(), bins.iter().max()) else {
        return Vec::new();
    };
    let mut counts = vec![0u64; (hi - lo + 1) as usize];
    for b in bins {
        counts[(b - lo) as usize] += 1;
    }
    let max = *counts.iter().max().expect("nonempty") as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_ms: lo + i as i64,
            count,
            normalized: count as f64 / max,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryStats {
    pub iterations: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful iterations.
    pub median_extracted_pages: Option<f64>,
    pub mad_extracted_pages: Option<f64>,
    pub median_observation_s: Option<f64>,
    pub median_search_s: Option<f64>,
    pub median_reaction_ms: Option<f64>,
    /// Mean share of tracked pages removed by preprocessing.
    pub mean_filter_reduction: Option<f64>,
    pub reaction_histogram: Vec<HistogramBin>,
}

pub fn summarize(reports: &[AttackReport]) -> Result<SummaryStats, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let ok: Vec<&AttackReport> = reports.iter().filter(|r| r.success).collect();
    let of = |f: fn(&AttackReport) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let extracted = of(|r| r.extracted_pages as f64);
    let reactions: Vec<f64> = reports.iter().filter_map(|r| r.reaction_ms).collect();
    let reductions: Vec<f64> = reports
        .iter()
        .filter(|r| r.tracked_pages > 0)
        .map(|r| 1.0 - r.filtered_pages as f64 / r.tracked_pages as f64)
        .collect();
    Ok(SummaryStats {
        iterations: reports.len(),
        successes: ok.len(),
        success_rate: ok.len() as f64 / reports.len() as f64,
        median_extracted_pages: median(&extracted),
        mad_extracted_pages: mad(&extracted),
        median_observation_s: median(&of(|r| r.observation_ms / 1000.0)),
        median_search_s: median(&of(|r| r.search_ms / 1000.0)),
        median_reaction_ms: median(&reactions),
        mean_filter_reduction: (!reductions.is_empty())
            .then(|| reductions.iter().sum::<f64>() / reductions.len() as f64),
        reaction_histogram: histogram(&reactions),
    })
}

pub fn write_reports_csv<W: Write>(reports: &[AttackReport], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for r in reports {
        w.write_record([
            r.scenario.label().to_string(),
            r.load_level.to_string(),
            r.iteration.to_string(),
            r.seed.to_string(),
            r.success.to_string(),
            r.reaction_ms.map_or(String::new(), |v| format!("{v:.3}")),
            r.tracked_pages.to_string(),
            r.filtered_pages.to_string(),
            r.extracted_pages.to_string(),
            format!("{:.6}", r.observation_ms / 1000.0),
            format!("{:.6}", r.search_ms / 1000.0),
            r.requests_made.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTOGRAM_COLUMNS)?;
    for b in bins {
        w.write_record([
            b.bin_ms.to_string(),
            b.count.to_string(),
            format!("{:.6}", b.normalized),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 5.0, 7.0]), Some(5.0));
        assert_eq!(mad(&[3.0, 5.0, 7.0]), Some(2.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(mad(&[4.0; 9]), Some(0.0));
    }

    #[test]
    fn single_bin_histogram() {
        let h = histogram(&[4.0, 4.0, 4.0]);
        assert_eq!(
            h,
            vec![HistogramBin {
                bin_ms: 4,
                count: 3,
                normalized: 1.0
            }]
        );
    }

    #[test]
    fn histogram_fills_gaps() {
        let h = histogram(&[1.2, 1.9, 3.5]);
        let counts: Vec<(i64, u64)> = h.iter().map(|b| (b.bin_ms, b.count)).collect();
        assert_eq!(counts, vec![(1, 2), (2, 0), (3, 1)]);
        assert_eq!(h[2].normalized, 0.5);
        assert!(histogram(&[]).is_empty());
    }
}
