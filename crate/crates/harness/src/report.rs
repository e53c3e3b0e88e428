//! Cross-run comparison of episodes-to-convergence and smoothed learning curves.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use isarlab_core::metrics::MetricsRecord;

use crate::error::{HarnessError, Result};
use crate::experiment::{RunSummary, SeedSummary};
use crate::output::{read_json, read_metrics_csv, seed_csv_name};

/// Linear-interpolation quantile of sorted data, `q ∈ [0, 1]`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    /// Episodes to convergence, or total episodes run when censored.
    pub episodes: u64,
    pub censored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub censored: usize,
    /// Baseline median / this median.
    pub speedup: f64,
    pub per_seed: Vec<SeedRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub variants: Vec<VariantStats>,
}

pub fn seed_rows(summary: &[SeedSummary]) -> Vec<SeedRow> {
    summary
        .iter()
        .map(|s| SeedRow {
            seed: s.seed,
            episodes: s.episodes_to_convergence.unwrap_or(s.total_episodes),
            censored: !s.converged(),
        })
        .collect()
}

pub fn variant_stats(variant: &str, rows: Vec<SeedRow>) -> Result<VariantStats> {
    if rows.is_empty() {
        return Err(HarnessError::Report(format!("variant '{variant}' has no completed seeds")));
    }
    let mut v: Vec<f64> = rows.iter().map(|r| r.episodes as f64).collect();
    v.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
    Ok(VariantStats {
        variant: variant.into(),
        median: quantile(&v, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
        censored: rows.iter().filter(|r| r.censored).count(),
        speedup: f64::NAN,
        per_seed: rows,
    })
}

/// Compare variants given as (name, per-seed rows). The first is the baseline.
///
/// Non-converged seeds are kept, censored at the number of episodes they ran, and
/// flagged; medians of variants with censored seeds are therefore lower bounds.
pub fn compare(variants: &[(String, Vec<SeedRow>)]) -> Result<ComparisonReport> {
    if variants.len() < 2 {
        return Err(HarnessError::Report("comparison needs at least two variants".into()));
    }
    let mut out: Vec<VariantStats> = variants.iter().map(|(n, rows)| variant_stats(n, rows.clone())).collect::<Result<_>>()?;
    let base = out[0].median;
    for v in &mut out {
        v.speedup = base / v.median;
    }
    Ok(ComparisonReport { baseline: variants[0].0.clone(), variants: out })
}

pub fn load_summary(run_dir: &Path) -> Result<RunSummary> {
    read_json(&run_dir.join("summary.json"))
}

/// Compare run directories (first = baseline) using their summaries.
pub fn compare_runs(run_dirs: &[&Path]) -> Result<ComparisonReport> {
    let variants = run_dirs
        .iter()
        .map(|d| {
            let s = load_summary(d)?;
            let rows = seed_rows(&s.seeds);
            if rows.is_empty() {
                log::warn!("run '{}' has no completed seeds", s.run_id);
            }
            Ok((s.run_id, rows))
        })
        .collect::<Result<Vec<_>>>()?;
    compare(&variants)
}

impl ComparisonReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10} {:>9} {:>8}", "variant", "median", "q1", "q3", "censored", "speedup");
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{:<24} {:>10.1} {:>10.1} {:>10.1} {:>9} {:>8.3}",
                v.variant, v.median, v.q1, v.q3, v.censored, v.speedup
            );
        }
        let _ = writeln!(s, "\nper seed (episodes, * = not converged):");
        for v in &self.variants {
            let cells: Vec<String> = v
                .per_seed
                .iter()
                .map(|r| format!("{}:{}{}", r.seed, r.episodes, if r.censored { "*" } else { "" }))
                .collect();
            let _ = writeln!(s, "  {:<22} {}", v.variant, cells.join(" "));
        }
        s
    }
}

pub const CURVES_HEADER: [&str; 5] = ["variant", "episode", "success_rate", "episode_length", "total_reward"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: String,
    pub episode: u64,
    pub success_rate: f64,
    pub episode_length: f64,
    pub total_reward: f64,
}

/// Trailing mean over the last `window` values (fewer at the start).
pub fn window_mean(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..xs.len())
        .map(|i| {
            let w = &xs[(i + 1).saturating_sub(window)..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// Per-episode means across seeds (episode = row position in each seed's series),
/// smoothed with a trailing window.
pub fn curves(variant: &str, series: &[Vec<MetricsRecord>], window: usize) -> Vec<CurvePoint> {
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    let mut success = Vec::with_capacity(len);
    let mut steps = Vec::with_capacity(len);
    let mut reward = Vec::with_capacity(len);
    for i in 0..len {
        let rows: Vec<&MetricsRecord> = series.iter().filter_map(|s| s.get(i)).collect();
        let n = rows.len() as f64;
        success.push(rows.iter().map(|r| r.success as f64).sum::<f64>() / n);
        steps.push(rows.iter().map(|r| r.steps as f64).sum::<f64>() / n);
        reward.push(rows.iter().map(|r| r.total_reward).sum::<f64>() / n);
    }
    let (s, l, r) = (window_mean(&success, window), window_mean(&steps, window), window_mean(&reward, window));
    (0..len)
        .map(|i| CurvePoint {
            variant: variant.into(),
            episode: i as u64 + 1,
            success_rate: s[i],
            episode_length: l[i],
            total_reward: r[i],
        })
        .collect()
}

pub fn curves_csv(points: &[CurvePoint]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CURVES_HEADER)?;
    for p in points {
        w.serialize(p)?;
    }
    w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))
}

/// Curves for one run directory, averaging its seed CSVs.
pub fn run_curves(run_dir: &Path, window: usize) -> Result<Vec<CurvePoint>> {
    let summary = load_summary(run_dir)?;
    let series = summary
        .seeds
        .iter()
        .map(|s| read_metrics_csv(&run_dir.join(seed_csv_name(s.seed))))
        .collect::<Result<Vec<_>>>()?;
    Ok(curves(&summary.run_id, &series, window))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub run_id: String,
    pub median: f64,
    pub iqr: f64,
    pub censored: usize,
    /// Mean length of successful episodes across seeds.
    pub mean_success_path: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub points: Vec<SweepPoint>,
    pub best_value: usize,
    pub note: String,
}

pub fn sweep_report(axis: &str, points: Vec<SweepPoint>) -> Result<SweepReport> {
    let best = points
        .iter()
        .min_by(|a, b| a.median.total_cmp(&b.median))
        .ok_or_else(|| HarnessError::Report("empty sweep".into()))?;
    let note = if axis == "N" {
        format!(
            "best N = {} (median {:.0} episodes); mean successful path length there: {:.1} steps. \
             Check by eye whether the best N tracks the typical path length.",
            best.value, best.median, best.mean_success_path
        )
    } else {
        format!("best {axis} = {} (median {:.0} episodes)", best.value, best.median)
    };
    Ok(SweepReport { axis: axis.into(), best_value: best.value, points, note })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[u64]) -> Vec<SeedRow> {
        v.iter().enumerate().map(|(i, &e)| SeedRow { seed: i as u64, episodes: e, censored: false }).collect()
    }

    #[test]
    fn speedup_of_identical_runs_is_one() {
        let r = compare(&[("a".into(), rows(&[3, 1, 2])), ("b".into(), rows(&[1, 2, 3]))]).unwrap();
        assert_eq!(r.variants[1].speedup, 1.0);
    }

    #[test]
    fn half_the_episodes_is_double_speed() {
        let r = compare(&[("baseline".into(), rows(&[1_200; 3])), ("isar".into(), rows(&[600; 3]))]).unwrap();
        assert_eq!(r.variants[1].speedup, 2.0);
        assert_eq!(r.baseline, "baseline");
    }

    #[test]
    fn empty_variant_is_an_error() {
        assert!(compare(&[("a".into(), rows(&[1])), ("b".into(), vec![])]).is_err());
        assert!(compare(&[("a".into(), rows(&[1]))]).is_err());
    }

    #[test]
    fn quartiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn window_one_is_identity_and_monotone_stays_monotone() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64).sqrt()).collect();
        assert_eq!(window_mean(&xs, 1), xs);
        let sm = window_mean(&xs, 7);
        assert!(sm.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn curves_header_contract() {
        let csv = curves_csv(&[]).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "variant,episode,success_rate,episode_length,total_reward\n");
    }
}
