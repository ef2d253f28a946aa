//! Monte-Carlo experiment harness: repeated random splits, per-trial
//! reports, the aggregated metrics (empirical miscoverage, mean level, MSE,
//! coverage gap, estimator standard deviation), the calibration-size
//! consistency sweep, and the covariance diagnostic behind the first-order
//! approximation of the coverage guarantee.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{split_sample, trial_rng, FeatureMatrix, ScoreTable};
use crate::engine::{run_stbcp, EngineInputs, Flag, TailProbability};
use crate::error::Result;
use crate::size_rule::SizeRule;
use crate::transform::ScoreTransform;

/// Everything an experiment shares across trials.
#[derive(Clone, Copy)]
pub struct ExperimentSetup<'a> {
    pub table: &'a ScoreTable,
    pub features: Option<&'a FeatureMatrix>,
    pub rule: &'a SizeRule,
    pub transform: &'a dyn ScoreTransform,
    pub oracle: Option<&'a dyn TailProbability>,
}

/// One trial's externally visible quantities.
#[derive(Debug, Clone, Serialize)]
pub struct TrialReport {
    pub trial: usize,
    pub alpha_tilde: f64,
    pub loo: f64,
    pub corrected: f64,
    pub hit: bool,
    pub set_size: usize,
    pub flags: Vec<Flag>,
}

/// Metrics aggregated over trials.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsSummary {
    pub miscov: f64,
    pub mean_alpha_tilde: f64,
    pub mse: f64,
    pub gap: f64,
    pub std: f64,
    pub m: usize,
    pub flagged_trials: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<Flag>,
}

/// Runs `m` independent trials. Each trial owns the rng stream derived from
/// `(master_seed, trial_index)`, so results do not depend on scheduling.
pub fn run_experiment(
    setup: &ExperimentSetup<'_>,
    n: usize,
    m: usize,
    master_seed: u64,
) -> Result<(Vec<TrialReport>, MetricsSummary)> {
    assert!(m >= 1, "need at least one trial");
    let reports: Result<Vec<TrialReport>> = (0..m)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(master_seed, trial as u64);
            let split = split_sample(setup.table.num_samples(), n, &mut rng)?;
            let outcome = run_stbcp(EngineInputs {
                table: setup.table,
                features: setup.features,
                split: &split,
                rule: setup.rule,
                transform: setup.transform,
                oracle: setup.oracle,
            })?;
            let truth = setup.table.true_label(split.test_index());
            Ok(TrialReport {
                trial,
                alpha_tilde: outcome.alpha_tilde,
                loo: outcome.loo,
                corrected: outcome.corrected,
                hit: outcome.set.contains(&truth),
                set_size: outcome.set.len(),
                flags: outcome.flags,
            })
        })
        .collect();
    let reports = reports?;
    let summary = summarize(&reports);
    Ok((reports, summary))
}

/// Aggregates trial reports into the metric set.
pub fn summarize(reports: &[TrialReport]) -> MetricsSummary {
    let m = reports.len();
    assert!(m >= 1);
    let mf = m as f64;
    let miscov = reports.iter().filter(|r| !r.hit).count() as f64 / mf;
    let mean_alpha_tilde = reports.iter().map(|r| r.alpha_tilde).sum::<f64>() / mf;
    let mse = reports
        .iter()
        .map(|r| (r.loo - mean_alpha_tilde).powi(2))
        .sum::<f64>()
        / mf;
    let gap = reports.iter().map(|r| (r.loo - miscov).abs()).sum::<f64>() / mf;
    let mean_loo = reports.iter().map(|r| r.loo).sum::<f64>() / mf;
    let mut flags = Vec::new();
    let std = if m == 1 {
        flags.push(Flag::StdUndefined);
        0.0
    } else {
        (reports
            .iter()
            .map(|r| (r.loo - mean_loo).powi(2))
            .sum::<f64>()
            / (mf - 1.0))
            .sqrt()
    };
    let flagged_trials = reports.iter().filter(|r| !r.flags.is_empty()).count();
    MetricsSummary {
        miscov,
        mean_alpha_tilde,
        mse,
        gap,
        std,
        m,
        flagged_trials,
        flags,
    }
}

/// One row of the calibration-size sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub mse: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `log(mse)` against `log(n)`.
    pub log_log_slope: f64,
}

/// Runs the experiment at each calibration size and fits the log-log MSE
/// slope. Per-size seeds derive from the master seed and the position in
/// the list.
pub fn consistency_sweep(
    setup: &ExperimentSetup<'_>,
    n_list: &[usize],
    m: usize,
    master_seed: u64,
) -> Result<SweepResult> {
    assert!(
        n_list.windows(2).all(|w| w[0] < w[1]),
        "calibration sizes must be ascending"
    );
    let mut rows = Vec::with_capacity(n_list.len());
    for (idx, &n) in n_list.iter().enumerate() {
        let seed = crate::data::derive_stream_seed(master_seed, idx as u64);
        let (_, summary) = run_experiment(setup, n, m, seed)?;
        rows.push(SweepRow {
            n,
            mse: summary.mse,
            std: summary.std,
        });
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), r.mse.max(f64::MIN_POSITIVE).ln()))
        .collect();
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    Ok(SweepResult {
        rows,
        log_log_slope: if sxx > 0.0 { sxy / sxx } else { 0.0 },
    })
}

/// Sample covariance between the miss indicator and `1 / alpha_tilde`
/// across trials. Under the first-order approximation of the coverage
/// bound this covariance is the neglected term; it is typically negative in
/// low-coverage regimes.
pub fn taylor_diagnostic(reports: &[TrialReport]) -> f64 {
    assert!(reports.len() >= 2, "need at least two trials");
    let m = reports.len() as f64;
    let misses: Vec<f64> = reports
        .iter()
        .map(|r| if r.hit { 0.0 } else { 1.0 })
        .collect();
    let inv_alpha: Vec<f64> = reports.iter().map(|r| 1.0 / r.alpha_tilde).collect();
    let mean_miss = misses.iter().sum::<f64>() / m;
    let mean_inv = inv_alpha.iter().sum::<f64>() / m;
    misses
        .iter()
        .zip(&inv_alpha)
        .map(|(a, b)| (a - mean_miss) * (b - mean_inv))
        .sum::<f64>()
        / (m - 1.0)
}

/// Re-runs the trial sequence comparing the closed-form level against the
/// grid-infimum oracle; returns the largest absolute disagreement.
pub fn oracle_agreement(
    setup: &ExperimentSetup<'_>,
    n: usize,
    m: usize,
    master_seed: u64,
    grid_step: f64,
) -> Result<f64> {
    let gaps: Result<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(master_seed, trial as u64);
            let split = split_sample(setup.table.num_samples(), n, &mut rng)?;
            let inputs = EngineInputs {
                table: setup.table,
                features: setup.features,
                split: &split,
                rule: setup.rule,
                transform: setup.transform,
                oracle: setup.oracle,
            };
            let outcome = run_stbcp(inputs)?;
            let oracle = crate::engine::alpha_tilde_infimum(inputs, grid_step)?;
            Ok((outcome.alpha_tilde - oracle).abs())
        })
        .collect();
    Ok(gaps?.into_iter().fold(0.0, f64::max))
}

/// `trials.csv`: one row per trial, flags joined by `;`.
pub fn write_trials_csv<W: Write>(reports: &[TrialReport], mut writer: W) -> Result<()> {
    writeln!(writer, "trial,alpha_tilde,loo,corrected,hit,set_size,flags")?;
    for r in reports {
        let mut flags = String::new();
        for (i, f) in r.flags.iter().enumerate() {
            if i > 0 {
                flags.push(';');
            }
            let _ = write!(flags, "{f}");
        }
        writeln!(
            writer,
            "{},{},{},{},{},{},{}",
            r.trial, r.alpha_tilde, r.loo, r.corrected, r.hit as u8, r.set_size, flags
        )?;
    }
    Ok(())
}

pub fn save_trials_csv(reports: &[TrialReport], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_trials_csv(reports, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn save_metrics_json(summary: &MetricsSummary, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut writer, summary)
        .map_err(|e| crate::error::Error::Validation(format!("serialize metrics: {e}")))?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}
