//! Verification suites: each one checks a theoretical claim on synthetic
//! data and reports machine-readable pass/fail results with the measured
//! statistics. The CLI exposes the named suites; the acceptance tests run
//! them (plus a few direct checks) with pinned seeds.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::data::{derive_stream_seed, split_sample, trial_rng, FeatureMatrix, ScoreTable};
use crate::engine::{
    alpha_tilde_infimum, e_variable, pseudo_alpha_infimum, run_stbcp, EngineInputs, Flag,
};
use crate::error::{Error, Result};
use crate::experiment::{consistency_sweep, run_experiment, ExperimentSetup};
use crate::size_rule::{BinningParams, EntropyBounds, SizeRule, TrialBudgets};
use crate::synth::{generate, GeneratorSpec, TwoPointLaw};
use crate::threshold::{w_classification, w_regression, Threshold};
use crate::transform::{improve, objective_j, ScoreTransform, Transform};

/// One verified claim with its measured statistic.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// A suite's full report; `passed` is the conjunction of its checks.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.to_string(),
            passed: true,
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.passed &= passed;
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// The suites the CLI can run by name.
pub const SUITE_NAMES: &[&str] = &[
    "invariance",
    "consistency",
    "optimality",
    "epsilon",
    "evariable",
    "oracle",
];

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "invariance" => invariance_suite(seed),
        "consistency" => consistency_suite(seed),
        "optimality" => optimality_suite(seed),
        "epsilon" => epsilon_suite(seed),
        "evariable" => evariable_suite(seed),
        "oracle" => oracle_suite(seed),
        other => Err(Error::Validation(format!(
            "unknown suite `{other}` (expected one of {SUITE_NAMES:?})"
        ))),
    }
}

/// `s -> s^p`, strictly increasing on the non-negative half-line.
#[derive(Debug, Clone, Copy)]
pub struct MonotonePower(pub f64);

impl ScoreTransform for MonotonePower {
    fn apply(&self, s: f64, _w: Threshold, _p: Option<f64>) -> Result<f64> {
        Ok(s.powf(self.0))
    }
    fn at_infinite_threshold(&self, s: f64) -> f64 {
        s.powf(self.0)
    }
    fn strictly_increasing(&self) -> bool {
        true
    }
    fn name(&self) -> String {
        format!("power:{}", self.0)
    }
}

/// `s -> exp(s) - 1`, strictly increasing with `h(0) = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ExpMinusOne;

impl ScoreTransform for ExpMinusOne {
    fn apply(&self, s: f64, _w: Threshold, _p: Option<f64>) -> Result<f64> {
        Ok(s.exp_m1())
    }
    fn at_infinite_threshold(&self, s: f64) -> f64 {
        s.exp_m1()
    }
    fn strictly_increasing(&self) -> bool {
        true
    }
    fn name(&self) -> String {
        "expm1".into()
    }
}

fn random_score_table(rng: &mut impl Rng, samples: usize, labels: usize, lo: f64, hi: f64) -> ScoreTable {
    let rows: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            (0..labels)
                .map(|_| lo + (hi - lo) * rng.random::<f64>())
                .collect()
        })
        .collect();
    let true_labels: Vec<usize> = (0..samples).map(|_| rng.random_range(0..labels)).collect();
    ScoreTable::new(rows, true_labels).expect("uniform scores validate")
}

fn random_features(rng: &mut impl Rng, samples: usize, dim: usize) -> FeatureMatrix {
    let rows: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect())
        .collect();
    FeatureMatrix::new(rows).expect("uniform features validate")
}

/// Closed-form levels against the grid-infimum oracle on random small
/// instances. The equivalence is a theorem for strictly increasing
/// transforms when the symmetric budgets do not vary with the candidate
/// label, so feature-and-data rules enter either with degenerate binning
/// (t_min = t_max, the full pipeline still runs) or rejection-sampled to a
/// label-stable budget grid.
pub fn oracle_suite(seed: u64) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut report = SuiteReport::new("oracle");
    let grid_step = 1e-5;
    let tolerance = 2.0 * grid_step;
    let instances = 1000;
    let mut max_gap_test: f64 = 0.0;
    let mut max_gap_pseudo: f64 = 0.0;
    let mut data_rule_instances = 0usize;

    for idx in 0..instances {
        let mut rng = trial_rng(seed, idx);
        let num_labels = rng.random_range(2..=10);
        let n = rng.random_range(5..=20);
        let table = random_score_table(&mut rng, n + 1, num_labels, 0.2, 3.2);
        let features = random_features(&mut rng, n + 1, 3);
        let split = split_sample(n + 1, n, &mut rng)?;

        let max_budget = num_labels - 1; // keep the cutoff finite
        let rule = match idx % 3 {
            0 => SizeRule::Constant {
                t: rng.random_range(1..=max_budget),
            },
            1 => {
                let t_min = rng.random_range(1..=max_budget);
                let t_max = rng.random_range(t_min..=max_budget);
                SizeRule::FeatureEntropy {
                    binning: BinningParams {
                        t_min,
                        t_max,
                        power: 0.3 + rng.random::<f64>() * 2.0,
                        entropy_bounds: EntropyBounds::DataDriven,
                    },
                }
            }
            _ => {
                // the closed form is exact only when the symmetric budgets
                // collapse onto the pseudo budgets (then h_i^y = h_i); draw
                // until the instance satisfies that, falling back to
                // degenerate binning, which satisfies it by construction
                data_rule_instances += 1;
                let mut chosen = None;
                for attempt in 0..200 {
                    let t_min = rng.random_range(1..=max_budget);
                    let t_max = if idx % 2 == 0 || attempt == 199 {
                        t_min
                    } else {
                        rng.random_range(t_min..=max_budget)
                    };
                    let candidate = SizeRule::DataFeatureEntropy {
                        binning: BinningParams {
                            t_min,
                            t_max,
                            power: 0.3 + rng.random::<f64>() * 2.0,
                            entropy_bounds: EntropyBounds::DataDriven,
                        },
                        k: rng.random_range(1..=6),
                        reduced_dim: 2,
                    };
                    let budgets =
                        TrialBudgets::compute(&candidate, &table, Some(&features), &split)?;
                    let stable = !budgets.varies_with_label()
                        && (0..n).all(|i| budgets.symmetric(i, 0) == budgets.pseudo[i]);
                    if stable {
                        chosen = Some(candidate);
                        break;
                    }
                }
                chosen.expect("degenerate binning always satisfies the stability condition")
            }
        };

        let eps_transform = Transform::IwEps(1e-3);
        let transform: &dyn ScoreTransform = if idx % 2 == 0 {
            &Transform::Identity
        } else {
            &eps_transform
        };
        let inputs = EngineInputs {
            table: &table,
            features: Some(&features),
            split: &split,
            rule: &rule,
            transform,
            oracle: None,
        };
        let outcome = run_stbcp(inputs)?;
        let oracle_level = alpha_tilde_infimum(inputs, grid_step)?;
        max_gap_test = max_gap_test.max((outcome.alpha_tilde - oracle_level).abs());

        let i = rng.random_range(0..n);
        let pseudo_oracle = pseudo_alpha_infimum(inputs, i, grid_step)?;
        max_gap_pseudo = max_gap_pseudo.max((outcome.pseudo_alphas[i] - pseudo_oracle).abs());
    }

    let elapsed = started.elapsed().as_secs_f64();
    report.check(
        "test_level_matches_oracle",
        max_gap_test <= tolerance,
        format!("max |closed - infimum| = {max_gap_test:.2e} over {instances} instances (tolerance {tolerance:.1e})"),
    );
    report.check(
        "pseudo_level_matches_oracle",
        max_gap_pseudo <= tolerance,
        format!("max pseudo gap = {max_gap_pseudo:.2e} (tolerance {tolerance:.1e})"),
    );
    report.check(
        "runtime",
        elapsed < 120.0,
        format!("{elapsed:.1}s for {instances} instances ({data_rule_instances} with the data rule), budget 120s"),
    );
    Ok(report)
}

/// Mean of the test e-variable at the true label over exchangeable draws,
/// per transform.
pub fn evariable_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("evariable");
    let trials = 100_000usize;
    let n = 10usize;
    let num_labels = 4usize;
    let budget = 1usize;
    let transforms: Vec<(&str, Transform)> = vec![
        ("identity", Transform::Identity),
        ("iw", Transform::Iw),
        ("iro", Transform::IRo),
        ("iw_eps", Transform::IwEps(1e-3)),
    ];
    for (stream, (name, transform)) in transforms.iter().enumerate() {
        let mut rng = trial_rng(seed, stream as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut zero_mass = 0usize;
        for _ in 0..trials {
            // n + 1 exchangeable rows; each element is transformed with its
            // own row's threshold at the shared constant budget
            let mut h = Vec::with_capacity(n + 1);
            for _ in 0..=n {
                let row: Vec<f64> = (0..num_labels).map(|_| rng.random::<f64>()).collect();
                let label = rng.random_range(0..num_labels);
                let w = w_classification(&row, budget)?;
                h.push(transform.apply(row[label], w, None)?);
            }
            let e = match e_variable(&h[..n], h[n]) {
                Ok(e) => e,
                Err(Error::ZeroMass) => {
                    zero_mass += 1;
                    0.0
                }
                Err(e) => return Err(e),
            };
            sum += e;
            sum_sq += e * e;
        }
        let mean = sum / trials as f64;
        let var = (sum_sq / trials as f64 - mean * mean).max(0.0);
        let se = (var / trials as f64).sqrt();
        let deviation = (mean - 1.0).abs();
        report.check(
            format!("mean_e_{name}"),
            deviation <= 3.0 * se && zero_mass <= 5,
            format!(
                "mean = {mean:.5}, |mean - 1| = {deviation:.2e}, 3 SE = {:.2e}, zero-mass trials = {zero_mass}",
                3.0 * se
            ),
        );
    }
    Ok(report)
}

/// Prediction sets agree across strictly increasing transforms (and the
/// step transform at its closed-form level) under label-independent rules,
/// trial by trial; miscoverage columns coincide exactly.
pub fn invariance_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("invariance");
    let data = generate(&GeneratorSpec::DirichletSoftmax {
        concentration: 0.4,
        num_labels: 8,
        temperature: 1.0,
        size: 400,
        seed: derive_stream_seed(seed, 1),
    })?;
    let trials = 500usize;
    let n = 30usize;
    let rules: Vec<(&str, SizeRule)> = vec![
        ("constant", SizeRule::Constant { t: 2 }),
        (
            "feature_entropy",
            SizeRule::FeatureEntropy {
                binning: BinningParams {
                    t_min: 1,
                    t_max: 5,
                    power: 1.0,
                    entropy_bounds: EntropyBounds::DataDriven,
                },
            },
        ),
    ];
    let square = MonotonePower(2.0);
    let expm1 = ExpMinusOne;
    let eps = Transform::IwEps(1e-4);
    for (rule_name, rule) in &rules {
        let mut equal_sets = 0usize;
        let mut id_misses = 0usize;
        let mut iw_misses = 0usize;
        for trial in 0..trials {
            let mut rng = trial_rng(derive_stream_seed(seed, 2), trial as u64);
            let split = split_sample(data.table.num_samples(), n, &mut rng)?;
            let base = EngineInputs {
                table: &data.table,
                features: None,
                split: &split,
                rule,
                transform: &Transform::Identity,
                oracle: None,
            };
            let reference = run_stbcp(base)?;
            let mut all_equal = true;
            for transform in [&square as &dyn ScoreTransform, &expm1, &eps] {
                let outcome = run_stbcp(EngineInputs { transform, ..base })?;
                all_equal &= outcome.set == reference.set;
            }
            let iw_outcome = run_stbcp(EngineInputs {
                transform: &Transform::Iw,
                ..base
            })?;
            all_equal &= iw_outcome.set == reference.set;
            let truth = data.table.true_label(split.test_index());
            if !reference.set.contains(&truth) {
                id_misses += 1;
            }
            if !iw_outcome.set.contains(&truth) {
                iw_misses += 1;
            }
            if all_equal {
                equal_sets += 1;
            }
        }
        report.check(
            format!("set_equality_{rule_name}"),
            equal_sets == trials,
            format!("{equal_sets}/{trials} trials with identical sets across identity, s^2, exp(s)-1, iw_eps, iw"),
        );
        report.check(
            format!("miscov_identical_{rule_name}"),
            id_misses == iw_misses,
            format!(
                "misses identity = {id_misses}, iw = {iw_misses} (must match exactly)"
            ),
        );
    }
    Ok(report)
}

/// MSE decays like 1/n and decreases monotonically along the sweep, for
/// both the identity and step transforms; the step transform tracks at or
/// below the identity MSE.
pub fn consistency_suite(seed: u64) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut report = SuiteReport::new("consistency");
    let data = generate(&GeneratorSpec::DirichletSoftmax {
        concentration: 0.3,
        num_labels: 10,
        temperature: 1.0,
        size: 2000,
        seed: derive_stream_seed(seed, 3),
    })?;
    let rule = SizeRule::Constant { t: 2 };
    let n_list = [50usize, 100, 200, 400, 800];
    let m = 500usize;
    let mut sweeps = Vec::new();
    for (name, transform) in [
        ("identity", &Transform::Identity as &dyn ScoreTransform),
        ("iw", &Transform::Iw),
    ] {
        let setup = ExperimentSetup {
            table: &data.table,
            features: None,
            rule: &rule,
            transform,
            oracle: None,
        };
        let sweep = consistency_sweep(&setup, &n_list, m, derive_stream_seed(seed, 4))?;
        let slope = sweep.log_log_slope;
        report.check(
            format!("slope_{name}"),
            (-1.4..=-0.6).contains(&slope),
            format!("log-log MSE slope = {slope:.3}, band [-1.4, -0.6]"),
        );
        let decreasing = sweep.rows.windows(2).all(|w| w[1].mse < w[0].mse);
        let mses: Vec<String> = sweep.rows.iter().map(|r| format!("{:.2e}", r.mse)).collect();
        report.check(
            format!("mse_decreasing_{name}"),
            decreasing,
            format!("MSE over n {n_list:?}: {}", mses.join(", ")),
        );
        sweeps.push(sweep);
    }
    // step-transform MSE at or below identity at each n, within 2 SE
    // (chi-square approximation: SE(MSE) ~ MSE sqrt(2/(m-1)))
    let mut within = true;
    let mut details = Vec::new();
    for (id_row, iw_row) in sweeps[0].rows.iter().zip(&sweeps[1].rows) {
        let se = ((id_row.mse * id_row.mse + iw_row.mse * iw_row.mse) * 2.0
            / (m as f64 - 1.0))
            .sqrt();
        within &= iw_row.mse <= id_row.mse + 2.0 * se;
        details.push(format!(
            "n={}: iw {:.2e} vs identity {:.2e}",
            id_row.n, iw_row.mse, id_row.mse
        ));
    }
    report.check(
        "iw_mse_not_worse",
        within,
        details.join("; "),
    );
    let elapsed = started.elapsed().as_secs_f64();
    report.check(
        "runtime",
        elapsed < 600.0,
        format!("{elapsed:.1}s, budget 600s"),
    );
    Ok(report)
}

/// Objective ordering on the two-point mixture with exact tail
/// probabilities: optimal <= step <= identity, each gap resolved against
/// Monte-Carlo error, plus invariance in the optimal transform's scale.
pub fn optimality_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("optimality");
    let law = TwoPointLaw::standard();
    let draws = 100_000usize;

    let estimate = |transform: &dyn ScoreTransform, stream: u64| {
        let mut rng = trial_rng(seed, stream);
        objective_j(transform, &law, draws, &mut rng)
    };

    let optimal = Transform::optimal_oracle();
    let j_opt = estimate(&optimal, 0)?;
    let j_iw = estimate(&Transform::Iw, 1)?;
    let j_id = estimate(&Transform::Identity, 2)?;

    // each Monte-Carlo estimate sits within 3 SE of its enumerated value
    for (name, est, transform) in [
        ("optimal", &j_opt, &optimal as &dyn ScoreTransform),
        ("iw", &j_iw, &Transform::Iw),
        ("identity", &j_id, &Transform::Identity),
    ] {
        let exact = law.closed_form_objective(transform)?;
        let gap = (est.value - exact).abs();
        report.check(
            format!("mc_matches_enumeration_{name}"),
            gap <= 3.0 * est.std_error,
            format!(
                "MC {:.4} vs enumerated {exact:.4}, gap {gap:.2e} <= 3 SE = {:.2e}",
                est.value,
                3.0 * est.std_error
            ),
        );
    }

    let gap_oi = j_iw.value - j_opt.value;
    let se_oi = (j_iw.std_error.powi(2) + j_opt.std_error.powi(2)).sqrt();
    report.check(
        "optimal_below_iw",
        gap_oi >= 3.0 * se_oi,
        format!("J(iw) - J(optimal) = {gap_oi:.4} >= 3 SE = {:.4}", 3.0 * se_oi),
    );
    let gap_iw_id = j_id.value - j_iw.value;
    let se_iw_id = (j_id.std_error.powi(2) + j_iw.std_error.powi(2)).sqrt();
    report.check(
        "iw_below_identity",
        gap_iw_id >= 3.0 * se_iw_id,
        format!(
            "J(identity) - J(iw) = {gap_iw_id:.4} >= 3 SE = {:.4}",
            3.0 * se_iw_id
        ),
    );

    // the scale cancels in the objective: same draws, same value
    let j_half = estimate(&Transform::OptimalOracle { scale: 0.5 }, 0)?;
    let j_seven = estimate(&Transform::OptimalOracle { scale: 7.0 }, 0)?;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let worst = rel(j_half.value, j_opt.value).max(rel(j_seven.value, j_opt.value));
    report.check(
        "scale_invariance",
        worst <= 1e-9,
        format!(
            "J at scales 0.5/1/7 on shared draws: {:.10}, {:.10}, {:.10} (max rel diff {worst:.1e})",
            j_half.value, j_opt.value, j_seven.value
        ),
    );
    Ok(report)
}

/// The strictly increasing approximation of the step transform moves the
/// leave-one-out estimate by at most `2 (w_m + (n-1) w_M) eps / (n w_m^2)`.
pub fn epsilon_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("epsilon");
    let instances = 100usize;
    for &eps in &[1e-3f64, 1e-4] {
        let mut worst_ratio: f64 = 0.0;
        let mut all_within = true;
        let mut clamped = 0usize;
        for idx in 0..instances {
            let mut rng = trial_rng(seed, 10_000 + idx as u64);
            let num_labels = rng.random_range(4..=8);
            let n = rng.random_range(20..=60);
            let table = random_score_table(&mut rng, n + 1, num_labels, 1.0, 2.2);
            let split = split_sample(n + 1, n, &mut rng)?;
            let rule = SizeRule::Constant { t: num_labels - 1 };
            let base = EngineInputs {
                table: &table,
                features: None,
                split: &split,
                rule: &rule,
                transform: &Transform::Iw,
                oracle: None,
            };
            let pe = run_stbcp(base)?;
            let eps_transform = Transform::IwEps(eps);
            let smoothed = run_stbcp(EngineInputs {
                transform: &eps_transform,
                ..base
            })?;
            if pe.flags.contains(&Flag::PseudoAlphaClamped)
                || smoothed.flags.contains(&Flag::PseudoAlphaClamped)
            {
                clamped += 1;
                continue;
            }
            let w_m = pe
                .pseudo_thresholds
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let w_big = pe
                .pseudo_thresholds
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(eps < w_m / 2.0, "instance violates the eps < w_m/2 premise");
            let bound =
                2.0 * (w_m + (n as f64 - 1.0) * w_big) * eps / (n as f64 * w_m * w_m);
            let measured = (smoothed.loo - pe.loo).abs();
            all_within &= measured <= bound;
            worst_ratio = worst_ratio.max(measured / bound);
        }
        report.check(
            format!("loo_gap_within_bound_eps_{eps:.0e}"),
            all_within && clamped == 0,
            format!(
                "worst measured/bound ratio = {worst_ratio:.3} over {instances} instances ({clamped} skipped for clamping)"
            ),
        );
    }
    Ok(report)
}

/// Direction of the coverage-gap improvement on the Dirichlet-softmax
/// generator: the step transform tightens GAP (and does not destabilize
/// STD) in at least 2 of 3 budgets.
pub fn gap_direction(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gap_direction");
    let data = generate(&GeneratorSpec::DirichletSoftmax {
        concentration: 0.3,
        num_labels: 10,
        temperature: 1.0,
        size: 2000,
        seed: derive_stream_seed(seed, 5),
    })?;
    let n = 200usize;
    let m = 500usize;
    let mut budgets_won = 0usize;
    for t in [1usize, 2, 3] {
        let rule = SizeRule::Constant { t };
        let base = ExperimentSetup {
            table: &data.table,
            features: None,
            rule: &rule,
            transform: &Transform::Identity,
            oracle: None,
        };
        let (_, id) = run_experiment(&base, n, m, derive_stream_seed(seed, 6 + t as u64))?;
        let setup_iw = ExperimentSetup {
            transform: &Transform::Iw,
            ..base
        };
        let (_, iw) = run_experiment(&setup_iw, n, m, derive_stream_seed(seed, 6 + t as u64))?;
        let improved = iw.gap < id.gap && iw.std <= id.std;
        if improved {
            budgets_won += 1;
        }
        report.check(
            format!("miscov_identical_t{t}"),
            id.miscov == iw.miscov,
            format!("MisCov identity {:.4} == iw {:.4}", id.miscov, iw.miscov),
        );
        report.checks.push(CheckResult {
            name: format!("budget_t{t}"),
            passed: true, // informational; the 2-of-3 rule decides below
            detail: format!(
                "GAP identity {:.4} vs iw {:.4}; STD identity {:.4} vs iw {:.4}{}",
                id.gap,
                iw.gap,
                id.std,
                iw.std,
                if improved { " (improved)" } else { "" }
            ),
        });
    }
    report.check(
        "improved_in_two_of_three_budgets",
        budgets_won >= 2,
        format!("{budgets_won}/3 budgets improved on both GAP and STD"),
    );
    Ok(report)
}

/// Bitwise idempotence of the improvement operator on random evaluations.
pub fn idempotence(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("idempotence");
    let mut rng = trial_rng(seed, 0);
    for (name, transform) in [
        ("identity", Transform::Identity),
        ("iw", Transform::Iw),
        ("iro", Transform::IRo),
    ] {
        let once = improve(transform.clone());
        let twice = improve(improve(transform.clone()));
        let mut all_bitwise = true;
        for _ in 0..1000 {
            let s = rng.random::<f64>() * 5.0;
            let w = Threshold::new(0.05 + rng.random::<f64>() * 4.0);
            let a = once.apply(s, w, None)?;
            let b = twice.apply(s, w, None)?;
            all_bitwise &= a.to_bits() == b.to_bits();
        }
        report.check(
            format!("improve_idempotent_{name}"),
            all_bitwise,
            "1000/1000 evaluations bitwise equal".to_string(),
        );
    }
    // improve(identity) coincides with the step transform pointwise
    let g = improve(Transform::Identity);
    let mut matches = true;
    for _ in 0..1000 {
        let s = rng.random::<f64>() * 5.0;
        let w = Threshold::new(0.05 + rng.random::<f64>() * 4.0);
        matches &= g.apply(s, w, None)?.to_bits() == Transform::Iw.apply(s, w, None)?.to_bits();
    }
    report.check(
        "improve_identity_is_step",
        matches,
        "1000/1000 evaluations bitwise equal to iw".to_string(),
    );
    Ok(report)
}

/// Coverage-bound sanity in the two regimes: with a generous budget the
/// plain leave-one-out bound holds; with the tightest budget the corrected
/// level dominates the estimate and bounds the empirical miscoverage.
pub fn coverage_sanity(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("coverage_sanity");
    // a sharp, heterogeneous classifier: most samples near-one-hot (large
    // thresholds, rarely missed), a minority genuinely ambiguous (small
    // thresholds, often missed) -- the regime where the plain estimate
    // turns overconfident and the corrected level is needed
    let data = generate(&GeneratorSpec::DirichletSoftmax {
        concentration: 0.1,
        num_labels: 10,
        temperature: 0.6,
        size: 4000,
        seed: derive_stream_seed(seed, 7),
    })?;
    let n = 200usize;
    let m = 4000usize;

    // high-coverage regime: generous budget
    let rule_high = SizeRule::Constant { t: 6 };
    let setup = ExperimentSetup {
        table: &data.table,
        features: None,
        rule: &rule_high,
        transform: &Transform::Iw,
        oracle: None,
    };
    let (reports_high, high) = run_experiment(&setup, n, m, derive_stream_seed(seed, 8))?;
    let mean_loo_high =
        reports_high.iter().map(|r| r.loo).sum::<f64>() / reports_high.len() as f64;
    report.check(
        "high_coverage_bound",
        high.miscov <= mean_loo_high + 0.02,
        format!(
            "MisCov {:.4} <= mean LOO {:.4} + 0.02",
            high.miscov, mean_loo_high
        ),
    );

    // low-coverage regime: tightest budget, corrected level
    let rule_low = SizeRule::Constant { t: 1 };
    let setup_low = ExperimentSetup {
        rule: &rule_low,
        ..setup
    };
    let (reports_low, low) = run_experiment(&setup_low, n, m, derive_stream_seed(seed, 9))?;
    let mean_loo_low =
        reports_low.iter().map(|r| r.loo).sum::<f64>() / reports_low.len() as f64;
    let mean_corrected =
        reports_low.iter().map(|r| r.corrected).sum::<f64>() / reports_low.len() as f64;
    report.check(
        "corrected_dominates_loo",
        mean_corrected >= mean_loo_low,
        format!("mean corrected {mean_corrected:.4} >= mean LOO {mean_loo_low:.4}"),
    );
    report.check(
        "low_coverage_corrected_bound",
        low.miscov <= mean_corrected + 0.02,
        format!(
            "MisCov {:.4} <= mean corrected {:.4} + 0.02",
            low.miscov, mean_corrected
        ),
    );
    Ok(report)
}

/// Threshold correctness: the supremum property on random score vectors
/// and the analytic ball-radius cases.
pub fn threshold_checks(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("threshold");
    let mut rng = trial_rng(seed, 0);
    let mut all_hold = true;
    let vectors = 10_000usize;
    for _ in 0..vectors {
        let k = rng.random_range(2..=12);
        let scores: Vec<f64> = (0..k)
            .map(|_| (rng.random_range(0..60) as f64) * 0.125 + 0.125)
            .collect();
        let t = rng.random_range(1..=k);
        let w = w_classification(&scores, t)?.value();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut candidates: Vec<f64> = sorted.clone();
        candidates.push(sorted[0] * 0.5);
        candidates.push(sorted[k - 1] + 1.0);
        for pair in sorted.windows(2) {
            candidates.push((pair[0] + pair[1]) * 0.5);
        }
        for l in candidates {
            if l <= 0.0 {
                continue;
            }
            let feasible = scores.iter().filter(|&&s| s < l).count() <= t;
            all_hold &= feasible == (l <= w);
        }
    }
    report.check(
        "classification_supremum_scan",
        all_hold,
        format!("{vectors} random vectors, every candidate cutoff consistent"),
    );
    let circle = (w_regression(std::f64::consts::PI, 2, 2.0)?.value() - 1.0).abs();
    let interval = (w_regression(2.0, 1, 1.0)?.value() - 1.0).abs();
    report.check(
        "regression_analytic_cases",
        circle <= 1e-9 && interval <= 1e-9,
        format!("circle |w-1| = {circle:.1e}, interval |w-1| = {interval:.1e}"),
    );
    Ok(report)
}
