//! The backward prediction pipeline: symmetric transformed scores,
//! e-variables, prediction sets, the closed-form data-dependent miscoverage
//! level with its grid-infimum verification oracle, the leave-one-out
//! estimator, and the Markov-corrected coverage level.

use serde::Serialize;

use crate::data::{CalibrationSplit, FeatureMatrix, ScoreTable};
use crate::error::{Error, Result};
use crate::size_rule::{SizeRule, TrialBudgets};
use crate::threshold::{w_classification, Threshold};
use crate::transform::ScoreTransform;

/// Exact conditional label-law queries, available only for synthetic data.
pub trait TailProbability: Sync {
    /// `P(S(X_i, Y) >= w | X_i)` under the generator's label law.
    fn tail_probability(&self, sample_index: usize, w: f64) -> f64;
}

/// Everything one prediction run needs.
#[derive(Clone, Copy)]
pub struct EngineInputs<'a> {
    pub table: &'a ScoreTable,
    pub features: Option<&'a FeatureMatrix>,
    pub split: &'a CalibrationSplit,
    pub rule: &'a SizeRule,
    pub transform: &'a dyn ScoreTransform,
    pub oracle: Option<&'a dyn TailProbability>,
}

/// Anomalies recorded on a trial instead of failing it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// Every transformed score in an e-variable denominator was zero; the
    /// affected e-variables are recorded as 0.
    ZeroMass,
    /// The raw closed-form miscoverage level exceeded 1 and was clamped.
    AlphaClamped,
    /// A pseudo miscoverage level exceeded 1 and was clamped.
    PseudoAlphaClamped,
    /// The constructed set exceeded the budget; only reachable when the
    /// budget varies with the candidate label at small n, where the
    /// closed-form level is an asymptotic approximation.
    BudgetExceeded,
    /// The sample standard deviation is undefined for a single trial.
    StdUndefined,
}

impl std::fmt::Display for Flag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Flag::ZeroMass => "zero_mass",
            Flag::AlphaClamped => "alpha_clamped",
            Flag::PseudoAlphaClamped => "pseudo_alpha_clamped",
            Flag::BudgetExceeded => "budget_exceeded",
            Flag::StdUndefined => "std_undefined",
        };
        f.write_str(s)
    }
}

/// Output of one prediction run. The serialized form carries the external
/// fields only; thresholds and pseudo levels stay in-process.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionOutcome {
    pub set: Vec<usize>,
    pub alpha_tilde: f64,
    pub loo: f64,
    pub corrected: f64,
    pub flags: Vec<Flag>,
    #[serde(skip)]
    pub pseudo_alphas: Vec<f64>,
    #[serde(skip)]
    pub threshold_test: f64,
    #[serde(skip)]
    pub pseudo_thresholds: Vec<f64>,
}

/// `(n + 1) h_test / (sum h_cal + h_test)`.
pub fn e_variable(h_cal: &[f64], h_test: f64) -> Result<f64> {
    let denominator: f64 = h_cal.iter().sum::<f64>() + h_test;
    if denominator <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok((h_cal.len() as f64 + 1.0) * h_test / denominator)
}

/// `{y : E(y) < 1/alpha}` (open set: a value exactly at the cutoff is
/// excluded, with a one-sided relative guard absorbing rounding).
pub fn prediction_set(e_row: &[f64], alpha: f64) -> Vec<usize> {
    debug_assert!(alpha > 0.0, "miscoverage level must be positive");
    let bound = (1.0 / alpha) * (1.0 - 1e-11);
    e_row
        .iter()
        .enumerate()
        .filter(|&(_, &e)| e < bound)
        .map(|(y, _)| y)
        .collect()
}

fn closed_form_level_raw(sum_h: f64, h_at_w: f64, divisor: f64) -> Result<f64> {
    if !(h_at_w > 0.0) {
        return Err(Error::NonpositiveDenominator(h_at_w));
    }
    Ok((sum_h / h_at_w + 1.0) / divisor)
}

fn clamp_level(raw: f64) -> (f64, bool) {
    if raw > 1.0 {
        (1.0, true)
    } else {
        (raw, false)
    }
}

/// Closed-form miscoverage level `(sum h / h(w) + 1) / (len + 1)`; the
/// boolean reports whether the raw value exceeded 1 and was clamped.
pub fn alpha_tilde_closed(h_cal_true: &[f64], h_at_w: f64) -> Result<(f64, bool)> {
    closed_form_level_raw(
        h_cal_true.iter().sum(),
        h_at_w,
        h_cal_true.len() as f64 + 1.0,
    )
    .map(clamp_level)
}

/// Arithmetic mean of the pseudo miscoverage levels.
pub fn loo_estimate(pseudo_alphas: &[f64]) -> f64 {
    assert!(!pseudo_alphas.is_empty());
    pseudo_alphas.iter().sum::<f64>() / pseudo_alphas.len() as f64
}

fn tail(oracle: Option<&dyn TailProbability>, sample: usize, w: Threshold) -> Option<f64> {
    oracle.map(|o| o.tail_probability(sample, w.value()))
}

/// Evaluates the transform, falling back to its `w -> inf` limit when the
/// budget is vacuous and the threshold infinite.
fn apply_transform(
    transform: &dyn ScoreTransform,
    s: f64,
    w: Threshold,
    p: Option<f64>,
) -> Result<f64> {
    if w.is_finite() {
        transform.apply(s, w, p)
    } else {
        Ok(transform.at_infinite_threshold(s))
    }
}

/// Per-trial state shared by the pipeline and its verification oracles.
struct Prepared<'a> {
    inputs: EngineInputs<'a>,
    budgets: TrialBudgets,
    w_pseudo: Vec<Threshold>,
    h_pseudo: Vec<f64>,
    sum_h_pseudo: f64,
    w_test: Threshold,
}

impl<'a> Prepared<'a> {
    fn new(inputs: EngineInputs<'a>) -> Result<Self> {
        let split = inputs.split;
        let table = inputs.table;
        let budgets = TrialBudgets::compute(inputs.rule, table, inputs.features, split)?;
        let mut w_pseudo = Vec::with_capacity(split.n());
        let mut h_pseudo = Vec::with_capacity(split.n());
        for (pos, &sample) in split.calibration().iter().enumerate() {
            let w_i = w_classification(table.row(sample), budgets.pseudo[pos])
                .map_err(|e| e.at(pos, None))?;
            let p_i = tail(inputs.oracle, sample, w_i);
            let h_i = apply_transform(inputs.transform, table.true_score(sample), w_i, p_i)
                .map_err(|e| e.at(pos, None))?;
            w_pseudo.push(w_i);
            h_pseudo.push(h_i);
        }
        let sum_h_pseudo = h_pseudo.iter().sum();
        let w_test = w_classification(table.row(split.test_index()), budgets.test)?;
        Ok(Self {
            inputs,
            budgets,
            w_pseudo,
            h_pseudo,
            sum_h_pseudo,
            w_test,
        })
    }

    fn n(&self) -> usize {
        self.inputs.split.n()
    }

    fn num_labels(&self) -> usize {
        self.inputs.table.num_labels()
    }

    /// `h_i^y` for every calibration position. Budgets that ignore the
    /// dataset parameter make the column equal to the pseudo scores; the
    /// shortcut is exact because threshold and score arguments coincide.
    fn symmetric_column(&self, y: usize) -> Result<Vec<f64>> {
        let split = self.inputs.split;
        let table = self.inputs.table;
        let mut column = Vec::with_capacity(self.n());
        for (pos, &sample) in split.calibration().iter().enumerate() {
            let budget = self.budgets.symmetric(pos, y);
            let h = if budget == self.budgets.pseudo[pos] {
                self.h_pseudo[pos]
            } else {
                let w = w_classification(table.row(sample), budget)
                    .map_err(|e| e.at(pos, Some(y)))?;
                let p = tail(self.inputs.oracle, sample, w);
                apply_transform(self.inputs.transform, table.true_score(sample), w, p)
                    .map_err(|e| e.at(pos, Some(y)))?
            };
            column.push(h);
        }
        Ok(column)
    }

    /// `h_{n+1}(y) = h(S(X_test, y); D_test, X_test)`.
    fn h_test(&self, y: usize) -> Result<f64> {
        let test = self.inputs.split.test_index();
        let p = tail(self.inputs.oracle, test, self.w_test);
        apply_transform(
            self.inputs.transform,
            self.inputs.table.score(test, y),
            self.w_test,
            p,
        )
    }

    /// The test-point e-variable grid over candidate labels. Zero-mass
    /// denominators record an e-value of 0 and raise the flag.
    fn test_e_grid(&self) -> Result<(Vec<f64>, bool)> {
        let mut zero_mass = false;
        let mut grid = Vec::with_capacity(self.num_labels());
        for y in 0..self.num_labels() {
            let column = self.symmetric_column(y)?;
            let h_test = self.h_test(y)?;
            match e_variable(&column, h_test) {
                Ok(e) => grid.push(e),
                Err(Error::ZeroMass) => {
                    zero_mass = true;
                    grid.push(0.0);
                }
                Err(e) => return Err(e),
            }
        }
        Ok((grid, zero_mass))
    }

    /// Pseudo miscoverage levels via the closed form, with the vacuous
    /// per-point budget mapped to the unconstrained minimum `1/n`.
    fn pseudo_alphas(&self) -> Result<(Vec<f64>, bool)> {
        let n = self.n();
        let k = self.num_labels();
        let mut clamped_any = false;
        let mut alphas = Vec::with_capacity(n);
        for (pos, &sample) in self.inputs.split.calibration().iter().enumerate() {
            let alpha = if self.budgets.pseudo[pos] == k {
                1.0 / n as f64
            } else {
                let w_i = self.w_pseudo[pos];
                let p_i = tail(self.inputs.oracle, sample, w_i);
                let h_at_w = self
                    .inputs
                    .transform
                    .at_threshold(w_i, p_i)
                    .map_err(|e| e.at(pos, None))?;
                let raw = closed_form_level_raw(
                    self.sum_h_pseudo - self.h_pseudo[pos],
                    h_at_w,
                    n as f64,
                )
                .map_err(|e| e.at(pos, None))?;
                let (alpha, clamped) = clamp_level(raw);
                clamped_any |= clamped;
                alpha
            };
            alphas.push(alpha);
        }
        Ok((alphas, clamped_any))
    }

    /// `mean(alpha_i * E^i(Y_i))` where `E^i(Y_i) = n h_i / sum h`.
    fn corrected_estimate(&self, pseudo_alphas: &[f64]) -> (f64, bool) {
        let n = self.n() as f64;
        if self.sum_h_pseudo <= 0.0 {
            return (0.0, true);
        }
        let mean = pseudo_alphas
            .iter()
            .zip(&self.h_pseudo)
            .map(|(alpha, h)| alpha * (n * h / self.sum_h_pseudo))
            .sum::<f64>()
            / n;
        (mean, false)
    }
}

/// Runs the whole pipeline once: budgets and thresholds, symmetric scores,
/// the e-variable grid, the closed-form miscoverage level, the prediction
/// set, and the leave-one-out and corrected estimates.
pub fn run_stbcp(inputs: EngineInputs<'_>) -> Result<PredictionOutcome> {
    let prepared = Prepared::new(inputs)?;
    let n = prepared.n();
    let k = prepared.num_labels();
    let mut flags = Vec::new();

    let (alpha_tilde, set) = if prepared.budgets.test == k {
        // vacuous budget: every label fits and the level sits at its
        // unconstrained minimum
        (1.0 / (n as f64 + 1.0), (0..k).collect::<Vec<_>>())
    } else {
        let p_test = tail(inputs.oracle, inputs.split.test_index(), prepared.w_test);
        let h_at_w = inputs.transform.at_threshold(prepared.w_test, p_test)?;
        let raw = closed_form_level_raw(
            prepared.h_pseudo.iter().sum(),
            h_at_w,
            n as f64 + 1.0,
        )?;
        let (alpha, clamped) = clamp_level(raw);
        if clamped {
            flags.push(Flag::AlphaClamped);
        }
        let (e_grid, zero_mass) = prepared.test_e_grid()?;
        if zero_mass {
            flags.push(Flag::ZeroMass);
        }
        // the set comes from the raw level: the clamp is a reporting
        // convention and must not change which labels survive the cutoff
        (alpha, prediction_set(&e_grid, raw))
    };
    if set.len() > prepared.budgets.test {
        flags.push(Flag::BudgetExceeded);
    }

    let (pseudo_alphas, pseudo_clamped) = prepared.pseudo_alphas()?;
    if pseudo_clamped {
        flags.push(Flag::PseudoAlphaClamped);
    }
    let loo = loo_estimate(&pseudo_alphas);
    let (corrected, corrected_zero_mass) = prepared.corrected_estimate(&pseudo_alphas);
    if corrected_zero_mass && !flags.contains(&Flag::ZeroMass) {
        flags.push(Flag::ZeroMass);
    }

    Ok(PredictionOutcome {
        set,
        alpha_tilde,
        loo,
        corrected,
        flags,
        pseudo_alphas,
        threshold_test: prepared.w_test.value(),
        pseudo_thresholds: prepared.w_pseudo.iter().map(|w| w.value()).collect(),
    })
}

/// The symmetric transformed scores for one candidate label:
/// `(h_1^y, ..., h_n^y)` and `h_{n+1}(y)`.
pub fn transformed_calibration_scores(
    inputs: EngineInputs<'_>,
    y: usize,
) -> Result<(Vec<f64>, f64)> {
    let prepared = Prepared::new(inputs)?;
    let column = prepared.symmetric_column(y)?;
    let h_test = prepared.h_test(y)?;
    Ok((column, h_test))
}

/// The pseudo miscoverage level for calibration position `i`.
pub fn pseudo_alpha(inputs: EngineInputs<'_>, i: usize) -> Result<f64> {
    let prepared = Prepared::new(inputs)?;
    let (alphas, _) = prepared.pseudo_alphas()?;
    Ok(alphas[i])
}

/// The corrected leave-one-out coverage level `mean(alpha_i E^i(Y_i))`.
pub fn corrected_loo_estimate(inputs: EngineInputs<'_>) -> Result<f64> {
    let prepared = Prepared::new(inputs)?;
    let (alphas, _) = prepared.pseudo_alphas()?;
    Ok(prepared.corrected_estimate(&alphas).0)
}

fn smallest_feasible_grid_level(
    e_grid: &[f64],
    budget: usize,
    grid_step: f64,
) -> f64 {
    let steps = (1.0 / grid_step).round() as usize;
    let feasible = |j: usize| -> bool {
        let alpha = j as f64 * grid_step;
        prediction_set(e_grid, alpha).len() <= budget
    };
    if !feasible(steps - 1) {
        // only the boundary level remains
        return 1.0;
    }
    let (mut lo, mut hi) = (1usize, steps - 1);
    if feasible(lo) {
        return lo as f64 * grid_step;
    }
    // invariant: lo infeasible, hi feasible; the set shrinks as alpha grows
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi as f64 * grid_step
}

/// Grid-search verification oracle for the miscoverage level: the smallest
/// grid multiple whose prediction set respects the budget. Monotonicity of
/// the set in the level makes binary search exact on the grid.
pub fn alpha_tilde_infimum(inputs: EngineInputs<'_>, grid_step: f64) -> Result<f64> {
    assert!(
        grid_step > 0.0 && grid_step <= 0.01,
        "grid_step must lie in (0, 0.01]"
    );
    let prepared = Prepared::new(inputs)?;
    if prepared.budgets.test == prepared.num_labels() {
        // vacuous constraint: every grid level is feasible
        return Ok(grid_step);
    }
    let (e_grid, _) = prepared.test_e_grid()?;
    Ok(smallest_feasible_grid_level(
        &e_grid,
        prepared.budgets.test,
        grid_step,
    ))
}

/// Grid-search oracle for one pseudo miscoverage level, built from the
/// pseudo e-variable grid of calibration position `i`.
pub fn pseudo_alpha_infimum(
    inputs: EngineInputs<'_>,
    i: usize,
    grid_step: f64,
) -> Result<f64> {
    assert!(
        grid_step > 0.0 && grid_step <= 0.01,
        "grid_step must lie in (0, 0.01]"
    );
    let prepared = Prepared::new(inputs)?;
    let k = prepared.num_labels();
    if prepared.budgets.pseudo[i] == k {
        return Ok(grid_step);
    }
    let sample = inputs.split.calibration()[i];
    let w_i = prepared.w_pseudo[i];
    let p_i = tail(inputs.oracle, sample, w_i);
    let mut others = prepared.h_pseudo.clone();
    others.remove(i);
    let mut e_grid = Vec::with_capacity(k);
    for y in 0..k {
        let h_iy = apply_transform(inputs.transform, inputs.table.score(sample, y), w_i, p_i)
            .map_err(|e| e.at(i, Some(y)))?;
        match e_variable(&others, h_iy) {
            Ok(e) => e_grid.push(e),
            Err(Error::ZeroMass) => e_grid.push(0.0),
            Err(e) => return Err(e),
        }
    }
    Ok(smallest_feasible_grid_level(
        &e_grid,
        prepared.budgets.pseudo[i],
        grid_step,
    ))
}
