//! The threshold `w(D, X)`: the largest score cutoff whose strict sublevel
//! label set still fits the size budget. For classification it is an order
//! statistic of the candidate scores; for an L_q regression ball it has a
//! closed form in terms of the gamma function.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// A score-space cutoff. `+inf` encodes the vacuous budget `T = |Y|`, where
/// every cutoff satisfies the cardinality constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(value: f64) -> Self {
        Threshold(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

/// The `(t + 1)`-th smallest candidate score, or `+inf` when `t = |Y|`.
///
/// This is the supremum of cutoffs `l` with `|{y : S(X, y) < l}| <= t`.
pub fn w_classification(label_scores: &[f64], t: usize) -> Result<Threshold> {
    let num_labels = label_scores.len();
    if t < 1 || t > num_labels {
        return Err(Error::InvalidBudget { t, num_labels });
    }
    if t == num_labels {
        return Ok(Threshold(f64::INFINITY));
    }
    let mut sorted = label_scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(Threshold(sorted[t]))
}

/// The radius of the L_q ball in `d` dimensions whose volume equals the
/// budget `t`: `[t * Gamma(d/q + 1)]^(1/d) / (2 * Gamma(1 + 1/q))`.
///
/// Evaluated in log space so large `d/q` does not overflow.
pub fn w_regression(t: f64, d: u32, q: f64) -> Result<Threshold> {
    if !(t > 0.0) {
        return Err(Error::InvalidVolume(t));
    }
    if d == 0 {
        return Err(Error::Validation("dimension must be at least 1".into()));
    }
    if !(q > 0.0) {
        return Err(Error::Validation(format!(
            "norm order must be positive, got {q}"
        )));
    }
    let d = f64::from(d);
    let ln_w = (t.ln() + ln_gamma(d / q + 1.0)) / d - std::f64::consts::LN_2 - ln_gamma(1.0 + 1.0 / q);
    Ok(Threshold(ln_w.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn order_statistic_basic() {
        let w = w_classification(&[0.1, 0.5, 0.9, 1.2], 2).unwrap();
        assert_eq!(w.value(), 0.9);
    }

    #[test]
    fn full_budget_is_infinite() {
        let w = w_classification(&[0.1, 0.5, 0.9, 1.2], 4).unwrap();
        assert!(w.value().is_infinite());
    }

    #[test]
    fn tied_scores() {
        let w = w_classification(&[0.3, 0.3, 0.3], 1).unwrap();
        assert_eq!(w.value(), 0.3);
    }

    #[test]
    fn budget_out_of_range() {
        assert!(w_classification(&[0.1, 0.2], 0).is_err());
        assert!(w_classification(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn circle_area_pi_has_radius_one() {
        let w = w_regression(std::f64::consts::PI, 2, 2.0).unwrap();
        assert_abs_diff_eq!(w.value(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn interval_of_length_two_has_half_width_one() {
        let w = w_regression(2.0, 1, 1.0).unwrap();
        assert_abs_diff_eq!(w.value(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn large_q_approaches_cube() {
        // volume-8 cube in 3-D has side 2, half-side 1; q = 64 approximates q = inf
        let w = w_regression(8.0, 3, 64.0).unwrap();
        assert_abs_diff_eq!(w.value(), 1.0, epsilon = 1e-2);
    }

    #[test]
    fn regression_budget_must_be_positive() {
        assert!(matches!(
            w_regression(0.0, 2, 2.0),
            Err(Error::InvalidVolume(_))
        ));
        assert!(w_regression(-1.0, 2, 2.0).is_err());
    }

    #[test]
    fn regression_strictly_increasing_in_budget_continuous_in_q() {
        let mut prev = 0.0;
        for i in 1..50 {
            let t = i as f64 * 0.37;
            let w = w_regression(t, 3, 1.7).unwrap().value();
            assert!(w > prev, "not increasing at t={t}");
            prev = w;
        }
        // continuity in q on a grid: neighboring q values give nearby radii
        // (relative steps stay small even where the radius moves quickly)
        let mut last = w_regression(2.5, 4, 0.5).unwrap().value();
        let mut q = 0.5;
        while q < 8.0 {
            q += 0.01;
            let w = w_regression(2.5, 4, q).unwrap().value();
            assert!(
                (w - last).abs() / last < 0.08,
                "jump at q={q}: {last} -> {w}"
            );
            last = w;
        }
    }

    /// Exhaustive cutoff scan: `|{y : S < l}| <= t` holds exactly for `l <= w`.
    #[test]
    fn supremum_property_by_exhaustive_scan() {
        let mut rng = crate::data::trial_rng(11, 0);
        for _ in 0..500 {
            let k = rng.random_range(2..=12);
            let scores: Vec<f64> = (0..k)
                .map(|_| (rng.random_range(0..40) as f64) * 0.25 + 0.25)
                .collect();
            let t = rng.random_range(1..=k);
            let w = w_classification(&scores, t).unwrap().value();

            let mut candidates: Vec<f64> = scores.clone();
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            candidates.push(sorted[0] / 2.0);
            candidates.push(sorted[k - 1] + 1.0);
            for pair in sorted.windows(2) {
                candidates.push((pair[0] + pair[1]) / 2.0);
            }
            for &l in &candidates {
                if l <= 0.0 {
                    continue;
                }
                let count = scores.iter().filter(|&&s| s < l).count();
                assert_eq!(
                    count <= t,
                    l <= w,
                    "scores {scores:?}, t={t}, w={w}, cutoff {l}"
                );
            }
        }
    }

    /// Equivariance: applying a strictly increasing map to the scores maps w
    /// the same way, i.e. the rank of w stays t + 1.
    #[test]
    fn order_statistic_equivariance_under_monotone_maps() {
        let mut rng = crate::data::trial_rng(13, 0);
        for _ in 0..200 {
            let k = rng.random_range(2..=10);
            let scores: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 3.0).collect();
            let t = rng.random_range(1..k);
            let w = w_classification(&scores, t).unwrap().value();
            let mapped: Vec<f64> = scores.iter().map(|s| s.exp() - 0.5).collect();
            let w_mapped = w_classification(&mapped, t).unwrap().value();
            assert_abs_diff_eq!(w_mapped, w.exp() - 0.5, epsilon = 1e-12);
        }
    }
}
