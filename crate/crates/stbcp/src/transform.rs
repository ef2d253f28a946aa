//! Non-negative, data-dependent score transformations `h(s; D, X)` and the
//! improvement operator that maps any of them to the step transform
//! `h(w; D, X) * 1(s >= w)`.
//!
//! The data dependence enters only through the threshold `w(D, X)` (and, for
//! the oracle-optimal transform, the tail probability `p(D, X)`), so a
//! transform here is a function of `(s, w, p)`.

use rand::Rng;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::threshold::Threshold;

/// A score transformation evaluated against its threshold context.
pub trait ScoreTransform: Sync {
    /// `h(s; D, X)` given `w = w(D, X)` and, when known, the tail
    /// probability `p = P(S(X, Y) >= w | D, X)`.
    fn apply(&self, s: f64, w: Threshold, p: Option<f64>) -> Result<f64>;

    /// `h(w; D, X)`: the denominator of the closed-form miscoverage level.
    fn at_threshold(&self, w: Threshold, p: Option<f64>) -> Result<f64> {
        self.apply(w.value(), w, p)
    }

    /// The limit of `h(s; w)` as `w -> +inf`, used when the size budget is
    /// the whole label space and the cutoff is vacuous.
    fn at_infinite_threshold(&self, s: f64) -> f64;

    /// Whether `h` is strictly increasing in `s`. Only such transforms admit
    /// the infimum characterization of the miscoverage level.
    fn strictly_increasing(&self) -> bool;

    fn name(&self) -> String;
}

/// The transformation family used by the prediction pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    /// `h(s) = s`, the plain pipeline.
    Identity,
    /// `h(s) = w * 1(s >= w)`, the step transform at the threshold.
    Iw,
    /// `h(s) = 1(s >= w)`, the robust variant with a constant denominator.
    IRo,
    /// `h(s) = w * 1(s >= w) + delta_eps(s; w)`, a strictly increasing
    /// approximation of `Iw` within sup-distance `eps`.
    IwEps(f64),
    /// `h(s) = a * 1(s >= w) / sqrt(p)`; needs the exact tail probability,
    /// so it is only usable on synthetic data with a known label law.
    OptimalOracle { scale: f64 },
}

impl Transform {
    pub fn optimal_oracle() -> Self {
        Transform::OptimalOracle { scale: 1.0 }
    }

    /// Parses the config selector: `identity`, `iw`, `iro`, `iw_eps:<eps>`,
    /// or `optimal_oracle`.
    pub fn from_selector(selector: &str) -> Result<Self> {
        match selector {
            "identity" => Ok(Transform::Identity),
            "iw" => Ok(Transform::Iw),
            "iro" => Ok(Transform::IRo),
            "optimal_oracle" => Ok(Transform::optimal_oracle()),
            other => {
                if let Some(eps) = other.strip_prefix("iw_eps:") {
                    let eps: f64 = eps.parse().map_err(|_| {
                        Error::Validation(format!("bad epsilon in `{other}`"))
                    })?;
                    if !(eps > 0.0) {
                        return Err(Error::Validation(format!(
                            "epsilon must be positive, got {eps}"
                        )));
                    }
                    Ok(Transform::IwEps(eps))
                } else {
                    Err(Error::Validation(format!(
                        "unknown transform `{other}` (expected identity | iw | iro | iw_eps:<eps> | optimal_oracle)"
                    )))
                }
            }
        }
    }
}

/// The strictly increasing correction added to `Iw`: slope `eps / w` below
/// the threshold, `-eps / (s - w + 1)` at and above it.
fn delta_eps(s: f64, w: f64, eps: f64) -> f64 {
    if s < w {
        eps / w * s
    } else {
        -eps / (s - w + 1.0)
    }
}

impl ScoreTransform for Transform {
    fn apply(&self, s: f64, w: Threshold, p: Option<f64>) -> Result<f64> {
        if let Transform::Identity = self {
            return Ok(s);
        }
        if !w.is_finite() {
            return Err(Error::InfiniteThreshold);
        }
        let w = w.value();
        match self {
            Transform::Identity => unreachable!(),
            Transform::Iw => Ok(if s >= w { w } else { 0.0 }),
            Transform::IRo => Ok(if s >= w { 1.0 } else { 0.0 }),
            Transform::IwEps(eps) => {
                let step = if s >= w { w } else { 0.0 };
                Ok(step + delta_eps(s, w, *eps))
            }
            Transform::OptimalOracle { scale } => {
                let p = p.ok_or(Error::MissingOracle)?;
                Ok(if s >= w { scale / p.sqrt() } else { 0.0 })
            }
        }
    }

    fn at_infinite_threshold(&self, s: f64) -> f64 {
        match self {
            Transform::Identity => s,
            _ => 0.0,
        }
    }

    fn strictly_increasing(&self) -> bool {
        matches!(self, Transform::Identity | Transform::IwEps(_))
    }

    fn name(&self) -> String {
        match self {
            Transform::Identity => "identity".into(),
            Transform::Iw => "iw".into(),
            Transform::IRo => "iro".into(),
            Transform::IwEps(eps) => format!("iw_eps:{eps}"),
            Transform::OptimalOracle { .. } => "optimal_oracle".into(),
        }
    }
}

/// The result of the improvement operator: `s -> h(w; D, X) * 1(s >= w)`.
#[derive(Debug, Clone)]
pub struct Improved<T>(pub T);

impl<T: ScoreTransform> ScoreTransform for Improved<T> {
    fn apply(&self, s: f64, w: Threshold, p: Option<f64>) -> Result<f64> {
        if !w.is_finite() {
            return Err(Error::InfiniteThreshold);
        }
        if s >= w.value() {
            self.0.at_threshold(w, p)
        } else {
            Ok(0.0)
        }
    }

    fn at_infinite_threshold(&self, _s: f64) -> f64 {
        0.0
    }

    fn strictly_increasing(&self) -> bool {
        false
    }

    fn name(&self) -> String {
        format!("improved({})", self.0.name())
    }
}

/// The improvement operator `G`. Applying it twice changes nothing:
/// the step shape is a fixed point.
pub fn improve<T: ScoreTransform>(transform: T) -> Improved<T> {
    Improved(transform)
}

/// A source of independent `(score, threshold, tail probability)` draws used
/// to estimate the objective functional.
pub trait ScoreThresholdSampler {
    /// A calibration-position draw: the score together with its context.
    fn draw_calibration(&self, rng: &mut dyn RngCore) -> (f64, Threshold, Option<f64>);

    /// An independent test-position threshold with its context.
    fn draw_test_threshold(&self, rng: &mut dyn RngCore) -> (Threshold, Option<f64>);
}

/// Monte-Carlo estimate of the objective `J(h) = E[h_i] * E[1 / h(w_test)]`
/// with a delta-method standard error.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveEstimate {
    pub value: f64,
    pub std_error: f64,
    pub mean_numerator: f64,
    pub mean_inv_denominator: f64,
}

/// Estimates the objective functional by two independent sample means (the
/// product form holds when the calibration scores are independent of the
/// test threshold).
pub fn objective_j(
    transform: &dyn ScoreTransform,
    sampler: &dyn ScoreThresholdSampler,
    num_draws: usize,
    rng: &mut impl Rng,
) -> Result<ObjectiveEstimate> {
    assert!(num_draws >= 2, "need at least two draws");
    let mut num = RunningMoments::new();
    for _ in 0..num_draws {
        let (s, w, p) = sampler.draw_calibration(rng);
        num.push(transform.apply(s, w, p)?);
    }
    let mut inv = RunningMoments::new();
    for draw in 0..num_draws {
        let (w, p) = sampler.draw_test_threshold(rng);
        let h_at_w = transform.at_threshold(w, p)?;
        if h_at_w == 0.0 {
            return Err(Error::ZeroDenominator { draw });
        }
        inv.push(1.0 / h_at_w);
    }
    let a = num.mean();
    let b = inv.mean();
    let var_a = num.variance() / num_draws as f64;
    let var_b = inv.variance() / num_draws as f64;
    Ok(ObjectiveEstimate {
        value: a * b,
        std_error: (b * b * var_a + a * a * var_b).sqrt(),
        mean_numerator: a,
        mean_inv_denominator: b,
    })
}

/// Welford accumulator.
struct RunningMoments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    fn new() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}
