//! Synthetic data with known ground truth: exchangeable i.i.d. score laws,
//! Dirichlet-softmax pseudo-classifiers with cross-entropy scores, clustered
//! feature pools, and a two-point score law whose objective functional is
//! computable by enumeration. Every generator also exposes the exact
//! conditional label law, which is what the oracle-optimal transform needs.

use rand::Rng;
use rand::RngCore;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, ScoreTable};
use crate::engine::TailProbability;
use crate::error::{Error, Result};
use crate::threshold::Threshold;
use crate::transform::{ScoreThresholdSampler, ScoreTransform};

const PROBABILITY_FLOOR: f64 = 1e-12;

/// Marginal law of the i.i.d. score entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreLaw {
    Uniform { lo: f64, hi: f64 },
    Exponential { rate: f64 },
}

impl ScoreLaw {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ScoreLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            ScoreLaw::Exponential { rate } => {
                -(1.0 - rng.random::<f64>()).ln() / rate
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ScoreLaw::Uniform { lo, hi } => {
                if !(0.0 <= lo && lo < hi) {
                    return Err(Error::Validation(format!(
                        "uniform law needs 0 <= lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            ScoreLaw::Exponential { rate } => {
                if !(rate > 0.0) {
                    return Err(Error::Validation(format!(
                        "exponential rate must be positive, got {rate}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// What to generate and how much of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// Every score entry i.i.d. from the law; labels uniform and
    /// independent, so the per-sample true-label scores are exchangeable.
    ExchangeableIid {
        law: ScoreLaw,
        num_labels: usize,
        size: usize,
        seed: u64,
    },
    /// Per sample: a label distribution from a symmetric Dirichlet,
    /// sharpened by the temperature, the true label drawn from it, and
    /// cross-entropy scores `S(X, y) = -ln pi_y(X)`.
    DirichletSoftmax {
        concentration: f64,
        num_labels: usize,
        temperature: f64,
        size: usize,
        seed: u64,
    },
    /// Gaussian clusters in the plane; the label law is a softmax over
    /// negative squared distances to the cluster centers.
    ClusteredFeatures {
        num_clusters: usize,
        spread: f64,
        num_labels: usize,
        size: usize,
        seed: u64,
    },
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        let (num_labels, size) = match self {
            GeneratorSpec::ExchangeableIid {
                law,
                num_labels,
                size,
                ..
            } => {
                law.validate()?;
                (*num_labels, *size)
            }
            GeneratorSpec::DirichletSoftmax {
                concentration,
                num_labels,
                temperature,
                size,
                ..
            } => {
                if !(concentration > &0.0) || !(temperature > &0.0) {
                    return Err(Error::Validation(
                        "concentration and temperature must be positive".into(),
                    ));
                }
                (*num_labels, *size)
            }
            GeneratorSpec::ClusteredFeatures {
                num_clusters,
                spread,
                num_labels,
                size,
                ..
            } => {
                if *num_clusters < 1 || !(spread > &0.0) {
                    return Err(Error::Validation(
                        "need at least one cluster and positive spread".into(),
                    ));
                }
                (*num_labels, *size)
            }
        };
        if num_labels < 2 {
            return Err(Error::Validation("need at least two labels".into()));
        }
        if size < 3 {
            return Err(Error::Validation("need at least three samples".into()));
        }
        Ok(())
    }
}

/// The exact per-sample label law behind a generated table, backing both
/// tail-probability queries and goodness-of-fit checks.
#[derive(Debug, Clone)]
pub struct SoftmaxOracle {
    pi: Vec<f64>, // row-major, size x num_labels
    scores: Vec<f64>,
    num_labels: usize,
}

impl SoftmaxOracle {
    pub fn label_probabilities(&self, sample: usize) -> &[f64] {
        &self.pi[sample * self.num_labels..(sample + 1) * self.num_labels]
    }
}

impl TailProbability for SoftmaxOracle {
    fn tail_probability(&self, sample_index: usize, w: f64) -> f64 {
        let pi = self.label_probabilities(sample_index);
        let scores =
            &self.scores[sample_index * self.num_labels..(sample_index + 1) * self.num_labels];
        pi.iter()
            .zip(scores)
            .filter(|&(_, &s)| s >= w)
            .map(|(&p, _)| p)
            .sum()
    }
}

/// A generated dataset plus its exact label law.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub table: ScoreTable,
    pub features: FeatureMatrix,
    pub oracle: SoftmaxOracle,
}

fn floor_and_normalize(pi: &mut [f64]) {
    let mut total = 0.0;
    for p in pi.iter_mut() {
        if !(*p > PROBABILITY_FLOOR) {
            *p = PROBABILITY_FLOOR;
        }
        total += *p;
    }
    for p in pi.iter_mut() {
        *p /= total;
    }
}

fn sample_label(pi: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (y, &p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return y;
        }
    }
    pi.len() - 1
}

/// Deterministic given the spec's seed.
pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticData> {
    spec.validate()?;
    match *spec {
        GeneratorSpec::ExchangeableIid {
            law,
            num_labels,
            size,
            seed,
        } => {
            let mut rng = crate::data::trial_rng(seed, 0);
            let mut score_rows = Vec::with_capacity(size);
            let mut labels = Vec::with_capacity(size);
            let mut feature_rows = Vec::with_capacity(size);
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            let uniform_pi = vec![1.0 / num_labels as f64; num_labels];
            let mut pi = Vec::with_capacity(size * num_labels);
            for _ in 0..size {
                score_rows.push((0..num_labels).map(|_| law.sample(&mut rng)).collect());
                labels.push(rng.random_range(0..num_labels));
                feature_rows.push(vec![
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                ]);
                pi.extend_from_slice(&uniform_pi);
            }
            let table = ScoreTable::new(score_rows, labels)?;
            let features = FeatureMatrix::new(feature_rows)?;
            let scores_flat = flatten_scores(&table);
            Ok(SyntheticData {
                table,
                features,
                oracle: SoftmaxOracle {
                    pi,
                    scores: scores_flat,
                    num_labels,
                },
            })
        }
        GeneratorSpec::DirichletSoftmax {
            concentration,
            num_labels,
            temperature,
            size,
            seed,
        } => {
            let mut rng = crate::data::trial_rng(seed, 0);
            let gamma = Gamma::new(concentration, 1.0)
                .map_err(|e| Error::Validation(format!("bad concentration: {e}")))?;
            let mut score_rows = Vec::with_capacity(size);
            let mut labels = Vec::with_capacity(size);
            let mut feature_rows = Vec::with_capacity(size);
            let mut pi_flat = Vec::with_capacity(size * num_labels);
            for _ in 0..size {
                let mut pi: Vec<f64> =
                    (0..num_labels).map(|_| gamma.sample(&mut rng)).collect();
                floor_and_normalize(&mut pi);
                if (temperature - 1.0).abs() > 1e-12 {
                    for p in pi.iter_mut() {
                        *p = p.powf(1.0 / temperature);
                    }
                    floor_and_normalize(&mut pi);
                }
                let label = sample_label(&pi, &mut rng);
                let scores: Vec<f64> = pi.iter().map(|&p| -p.ln()).collect();
                feature_rows.push(pi.clone());
                pi_flat.extend_from_slice(&pi);
                score_rows.push(scores);
                labels.push(label);
            }
            let table = ScoreTable::new(score_rows, labels)?;
            let features = FeatureMatrix::new(feature_rows)?;
            let scores_flat = flatten_scores(&table);
            Ok(SyntheticData {
                table,
                features,
                oracle: SoftmaxOracle {
                    pi: pi_flat,
                    scores: scores_flat,
                    num_labels,
                },
            })
        }
        GeneratorSpec::ClusteredFeatures {
            num_clusters,
            spread,
            num_labels,
            size,
            seed,
        } => {
            let mut rng = crate::data::trial_rng(seed, 0);
            let center_scale = 6.0;
            let centers: Vec<[f64; 2]> = (0..num_clusters)
                .map(|_| {
                    [
                        (rng.random::<f64>() - 0.5) * 2.0 * center_scale,
                        (rng.random::<f64>() - 0.5) * 2.0 * center_scale,
                    ]
                })
                .collect();
            let normal = Normal::new(0.0, spread).expect("valid normal");
            let tau2 = 2.0 * spread * spread + 1e-2;
            let mut score_rows = Vec::with_capacity(size);
            let mut labels = Vec::with_capacity(size);
            let mut feature_rows = Vec::with_capacity(size);
            let mut pi_flat = Vec::with_capacity(size * num_labels);
            for _ in 0..size {
                let c = rng.random_range(0..num_clusters);
                let x = [
                    centers[c][0] + normal.sample(&mut rng),
                    centers[c][1] + normal.sample(&mut rng),
                ];
                // label weight: closeness to every cluster carrying the label
                let mut weights = vec![0.0f64; num_labels];
                for (ci, center) in centers.iter().enumerate() {
                    let d2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
                    weights[ci % num_labels] += (-d2 / tau2).exp();
                }
                floor_and_normalize(&mut weights);
                let label = sample_label(&weights, &mut rng);
                let scores: Vec<f64> = weights.iter().map(|&p| -p.ln()).collect();
                feature_rows.push(x.to_vec());
                pi_flat.extend_from_slice(&weights);
                score_rows.push(scores);
                labels.push(label);
            }
            let table = ScoreTable::new(score_rows, labels)?;
            let features = FeatureMatrix::new(feature_rows)?;
            let scores_flat = flatten_scores(&table);
            Ok(SyntheticData {
                table,
                features,
                oracle: SoftmaxOracle {
                    pi: pi_flat,
                    scores: scores_flat,
                    num_labels,
                },
            })
        }
    }
}

fn flatten_scores(table: &ScoreTable) -> Vec<f64> {
    let mut flat = Vec::with_capacity(table.num_samples() * table.num_labels());
    for i in 0..table.num_samples() {
        flat.extend_from_slice(table.row(i));
    }
    flat
}

/// One mixture component of the two-point score law: score `s_below < w`
/// with probability `1 - p`, score `s_above >= w` with probability `p`.
#[derive(Debug, Clone, Copy)]
pub struct TwoPointContext {
    pub weight: f64,
    pub w: f64,
    pub p: f64,
    pub s_below: f64,
    pub s_above: f64,
}

/// A finite mixture of two-point score laws with known thresholds and tail
/// probabilities. The objective functional of any transform is computable
/// by direct enumeration, which makes this the oracle for ordering checks.
#[derive(Debug, Clone)]
pub struct TwoPointLaw {
    contexts: Vec<TwoPointContext>,
}

impl TwoPointLaw {
    pub fn new(contexts: Vec<TwoPointContext>) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::Validation("need at least one context".into()));
        }
        let total: f64 = contexts.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "context weights sum to {total}, expected 1"
            )));
        }
        for c in &contexts {
            if !(c.weight > 0.0)
                || !(c.w > 0.0)
                || !(c.p > 0.0 && c.p <= 1.0)
                || !(0.0 <= c.s_below && c.s_below < c.w)
                || !(c.s_above >= c.w)
            {
                return Err(Error::Validation(format!("bad two-point context: {c:?}")));
            }
        }
        Ok(Self { contexts })
    }

    /// A mixture with well-separated thresholds and tail probabilities; the
    /// identity, step, and oracle-optimal transforms order strictly on it.
    pub fn standard() -> Self {
        Self::new(vec![
            TwoPointContext {
                weight: 0.5,
                w: 1.0,
                p: 0.04,
                s_below: 0.5,
                s_above: 2.0,
            },
            TwoPointContext {
                weight: 0.5,
                w: 10.0,
                p: 0.9,
                s_below: 5.0,
                s_above: 12.0,
            },
        ])
        .expect("standard law is valid")
    }

    fn draw_context(&self, rng: &mut dyn RngCore) -> &TwoPointContext {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.contexts {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        self.contexts.last().expect("non-empty")
    }

    /// `J(h) = E[h] * E[1/h(w)]` by direct enumeration of the mixture.
    pub fn closed_form_objective(&self, transform: &dyn ScoreTransform) -> Result<f64> {
        let mut mean_h = 0.0;
        let mut mean_inv = 0.0;
        for c in &self.contexts {
            let w = Threshold::new(c.w);
            let h_below = transform.apply(c.s_below, w, Some(c.p))?;
            let h_above = transform.apply(c.s_above, w, Some(c.p))?;
            mean_h += c.weight * ((1.0 - c.p) * h_below + c.p * h_above);
            let h_at_w = transform.at_threshold(w, Some(c.p))?;
            if h_at_w <= 0.0 {
                return Err(Error::NonpositiveDenominator(h_at_w));
            }
            mean_inv += c.weight / h_at_w;
        }
        Ok(mean_h * mean_inv)
    }
}

impl ScoreThresholdSampler for TwoPointLaw {
    fn draw_calibration(&self, rng: &mut dyn RngCore) -> (f64, Threshold, Option<f64>) {
        let c = self.draw_context(rng);
        let s = if rng.random::<f64>() < c.p {
            c.s_above
        } else {
            c.s_below
        };
        (s, Threshold::new(c.w), Some(c.p))
    }

    fn draw_test_threshold(&self, rng: &mut dyn RngCore) -> (Threshold, Option<f64>) {
        let c = self.draw_context(rng);
        (Threshold::new(c.w), Some(c.p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::e_variable;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn generation_is_deterministic() {
        let spec = GeneratorSpec::DirichletSoftmax {
            concentration: 0.4,
            num_labels: 5,
            temperature: 1.0,
            size: 50,
            seed: 123,
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn exchangeable_scores_keep_e_mean_at_one() {
        let spec = GeneratorSpec::ExchangeableIid {
            law: ScoreLaw::Uniform { lo: 0.0, hi: 1.0 },
            num_labels: 4,
            size: 11 * 10_000,
            seed: 7,
        };
        let data = generate(&spec).unwrap();
        // consecutive blocks of 11 samples: 10 calibration + 1 test
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for block in 0..10_000 {
            let base = block * 11;
            let h: Vec<f64> = (base..base + 10)
                .map(|i| data.table.true_score(i))
                .collect();
            let e = e_variable(&h, data.table.true_score(base + 10)).unwrap();
            sum += e;
            sum_sq += e * e;
            count += 1;
        }
        let mean = sum / count as f64;
        let var = (sum_sq / count as f64 - mean * mean).max(0.0);
        let se = (var / count as f64).sqrt();
        assert!(
            (mean - 1.0).abs() <= 3.0 * se,
            "mean e-value {mean} strays from 1 (se {se})"
        );
    }

    #[test]
    fn sharp_temperature_lowers_entropy() {
        let base = GeneratorSpec::DirichletSoftmax {
            concentration: 1.0,
            num_labels: 8,
            temperature: 1.0,
            size: 300,
            seed: 9,
        };
        let sharp = GeneratorSpec::DirichletSoftmax {
            concentration: 1.0,
            num_labels: 8,
            temperature: 0.25,
            size: 300,
            seed: 9,
        };
        let mean_entropy = |data: &SyntheticData| -> f64 {
            (0..300)
                .map(|i| {
                    data.oracle
                        .label_probabilities(i)
                        .iter()
                        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                        .sum::<f64>()
                })
                .sum::<f64>()
                / 300.0
        };
        let flat = mean_entropy(&generate(&base).unwrap());
        let peaked = mean_entropy(&generate(&sharp).unwrap());
        assert!(
            peaked < flat,
            "temperature 0.25 should sharpen: {peaked} vs {flat}"
        );
    }

    #[test]
    fn high_concentration_approaches_uniform() {
        let spec = GeneratorSpec::DirichletSoftmax {
            concentration: 5000.0,
            num_labels: 6,
            temperature: 1.0,
            size: 100,
            seed: 11,
        };
        let data = generate(&spec).unwrap();
        let target = 6f64.ln();
        for i in 0..100 {
            let en: f64 = data
                .oracle
                .label_probabilities(i)
                .iter()
                .map(|&p| -p * p.ln())
                .sum();
            assert!(
                (en - target).abs() < 0.05,
                "entropy {en} far from ln 6 = {target}"
            );
        }
    }

    #[test]
    fn tail_probability_direct_sum() {
        // pi = (0.7, 0.2, 0.1); choose w so only the 0.1-label's score
        // clears it
        let oracle = SoftmaxOracle {
            pi: vec![0.7, 0.2, 0.1],
            scores: vec![0.36, 1.61, 2.30],
            num_labels: 3,
        };
        assert_abs_diff_eq!(oracle.tail_probability(0, 2.0), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle.tail_probability(0, 1.0), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle.tail_probability(0, 0.0), 1.0, epsilon = 1e-12);
    }

    /// Chi-square goodness of fit of generated labels against the summed
    /// label law, over 100k draws at the 0.001 level.
    #[test]
    fn labels_follow_emitted_distribution() {
        let num_labels = 5;
        let spec = GeneratorSpec::DirichletSoftmax {
            concentration: 0.6,
            num_labels,
            temperature: 1.0,
            size: 100_000,
            seed: 13,
        };
        let data = generate(&spec).unwrap();
        let mut observed = vec![0.0f64; num_labels];
        let mut expected = vec![0.0f64; num_labels];
        for i in 0..100_000 {
            observed[data.table.true_label(i)] += 1.0;
            for (y, &p) in data.oracle.label_probabilities(i).iter().enumerate() {
                expected[y] += p;
            }
        }
        let statistic: f64 = observed
            .iter()
            .zip(&expected)
            .map(|(o, e)| (o - e) * (o - e) / e)
            .sum();
        let chi2 = ChiSquared::new((num_labels - 1) as f64).unwrap();
        let critical = chi2.inverse_cdf(0.999);
        assert!(
            statistic < critical,
            "chi-square statistic {statistic} above the 0.999 quantile {critical}"
        );
    }

    #[test]
    fn clustered_features_have_cluster_structure() {
        let spec = GeneratorSpec::ClusteredFeatures {
            num_clusters: 3,
            spread: 0.05,
            num_labels: 3,
            size: 120,
            seed: 17,
        };
        let data = generate(&spec).unwrap();
        assert_eq!(data.features.num_cols(), 2);
        assert_eq!(data.table.num_samples(), 120);
        // tight spread: the label law concentrates on some label
        let mut peaked = 0usize;
        for i in 0..120 {
            let max = data
                .oracle
                .label_probabilities(i)
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            if max > 0.95 {
                peaked += 1;
            }
        }
        assert!(peaked > 100, "only {peaked} of 120 samples are peaked");
    }

    #[test]
    fn two_point_law_closed_form_matches_hand_values() {
        use crate::transform::Transform;
        let law = TwoPointLaw::standard();
        // identity: E[S] = 0.5(0.96*0.5 + 0.04*2) + 0.5(0.1*5 + 0.9*12),
        //           E[1/w] = 0.5(1 + 0.1)
        let j_identity = law.closed_form_objective(&Transform::Identity).unwrap();
        let mean_s = 0.5 * (0.96 * 0.5 + 0.04 * 2.0) + 0.5 * (0.1 * 5.0 + 0.9 * 12.0);
        assert_abs_diff_eq!(j_identity, mean_s * 0.55, epsilon = 1e-12);

        let j_iw = law.closed_form_objective(&Transform::Iw).unwrap();
        let mean_iw = 0.5 * (0.04 * 1.0) + 0.5 * (0.9 * 10.0);
        assert_abs_diff_eq!(j_iw, mean_iw * 0.55, epsilon = 1e-12);

        let j_opt = law
            .closed_form_objective(&Transform::optimal_oracle())
            .unwrap();
        let mean_sqrt_p = 0.5 * 0.04f64.sqrt() + 0.5 * 0.9f64.sqrt();
        assert_abs_diff_eq!(j_opt, mean_sqrt_p * mean_sqrt_p, epsilon = 1e-12);

        assert!(j_opt < j_iw && j_iw < j_identity);
    }
}
