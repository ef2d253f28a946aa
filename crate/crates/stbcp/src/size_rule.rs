//! Size-constraint rules `T(D, X)`: constant budgets, feature-entropy
//! budgets from the softmax of the query's own scores, and budgets driven by
//! local label entropy in a PCA-reduced feature space (k-nearest neighbors
//! over the pooled calibration-plus-query points, data-driven entropy
//! bounds, power-law binning).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{CalibrationSplit, FeatureMatrix, LabelDistribution, ScoreTable};
use crate::error::{Error, Result};

/// Parameters of the entropy-to-budget binning map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningParams {
    pub t_min: usize,
    pub t_max: usize,
    #[serde(rename = "p", default = "default_power")]
    pub power: f64,
    #[serde(default)]
    pub entropy_bounds: EntropyBounds,
}

/// Where the binning range comes from: pinned endpoints, or the min/max of
/// the entropies observed in the evaluation pool.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyBounds {
    Fixed { en_min: f64, en_max: f64 },
    #[default]
    DataDriven,
}

fn default_power() -> f64 {
    1.0
}

fn default_k() -> usize {
    10
}

fn default_reduced_dim() -> usize {
    2
}

impl BinningParams {
    pub fn validate(&self, num_labels: usize) -> Result<()> {
        if self.t_min < 1 || self.t_min > self.t_max || self.t_max > num_labels {
            return Err(Error::Validation(format!(
                "need 1 <= t_min <= t_max <= {num_labels}, got t_min={}, t_max={}",
                self.t_min, self.t_max
            )));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::Validation(format!(
                "binning power must be positive, got {}",
                self.power
            )));
        }
        if let EntropyBounds::Fixed { en_min, en_max } = self.entropy_bounds {
            if !(en_min < en_max) || !en_min.is_finite() || !en_max.is_finite() {
                return Err(Error::DegenerateRange { en_min, en_max });
            }
        }
        Ok(())
    }
}

/// A size-constraint rule. The serialized form is the experiment-config
/// object, e.g. `{"rule":"constant","t":2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SizeRule {
    Constant {
        t: usize,
    },
    FeatureEntropy {
        #[serde(flatten)]
        binning: BinningParams,
    },
    DataFeatureEntropy {
        #[serde(flatten)]
        binning: BinningParams,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_reduced_dim")]
        reduced_dim: usize,
    },
}

impl SizeRule {
    pub fn validate(&self, num_labels: usize) -> Result<()> {
        match self {
            SizeRule::Constant { t } => {
                if *t < 1 || *t > num_labels {
                    return Err(Error::InvalidBudget {
                        t: *t,
                        num_labels,
                    });
                }
                Ok(())
            }
            SizeRule::FeatureEntropy { binning } => binning.validate(num_labels),
            SizeRule::DataFeatureEntropy {
                binning,
                k,
                reduced_dim,
            } => {
                binning.validate(num_labels)?;
                if *k < 1 {
                    return Err(Error::Validation("neighbor count k must be >= 1".into()));
                }
                if *reduced_dim < 1 {
                    return Err(Error::Validation("reduced_dim must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    /// Whether the budget can depend on the dataset parameter, i.e. vary
    /// with the candidate label swapped into the pool.
    pub fn is_data_dependent(&self) -> bool {
        matches!(self, SizeRule::DataFeatureEntropy { .. })
    }
}

/// Shannon entropy in nats, with `0 ln 0 := 0`.
pub fn entropy(dist: &LabelDistribution) -> f64 {
    dist.probabilities()
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Softmax over negated scores: `pi_y` proportional to `exp(-s_y)`. For
/// cross-entropy scores this recovers the classifier's output exactly.
pub fn softmax_distribution(scores: &[f64]) -> LabelDistribution {
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = scores.iter().map(|s| (-(s - min)).exp()).collect();
    let total: f64 = weights.iter().sum();
    LabelDistribution::new(weights.iter().map(|w| w / total).collect())
        .expect("softmax weights normalize to a valid distribution")
}

/// Maps an entropy value to a budget: `t_min - 1 + #{l : en >= bins(l)}`,
/// `bins(l) = en_min + (en_max - en_min) ((l-1)/(L-1))^p`, clamped to
/// `[t_min, t_max]`. For `L = 1`, `bins(1) = en_min`.
pub fn bin_entropy(
    en: f64,
    params: &BinningParams,
    en_min: f64,
    en_max: f64,
) -> Result<usize> {
    if !(en_min < en_max) {
        return Err(Error::DegenerateRange { en_min, en_max });
    }
    let levels = params.t_max - params.t_min + 1;
    let mut hits = 0usize;
    for l in 1..=levels {
        // the top bin is pinned to en_max so the upper edge always lands in it
        let bin = if levels == 1 {
            en_min
        } else if l == levels {
            en_max
        } else {
            en_min
                + (en_max - en_min)
                    * (((l - 1) as f64) / ((levels - 1) as f64)).powf(params.power)
        };
        // one-sided rounding guard: entropies analytically equal to a bin
        // threshold (e.g. a uniform softmax against ln K) must land in it
        if en >= bin - 1e-12 * bin.abs().max(1.0) {
            hits += 1;
        }
    }
    let raw = params.t_min as i64 - 1 + hits as i64;
    Ok(raw.clamp(params.t_min as i64, params.t_max as i64) as usize)
}

/// Mean-centered projection onto the top `reduced_dim` eigenvectors of the
/// sample covariance, eigenvalues descending. Each component's
/// largest-magnitude loading is made positive so the projection is unique.
/// Components beyond the covariance rank are zeroed (with a warning).
pub fn pca_reduce(features: &FeatureMatrix, reduced_dim: usize) -> Result<FeatureMatrix> {
    let rows = features.num_rows();
    let cols = features.num_cols();
    if rows < 2 {
        return Err(Error::Validation(
            "PCA needs at least two samples".into(),
        ));
    }
    if reduced_dim < 1 || reduced_dim > cols.min(rows) {
        return Err(Error::Validation(format!(
            "reduced_dim {reduced_dim} outside [1, min(feature_dim={cols}, num_samples={rows})]"
        )));
    }

    let mut centered = DMatrix::<f64>::zeros(rows, cols);
    for c in 0..cols {
        let mean: f64 = (0..rows).map(|r| features.row(r)[c]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            centered[(r, c)] = features.row(r)[c] - mean;
        }
    }
    let covariance = centered.transpose() * &centered / (rows as f64 - 1.0);
    let eigen = covariance.symmetric_eigen();

    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));

    let max_eigenvalue = eigen.eigenvalues[order[0]].max(0.0);
    let tolerance = max_eigenvalue * 1e-12;
    let rank = order
        .iter()
        .take(reduced_dim)
        .filter(|&&i| eigen.eigenvalues[i] > tolerance)
        .count();
    if rank < reduced_dim {
        log::warn!(
            "covariance has only {rank} positive eigenvalues; padding {} components with zeros",
            reduced_dim - rank
        );
    }

    let mut projection = DMatrix::<f64>::zeros(cols, reduced_dim);
    for (j, &idx) in order.iter().take(rank).enumerate() {
        let mut component = eigen.eigenvectors.column(idx).clone_owned();
        let mut pivot = 0;
        for i in 1..cols {
            if component[i].abs() > component[pivot].abs() {
                pivot = i;
            }
        }
        if component[pivot] < 0.0 {
            component.neg_mut();
        }
        projection.set_column(j, &component);
    }

    let reduced = centered * projection;
    let mut data = Vec::with_capacity(rows * reduced_dim);
    for r in 0..rows {
        for c in 0..reduced_dim {
            data.push(reduced[(r, c)]);
        }
    }
    Ok(FeatureMatrix::from_raw(data, rows, reduced_dim))
}

/// Indices of the `k` nearest pool points to `query` (the query itself
/// participates), Euclidean metric, distance ties broken by smaller index.
fn nearest_neighbors(reduced: &FeatureMatrix, query: usize, k: usize) -> Vec<usize> {
    let q = reduced.row(query);
    let mut by_distance: Vec<(f64, usize)> = (0..reduced.num_rows())
        .map(|i| {
            let d2: f64 = reduced
                .row(i)
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2, i)
        })
        .collect();
    by_distance.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    by_distance.into_iter().take(k).map(|(_, i)| i).collect()
}

fn distribution_over(
    neighbor_indices: &[usize],
    labels: &[Option<usize>],
    num_labels: usize,
) -> LabelDistribution {
    let mut counts = vec![0usize; num_labels];
    let mut total = 0usize;
    for &i in neighbor_indices {
        if let Some(label) = labels[i] {
            counts[label] += 1;
            total += 1;
        }
    }
    let probabilities = if total == 0 {
        // no labeled neighbor carries information: maximal uncertainty
        vec![1.0 / num_labels as f64; num_labels]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    };
    LabelDistribution::new(probabilities).expect("neighbor counts normalize")
}

/// Empirical label distribution among the `k` nearest neighbors of the
/// query point. Unlabeled pool members (e.g. the query itself) occupy
/// neighbor slots but contribute no label mass.
pub fn knn_label_distribution(
    reduced: &FeatureMatrix,
    labels: &[Option<usize>],
    num_labels: usize,
    query_index: usize,
    k: usize,
) -> LabelDistribution {
    assert_eq!(
        labels.len(),
        reduced.num_rows(),
        "one label slot per pool row"
    );
    let k = k.clamp(1, reduced.num_rows());
    let neighbors = nearest_neighbors(reduced, query_index, k);
    distribution_over(&neighbors, labels, num_labels)
}

/// One rule evaluation: the pool is the dataset plus the query point, in a
/// caller-fixed order; `query` names the query's position in that pool.
pub struct RuleContext<'a> {
    pub num_labels: usize,
    /// Raw (unreduced) features of every pool point, when the rule needs them.
    pub features: Option<&'a FeatureMatrix>,
    /// Pool labels; `None` marks unlabeled members such as the query.
    pub labels: &'a [Option<usize>],
    /// The query's position within the pool.
    pub query: usize,
    /// The query's score row, for softmax-entropy rules.
    pub query_scores: Option<&'a [f64]>,
}

/// Evaluates `T(D, X)`; the result always lies in `[1, num_labels]`.
pub fn evaluate_rule(rule: &SizeRule, ctx: &RuleContext) -> Result<usize> {
    rule.validate(ctx.num_labels)?;
    match rule {
        SizeRule::Constant { t } => Ok(*t),
        SizeRule::FeatureEntropy { binning } => {
            let row = ctx
                .query_scores
                .ok_or(Error::MissingFeatures("query score row"))?;
            let en = entropy(&softmax_distribution(row));
            let (lo, hi) = match binning.entropy_bounds {
                EntropyBounds::Fixed { en_min, en_max } => (en_min, en_max),
                EntropyBounds::DataDriven => (0.0, (ctx.num_labels as f64).ln()),
            };
            bin_entropy(en, binning, lo, hi)
        }
        SizeRule::DataFeatureEntropy {
            binning,
            k,
            reduced_dim,
        } => {
            let features = ctx
                .features
                .ok_or(Error::MissingFeatures("feature matrix"))?;
            if features.num_rows() != ctx.labels.len() {
                return Err(Error::Validation(
                    "pool features and labels are not row-aligned".into(),
                ));
            }
            let pool = features.num_rows();
            let dim = (*reduced_dim).min(features.num_cols()).min(pool);
            let reduced = pca_reduce(features, dim)?;
            let k_eff = (*k).clamp(1, pool);
            let neighbors: Vec<Vec<usize>> = (0..pool)
                .map(|j| nearest_neighbors(&reduced, j, k_eff))
                .collect();
            budget_from_neighbors(&neighbors, ctx.labels, ctx.num_labels, ctx.query, binning)
        }
    }
}

/// The entropy-binning tail of the data-dependent pipeline, shared between
/// the one-shot evaluation and the per-trial batch evaluator.
fn budget_from_neighbors(
    neighbors: &[Vec<usize>],
    labels: &[Option<usize>],
    num_labels: usize,
    query: usize,
    binning: &BinningParams,
) -> Result<usize> {
    let entropies: Vec<f64> = neighbors
        .iter()
        .map(|nb| entropy(&distribution_over(nb, labels, num_labels)))
        .collect();
    let (lo, hi) = match binning.entropy_bounds {
        EntropyBounds::Fixed { en_min, en_max } => (en_min, en_max),
        EntropyBounds::DataDriven => {
            let lo = entropies.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = entropies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(lo < hi) {
                // every bin threshold coincides with the common entropy, so
                // every indicator fires and the binning formula yields t_max
                return Ok(binning.t_max);
            }
            (lo, hi)
        }
    };
    bin_entropy(entropies[query], binning, lo, hi)
}

/// Every budget one trial needs: the test-point budget, the pseudo-test
/// budgets `T(D_i, X_i)`, and the symmetric grid `T(D_i^y, X_i)`.
///
/// For rules that ignore the dataset parameter the symmetric grid collapses
/// onto the pseudo budgets; the collapse is exact, not an approximation.
#[derive(Debug, Clone)]
pub struct TrialBudgets {
    pub test: usize,
    pub pseudo: Vec<usize>,
    symmetric: SymmetricBudgets,
}

#[derive(Debug, Clone)]
enum SymmetricBudgets {
    SameAsPseudo,
    PerLabel { num_labels: usize, grid: Vec<usize> },
}

impl TrialBudgets {
    /// `T(D_i^y, X_i)` for calibration position `i` and candidate label `y`.
    pub fn symmetric(&self, i: usize, y: usize) -> usize {
        match &self.symmetric {
            SymmetricBudgets::SameAsPseudo => self.pseudo[i],
            SymmetricBudgets::PerLabel { num_labels, grid } => grid[i * num_labels + y],
        }
    }

    /// Whether the symmetric grid actually varies with the candidate label.
    pub fn varies_with_label(&self) -> bool {
        match &self.symmetric {
            SymmetricBudgets::SameAsPseudo => false,
            SymmetricBudgets::PerLabel { num_labels, grid } => grid
                .chunks(*num_labels)
                .any(|row| row.iter().any(|&t| t != row[0])),
        }
    }

    pub fn compute(
        rule: &SizeRule,
        table: &ScoreTable,
        features: Option<&FeatureMatrix>,
        split: &CalibrationSplit,
    ) -> Result<Self> {
        let num_labels = table.num_labels();
        rule.validate(num_labels)?;
        let n = split.n();
        match rule {
            SizeRule::Constant { t } => Ok(TrialBudgets {
                test: *t,
                pseudo: vec![*t; n],
                symmetric: SymmetricBudgets::SameAsPseudo,
            }),
            SizeRule::FeatureEntropy { .. } => {
                let budget_of = |sample: usize| -> Result<usize> {
                    let ctx = RuleContext {
                        num_labels,
                        features: None,
                        labels: &[],
                        query: 0,
                        query_scores: Some(table.row(sample)),
                    };
                    evaluate_rule(rule, &ctx)
                };
                let test = budget_of(split.test_index())?;
                let pseudo = split
                    .calibration()
                    .iter()
                    .map(|&i| budget_of(i))
                    .collect::<Result<Vec<_>>>()?;
                Ok(TrialBudgets {
                    test,
                    pseudo,
                    symmetric: SymmetricBudgets::SameAsPseudo,
                })
            }
            SizeRule::DataFeatureEntropy {
                binning,
                k,
                reduced_dim,
            } => {
                let features = features.ok_or(Error::MissingFeatures("feature matrix"))?;
                if features.num_rows() != table.num_samples() {
                    return Err(Error::Validation(
                        "feature matrix is not row-aligned with the score table".into(),
                    ));
                }
                Self::compute_data_dependent(
                    table, features, split, binning, *k, *reduced_dim, num_labels,
                )
            }
        }
    }

    fn compute_data_dependent(
        table: &ScoreTable,
        features: &FeatureMatrix,
        split: &CalibrationSplit,
        binning: &BinningParams,
        k: usize,
        reduced_dim: usize,
        num_labels: usize,
    ) -> Result<Self> {
        let n = split.n();

        // pooled pass: calibration points in split order, then the test point
        let mut pooled_rows: Vec<usize> = split.calibration().to_vec();
        pooled_rows.push(split.test_index());
        let pooled = features.select_rows(&pooled_rows);
        let dim1 = reduced_dim.min(pooled.num_cols()).min(n + 1);
        let reduced1 = pca_reduce(&pooled, dim1)?;
        let k1 = k.clamp(1, n + 1);
        let neighbors1: Vec<Vec<usize>> = (0..n + 1)
            .map(|j| nearest_neighbors(&reduced1, j, k1))
            .collect();

        // calibration-only pass, used by the pseudo-test evaluations
        let cal_only = features.select_rows(split.calibration());
        let dim2 = reduced_dim.min(cal_only.num_cols()).min(n);
        let reduced2 = pca_reduce(&cal_only, dim2)?;
        let k2 = k.clamp(1, n);
        let neighbors2: Vec<Vec<usize>> = (0..n)
            .map(|j| nearest_neighbors(&reduced2, j, k2))
            .collect();

        let cal_labels: Vec<usize> = split
            .calibration()
            .iter()
            .map(|&i| table.true_label(i))
            .collect();

        // T(D_{n+1}, X_{n+1}): full pool, unlabeled test query
        let mut labels1: Vec<Option<usize>> = cal_labels.iter().map(|&l| Some(l)).collect();
        labels1.push(None);
        let test = budget_from_neighbors(&neighbors1, &labels1, num_labels, n, binning)?;

        // T(D_i^y, X_i): full pool, test labeled y, calibration point i unlabeled
        let mut grid = vec![0usize; n * num_labels];
        for i in 0..n {
            labels1[i] = None;
            for y in 0..num_labels {
                labels1[n] = Some(y);
                grid[i * num_labels + y] =
                    budget_from_neighbors(&neighbors1, &labels1, num_labels, i, binning)
                        .map_err(|e| e.at(i, Some(y)))?;
            }
            labels1[i] = Some(cal_labels[i]);
        }
        labels1[n] = None;

        // T(D_i, X_i): calibration-only pool, point i unlabeled
        let mut labels2: Vec<Option<usize>> = cal_labels.iter().map(|&l| Some(l)).collect();
        let mut pseudo = Vec::with_capacity(n);
        for i in 0..n {
            labels2[i] = None;
            pseudo.push(
                budget_from_neighbors(&neighbors2, &labels2, num_labels, i, binning)
                    .map_err(|e| e.at(i, None))?,
            );
            labels2[i] = Some(cal_labels[i]);
        }

        Ok(TrialBudgets {
            test,
            pseudo,
            symmetric: SymmetricBudgets::PerLabel { num_labels, grid },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn dist(p: &[f64]) -> LabelDistribution {
        LabelDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn entropy_values() {
        assert_abs_diff_eq!(entropy(&dist(&[0.5, 0.5])), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(entropy(&dist(&[1.0, 0.0])), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            entropy(&dist(&[0.25, 0.25, 0.25, 0.25])),
            4f64.ln(),
            epsilon = 1e-12
        );
    }

    fn binning(t_min: usize, t_max: usize, power: f64) -> BinningParams {
        BinningParams {
            t_min,
            t_max,
            power,
            entropy_bounds: EntropyBounds::DataDriven,
        }
    }

    #[test]
    fn bin_entropy_direct_arithmetic() {
        let params = binning(1, 3, 1.0);
        assert_eq!(bin_entropy(0.6, &params, 0.0, 1.0).unwrap(), 2);
        assert_eq!(bin_entropy(0.0, &params, 0.0, 1.0).unwrap(), 1);
        assert_eq!(bin_entropy(1.0, &params, 0.0, 1.0).unwrap(), 3);
    }

    #[test]
    fn bin_entropy_edges_exact_even_with_awkward_floats() {
        let params = binning(2, 5, 1.7);
        let (lo, hi) = (0.1, 0.30000000000000004);
        assert_eq!(bin_entropy(lo, &params, lo, hi).unwrap(), 2);
        assert_eq!(bin_entropy(hi, &params, lo, hi).unwrap(), 5);
    }

    #[test]
    fn bin_entropy_degenerate_range() {
        let params = binning(1, 3, 1.0);
        assert!(matches!(
            bin_entropy(0.5, &params, 1.0, 1.0),
            Err(Error::DegenerateRange { .. })
        ));
    }

    #[test]
    fn bin_entropy_monotone_in_entropy() {
        let mut rng = crate::data::trial_rng(21, 0);
        for _ in 0..200 {
            let t_min = rng.random_range(1..4);
            let t_max = rng.random_range(t_min..8);
            let power = rng.random::<f64>() * 3.0 + 0.1;
            let params = binning(t_min, t_max, power);
            let mut prev = 0;
            for step in 0..=50 {
                let en = step as f64 / 50.0 * 2.0;
                let t = bin_entropy(en, &params, 0.0, 2.0).unwrap();
                assert!(t >= prev, "binning not monotone");
                prev = t;
            }
        }
    }

    #[test]
    fn pca_rank_one_line() {
        // points on a line in 2-D: one component carries all the variance
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64 * 2.0, -(i as f64)])
            .collect();
        let features = FeatureMatrix::new(rows).unwrap();
        let reduced = pca_reduce(&features, 1).unwrap();
        let total_var: f64 = {
            let mean_x = 9.0;
            let mean_y = -4.5;
            (0..10)
                .map(|i| {
                    let dx = i as f64 * 2.0 - mean_x;
                    let dy = -(i as f64) - mean_y;
                    dx * dx + dy * dy
                })
                .sum::<f64>()
                / 9.0
        };
        let proj_var: f64 = {
            let mean: f64 = (0..10).map(|i| reduced.row(i)[0]).sum::<f64>() / 10.0;
            (0..10)
                .map(|i| (reduced.row(i)[0] - mean).powi(2))
                .sum::<f64>()
                / 9.0
        };
        assert_abs_diff_eq!(proj_var, total_var, epsilon = 1e-9);
    }

    #[test]
    fn pca_isotropic_captures_proportional_variance() {
        // Monte-Carlo oracle: isotropic gaussian in 6-D, reduce to 3: the
        // projected variance is about half the total.
        let mut rng = crate::data::trial_rng(22, 0);
        let rows: Vec<Vec<f64>> = (0..4000)
            .map(|_| {
                (0..6)
                    .map(|_| {
                        let u1: f64 = rng.random::<f64>().max(1e-12);
                        let u2: f64 = rng.random();
                        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                    })
                    .collect()
            })
            .collect();
        let features = FeatureMatrix::new(rows.clone()).unwrap();
        let reduced = pca_reduce(&features, 3).unwrap();
        let total: f64 = (0..6)
            .map(|c| {
                let mean: f64 = rows.iter().map(|r| r[c]).sum::<f64>() / 4000.0;
                rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 3999.0
            })
            .sum();
        let captured: f64 = (0..3)
            .map(|c| {
                let mean: f64 =
                    (0..4000).map(|r| reduced.row(r)[c]).sum::<f64>() / 4000.0;
                (0..4000)
                    .map(|r| (reduced.row(r)[c] - mean).powi(2))
                    .sum::<f64>()
                    / 3999.0
            })
            .sum();
        let ratio = captured / total;
        assert!(
            (ratio - 0.5).abs() < 0.06,
            "expected about half the variance, got {ratio}"
        );
    }

    #[test]
    fn pca_projection_is_idempotent() {
        let mut rng = crate::data::trial_rng(23, 0);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let features = FeatureMatrix::new(rows).unwrap();
        let once = pca_reduce(&features, 2).unwrap();
        let twice = pca_reduce(&once, 2).unwrap();
        for r in 0..40 {
            for c in 0..2 {
                assert_abs_diff_eq!(once.row(r)[c], twice.row(r)[c], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn knn_single_neighbor_is_point_mass() {
        let features =
            FeatureMatrix::new(vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]]).unwrap();
        let labels = vec![Some(0), Some(1), Some(1)];
        // query 1's single nearest neighbor is itself
        let d = knn_label_distribution(&features, &labels, 2, 1, 1);
        assert_eq!(d.probabilities(), &[0.0, 1.0]);
    }

    #[test]
    fn knn_coincident_points_full_pool() {
        let features =
            FeatureMatrix::new(vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let labels = vec![Some(0), Some(0), Some(1)];
        let d = knn_label_distribution(&features, &labels, 2, 2, 3);
        assert_abs_diff_eq!(d.probabilities()[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probabilities()[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn knn_two_clusters_checked_by_exhaustive_sort() {
        let mut rng = crate::data::trial_rng(24, 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            rows.push(vec![
                rng.random::<f64>() * 0.2,
                rng.random::<f64>() * 0.2,
            ]);
            labels.push(Some(i % 2)); // cluster A carries labels 0 and 1
        }
        for _ in 0..6 {
            rows.push(vec![
                50.0 + rng.random::<f64>() * 0.2,
                50.0 + rng.random::<f64>() * 0.2,
            ]);
            labels.push(Some(2));
        }
        let features = FeatureMatrix::new(rows.clone()).unwrap();
        let query = 2usize;
        let k = 6usize;
        let d = knn_label_distribution(&features, &labels, 3, query, k);
        // independent oracle: sort all distances by hand, take the closest k
        let mut order: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let dx = r[0] - rows[query][0];
                let dy = r[1] - rows[query][1];
                (dx * dx + dy * dy, i)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut counts = [0usize; 3];
        for &(_, i) in order.iter().take(k) {
            counts[labels[i].unwrap()] += 1;
        }
        assert_eq!(counts[2], 0, "cluster-B labels must not appear");
        for (y, &count) in counts.iter().enumerate() {
            assert_abs_diff_eq!(
                d.probabilities()[y],
                count as f64 / k as f64,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn constant_rule() {
        let rule = SizeRule::Constant { t: 2 };
        let ctx = RuleContext {
            num_labels: 5,
            features: None,
            labels: &[],
            query: 0,
            query_scores: None,
        };
        assert_eq!(evaluate_rule(&rule, &ctx).unwrap(), 2);
    }

    #[test]
    fn feature_entropy_uniform_softmax_hits_top_bin() {
        let rule = SizeRule::FeatureEntropy {
            binning: binning(1, 5, 1.0),
        };
        let scores = vec![0.7; 10]; // uniform softmax, entropy = ln 10 = en_max
        let ctx = RuleContext {
            num_labels: 10,
            features: None,
            labels: &[],
            query: 0,
            query_scores: Some(&scores),
        };
        assert_eq!(evaluate_rule(&rule, &ctx).unwrap(), 5);
    }

    #[test]
    fn feature_entropy_requires_scores() {
        let rule = SizeRule::FeatureEntropy {
            binning: binning(1, 5, 1.0),
        };
        let ctx = RuleContext {
            num_labels: 10,
            features: None,
            labels: &[],
            query: 0,
            query_scores: None,
        };
        assert!(matches!(
            evaluate_rule(&rule, &ctx),
            Err(Error::MissingFeatures(_))
        ));
    }

    /// Hand-run of the single-rule pipeline on a 7-point pool: the query
    /// sits in a pure-label cluster, so its local entropy is the pool
    /// minimum and the budget is t_min.
    #[test]
    fn data_rule_pure_query_cluster_gives_t_min() {
        let rows = vec![
            vec![0.0, 0.0],   // label 0
            vec![0.1, 0.0],   // label 0
            vec![0.0, 0.1],   // label 0
            vec![10.0, 10.0], // label 1
            vec![10.1, 10.0], // label 1
            vec![10.0, 10.1], // label 0  (mixes cluster B)
            vec![0.05, 0.05], // query, unlabeled
        ];
        let features = FeatureMatrix::new(rows).unwrap();
        let labels = vec![
            Some(0),
            Some(0),
            Some(0),
            Some(1),
            Some(1),
            Some(0),
            None,
        ];
        let rule = SizeRule::DataFeatureEntropy {
            binning: binning(1, 2, 1.0),
            k: 3,
            reduced_dim: 2,
        };
        let ctx = RuleContext {
            num_labels: 2,
            features: Some(&features),
            labels: &labels,
            query: 6,
            query_scores: None,
        };
        // hand computation: the query's 3 nearest are itself plus two pure
        // label-0 points -> entropy 0 = pool minimum; cluster B points see
        // labels {1,1,0} -> entropy of (1/3, 2/3) > 0, the pool maximum;
        // bins sit at (0, en_max), so the query lands in the bottom bin
        assert_eq!(evaluate_rule(&rule, &ctx).unwrap(), 1);
    }

    #[test]
    fn data_rule_permutation_invariant_for_distinct_distances() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.3],
            vec![2.1, 0.9],
            vec![3.7, 1.1],
            vec![5.3, 2.2],
            vec![8.0, 3.1],
        ];
        let labels = vec![Some(0), Some(1), Some(0), Some(1), Some(0), None];
        let features = FeatureMatrix::new(rows.clone()).unwrap();
        let rule = SizeRule::DataFeatureEntropy {
            binning: binning(1, 2, 1.0),
            k: 3,
            reduced_dim: 2,
        };
        let base = evaluate_rule(
            &rule,
            &RuleContext {
                num_labels: 2,
                features: Some(&features),
                labels: &labels,
                query: 5,
                query_scores: None,
            },
        )
        .unwrap();
        // permute the non-query points
        let perm = [3usize, 0, 4, 1, 2, 5];
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let permuted_labels: Vec<Option<usize>> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = FeatureMatrix::new(permuted_rows).unwrap();
        let shuffled = evaluate_rule(
            &rule,
            &RuleContext {
                num_labels: 2,
                features: Some(&permuted),
                labels: &permuted_labels,
                query: 5,
                query_scores: None,
            },
        )
        .unwrap();
        assert_eq!(base, shuffled);
    }

    #[test]
    fn evaluate_rule_stays_in_range() {
        let mut rng = crate::data::trial_rng(25, 0);
        for _ in 0..100 {
            let num_labels = rng.random_range(2..8);
            let pool = rng.random_range(3..12);
            let rows: Vec<Vec<f64>> = (0..pool)
                .map(|_| vec![rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0])
                .collect();
            let mut labels: Vec<Option<usize>> = (0..pool)
                .map(|_| Some(rng.random_range(0..num_labels)))
                .collect();
            let query = rng.random_range(0..pool);
            labels[query] = None;
            let features = FeatureMatrix::new(rows).unwrap();
            let t_min = rng.random_range(1..=num_labels);
            let t_max = rng.random_range(t_min..=num_labels);
            let rule = SizeRule::DataFeatureEntropy {
                binning: binning(t_min, t_max, rng.random::<f64>() * 2.0 + 0.2),
                k: rng.random_range(1..6),
                reduced_dim: 2,
            };
            let t = evaluate_rule(
                &rule,
                &RuleContext {
                    num_labels,
                    features: Some(&features),
                    labels: &labels,
                    query,
                    query_scores: None,
                },
            )
            .unwrap();
            assert!((1..=num_labels).contains(&t));
        }
    }

    #[test]
    fn rule_config_round_trip() {
        let json = r#"{"rule":"constant","t":2}"#;
        let rule: SizeRule = serde_json::from_str(json).unwrap();
        assert_eq!(rule, SizeRule::Constant { t: 2 });

        let json = r#"{"rule":"feature_entropy","t_min":1,"t_max":5,"p":1.5}"#;
        let rule: SizeRule = serde_json::from_str(json).unwrap();
        match &rule {
            SizeRule::FeatureEntropy { binning } => {
                assert_eq!(binning.t_min, 1);
                assert_eq!(binning.t_max, 5);
                assert_eq!(binning.power, 1.5);
                assert_eq!(binning.entropy_bounds, EntropyBounds::DataDriven);
            }
            other => panic!("wrong rule: {other:?}"),
        }

        let json = r#"{"rule":"data_feature_entropy","t_min":1,"t_max":4,"p":1.0,"k":7}"#;
        let rule: SizeRule = serde_json::from_str(json).unwrap();
        match &rule {
            SizeRule::DataFeatureEntropy { k, reduced_dim, .. } => {
                assert_eq!(*k, 7);
                assert_eq!(*reduced_dim, 2); // default
            }
            other => panic!("wrong rule: {other:?}"),
        }
    }
}
