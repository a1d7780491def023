//! Two-step maximum-likelihood estimation: multi-start fitting of the
//! mixture measurement model, logistic regression of class membership on
//! covariates with frozen measurement parameters, Wald standard errors in
//! both parameter frames, information criteria, odds ratios, and class-count
//! selection.

mod fit;
pub mod params;

pub use fit::{fit_step1, fit_step2};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::likelihood::{LogisticCoeffs, MixingSpec, MixtureModel, PosteriorMatrix};
use crate::model::{ClassParams, Frame};

/// A point estimate with an optional standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: Option<f64>,
}

impl Estimate {
    pub fn new(value: f64, se: Option<f64>) -> Self {
        Self { value, se }
    }

    pub fn bare(value: f64) -> Self {
        Self { value, se: None }
    }
}

/// Wald confidence interval `θ̂ ± z·SE`; `None` when the SE is missing.
pub fn wald_ci(est: &Estimate, level: f64) -> Result<Option<(f64, f64)>> {
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(Error::invalid(format!("confidence level must be in (0, 1), got {level}")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    Ok(est.se.map(|se| (est.value - z * se, est.value + z * se)))
}

/// Convergence outcome of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// Every start failed the convergence criterion.
    Failed { attempts: u32 },
    /// Optimum reached but the solution is not identified
    /// (e.g. separated logistic coefficients).
    NotIdentified { reason: String },
}

/// Estimates for one latent class in one parameter frame. Covariance entries
/// are packed lower-triangle in row order `(0,0) (1,0) (1,1) (2,0) (2,1)
/// (2,2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEstimates {
    pub mean: [Estimate; 3],
    pub cov: [Estimate; 6],
    pub knot: Estimate,
    pub residual_var: Estimate,
}

/// Packed lower-triangle index of covariance entry `(i, j)`, `i ≥ j`.
pub fn cov_index(i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < 3);
    i * (i + 1) / 2 + j
}

impl ClassEstimates {
    pub fn from_params(p: &ClassParams) -> Self {
        let mut cov = [Estimate::bare(0.0); 6];
        for i in 0..3 {
            for j in 0..=i {
                cov[cov_index(i, j)] = Estimate::bare(p.cov[(i, j)]);
            }
        }
        Self {
            mean: [
                Estimate::bare(p.mean[0]),
                Estimate::bare(p.mean[1]),
                Estimate::bare(p.mean[2]),
            ],
            cov,
            knot: Estimate::bare(p.knot),
            residual_var: Estimate::bare(p.residual_var),
        }
    }

    pub fn to_params(&self, frame: Frame) -> Result<ClassParams> {
        let mut cov = nalgebra::Matrix3::zeros();
        for i in 0..3 {
            for j in 0..=i {
                cov[(i, j)] = self.cov[cov_index(i, j)].value;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        ClassParams::new(
            frame,
            nalgebra::Vector3::new(self.mean[0].value, self.mean[1].value, self.mean[2].value),
            cov,
            self.knot.value,
            self.residual_var.value,
        )
    }
}

/// Logistic coefficient estimates for one non-reference class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticEstimates {
    pub intercept: Estimate,
    pub slopes: Vec<Estimate>,
}

impl LogisticEstimates {
    pub fn coeffs(&self) -> LogisticCoeffs {
        LogisticCoeffs {
            intercept: self.intercept.value,
            slopes: self.slopes.iter().map(|s| s.value).collect(),
        }
    }
}

/// Result of a step-1 (and optionally step-2) fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub status: FitStatus,
    pub attempts: u32,
    pub class_count: usize,
    pub n: usize,
    pub free_params: usize,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    /// Reparameterized-frame estimates, classes ordered by knot ascending.
    pub repar: Vec<ClassEstimates>,
    /// Original-frame estimates (means through `h`, covariances through
    /// `∇h Ψ' ∇hᵀ`).
    pub original: Vec<ClassEstimates>,
    pub proportions: Vec<Estimate>,
    /// Step-2 logistic coefficients per non-reference class, when fitted.
    pub logistic: Option<Vec<LogisticEstimates>>,
    /// Names of the covariates the logistic block was fitted on.
    pub covariate_names: Vec<String>,
    pub posterior: PosteriorMatrix,
    pub modal: Vec<usize>,
    pub time_range: (f64, f64),
}

impl FitResult {
    pub fn converged(&self) -> bool {
        matches!(self.status, FitStatus::Converged)
    }

    /// Rebuild the fitted mixture model from the reparameterized estimates.
    pub fn model(&self) -> Result<MixtureModel> {
        let classes = self
            .repar
            .iter()
            .map(|c| c.to_params(Frame::Reparameterized))
            .collect::<Result<Vec<_>>>()?;
        MixtureModel::new(
            classes,
            MixingSpec::free(self.proportions.iter().map(|p| p.value).collect()),
        )
    }

    /// Reorder classes so that new class `k` is old class `perm[k]`.
    ///
    /// Logistic coefficients transform by the reference change
    /// `β̃_ℓ = β_{perm[ℓ]} − β_{perm[0]}` (with `β_0 ≡ 0` for the old
    /// reference); their standard errors survive only when one side of the
    /// difference is the old reference, since cross-class covariances are
    /// not retained.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<FitResult> {
        let k = self.class_count;
        if perm.len() != k || {
            let mut seen = vec![false; k];
            perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::invalid("permute_classes: not a permutation"));
        }
        let mut inv = vec![0usize; k];
        for (new_k, &old_k) in perm.iter().enumerate() {
            inv[old_k] = new_k;
        }
        let logistic = match &self.logistic {
            None => None,
            Some(rows) => {
                // Old coefficient vector per old class, with the old reference at 0.
                let old: Vec<(Estimate, Vec<Estimate>)> = std::iter::once((
                    Estimate::bare(0.0),
                    vec![Estimate::bare(0.0); rows.first().map_or(0, |r| r.slopes.len())],
                ))
                .chain(rows.iter().map(|r| (r.intercept, r.slopes.clone())))
                .collect();
                let new_ref = perm[0];
                let diff = |a: &Estimate, b: &Estimate| {
                    let se = match (a.se, b.se) {
                        _ if b.value == 0.0 && b.se.is_none() => a.se,
                        _ if a.value == 0.0 && a.se.is_none() => b.se,
                        _ => None,
                    };
                    Estimate::new(a.value - b.value, se)
                };
                Some(
                    (1..k)
                        .map(|new_k| {
                            let a = &old[perm[new_k]];
                            let b = &old[new_ref];
                            LogisticEstimates {
                                intercept: diff(&a.0, &b.0),
                                slopes: a
                                    .1
                                    .iter()
                                    .zip(&b.1)
                                    .map(|(x, y)| diff(x, y))
                                    .collect(),
                            }
                        })
                        .collect(),
                )
            }
        };
        Ok(FitResult {
            repar: perm.iter().map(|&p| self.repar[p].clone()).collect(),
            original: perm.iter().map(|&p| self.original[p].clone()).collect(),
            proportions: perm.iter().map(|&p| self.proportions[p]).collect(),
            posterior: self.posterior.permute_classes(perm),
            modal: self.modal.iter().map(|&z| inv[z]).collect(),
            logistic,
            ..self.clone()
        })
    }
}

/// `AIC = −2ℓℓ + 2p`, `BIC = −2ℓℓ + p·ln n`.
pub fn information_criteria(loglik: f64, p: usize, n: usize) -> Result<(f64, f64)> {
    if n < 1 {
        return Err(Error::invalid("information_criteria: n must be at least 1"));
    }
    let neg2 = -2.0 * loglik;
    Ok((neg2 + 2.0 * p as f64, neg2 + p as f64 * (n as f64).ln()))
}

/// One odds-ratio row of a step-2 report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsRatioRow {
    /// 1-based class label the coefficient belongs to (class 1 is the
    /// reference and has no rows).
    pub class: usize,
    pub predictor: String,
    pub odds_ratio: f64,
    pub ci: Option<(f64, f64)>,
    /// True when the CI excludes 1.
    pub significant: Option<bool>,
}

/// Odds ratios `exp(β̂)` with exponentiated Wald CIs for a step-2 fit.
pub fn odds_ratios(fit: &FitResult, level: f64) -> Result<Vec<OddsRatioRow>> {
    let Some(logistic) = &fit.logistic else {
        return Err(Error::invalid("odds_ratios: fit has no step-2 coefficients"));
    };
    if !fit.converged() {
        return Err(Error::invalid("odds_ratios: step-2 fit did not converge"));
    }
    let mut rows = Vec::new();
    for (j, coefs) in logistic.iter().enumerate() {
        let class = j + 2;
        let mut items = vec![("(intercept)".to_string(), coefs.intercept)];
        for (name, est) in fit.covariate_names.iter().zip(&coefs.slopes) {
            items.push((name.clone(), *est));
        }
        for (predictor, est) in items {
            let ci = wald_ci(&est, level)?.map(|(lo, hi)| (lo.exp(), hi.exp()));
            rows.push(OddsRatioRow {
                class,
                predictor,
                odds_ratio: est.value.exp(),
                significant: ci.map(|(lo, hi)| lo > 1.0 || hi < 1.0),
                ci,
            });
        }
    }
    Ok(rows)
}

/// Options shared by the fitting entry points.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Maximum number of starts before declaring failure.
    pub attempts: u32,
    /// Scaled gradient tolerance for convergence.
    pub grad_tol: f64,
    /// Objective evaluation budget per attempt.
    pub max_evals: usize,
    /// Seed for start perturbation and tie-breaking.
    pub seed: u64,
    /// Skip the numeric Hessian (no standard errors); useful in bulk runs
    /// that only need point estimates.
    pub standard_errors: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { attempts: 10, grad_tol: 1e-5, max_evals: 5000, seed: 0, standard_errors: true }
    }
}

/// Per-K fit table and the BIC-minimizing class count.
#[derive(Debug, Clone)]
pub struct ClassSelection {
    /// One fit per requested K, in the requested order.
    pub fits: Vec<FitResult>,
    /// K minimizing BIC among converged fits; `None` if nothing converged.
    pub best_k: Option<usize>,
}

impl ClassSelection {
    pub fn best_fit(&self) -> Option<&FitResult> {
        self.best_k.and_then(|k| self.fits.iter().find(|f| f.class_count == k))
    }
}

/// Fit every class count in `k_range` and select the BIC minimizer among
/// converged fits. Failed counts stay in the table but are excluded from
/// selection.
pub fn select_classes(
    data: &crate::data::LongitudinalDataset,
    k_range: &[usize],
    options: &FitOptions,
) -> Result<ClassSelection> {
    if k_range.is_empty() {
        return Err(Error::invalid("select_classes: empty class-count range"));
    }
    let mut fits = Vec::with_capacity(k_range.len());
    for &k in k_range {
        fits.push(fit_step1(data, k, options)?);
    }
    let best_k = fits
        .iter()
        .filter(|f| f.converged())
        .min_by(|a, b| a.bic.partial_cmp(&b.bic).unwrap())
        .map(|f| f.class_count);
    Ok(ClassSelection { fits, best_k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn information_criteria_model_table() {
        // −2LL, p, n → AIC, BIC for the published four-fit table.
        let cases = [
            (31659.87, 11, 500, 31681.87, 31728.23),
            (31388.67, 23, 500, 31434.67, 31531.60),
            (31231.48, 35, 500, 31301.48, 31448.99),
            (31186.26, 47, 500, 31280.26, 31478.35),
        ];
        for (neg2ll, p, n, aic, bic) in cases {
            let (a, b) = information_criteria(-neg2ll / 2.0, p, n).unwrap();
            // Published values carry two decimals, so ±0.01.
            assert_relative_eq!(a, aic, epsilon = 0.01);
            assert_relative_eq!(b, bic, epsilon = 0.01);
        }
    }

    #[test]
    fn information_criteria_zero_params() {
        let (a, b) = information_criteria(-50.0, 0, 17).unwrap();
        assert_relative_eq!(a, 100.0);
        assert_relative_eq!(b, 100.0);
    }

    #[test]
    fn wald_interval_example() {
        let ci = wald_ci(&Estimate::new(1.0, Some(0.5)), 0.95).unwrap().unwrap();
        assert_relative_eq!(ci.0, 0.020, epsilon = 5e-4);
        assert_relative_eq!(ci.1, 1.980, epsilon = 5e-4);
        assert!(wald_ci(&Estimate::bare(1.0), 0.95).unwrap().is_none());
    }

    #[test]
    fn odds_ratio_arithmetic() {
        let dummy_post =
            PosteriorMatrix::new(nalgebra::DMatrix::from_row_slice(1, 2, &[0.5, 0.5])).unwrap();
        let fit = FitResult {
            status: FitStatus::Converged,
            attempts: 1,
            class_count: 2,
            n: 1,
            free_params: 2,
            loglik: 0.0,
            aic: 0.0,
            bic: 0.0,
            repar: vec![],
            original: vec![],
            proportions: vec![],
            logistic: Some(vec![LogisticEstimates {
                intercept: Estimate::new(0.0, Some(0.1)),
                slopes: vec![Estimate::new(0.374, Some(0.147)), Estimate::new(2.0_f64.ln(), Some(0.0))],
            }]),
            covariate_names: vec!["x1".into(), "x2".into()],
            posterior: dummy_post,
            modal: vec![0],
            time_range: (0.0, 9.0),
        };
        let rows = odds_ratios(&fit, 0.95).unwrap();
        assert_eq!(rows.len(), 3);
        let x1 = rows.iter().find(|r| r.predictor == "x1").unwrap();
        assert_relative_eq!(x1.odds_ratio, 1.454, epsilon = 1e-3);
        let (lo, hi) = x1.ci.unwrap();
        assert_relative_eq!(lo, 1.090, epsilon = 1e-3);
        assert_relative_eq!(hi, 1.939, epsilon = 1e-3);
        assert_eq!(x1.significant, Some(true));
        // β̂ = ln 2 with a degenerate SE pins the interval at (2, 2).
        let x2 = rows.iter().find(|r| r.predictor == "x2").unwrap();
        assert_relative_eq!(x2.odds_ratio, 2.0, epsilon = 1e-12);
        let (lo, hi) = x2.ci.unwrap();
        assert_relative_eq!(lo, 2.0, epsilon = 1e-12);
        assert_relative_eq!(hi, 2.0, epsilon = 1e-12);
        // β̂ = 0 → OR = 1.
        let b0 = rows.iter().find(|r| r.predictor == "(intercept)").unwrap();
        assert_relative_eq!(b0.odds_ratio, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cov_index_covers_lower_triangle() {
        let expect = [(0, 0, 0), (1, 0, 1), (1, 1, 2), (2, 0, 3), (2, 1, 4), (2, 2, 5)];
        for (i, j, flat) in expect {
            assert_eq!(cov_index(i, j), flat);
        }
    }
}
