//! Mixture log-likelihoods, mixing probabilities, posterior class
//! probabilities, classification, and accuracy.
//!
//! All mixture sums run in log space (log-sum-exp); per-class log-densities
//! are clipped at −1e10 so distant kernels cannot underflow a whole
//! individual. Every individual contributes a term built on its own
//! measurement occasions, so ragged row lengths are the normal case.
//!
//! Class densities use the low-rank structure `Σᵢ = ΛᵢΨ'Λᵢᵀ + θI`: the J×J
//! solve reduces to a 3×3 one, which keeps a full mixture evaluation cheap
//! even at J = 10 and n = 1000.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::model::{ClassParams, Frame};

/// Clip floor for per-class log-densities.
pub(crate) const LOG_DENSITY_FLOOR: f64 = -1e10;

const LN_2PI: f64 = 1.8378770664093453;

/// Logistic coefficients for one non-reference class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticCoeffs {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

/// How mixing proportions are parameterized.
///
/// `Free` carries the marginal proportions themselves (step 1); `Logistic`
/// carries per-class coefficient vectors with class 1 as the reference
/// (step 2), so the class-1 linear predictor is identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MixingSpec {
    Free { proportions: Vec<f64> },
    Logistic { coeffs: Vec<LogisticCoeffs> },
}

impl MixingSpec {
    pub fn free(proportions: Vec<f64>) -> Self {
        MixingSpec::Free { proportions }
    }

    pub fn class_count(&self) -> usize {
        match self {
            MixingSpec::Free { proportions } => proportions.len(),
            MixingSpec::Logistic { coeffs } => coeffs.len() + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MixingSpec::Free { proportions } => {
                if proportions.is_empty() {
                    return Err(Error::invalid("MixingSpec: no classes"));
                }
                if proportions.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::invalid("MixingSpec: proportions must lie in [0, 1]"));
                }
                let sum: f64 = proportions.iter().sum();
                if (sum - 1.0).abs() > 1e-8 {
                    return Err(Error::invalid(format!(
                        "MixingSpec: proportions sum to {sum}, expected 1"
                    )));
                }
            }
            MixingSpec::Logistic { coeffs } => {
                if coeffs.is_empty() {
                    return Err(Error::invalid("MixingSpec: logistic mixing needs K ≥ 2"));
                }
                let q = coeffs[0].slopes.len();
                if coeffs.iter().any(|c| c.slopes.len() != q) {
                    return Err(Error::invalid(
                        "MixingSpec: coefficient vectors must share one length",
                    ));
                }
                if coeffs
                    .iter()
                    .any(|c| !c.intercept.is_finite() || c.slopes.iter().any(|s| !s.is_finite()))
                {
                    return Err(Error::invalid("MixingSpec: non-finite coefficient"));
                }
            }
        }
        Ok(())
    }
}

/// A K-class bilinear-spline mixture: class parameters in the reparameterized
/// frame plus a mixing parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub classes: Vec<ClassParams>,
    pub mixing: MixingSpec,
}

impl MixtureModel {
    pub fn new(classes: Vec<ClassParams>, mixing: MixingSpec) -> Result<Self> {
        let m = Self { classes, mixing };
        m.validate()?;
        Ok(m)
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("MixtureModel: no classes"));
        }
        for c in &self.classes {
            if c.frame != Frame::Reparameterized {
                return Err(Error::invalid(
                    "MixtureModel: class params must be in the reparameterized frame",
                ));
            }
            c.validate()?;
        }
        self.mixing.validate()?;
        if self.mixing.class_count() != self.classes.len() {
            return Err(Error::invalid(format!(
                "MixtureModel: {} classes but mixing spec is for {}",
                self.classes.len(),
                self.mixing.class_count()
            )));
        }
        Ok(())
    }
}

/// Posterior class probabilities, one row per individual; rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(DMatrix<f64>);

impl PosteriorMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        for i in 0..m.nrows() {
            let mut sum = 0.0;
            for k in 0..m.ncols() {
                let p = m[(i, k)];
                if !(0.0..=1.0 + 1e-12).contains(&p) {
                    return Err(Error::invalid(format!(
                        "PosteriorMatrix: entry ({i}, {k}) = {p} outside [0, 1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::invalid(format!(
                    "PosteriorMatrix: row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self(m))
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.0[(i, k)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Reorder columns so new column `k` is old column `perm[k]`.
    pub fn permute_classes(&self, perm: &[usize]) -> PosteriorMatrix {
        let mut out = DMatrix::zeros(self.0.nrows(), self.0.ncols());
        for (new_k, &old_k) in perm.iter().enumerate() {
            out.set_column(new_k, &self.0.column(old_k));
        }
        PosteriorMatrix(out)
    }
}

/// Exact multivariate normal log-density via Cholesky factorization.
pub fn mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let j = y.len();
    if mean.len() != j || cov.nrows() != j || cov.ncols() != j {
        return Err(Error::invalid(format!(
            "mvn_logpdf: dimension mismatch (y {}, mean {}, cov {}×{})",
            j,
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cov.clone().cholesky().ok_or_else(|| {
        let eig = cov.clone().symmetric_eigenvalues();
        Error::numerical(format!(
            "mvn_logpdf: covariance is not positive definite (eigenvalue range [{:.3e}, {:.3e}])",
            eig.min(),
            eig.max()
        ))
    })?;
    let ldet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let z = chol.l_dirty().solve_lower_triangular(&(y - mean)).ok_or_else(|| {
        Error::numerical("mvn_logpdf: singular Cholesky factor".to_string())
    })?;
    Ok(-0.5 * (j as f64 * LN_2PI + ldet + z.norm_squared()))
}

/// Precomputed per-class quantities for fast repeated density evaluation.
///
/// Holds the reparameterized mean, a square-root factor `S` with `Ψ' = SSᵀ`,
/// the residual variance, and the knot.
#[derive(Debug, Clone)]
pub struct ClassKernel {
    mu: Vector3<f64>,
    sqrt_cov: Matrix3<f64>,
    theta: f64,
    knot: f64,
}

impl ClassKernel {
    /// Build from reparameterized-frame class parameters.
    pub fn from_params(p: &ClassParams) -> Result<Self> {
        if p.frame != Frame::Reparameterized {
            return Err(Error::invalid("ClassKernel: params must be reparameterized"));
        }
        p.validate()?;
        let eig = p.cov.symmetric_eigen();
        let mut sqrt = eig.eigenvectors;
        for k in 0..3 {
            let l = eig.eigenvalues[k].max(0.0).sqrt();
            sqrt.column_mut(k).scale_mut(l);
        }
        Ok(Self { mu: p.mean, sqrt_cov: sqrt, theta: p.residual_var, knot: p.knot })
    }

    /// Build directly from a factor `S` with `Ψ' = SSᵀ` (e.g. a Cholesky
    /// factor held by the optimizer).
    pub fn from_sqrt(mu: Vector3<f64>, sqrt_cov: Matrix3<f64>, theta: f64, knot: f64) -> Self {
        Self { mu, sqrt_cov, theta, knot }
    }

    /// Log-density of one individual's outcome vector at its own times.
    ///
    /// Computes `ln N(y; Λ'μ', Λ'Ψ'Λ'ᵀ + θI)` through the 3×3 capacitance
    /// matrix `θI + AᵀA` (`A = Λ'S`), exact for any J ≥ 1.
    pub fn logpdf(&self, times: &[f64], outcomes: &[f64]) -> Result<f64> {
        let j = times.len();
        debug_assert_eq!(j, outcomes.len());
        if self.theta <= 0.0 {
            return Err(Error::numerical("ClassKernel: residual variance must be positive"));
        }
        let s = &self.sqrt_cov;
        let mut cap = Matrix3::identity() * self.theta;
        let mut w = Vector3::zeros();
        let mut rr = 0.0;
        for (&t, &y) in times.iter().zip(outcomes) {
            let d = t - self.knot;
            let lam = [1.0, d, d.abs()];
            let mut a = [0.0; 3];
            for k in 0..3 {
                a[k] = lam[0] * s[(0, k)] + lam[1] * s[(1, k)] + lam[2] * s[(2, k)];
            }
            let r = y - (self.mu[0] + lam[1] * self.mu[1] + lam[2] * self.mu[2]);
            rr += r * r;
            for k in 0..3 {
                w[k] += a[k] * r;
                for m in k..3 {
                    cap[(m, k)] += a[m] * a[k];
                }
            }
        }
        cap[(0, 1)] = cap[(1, 0)];
        cap[(0, 2)] = cap[(2, 0)];
        cap[(1, 2)] = cap[(2, 1)];
        let chol = cap.cholesky().ok_or_else(|| {
            Error::numerical("ClassKernel: capacitance matrix not positive definite")
        })?;
        let ldet_cap: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let ldet = (j as f64 - 3.0) * self.theta.ln() + ldet_cap;
        let u = chol.solve(&w);
        let quad = (rr - w.dot(&u)) / self.theta;
        Ok(-0.5 * (j as f64 * LN_2PI + ldet + quad))
    }
}

pub(crate) fn kernels_of(model: &MixtureModel) -> Result<Vec<ClassKernel>> {
    model.classes.iter().map(ClassKernel::from_params).collect()
}

/// Mixing probabilities for one individual.
///
/// `Free` returns the proportions unchanged; `Logistic` applies the softmax
/// with the class-1 numerator fixed at 1.
pub fn mixing_probs(x: &[f64], spec: &MixingSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    match spec {
        MixingSpec::Free { proportions } => Ok(proportions.clone()),
        MixingSpec::Logistic { coeffs } => {
            let lp = logistic_log_probs(x, coeffs)?;
            Ok(lp.iter().map(|l| l.exp()).collect())
        }
    }
}

/// Log mixing probabilities under a logistic spec (class 1 is the reference).
fn logistic_log_probs(x: &[f64], coeffs: &[LogisticCoeffs]) -> Result<Vec<f64>> {
    let mut lin = Vec::with_capacity(coeffs.len() + 1);
    lin.push(0.0);
    for c in coeffs {
        if c.slopes.len() != x.len() {
            return Err(Error::invalid(format!(
                "mixing_probs: {} covariates but coefficient vector has length {}",
                x.len(),
                c.slopes.len()
            )));
        }
        let z: f64 = c.intercept + c.slopes.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        lin.push(z);
    }
    let lse = log_sum_exp(&lin);
    Ok(lin.into_iter().map(|z| z - lse).collect())
}

/// Numerically stable log-sum-exp.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

fn log_free_proportions(spec: &MixingSpec) -> Result<Vec<f64>> {
    match spec {
        MixingSpec::Free { proportions } => {
            Ok(proportions.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect())
        }
        MixingSpec::Logistic { .. } => {
            Err(Error::invalid("expected free mixing proportions, found logistic coefficients"))
        }
    }
}

fn mixture_term(
    kernels: &[ClassKernel],
    ind: &crate::data::Individual,
    log_pi: &[f64],
    class_logliks: &mut Vec<f64>,
) -> Result<f64> {
    class_logliks.clear();
    for (k, kern) in kernels.iter().enumerate() {
        let lp = kern.logpdf(&ind.times, &ind.outcomes).map_err(|e| {
            Error::numerical(format!("individual {} class {}: {e}", ind.id, k + 1))
        })?;
        class_logliks.push(log_pi[k] + lp.max(LOG_DENSITY_FLOOR));
    }
    Ok(log_sum_exp(class_logliks))
}

/// Step-1 mixture log-likelihood (free mixing proportions, no covariates).
pub fn step1_loglik(data: &LongitudinalDataset, model: &MixtureModel) -> Result<f64> {
    model.validate()?;
    let log_pi = log_free_proportions(&model.mixing)?;
    let kernels = kernels_of(model)?;
    let mut scratch = Vec::with_capacity(kernels.len());
    let mut total = 0.0;
    for ind in &data.individuals {
        total += mixture_term(&kernels, ind, &log_pi, &mut scratch)?;
    }
    Ok(total)
}

/// Step-2 log-likelihood: class-specific parameters frozen, mixing
/// probabilities driven by covariates through `coeffs`.
pub fn step2_loglik(
    data: &LongitudinalDataset,
    classes: &[ClassParams],
    coeffs: &[LogisticCoeffs],
) -> Result<f64> {
    let model = MixtureModel::new(
        classes.to_vec(),
        MixingSpec::Logistic { coeffs: coeffs.to_vec() },
    )?;
    let kernels = kernels_of(&model)?;
    let mut scratch = Vec::with_capacity(kernels.len());
    let mut total = 0.0;
    for ind in &data.individuals {
        let log_pi = logistic_log_probs(&ind.covariates, coeffs)?;
        total += mixture_term(&kernels, ind, &log_pi, &mut scratch)?;
    }
    Ok(total)
}

/// Posterior class probabilities by Bayes' theorem, computed in log space.
///
/// The prior per individual follows the model's mixing spec: free proportions
/// give the step-1 posterior used for classification and accuracy; a logistic
/// spec conditions on that individual's covariates instead.
pub fn posterior_probs(data: &LongitudinalDataset, model: &MixtureModel) -> Result<PosteriorMatrix> {
    model.validate()?;
    let k = model.class_count();
    let kernels = kernels_of(model)?;
    let mut out = DMatrix::zeros(data.len(), k);
    let mut terms = Vec::with_capacity(k);
    for (i, ind) in data.individuals.iter().enumerate() {
        let log_pi = match &model.mixing {
            MixingSpec::Free { .. } => log_free_proportions(&model.mixing)?,
            MixingSpec::Logistic { coeffs } => logistic_log_probs(&ind.covariates, coeffs)?,
        };
        let lse = mixture_term(&kernels, ind, &log_pi, &mut terms)?;
        for (kk, &t) in terms.iter().enumerate() {
            out[(i, kk)] = (t - lse).exp();
        }
        // Exact renormalization against round-off.
        let s: f64 = out.row(i).sum();
        for kk in 0..k {
            out[(i, kk)] /= s;
        }
    }
    PosteriorMatrix::new(out)
}

/// Round to 12 decimal digits; the tie definition used by [`classify`].
fn round12(p: f64) -> f64 {
    (p * 1e12).round() / 1e12
}

/// Modal class assignment per row; exact ties (after rounding posteriors to
/// 12 decimal digits) are broken uniformly at random with the caller's
/// generator.
pub fn classify<R: Rng + ?Sized>(post: &PosteriorMatrix, rng: &mut R) -> Vec<usize> {
    let k = post.class_count();
    let mut out = Vec::with_capacity(post.nrows());
    let mut argmax = Vec::with_capacity(k);
    for i in 0..post.nrows() {
        let mut best = f64::NEG_INFINITY;
        argmax.clear();
        for kk in 0..k {
            let p = round12(post.get(i, kk));
            if p > best {
                best = p;
                argmax.clear();
                argmax.push(kk);
            } else if p == best {
                argmax.push(kk);
            }
        }
        let pick = if argmax.len() == 1 { argmax[0] } else { argmax[rng.random_range(0..argmax.len())] };
        out.push(pick);
    }
    out
}

/// Fraction of correctly classified individuals.
pub fn accuracy(assigned: &[usize], truth: &[usize]) -> Result<f64> {
    if assigned.len() != truth.len() {
        return Err(Error::invalid(format!(
            "accuracy: length mismatch ({} vs {})",
            assigned.len(),
            truth.len()
        )));
    }
    if assigned.is_empty() {
        return Err(Error::invalid("accuracy: empty label vectors"));
    }
    let hits = assigned.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / assigned.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Individual;
    use crate::model::{implied_moments, transform_covariance, TransformDirection};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table2_class(intercept: f64, knot: f64, theta: f64) -> ClassParams {
        let psi = Matrix3::new(25.0, 1.5, 1.5, 1.5, 1.0, 0.3, 1.5, 0.3, 1.0);
        ClassParams::new(
            Frame::Original,
            Vector3::new(intercept, -5.0, -2.6),
            psi,
            knot,
            theta,
        )
        .unwrap()
        .to_reparameterized()
        .unwrap()
    }

    fn small_dataset(seed: u64, n: usize, j: usize) -> LongitudinalDataset {
        // Random ragged-ish dataset for oracle comparisons.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let individuals = (0..n)
            .map(|i| {
                let times: Vec<f64> =
                    (0..j).map(|w| w as f64 + rng.random_range(-0.25..0.25)).collect();
                let outcomes: Vec<f64> =
                    times.iter().map(|t| 100.0 - 5.0 * t + rng.random_range(-3.0..3.0)).collect();
                let covariates = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                Individual::new(format!("i{i}"), times, outcomes, covariates, None).unwrap()
            })
            .collect();
        LongitudinalDataset::new(individuals, vec!["x1".into(), "x2".into()]).unwrap()
    }

    /// Oracle: plain MVN log-density by explicit inverse and determinant.
    fn naive_mvn(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let j = y.len() as f64;
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        let r = y - mean;
        -0.5 * (j * LN_2PI + det.ln() + (r.transpose() * inv * &r)[(0, 0)])
    }

    /// Oracle: mixture log-likelihood as a direct weighted-density sum.
    fn naive_mixture_loglik(
        data: &LongitudinalDataset,
        classes: &[ClassParams],
        weights_for: impl Fn(&Individual) -> Vec<f64>,
    ) -> f64 {
        data.individuals
            .iter()
            .map(|ind| {
                let pis = weights_for(ind);
                let mix: f64 = classes
                    .iter()
                    .zip(&pis)
                    .map(|(c, &pi)| {
                        let (mean, cov) = implied_moments(c, &ind.times).unwrap();
                        let y = DVector::from_column_slice(&ind.outcomes);
                        pi * naive_mvn(&y, &mean, &cov).exp()
                    })
                    .sum();
                mix.ln()
            })
            .sum()
    }

    #[test]
    fn mvn_univariate_standard() {
        let y = DVector::from_element(1, 0.3);
        let mean = DVector::from_element(1, 0.3);
        let cov = DMatrix::from_element(1, 1, 1.0);
        assert_relative_eq!(
            mvn_logpdf(&y, &mean, &cov).unwrap(),
            -0.9189385332046727,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mvn_bivariate_identity_at_mean() {
        let y = DVector::from_column_slice(&[1.0, -2.0]);
        let cov = DMatrix::identity(2, 2);
        assert_relative_eq!(mvn_logpdf(&y, &y, &cov).unwrap(), -LN_2PI, epsilon = 1e-12);
    }

    #[test]
    fn mvn_matches_naive_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.5;
            let y = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let mean = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            assert_relative_eq!(
                mvn_logpdf(&y, &mean, &cov).unwrap(),
                naive_mvn(&y, &mean, &cov),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn mvn_rejects_non_pd() {
        let y = DVector::zeros(2);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = mvn_logpdf(&y, &y, &cov).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn kernel_logpdf_matches_general_path() {
        let class = table2_class(98.0, 4.0, 1.3);
        let kern = ClassKernel::from_params(&class).unwrap();
        let times = [0.1, 0.9, 2.2, 3.8, 4.4, 6.0, 7.1, 8.9];
        let ys = [97.0, 94.0, 88.0, 81.0, 77.5, 74.0, 70.0, 63.0];
        let (mean, cov) = implied_moments(&class, &times).unwrap();
        let y = DVector::from_column_slice(&ys);
        assert_relative_eq!(
            kern.logpdf(&times, &ys).unwrap(),
            mvn_logpdf(&y, &mean, &cov).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn kernel_handles_fewer_waves_than_factors() {
        let class = table2_class(98.0, 4.0, 1.0);
        let kern = ClassKernel::from_params(&class).unwrap();
        for (times, ys) in [(vec![0.5], vec![95.0]), (vec![0.5, 6.0], vec![95.0, 72.0])] {
            let (mean, cov) = implied_moments(&class, &times).unwrap();
            let y = DVector::from_column_slice(&ys);
            assert_relative_eq!(
                kern.logpdf(&times, &ys).unwrap(),
                mvn_logpdf(&y, &mean, &cov).unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn mixing_balanced_and_log2() {
        let spec = MixingSpec::Logistic {
            coeffs: vec![LogisticCoeffs { intercept: 0.0, slopes: vec![0.0] }],
        };
        let p = mixing_probs(&[0.7], &spec).unwrap();
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(p[1], 0.5, epsilon = 1e-12);

        let spec = MixingSpec::Logistic {
            coeffs: vec![LogisticCoeffs { intercept: 2.0_f64.ln(), slopes: vec![0.0] }],
        };
        let p = mixing_probs(&[0.7], &spec).unwrap();
        assert_relative_eq!(p[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(p[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn mixing_dimension_mismatch() {
        let spec = MixingSpec::Logistic {
            coeffs: vec![LogisticCoeffs { intercept: 0.0, slopes: vec![1.0, 2.0] }],
        };
        assert!(mixing_probs(&[0.7], &spec).is_err());
    }

    #[test]
    fn step1_single_class_equals_mvn() {
        let class = table2_class(98.0, 4.0, 1.0);
        let data = small_dataset(3, 1, 5);
        let model =
            MixtureModel::new(vec![class.clone()], MixingSpec::free(vec![1.0])).unwrap();
        let ll = step1_loglik(&data, &model).unwrap();
        let ind = &data.individuals[0];
        let (mean, cov) = implied_moments(&class, &ind.times).unwrap();
        let y = DVector::from_column_slice(&ind.outcomes);
        assert_relative_eq!(ll, mvn_logpdf(&y, &mean, &cov).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn step1_identical_classes_collapse() {
        let class = table2_class(98.0, 4.0, 1.0);
        let data = small_dataset(11, 6, 5);
        let one = MixtureModel::new(vec![class.clone()], MixingSpec::free(vec![1.0])).unwrap();
        let two = MixtureModel::new(
            vec![class.clone(), class],
            MixingSpec::free(vec![0.35, 0.65]),
        )
        .unwrap();
        assert_relative_eq!(
            step1_loglik(&data, &one).unwrap(),
            step1_loglik(&data, &two).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn step1_matches_naive_oracle() {
        let classes = vec![table2_class(98.0, 4.0, 1.0), table2_class(102.0, 5.0, 2.0)];
        let data = small_dataset(19, 5, 4);
        let model =
            MixtureModel::new(classes.clone(), MixingSpec::free(vec![0.4, 0.6])).unwrap();
        let expect = naive_mixture_loglik(&data, &classes, |_| vec![0.4, 0.6]);
        assert_relative_eq!(step1_loglik(&data, &model).unwrap(), expect, epsilon = 1e-10);
    }

    #[test]
    fn step2_zero_coefficients_match_balanced_step1() {
        let classes = vec![table2_class(98.0, 4.0, 1.0), table2_class(102.0, 5.0, 1.0)];
        let data = small_dataset(23, 6, 5);
        let coeffs = vec![LogisticCoeffs { intercept: 0.0, slopes: vec![0.0, 0.0] }];
        let model =
            MixtureModel::new(classes.clone(), MixingSpec::free(vec![0.5, 0.5])).unwrap();
        assert_relative_eq!(
            step2_loglik(&data, &classes, &coeffs).unwrap(),
            step1_loglik(&data, &model).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn step2_matches_naive_oracle() {
        let classes = vec![table2_class(98.0, 4.0, 1.0), table2_class(102.0, 5.0, 2.0)];
        let data = small_dataset(29, 5, 4);
        let coeffs = vec![LogisticCoeffs { intercept: 0.4, slopes: vec![0.8, -0.5] }];
        let expect = naive_mixture_loglik(&data, &classes, |ind| {
            mixing_probs(&ind.covariates, &MixingSpec::Logistic { coeffs: coeffs.clone() })
                .unwrap()
        });
        assert_relative_eq!(step2_loglik(&data, &classes, &coeffs).unwrap(), expect, epsilon = 1e-10);
    }

    #[test]
    fn step2_invariant_to_covariate_rescale() {
        let classes = vec![table2_class(98.0, 4.0, 1.0), table2_class(102.0, 5.0, 1.0)];
        let data = small_dataset(31, 6, 4);
        let coeffs = vec![LogisticCoeffs { intercept: 0.2, slopes: vec![0.8, -0.5] }];
        let base = step2_loglik(&data, &classes, &coeffs).unwrap();

        let scale = 4.0;
        let scaled = LongitudinalDataset::new(
            data.individuals
                .iter()
                .map(|i| Individual {
                    covariates: i.covariates.iter().map(|x| x * scale).collect(),
                    ..i.clone()
                })
                .collect(),
            data.covariate_names.clone(),
        )
        .unwrap();
        let inv_coeffs = vec![LogisticCoeffs {
            intercept: 0.2,
            slopes: vec![0.8 / scale, -0.5 / scale],
        }];
        assert_relative_eq!(
            step2_loglik(&scaled, &classes, &inv_coeffs).unwrap(),
            base,
            epsilon = 1e-10
        );
    }

    #[test]
    fn posterior_equal_density_rows_are_uniform() {
        let class = table2_class(98.0, 4.0, 1.0);
        let data = small_dataset(37, 4, 5);
        let model = MixtureModel::new(
            vec![class.clone(), class.clone(), class],
            MixingSpec::free(vec![1.0 / 3.0; 3]),
        )
        .unwrap();
        let post = posterior_probs(&data, &model).unwrap();
        for i in 0..post.nrows() {
            for k in 0..3 {
                assert_relative_eq!(post.get(i, k), 1.0 / 3.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn posterior_degenerate_prior() {
        let classes = vec![table2_class(98.0, 4.0, 1.0), table2_class(102.0, 5.0, 1.0)];
        let data = small_dataset(41, 4, 5);
        let model = MixtureModel::new(classes, MixingSpec::free(vec![1.0, 0.0])).unwrap();
        let post = posterior_probs(&data, &model).unwrap();
        for i in 0..post.nrows() {
            assert_relative_eq!(post.get(i, 0), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn posterior_matches_naive_ratio_oracle() {
        let classes = vec![table2_class(98.0, 4.0, 1.0), table2_class(102.0, 5.0, 2.0)];
        let data = small_dataset(43, 5, 4);
        let pis = [0.3, 0.7];
        let model = MixtureModel::new(classes.clone(), MixingSpec::free(pis.to_vec())).unwrap();
        let post = posterior_probs(&data, &model).unwrap();
        for (i, ind) in data.individuals.iter().enumerate() {
            let dens: Vec<f64> = classes
                .iter()
                .map(|c| {
                    let (mean, cov) = implied_moments(c, &ind.times).unwrap();
                    naive_mvn(&DVector::from_column_slice(&ind.outcomes), &mean, &cov).exp()
                })
                .collect();
            let denom: f64 = dens.iter().zip(&pis).map(|(d, p)| d * p).sum();
            for k in 0..2 {
                assert_relative_eq!(post.get(i, k), pis[k] * dens[k] / denom, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn classify_modal_and_seeded_ties() {
        let post = PosteriorMatrix::new(DMatrix::from_row_slice(
            3,
            2,
            &[0.9, 0.1, 0.5, 0.5, 0.2, 0.8],
        ))
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = classify(&post, &mut rng);
        assert_eq!(a[0], 0);
        assert_eq!(a[2], 1);
        // Tie row is deterministic under a fixed seed.
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(a, classify(&post, &mut rng2));
    }

    #[test]
    fn classify_is_permutation_equivariant() {
        let m = DMatrix::from_row_slice(4, 3, &[
            0.7, 0.2, 0.1, //
            0.1, 0.6, 0.3, //
            0.05, 0.15, 0.8, //
            0.3, 0.4, 0.3,
        ]);
        let post = PosteriorMatrix::new(m.clone()).unwrap();
        let perm = [2usize, 0, 1]; // new col k = old col perm[k]
        let permuted = post.permute_classes(&perm);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = classify(&post, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let moved = classify(&permuted, &mut rng);
        for (b, m) in base.iter().zip(&moved) {
            assert_eq!(perm[*m], *b);
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_relative_eq!(accuracy(&[0, 1, 0], &[0, 1, 0]).unwrap(), 1.0);
        assert_relative_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_relative_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn prop_step1_label_permutation_invariance(seed in 0u64..500) {
            let classes = vec![
                table2_class(98.0, 4.0, 1.0),
                table2_class(102.0, 5.0, 2.0),
                table2_class(100.0, 4.5, 1.5),
            ];
            let data = small_dataset(seed, 4, 4);
            let pis = vec![0.2, 0.5, 0.3];
            let base = step1_loglik(
                &data,
                &MixtureModel::new(classes.clone(), MixingSpec::free(pis.clone())).unwrap(),
            ).unwrap();
            let perm = [2usize, 0, 1];
            let permuted = MixtureModel::new(
                perm.iter().map(|&k| classes[k].clone()).collect(),
                MixingSpec::free(perm.iter().map(|&k| pis[k]).collect()),
            ).unwrap();
            let permuted_ll = step1_loglik(&data, &permuted).unwrap();
            prop_assert!((base - permuted_ll).abs() < 1e-10 * base.abs().max(1.0));
        }

        #[test]
        fn prop_posterior_rows_sum_to_one(seed in 0u64..200) {
            let classes = vec![table2_class(98.0, 4.0, 1.0), table2_class(102.0, 5.0, 2.0)];
            let data = small_dataset(seed, 6, 5);
            let model = MixtureModel::new(classes, MixingSpec::free(vec![0.25, 0.75])).unwrap();
            let post = posterior_probs(&data, &model).unwrap();
            for i in 0..post.nrows() {
                let s: f64 = (0..2).map(|k| post.get(i, k)).sum();
                prop_assert!((s - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn prop_lse_matches_naive_when_safe(v in proptest::collection::vec(-30.0..30.0f64, 1..6)) {
            let naive = v.iter().map(|z| z.exp()).sum::<f64>().ln();
            let stable = log_sum_exp(&v);
            prop_assert!((naive - stable).abs() < 1e-10 * naive.abs().max(1.0));
        }
    }
}
