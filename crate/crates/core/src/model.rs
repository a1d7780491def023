//! Bilinear-spline (linear-linear piecewise) growth model: parameter frames,
//! knot reparameterization, per-individual design matrices, and model-implied
//! moments.
//!
//! A trajectory is two linear segments joined continuously at a knot `γ`.
//! The *original* frame carries an intercept at the time origin and one slope
//! per segment. Estimation works in a *reparameterized* frame — the value at
//! the knot, the mean of the two slopes, and half their difference — where the
//! mean curve becomes `η'₀ + η'₁(t−γ) + η'₂|t−γ|`, smooth in everything but
//! the knot itself. The two frames are linked by a linear map, so Gaussian
//! growth factors stay Gaussian and covariances move by congruence.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Growth factors in the original frame: intercept at the declared time
/// origin and one slope per segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFactorsOriginal {
    pub intercept: f64,
    pub slope_pre: f64,
    pub slope_post: f64,
}

/// Growth factors in the reparameterized frame: measurement at the knot, mean
/// of the two slopes, and half the slope difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFactorsRepar {
    pub value_at_knot: f64,
    pub mean_slope: f64,
    pub half_slope_diff: f64,
}

impl GrowthFactorsOriginal {
    pub fn new(intercept: f64, slope_pre: f64, slope_post: f64) -> Self {
        Self { intercept, slope_pre, slope_post }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.intercept, self.slope_pre, self.slope_post)
    }

    fn is_finite(&self) -> bool {
        self.intercept.is_finite() && self.slope_pre.is_finite() && self.slope_post.is_finite()
    }
}

impl GrowthFactorsRepar {
    pub fn new(value_at_knot: f64, mean_slope: f64, half_slope_diff: f64) -> Self {
        Self { value_at_knot, mean_slope, half_slope_diff }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.value_at_knot, self.mean_slope, self.half_slope_diff)
    }

    fn is_finite(&self) -> bool {
        self.value_at_knot.is_finite()
            && self.mean_slope.is_finite()
            && self.half_slope_diff.is_finite()
    }
}

/// Which parameter frame a [`ClassParams`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Original,
    Reparameterized,
}

/// Direction of a covariance transform between the two frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformDirection {
    /// Original → reparameterized (gradient of `f`).
    Forward,
    /// Reparameterized → original (gradient of `h`).
    Inverse,
}

/// Map original growth factors to the reparameterized frame at knot `knot`.
///
/// Returns `(η₀+γη₁, (η₁+η₂)/2, (η₂−η₁)/2)`.
pub fn reparameterize_mean(g: GrowthFactorsOriginal, knot: f64) -> Result<GrowthFactorsRepar> {
    if !g.is_finite() || !knot.is_finite() {
        return Err(Error::invalid("reparameterize_mean: non-finite input"));
    }
    Ok(GrowthFactorsRepar {
        value_at_knot: g.intercept + knot * g.slope_pre,
        mean_slope: 0.5 * (g.slope_pre + g.slope_post),
        half_slope_diff: 0.5 * (g.slope_post - g.slope_pre),
    })
}

/// Map reparameterized growth factors back to the original frame.
///
/// Returns `(η'₀−γη'₁+γη'₂, η'₁−η'₂, η'₁+η'₂)`; inverse of
/// [`reparameterize_mean`].
pub fn inverse_reparameterize_mean(
    g: GrowthFactorsRepar,
    knot: f64,
) -> Result<GrowthFactorsOriginal> {
    if !g.is_finite() || !knot.is_finite() {
        return Err(Error::invalid("inverse_reparameterize_mean: non-finite input"));
    }
    Ok(GrowthFactorsOriginal {
        intercept: g.value_at_knot - knot * g.mean_slope + knot * g.half_slope_diff,
        slope_pre: g.mean_slope - g.half_slope_diff,
        slope_post: g.mean_slope + g.half_slope_diff,
    })
}

/// Gradient matrix of the forward map `f` at knot `knot`.
pub fn grad_forward(knot: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, knot, 0.0, 0.0, 0.5, 0.5, 0.0, -0.5, 0.5)
}

/// Gradient matrix of the inverse map `h` at knot `knot`.
pub fn grad_inverse(knot: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, -knot, knot, 0.0, 1.0, -1.0, 0.0, 1.0, 1.0)
}

/// Transform a growth-factor covariance between frames by congruence with
/// the gradient of the (inverse) reparameterization map.
pub fn transform_covariance(
    psi: &Matrix3<f64>,
    knot: f64,
    direction: TransformDirection,
) -> Result<Matrix3<f64>> {
    if !knot.is_finite() || psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("transform_covariance: non-finite input"));
    }
    let asym = (psi - psi.transpose()).abs().max();
    let scale = psi.abs().max().max(1.0);
    if asym > 1e-8 * scale {
        return Err(Error::invalid(format!(
            "transform_covariance: matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let grad = match direction {
        TransformDirection::Forward => grad_forward(knot),
        TransformDirection::Inverse => grad_inverse(knot),
    };
    Ok(grad * psi * grad.transpose())
}

/// One latent class's growth-factor distribution: means, covariance, knot,
/// and residual variance, tagged with the frame the means/covariance live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub frame: Frame,
    /// Growth-factor mean vector (3).
    pub mean: Vector3<f64>,
    /// Growth-factor covariance (3×3, symmetric PSD).
    pub cov: Matrix3<f64>,
    /// Knot location, in time units.
    pub knot: f64,
    /// Residual variance (outcome² units), strictly positive.
    pub residual_var: f64,
}

impl ClassParams {
    pub fn new(
        frame: Frame,
        mean: Vector3<f64>,
        cov: Matrix3<f64>,
        knot: f64,
        residual_var: f64,
    ) -> Result<Self> {
        let p = Self { frame, mean, cov, knot, residual_var };
        p.validate()?;
        Ok(p)
    }

    /// Check finiteness, covariance symmetry/PSD (eigenvalue floor
    /// −1e−8·trace), and residual-variance positivity.
    pub fn validate(&self) -> Result<()> {
        if self.mean.iter().any(|v| !v.is_finite())
            || self.cov.iter().any(|v| !v.is_finite())
            || !self.knot.is_finite()
            || !self.residual_var.is_finite()
        {
            return Err(Error::invalid("ClassParams: non-finite entry"));
        }
        if self.residual_var <= 0.0 {
            return Err(Error::invalid(format!(
                "ClassParams: residual variance must be positive, got {}",
                self.residual_var
            )));
        }
        let asym = (self.cov - self.cov.transpose()).abs().max();
        if asym > 1e-8 * self.cov.abs().max().max(1.0) {
            return Err(Error::invalid("ClassParams: covariance is not symmetric"));
        }
        let eig = self.cov.symmetric_eigenvalues();
        let floor = -1e-8 * self.cov.trace().abs().max(1.0);
        if eig.iter().any(|&l| l < floor) {
            return Err(Error::invalid(format!(
                "ClassParams: covariance is not PSD (min eigenvalue {:.3e})",
                eig.min()
            )));
        }
        Ok(())
    }

    /// Convert to the reparameterized frame (no-op if already there).
    pub fn to_reparameterized(&self) -> Result<ClassParams> {
        match self.frame {
            Frame::Reparameterized => Ok(self.clone()),
            Frame::Original => {
                let g = GrowthFactorsOriginal::new(self.mean[0], self.mean[1], self.mean[2]);
                let mean = reparameterize_mean(g, self.knot)?.as_vector();
                let cov = transform_covariance(&self.cov, self.knot, TransformDirection::Forward)?;
                Ok(ClassParams { frame: Frame::Reparameterized, mean, cov, ..*self })
            }
        }
    }

    /// Convert to the original frame (no-op if already there).
    pub fn to_original(&self) -> Result<ClassParams> {
        match self.frame {
            Frame::Original => Ok(self.clone()),
            Frame::Reparameterized => {
                let g = GrowthFactorsRepar::new(self.mean[0], self.mean[1], self.mean[2]);
                let mean = inverse_reparameterize_mean(g, self.knot)?.as_vector();
                let cov = transform_covariance(&self.cov, self.knot, TransformDirection::Inverse)?;
                Ok(ClassParams { frame: Frame::Original, mean, cov, ..*self })
            }
        }
    }
}

/// Reparameterized factor-loading matrix for one individual: row `j` is
/// `[1, t_j−γ, |t_j−γ|]`.
pub fn loading_matrix(times: &[f64], knot: f64) -> Result<DMatrix<f64>> {
    if times.iter().any(|t| !t.is_finite()) || !knot.is_finite() {
        return Err(Error::invalid("loading_matrix: non-finite input"));
    }
    let mut lambda = DMatrix::zeros(times.len(), 3);
    for (j, &t) in times.iter().enumerate() {
        let d = t - knot;
        lambda[(j, 0)] = 1.0;
        lambda[(j, 1)] = d;
        lambda[(j, 2)] = d.abs();
    }
    Ok(lambda)
}

/// A single loading-matrix row at time `t`.
pub fn loading_row(t: f64, knot: f64) -> Vector3<f64> {
    let d = t - knot;
    Vector3::new(1.0, d, d.abs())
}

/// Model-implied mean vector and covariance of the repeated measurements for
/// one individual under a reparameterized-frame class:
/// `μ = Λ'μ'`, `Σ = Λ'Ψ'Λ'ᵀ + θ_ε I`.
pub fn implied_moments(
    params: &ClassParams,
    times: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if params.frame != Frame::Reparameterized {
        return Err(Error::invalid("implied_moments: params must be in the reparameterized frame"));
    }
    params.validate()?;
    let lambda = loading_matrix(times, params.knot)?;
    let mean = &lambda * params.mean;
    let mut cov = &lambda * params.cov * lambda.transpose();
    for j in 0..times.len() {
        cov[(j, j)] += params.residual_var;
    }
    Ok((mean, cov))
}

/// Expected outcome at time `t` under the class mean trajectory
/// (original frame): `η₀+η₁t` before the knot, continuing with slope `η₂`
/// after it.
pub fn trajectory_value(params: &ClassParams, t: f64) -> Result<f64> {
    if params.frame != Frame::Original {
        return Err(Error::invalid("trajectory_value: params must be in the original frame"));
    }
    let (eta0, eta1, eta2) = (params.mean[0], params.mean[1], params.mean[2]);
    let g = params.knot;
    Ok(if t <= g { eta0 + eta1 * t } else { eta0 + eta1 * g + eta2 * (t - g) })
}
