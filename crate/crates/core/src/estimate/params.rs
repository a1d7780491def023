//! Flat parameter vector for step-1 optimization, with every constraint
//! baked into the coordinate maps.
//!
//! Per-class block (11 entries): 3 reparameterized means, 6 Cholesky entries
//! of Ψ' in row order `(0,0) (1,0) (1,1) (2,0) (2,1) (2,2)` with logged
//! diagonal, `ln θ_ε`, and the knot as a logit within the observed time
//! range. Then K−1 free mixing logits against class 1. Unpacking therefore
//! always yields a PSD Ψ', a positive θ_ε, and an interior knot.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::likelihood::{ClassKernel, MixingSpec, MixtureModel};
use crate::model::{ClassParams, Frame};

pub const CLASS_BLOCK: usize = 11;

/// Layout descriptor mapping flat entries to (class, parameter) slots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamLayout {
    pub class_count: usize,
    /// Observed time range; the knot map is a scaled logistic into it.
    pub time_lo: f64,
    pub time_hi: f64,
}

impl ParamLayout {
    pub fn new(class_count: usize, time_range: (f64, f64)) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::invalid("ParamLayout: need at least one class"));
        }
        if !(time_range.0.is_finite() && time_range.1.is_finite() && time_range.0 < time_range.1) {
            return Err(Error::invalid("ParamLayout: invalid time range"));
        }
        Ok(Self { class_count, time_lo: time_range.0, time_hi: time_range.1 })
    }

    /// Number of free parameters: 11 per class plus K−1 mixing logits.
    pub fn free_params(&self) -> usize {
        CLASS_BLOCK * self.class_count + (self.class_count - 1)
    }

    pub fn class_block(&self, k: usize) -> std::ops::Range<usize> {
        let start = CLASS_BLOCK * k;
        start..start + CLASS_BLOCK
    }

    pub fn mixing_block(&self) -> std::ops::Range<usize> {
        let start = CLASS_BLOCK * self.class_count;
        start..start + self.class_count - 1
    }

    fn knot_from_logit(&self, u: f64) -> f64 {
        self.time_lo + (self.time_hi - self.time_lo) * sigmoid(u)
    }

    fn knot_to_logit(&self, knot: f64) -> Result<f64> {
        let frac = (knot - self.time_lo) / (self.time_hi - self.time_lo);
        if !(0.0..1.0).contains(&frac) || frac == 0.0 {
            return Err(Error::invalid(format!(
                "knot {knot} is not strictly inside the observed time range ({}, {})",
                self.time_lo, self.time_hi
            )));
        }
        Ok((frac / (1.0 - frac)).ln())
    }

    /// Unpack one class block into `(mean, cholesky factor of Ψ', θ, knot)`.
    pub fn unpack_class(&self, x: &[f64], k: usize) -> (Vector3<f64>, Matrix3<f64>, f64, f64) {
        let b = &x[self.class_block(k)];
        let mean = Vector3::new(b[0], b[1], b[2]);
        let l = Matrix3::new(
            b[3].exp(),
            0.0,
            0.0,
            b[4],
            b[5].exp(),
            0.0,
            b[6],
            b[7],
            b[8].exp(),
        );
        let theta = b[9].exp();
        let knot = self.knot_from_logit(b[10]);
        (mean, l, theta, knot)
    }

    /// Unpack the mixing logits into proportions (class 1 is the reference).
    pub fn unpack_proportions(&self, x: &[f64]) -> Vec<f64> {
        let logits = &x[self.mixing_block()];
        let mut weights = Vec::with_capacity(self.class_count);
        weights.push(0.0);
        weights.extend_from_slice(logits);
        let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = weights.iter().map(|w| (w - m).exp()).sum();
        weights.iter().map(|w| (w - m).exp() / denom).collect()
    }

    /// Class kernels for fast likelihood evaluation, straight from the
    /// Cholesky factors (no matrix reconstruction).
    pub fn unpack_kernels(&self, x: &[f64]) -> Vec<ClassKernel> {
        (0..self.class_count)
            .map(|k| {
                let (mean, l, theta, knot) = self.unpack_class(x, k);
                ClassKernel::from_sqrt(mean, l, theta, knot)
            })
            .collect()
    }

    /// Unpack into a full mixture model (reparameterized frame, free mixing).
    pub fn unpack(&self, x: &[f64]) -> Result<MixtureModel> {
        let classes = (0..self.class_count)
            .map(|k| {
                let (mean, l, theta, knot) = self.unpack_class(x, k);
                ClassParams::new(Frame::Reparameterized, mean, l * l.transpose(), knot, theta)
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureModel::new(classes, MixingSpec::free(self.unpack_proportions(x)))
    }

    /// Pack a valid model into the flat vector. Ψ' must be positive definite
    /// so its Cholesky factor exists; `unpack(pack(m))` reproduces `m`.
    pub fn pack(&self, model: &MixtureModel) -> Result<Vec<f64>> {
        model.validate()?;
        if model.class_count() != self.class_count {
            return Err(Error::invalid("pack: class count mismatch"));
        }
        let mut x = vec![0.0; self.free_params()];
        for (k, c) in model.classes.iter().enumerate() {
            let chol = c
                .cov
                .cholesky()
                .ok_or_else(|| Error::invalid("pack: Ψ' must be positive definite"))?;
            let l = chol.l();
            if c.residual_var <= 0.0 {
                return Err(Error::invalid("pack: θ_ε must be positive"));
            }
            let b = &mut x[self.class_block(k)];
            b[0] = c.mean[0];
            b[1] = c.mean[1];
            b[2] = c.mean[2];
            b[3] = l[(0, 0)].ln();
            b[4] = l[(1, 0)];
            b[5] = l[(1, 1)].ln();
            b[6] = l[(2, 0)];
            b[7] = l[(2, 1)];
            b[8] = l[(2, 2)].ln();
            b[9] = c.residual_var.ln();
            b[10] = self.knot_to_logit(c.knot)?;
        }
        let MixingSpec::Free { proportions } = &model.mixing else {
            return Err(Error::invalid("pack: expected free mixing proportions"));
        };
        let p1 = proportions[0].max(1e-300);
        let mix = self.mixing_block();
        for (j, k) in (1..self.class_count).enumerate() {
            x[mix.start + j] = (proportions[k].max(1e-300) / p1).ln();
        }
        Ok(x)
    }
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Step-2 layout: one `(intercept, slopes…)` block per non-reference class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticLayout {
    pub class_count: usize,
    pub covariate_count: usize,
}

impl LogisticLayout {
    pub fn new(class_count: usize, covariate_count: usize) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::invalid("LogisticLayout: need K ≥ 2"));
        }
        Ok(Self { class_count, covariate_count })
    }

    pub fn free_params(&self) -> usize {
        (self.class_count - 1) * (1 + self.covariate_count)
    }

    pub fn unpack(&self, x: &[f64]) -> Vec<crate::likelihood::LogisticCoeffs> {
        let w = 1 + self.covariate_count;
        (0..self.class_count - 1)
            .map(|j| crate::likelihood::LogisticCoeffs {
                intercept: x[j * w],
                slopes: x[j * w + 1..(j + 1) * w].to_vec(),
            })
            .collect()
    }

    pub fn pack(&self, coeffs: &[crate::likelihood::LogisticCoeffs]) -> Result<Vec<f64>> {
        if coeffs.len() != self.class_count - 1
            || coeffs.iter().any(|c| c.slopes.len() != self.covariate_count)
        {
            return Err(Error::invalid("LogisticLayout: coefficient shape mismatch"));
        }
        let mut x = Vec::with_capacity(self.free_params());
        for c in coeffs {
            x.push(c.intercept);
            x.extend_from_slice(&c.slopes);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn demo_model() -> MixtureModel {
        let psi = Matrix3::new(53.0, 4.1, -1.4, 4.1, 0.65, 0.0, -1.4, 0.0, 0.35);
        let c1 = ClassParams::new(
            Frame::Reparameterized,
            Vector3::new(78.0, -3.8, 1.2),
            psi,
            4.0,
            1.0,
        )
        .unwrap();
        let c2 = ClassParams::new(
            Frame::Reparameterized,
            Vector3::new(82.0, -3.5, 1.0),
            psi,
            5.0,
            2.0,
        )
        .unwrap();
        MixtureModel::new(vec![c1, c2], MixingSpec::free(vec![0.4, 0.6])).unwrap()
    }

    #[test]
    fn pack_unpack_round_trip() {
        let layout = ParamLayout::new(2, (-0.25, 9.25)).unwrap();
        let model = demo_model();
        let x = layout.pack(&model).unwrap();
        assert_eq!(x.len(), layout.free_params());
        let back = layout.unpack(&x).unwrap();
        for (a, b) in model.classes.iter().zip(&back.classes) {
            assert_relative_eq!(a.mean, b.mean, epsilon = 1e-12);
            assert_relative_eq!(a.cov, b.cov, epsilon = 1e-12);
            assert_relative_eq!(a.knot, b.knot, epsilon = 1e-12);
            assert_relative_eq!(a.residual_var, b.residual_var, epsilon = 1e-12);
        }
        let (MixingSpec::Free { proportions: pa }, MixingSpec::Free { proportions: pb }) =
            (&model.mixing, &back.mixing)
        else {
            panic!()
        };
        for (a, b) in pa.iter().zip(pb) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn knot_outside_range_rejected() {
        let layout = ParamLayout::new(2, (0.0, 4.5)).unwrap();
        assert!(layout.pack(&demo_model()).is_err()); // class-2 knot at 5.0
    }

    #[test]
    fn free_param_counts_match_model_family() {
        for (k, expect) in [(1usize, 11usize), (2, 23), (3, 35), (4, 47)] {
            let layout = ParamLayout::new(k, (0.0, 9.0)).unwrap();
            assert_eq!(layout.free_params(), expect);
        }
    }

    #[test]
    fn logistic_layout_round_trip() {
        let layout = LogisticLayout::new(3, 2).unwrap();
        let coeffs = vec![
            crate::likelihood::LogisticCoeffs { intercept: 0.3, slopes: vec![1.0, -0.5] },
            crate::likelihood::LogisticCoeffs { intercept: -0.7, slopes: vec![0.2, 0.9] },
        ];
        let x = layout.pack(&coeffs).unwrap();
        assert_eq!(x.len(), 6);
        assert_eq!(layout.unpack(&x), coeffs);
    }

    proptest! {
        #[test]
        fn prop_unpack_is_always_valid(
            x in proptest::collection::vec(-3.0..3.0f64, 23),
        ) {
            let layout = ParamLayout::new(2, (-0.25, 9.25)).unwrap();
            // Any raw vector maps to a valid model: PSD Ψ', θ > 0, interior knot.
            let model = layout.unpack(&x).unwrap();
            model.validate().unwrap();
            for c in &model.classes {
                prop_assert!(c.residual_var > 0.0);
                prop_assert!(c.knot > -0.25 && c.knot < 9.25);
            }
        }

        #[test]
        fn prop_pack_unpack_fixed_point(
            x in proptest::collection::vec(-2.0..2.0f64, 23),
        ) {
            // unpack → pack returns to the same coordinates (diagonal chol
            // entries are canonical-positive by construction).
            let layout = ParamLayout::new(2, (-0.25, 9.25)).unwrap();
            let model = layout.unpack(&x).unwrap();
            let x2 = layout.pack(&model).unwrap();
            for (a, b) in x.iter().zip(&x2) {
                prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}
