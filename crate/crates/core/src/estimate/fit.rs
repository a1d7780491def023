//! Multi-start maximum-likelihood fitting for both estimation steps.
//!
//! Step 1 maximizes the free-mixing measurement likelihood over the full
//! parameter vector by quasi-Newton with numeric central-difference
//! gradients; a start counts as converged when the scaled gradient norm
//! drops below tolerance, and up to `attempts` perturbed starts are tried.
//! Step 2 maximizes the covariate-conditional mixing likelihood over the
//! logistic coefficients only, with the measurement parameters frozen
//! bit-identical to step 1.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::estimate::params::{LogisticLayout, ParamLayout};
use crate::estimate::{
    information_criteria, ClassEstimates, Estimate, FitOptions, FitResult, FitStatus,
    LogisticEstimates,
};
use crate::likelihood::{
    classify, log_sum_exp, posterior_probs, LogisticCoeffs, MixingSpec, MixtureModel,
    LOG_DENSITY_FLOOR,
};
use crate::model::{ClassParams, Frame};
use crate::optim::{self, BfgsOptions};
use crate::seeding;

const CLASSIFY_STREAM: u64 = 0x636c617373; // "class"
const ATTEMPT_STREAM: u64 = 0x7374617274; // "start"

/// Entries per class in the report vector: repar mean 3 + repar cov 6 +
/// knot + θ + original mean 3 + original cov 6.
const REPORT_BLOCK: usize = 20;

// ---------------------------------------------------------------------------
// Step 1
// ---------------------------------------------------------------------------

/// Fit the K-class measurement mixture by FIML.
pub fn fit_step1(
    data: &LongitudinalDataset,
    class_count: usize,
    options: &FitOptions,
) -> Result<FitResult> {
    data.validate()?;
    if class_count == 0 {
        return Err(Error::invalid("fit_step1: class count must be at least 1"));
    }
    let time_range = data.time_range()?;
    let layout = ParamLayout::new(class_count, time_range)?;
    let p = layout.free_params();
    if data.len() <= p {
        return Err(Error::invalid(format!(
            "fit_step1: n = {} individuals cannot identify {} free parameters",
            data.len(),
            p
        )));
    }

    let objective = |x: &[f64]| neg_step1_loglik(data, &layout, x);
    let bfgs = BfgsOptions { grad_tol: options.grad_tol, max_evals: options.max_evals };
    let base = initial_start(data, class_count, &layout);

    let mut best_failed: Option<optim::BfgsResult> = None;
    for attempt in 1..=options.attempts.max(1) {
        let start = if attempt == 1 {
            base.clone()
        } else {
            let mut rng = seeding::rng(options.seed, ATTEMPT_STREAM, attempt as u64);
            base.perturb(&mut rng, &layout)
        };
        let res = optim::minimize(&objective, &start.pack(&layout), &bfgs);
        if res.converged {
            return finish_step1(data, &layout, res, attempt, FitStatus::Converged, options);
        }
        if best_failed.as_ref().map_or(true, |b| res.value < b.value) {
            best_failed = Some(res);
        }
    }
    let attempts = options.attempts.max(1);
    finish_step1(
        data,
        &layout,
        best_failed.expect("at least one attempt ran"),
        attempts,
        FitStatus::Failed { attempts },
        options,
    )
}

fn neg_step1_loglik(data: &LongitudinalDataset, layout: &ParamLayout, x: &[f64]) -> f64 {
    let kernels = layout.unpack_kernels(x);
    let log_pi: Vec<f64> =
        layout.unpack_proportions(x).iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
    let mut terms = vec![0.0; kernels.len()];
    let mut total = 0.0;
    for ind in &data.individuals {
        for (k, kern) in kernels.iter().enumerate() {
            match kern.logpdf(&ind.times, &ind.outcomes) {
                Ok(lp) => terms[k] = log_pi[k] + lp.max(LOG_DENSITY_FLOOR),
                Err(_) => return f64::INFINITY,
            }
        }
        total += log_sum_exp(&terms);
    }
    if total.is_finite() {
        -total
    } else {
        f64::INFINITY
    }
}

fn finish_step1(
    data: &LongitudinalDataset,
    layout: &ParamLayout,
    res: optim::BfgsResult,
    attempts: u32,
    status: FitStatus,
    options: &FitOptions,
) -> Result<FitResult> {
    // Canonical labeling: classes sorted by knot ascending. The objective is
    // invariant under the permutation, so the reordered point is still the
    // optimum.
    let mut x = res.x.clone();
    let model = layout.unpack(&x)?;
    let mut order: Vec<usize> = (0..model.class_count()).collect();
    order.sort_by(|&a, &b| model.classes[a].knot.partial_cmp(&model.classes[b].knot).unwrap());
    if order.windows(2).any(|w| w[0] > w[1]) {
        let MixingSpec::Free { proportions } = &model.mixing else { unreachable!() };
        let permuted = MixtureModel::new(
            order.iter().map(|&k| model.classes[k].clone()).collect(),
            MixingSpec::free(order.iter().map(|&k| proportions[k]).collect()),
        )?;
        x = layout.pack(&permuted)?;
    }
    let model = layout.unpack(&x)?;

    let n = data.len();
    let p = layout.free_params();
    let loglik = -res.value;
    let (aic, bic) = information_criteria(loglik, p, n)?;

    let report = report_vector(layout, &x);
    let se = if options.standard_errors && matches!(status, FitStatus::Converged) {
        let objective = |z: &[f64]| neg_step1_loglik(data, layout, z);
        let hessian = optim::numeric_hessian(&objective, &x);
        let jac = report_jacobian(layout, &x);
        propagate_se(&hessian, &jac)
    } else {
        vec![None; report.len()]
    };

    let k = layout.class_count;
    let mut repar = Vec::with_capacity(k);
    let mut original = Vec::with_capacity(k);
    for class in 0..k {
        let block = &report[class * REPORT_BLOCK..(class + 1) * REPORT_BLOCK];
        let ses = &se[class * REPORT_BLOCK..(class + 1) * REPORT_BLOCK];
        let est =
            |i: usize| -> Estimate { Estimate::new(block[i], ses[i]) };
        repar.push(ClassEstimates {
            mean: [est(0), est(1), est(2)],
            cov: [est(3), est(4), est(5), est(6), est(7), est(8)],
            knot: est(9),
            residual_var: est(10),
        });
        original.push(ClassEstimates {
            mean: [est(11), est(12), est(13)],
            cov: [est(14), est(15), est(16), est(17), est(18), est(19)],
            knot: est(9),
            residual_var: est(10),
        });
    }
    let proportions: Vec<Estimate> = (0..k)
        .map(|j| Estimate::new(report[k * REPORT_BLOCK + j], se[k * REPORT_BLOCK + j]))
        .collect();

    let posterior = posterior_probs(data, &model)?;
    let mut rng = seeding::rng(options.seed, CLASSIFY_STREAM, 0);
    let modal = classify(&posterior, &mut rng);

    Ok(FitResult {
        status,
        attempts,
        class_count: k,
        n,
        free_params: p,
        loglik,
        aic,
        bic,
        repar,
        original,
        proportions,
        logistic: None,
        covariate_names: Vec::new(),
        posterior,
        modal,
        time_range: (layout.time_lo, layout.time_hi),
    })
}

/// Report vector in reporting frames: per class
/// `[μ' (3), ψ' lower-tri (6), γ, θ, μ (3), ψ lower-tri (6)]`, then the K
/// mixing proportions.
fn report_vector(layout: &ParamLayout, x: &[f64]) -> Vec<f64> {
    let k = layout.class_count;
    let mut out = Vec::with_capacity(k * REPORT_BLOCK + k);
    for class in 0..k {
        let (mean, l, theta, knot) = layout.unpack_class(x, class);
        let psi = l * l.transpose();
        out.extend_from_slice(&[mean[0], mean[1], mean[2]]);
        push_lower_tri(&mut out, &psi);
        out.push(knot);
        out.push(theta);
        let repar = ClassParams {
            frame: Frame::Reparameterized,
            mean,
            cov: psi,
            knot,
            residual_var: theta,
        };
        // Means through h, covariance through ∇h Ψ' ∇hᵀ; algebraically exact.
        let orig = repar.to_original().expect("finite parameters");
        out.extend_from_slice(&[orig.mean[0], orig.mean[1], orig.mean[2]]);
        push_lower_tri(&mut out, &orig.cov);
    }
    out.extend_from_slice(&layout.unpack_proportions(x));
    out
}

fn push_lower_tri(out: &mut Vec<f64>, m: &Matrix3<f64>) {
    for i in 0..3 {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
}

/// Numeric Jacobian of the report map (pure algebra, no likelihood calls).
fn report_jacobian(layout: &ParamLayout, x: &[f64]) -> DMatrix<f64> {
    let r0 = report_vector(layout, x);
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let rp = report_vector(layout, &xp);
        xp[i] = x[i] - h;
        let rm = report_vector(layout, &xp);
        xp[i] = x[i];
        for r in 0..r0.len() {
            jac[(r, i)] = (rp[r] - rm[r]) / (2.0 * h);
        }
    }
    jac
}

/// Delta-method standard errors: `Var(report) = J H⁻¹ Jᵀ` through the
/// eigendecomposition of the observed-information Hessian. Directions with
/// non-positive curvature poison only the report entries they load on, which
/// come back as missing.
fn propagate_se(hessian: &DMatrix<f64>, jac: &DMatrix<f64>) -> Vec<Option<f64>> {
    let eig = hessian.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    let tol = 1e-10 * lam_max.max(1e-300);
    let coef = jac * &eig.eigenvectors; // rows: report entries, cols: eigen directions
    let mut out = Vec::with_capacity(jac.nrows());
    for r in 0..jac.nrows() {
        let row_scale =
            (0..coef.ncols()).map(|i| coef[(r, i)].abs()).fold(0.0_f64, f64::max).max(1e-300);
        let mut var = 0.0;
        let mut bad = false;
        for i in 0..coef.ncols() {
            let c = coef[(r, i)];
            if eig.eigenvalues[i] > tol {
                var += c * c / eig.eigenvalues[i];
            } else if c.abs() > 1e-8 * row_scale {
                bad = true;
                break;
            }
        }
        out.push(if bad || !var.is_finite() { None } else { Some(var.sqrt()) });
    }
    out
}

// ---------------------------------------------------------------------------
// Starting values
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ClassStart {
    mean: Vector3<f64>,
    chol: Matrix3<f64>,
    theta: f64,
    knot: f64,
}

#[derive(Debug, Clone)]
struct StartPoint {
    classes: Vec<ClassStart>,
    proportions: Vec<f64>,
}

impl StartPoint {
    fn pack(&self, layout: &ParamLayout) -> Vec<f64> {
        let k = self.classes.len();
        let mut x = vec![0.0; layout.free_params()];
        for (class, c) in self.classes.iter().enumerate() {
            let b = &mut x[layout.class_block(class)];
            b[0] = c.mean[0];
            b[1] = c.mean[1];
            b[2] = c.mean[2];
            b[3] = c.chol[(0, 0)].max(1e-8).ln();
            b[4] = c.chol[(1, 0)];
            b[5] = c.chol[(1, 1)].max(1e-8).ln();
            b[6] = c.chol[(2, 0)];
            b[7] = c.chol[(2, 1)];
            b[8] = c.chol[(2, 2)].max(1e-8).ln();
            b[9] = c.theta.max(1e-8).ln();
            let range = layout.time_hi - layout.time_lo;
            let frac = ((c.knot - layout.time_lo) / range).clamp(0.02, 0.98);
            b[10] = (frac / (1.0 - frac)).ln();
        }
        let p1 = self.proportions[0].max(1e-6);
        let mix = layout.mixing_block();
        for j in 1..k {
            x[mix.start + j - 1] = (self.proportions[j].max(1e-6) / p1).ln();
        }
        x
    }

    /// Multiply every natural-scale start quantity by U(0.8, 1.2).
    fn perturb<R: Rng>(&self, rng: &mut R, layout: &ParamLayout) -> StartPoint {
        let mut u = |v: f64| v * rng.random_range(0.8..1.2);
        let classes = self
            .classes
            .iter()
            .map(|c| ClassStart {
                mean: Vector3::new(u(c.mean[0]), u(c.mean[1]), u(c.mean[2])),
                chol: Matrix3::new(
                    u(c.chol[(0, 0)]),
                    0.0,
                    0.0,
                    u(c.chol[(1, 0)]),
                    u(c.chol[(1, 1)]),
                    0.0,
                    u(c.chol[(2, 0)]),
                    u(c.chol[(2, 1)]),
                    u(c.chol[(2, 2)]),
                ),
                theta: u(c.theta),
                knot: u(c.knot)
                    .clamp(layout.time_lo + 0.05, layout.time_hi - 0.05),
            })
            .collect();
        let mut proportions: Vec<f64> = self.proportions.iter().map(|&p| u(p)).collect();
        let s: f64 = proportions.iter().sum();
        proportions.iter_mut().for_each(|p| *p /= s);
        StartPoint { classes, proportions }
    }
}

/// Least squares of y on t: `(intercept, slope, sse, n)`.
fn ols(ts: &[f64], ys: &[f64]) -> (f64, f64, f64, usize) {
    let n = ts.len();
    if n == 0 {
        return (0.0, 0.0, 0.0, 0);
    }
    let tbar = ts.iter().sum::<f64>() / n as f64;
    let ybar = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, y) in ts.iter().zip(ys) {
        sxx += (t - tbar) * (t - tbar);
        sxy += (t - tbar) * (y - ybar);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = ybar - slope * tbar;
    let sse: f64 =
        ts.iter().zip(ys).map(|(t, y)| (y - intercept - slope * t).powi(2)).sum();
    (intercept, slope, sse, n)
}

struct HalfFits {
    first: (f64, f64, f64, usize),
    second: (f64, f64, f64, usize),
}

fn half_fits(times: &[f64], outcomes: &[f64]) -> HalfFits {
    let j = times.len();
    let split = (j / 2).max(1);
    let first = ols(&times[..split.min(j)], &outcomes[..split.min(j)]);
    let second = if split < j {
        ols(&times[split..], &outcomes[split..])
    } else {
        first
    };
    HalfFits { first, second }
}

/// Deterministic data-driven start: rank individuals by the change in their
/// half-series OLS slopes, split the ranking into K quantile groups, and
/// seed each class from that group's moments with the knot at the group's
/// time midpoint.
fn initial_start(data: &LongitudinalDataset, k: usize, layout: &ParamLayout) -> StartPoint {
    let n = data.len();
    let fits: Vec<HalfFits> =
        data.individuals.iter().map(|i| half_fits(&i.times, &i.outcomes)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let stat = |i: usize| fits[i].second.1 - fits[i].first.1;
    order.sort_by(|&a, &b| stat(a).partial_cmp(&stat(b)).unwrap().then(a.cmp(&b)));

    let mut classes = Vec::with_capacity(k);
    let mut proportions = Vec::with_capacity(k);
    for g in 0..k {
        let lo = g * n / k;
        let hi = ((g + 1) * n / k).max(lo + 1);
        let members = &order[lo..hi.min(n)];
        proportions.push(members.len() as f64 / n as f64);

        let mut t_lo = f64::INFINITY;
        let mut t_hi = f64::NEG_INFINITY;
        for &i in members {
            t_lo = t_lo.min(*data.individuals[i].times.first().unwrap());
            t_hi = t_hi.max(*data.individuals[i].times.last().unwrap());
        }
        let knot = 0.5 * (t_lo + t_hi);

        // Reparameterized per-individual features at the group knot.
        let feats: Vec<Vector3<f64>> = members
            .iter()
            .map(|&i| {
                let f = &fits[i];
                let split_t = data.individuals[i].times[data.individuals[i].times.len() / 2];
                let value = if knot <= split_t {
                    f.first.0 + f.first.1 * knot
                } else {
                    f.second.0 + f.second.1 * knot
                };
                Vector3::new(
                    value,
                    0.5 * (f.first.1 + f.second.1),
                    0.5 * (f.second.1 - f.first.1),
                )
            })
            .collect();
        let m = feats.len() as f64;
        let mean = feats.iter().sum::<Vector3<f64>>() / m;
        let mut cov = Matrix3::zeros();
        for f in &feats {
            let d = f - mean;
            cov += d * d.transpose();
        }
        cov /= (m - 1.0).max(1.0);
        // Shrink toward the diagonal and add a floor so the factor exists.
        let mut reg = cov * 0.9;
        for i in 0..3 {
            reg[(i, i)] = 0.9 * cov[(i, i)] + 0.1 * cov[(i, i)].abs() + 1e-2;
        }
        let chol = reg.cholesky().map(|c| c.l()).unwrap_or_else(|| {
            Matrix3::from_diagonal(&Vector3::new(
                reg[(0, 0)].max(1e-2).sqrt(),
                reg[(1, 1)].max(1e-2).sqrt(),
                reg[(2, 2)].max(1e-2).sqrt(),
            ))
        });

        let mut theta = 0.0;
        for &i in members {
            let f = &fits[i];
            let df = (f.first.3 + f.second.3).saturating_sub(4).max(1) as f64;
            theta += (f.first.2 + f.second.2) / df;
        }
        theta = (theta / m).max(1e-2);

        classes.push(ClassStart { mean, chol, theta, knot });
    }
    let _ = layout;
    StartPoint { classes, proportions }
}

// ---------------------------------------------------------------------------
// Step 2
// ---------------------------------------------------------------------------

/// Fit the class-membership logistic coefficients with the step-1
/// measurement parameters frozen.
pub fn fit_step2(
    data: &LongitudinalDataset,
    step1: &FitResult,
    options: &FitOptions,
) -> Result<FitResult> {
    if !step1.converged() {
        return Err(Error::invalid("fit_step2: step-1 fit did not converge"));
    }
    let k = step1.class_count;
    if k < 2 {
        return Err(Error::invalid("fit_step2: need at least two classes"));
    }
    let q = data.covariate_names.len();
    if q == 0 {
        return Err(Error::invalid("fit_step2: dataset has no covariates"));
    }
    if data.len() != step1.n {
        return Err(Error::invalid("fit_step2: dataset size differs from the step-1 fit"));
    }
    check_design_rank(data)?;

    // Class densities are fixed in step 2; precompute each log-density once.
    let model = step1.model()?;
    let kernels = crate::likelihood::kernels_of(&model)?;
    let mut logdens = DMatrix::zeros(data.len(), k);
    for (i, ind) in data.individuals.iter().enumerate() {
        for (kk, kern) in kernels.iter().enumerate() {
            logdens[(i, kk)] =
                kern.logpdf(&ind.times, &ind.outcomes)?.max(LOG_DENSITY_FLOOR);
        }
    }

    let layout = LogisticLayout::new(k, q)?;
    let objective = |x: &[f64]| {
        let coeffs = layout.unpack(x);
        neg_step2_loglik(data, &logdens, &coeffs)
    };
    let bfgs = BfgsOptions { grad_tol: options.grad_tol, max_evals: options.max_evals };

    let mut best: Option<optim::BfgsResult> = None;
    let mut converged_at = 0u32;
    for attempt in 1..=options.attempts.max(1) {
        let x0: Vec<f64> = if attempt == 1 {
            vec![0.0; layout.free_params()]
        } else {
            let mut rng = seeding::rng(options.seed, ATTEMPT_STREAM, 1000 + attempt as u64);
            (0..layout.free_params()).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let res = optim::minimize(&objective, &x0, &bfgs);
        if res.converged {
            converged_at = attempt;
            best = Some(res);
            break;
        }
        if best.as_ref().map_or(true, |b| res.value < b.value) {
            best = Some(res);
        }
    }
    let res = best.expect("at least one attempt ran");
    let status = if converged_at == 0 {
        FitStatus::Failed { attempts: options.attempts.max(1) }
    } else if res.x.iter().any(|b| b.abs() > 30.0) {
        FitStatus::NotIdentified {
            reason: "logistic coefficients diverged (|β| > 30), likely separation".into(),
        }
    } else {
        FitStatus::Converged
    };

    let p2 = layout.free_params();
    let loglik = -res.value;
    let (aic, bic) = information_criteria(loglik, p2, data.len())?;

    let se = if options.standard_errors && matches!(status, FitStatus::Converged) {
        let hessian = optim::numeric_hessian(&objective, &res.x);
        let jac = DMatrix::identity(p2, p2);
        propagate_se(&hessian, &jac)
    } else {
        vec![None; p2]
    };
    let w = 1 + q;
    let logistic: Vec<LogisticEstimates> = (0..k - 1)
        .map(|j| LogisticEstimates {
            intercept: Estimate::new(res.x[j * w], se[j * w]),
            slopes: (0..q)
                .map(|c| Estimate::new(res.x[j * w + 1 + c], se[j * w + 1 + c]))
                .collect(),
        })
        .collect();

    Ok(FitResult {
        status,
        attempts: if converged_at == 0 { options.attempts.max(1) } else { converged_at },
        loglik,
        aic,
        bic,
        free_params: p2,
        logistic: Some(logistic),
        covariate_names: data.covariate_names.clone(),
        ..step1.clone()
    })
}

fn neg_step2_loglik(
    data: &LongitudinalDataset,
    logdens: &DMatrix<f64>,
    coeffs: &[LogisticCoeffs],
) -> f64 {
    let k = logdens.ncols();
    let mut lin = vec![0.0; k];
    let mut total = 0.0;
    for (i, ind) in data.individuals.iter().enumerate() {
        lin[0] = 0.0;
        for (j, c) in coeffs.iter().enumerate() {
            lin[j + 1] =
                c.intercept + c.slopes.iter().zip(&ind.covariates).map(|(b, x)| b * x).sum::<f64>();
        }
        let norm = log_sum_exp(&lin);
        for (j, l) in lin.iter_mut().enumerate() {
            *l = *l - norm + logdens[(i, j)];
        }
        total += log_sum_exp(&lin);
    }
    if total.is_finite() {
        -total
    } else {
        f64::INFINITY
    }
}

/// Reject rank-deficient covariate designs (e.g. duplicated columns).
fn check_design_rank(data: &LongitudinalDataset) -> Result<()> {
    let q = data.covariate_names.len();
    let mut gram = DMatrix::<f64>::zeros(q + 1, q + 1);
    for ind in &data.individuals {
        let mut row = Vec::with_capacity(q + 1);
        row.push(1.0);
        row.extend_from_slice(&ind.covariates);
        for a in 0..=q {
            for b in 0..=q {
                gram[(a, b)] += row[a] * row[b];
            }
        }
    }
    let eig = gram.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(0.0_f64, f64::max);
    if eig.iter().any(|&l| l < 1e-10 * max) {
        return Err(Error::NotIdentified(
            "covariate design is rank deficient (collinear or constant columns)".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Individual;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Hand-rolled single/two-class generator for fit tests.
    fn gen_data(
        seed: u64,
        n: usize,
        classes: &[(Vector3<f64>, f64)], // (original-frame mean, knot)
        pis: &[f64],
        theta: f64,
        with_covariates: bool,
    ) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = Matrix3::new(25.0, 1.5, 1.5, 1.5, 1.0, 0.3, 1.5, 0.3, 1.0);
        let chol = psi.cholesky().unwrap().l();
        let individuals = (0..n)
            .map(|i| {
                let u: f64 = rng.random_range(0.0..1.0);
                let mut z = 0usize;
                let mut c = 0.0;
                for (kk, &p) in pis.iter().enumerate() {
                    c += p;
                    if u < c {
                        z = kk;
                        break;
                    }
                }
                let (mean, knot) = &classes[z];
                let e = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                let eta = mean + chol * e;
                let times: Vec<f64> =
                    (0..10).map(|j| j as f64 + rng.random_range(-0.25..0.25)).collect();
                let outcomes: Vec<f64> = times
                    .iter()
                    .map(|&t| {
                        let m = if t <= *knot {
                            eta[0] + eta[1] * t
                        } else {
                            eta[0] + eta[1] * knot + eta[2] * (t - knot)
                        };
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m + theta.sqrt() * e
                    })
                    .collect();
                let covariates = if with_covariates {
                    vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]
                } else {
                    vec![]
                };
                Individual::new(format!("i{i}"), times, outcomes, covariates, Some(z)).unwrap()
            })
            .collect();
        let names = if with_covariates { vec!["x1".into(), "x2".into()] } else { vec![] };
        LongitudinalDataset::new(individuals, names).unwrap()
    }

    #[test]
    fn step1_gradient_matches_coarse_finite_difference() {
        let data = gen_data(1, 40, &[(Vector3::new(100.0, -5.0, -2.6), 4.5)], &[1.0], 1.0, false);
        let layout = ParamLayout::new(1, data.time_range().unwrap()).unwrap();
        let start = initial_start(&data, 1, &layout);
        let x = start.pack(&layout);
        let f = |z: &[f64]| neg_step1_loglik(&data, &layout, z);
        let mut g = vec![0.0; x.len()];
        optim::central_gradient(&f, &x, optim::GRAD_STEP, &mut g);
        // Independent check at the documented coarse step.
        let mut xp = x.clone();
        for i in 0..x.len() {
            let h = 1e-4;
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1.0);
            assert!(
                ((g[i] - fd) / denom).abs() < 1e-4,
                "coordinate {i}: {} vs {}",
                g[i],
                fd
            );
        }
    }

    #[test]
    fn step1_single_class_recovery() {
        let truth = Vector3::new(100.0, -5.0, -2.6);
        let knot = 4.5;
        let data = gen_data(7, 500, &[(truth, knot)], &[1.0], 1.0, false);
        let fit = fit_step1(&data, 1, &FitOptions::default()).unwrap();
        assert!(fit.converged(), "{:?}", fit.status);
        let orig = &fit.original[0];
        for i in 0..3 {
            let se = orig.mean[i].se.expect("SE available");
            assert!(
                (orig.mean[i].value - truth[i]).abs() < 3.0 * se,
                "mean {i}: {} vs {truth:?} (se {se})",
                orig.mean[i].value
            );
        }
        let kse = orig.knot.se.unwrap();
        assert!((orig.knot.value - knot).abs() < 3.0 * kse);
        // Original-frame report is the exact transform of the repar report.
        let repar = fit.repar[0].to_params(Frame::Reparameterized).unwrap();
        let orig_params = repar.to_original().unwrap();
        for i in 0..3 {
            assert_relative_eq!(orig.mean[i].value, orig_params.mean[i], epsilon = 1e-10);
        }
        let got = fit.original[0].to_params(Frame::Original).unwrap();
        assert_relative_eq!(got.cov, orig_params.cov, epsilon = 1e-10);
    }

    #[test]
    fn step1_rejects_too_few_individuals() {
        let data = gen_data(3, 11, &[(Vector3::new(100.0, -5.0, -2.6), 4.5)], &[1.0], 1.0, false);
        let err = fit_step1(&data, 1, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn step2_requires_converged_step1_and_covariates() {
        let data = gen_data(5, 60, &[(Vector3::new(100.0, -5.0, -2.6), 4.5)], &[1.0], 1.0, false);
        let fit = fit_step1(&data, 1, &FitOptions::default()).unwrap();
        // K = 1 has no logistic block.
        assert!(fit_step2(&data, &fit, &FitOptions::default()).is_err());
    }

    #[test]
    fn step2_duplicate_covariate_is_rank_deficient() {
        let classes = [(Vector3::new(96.0, -5.0, -2.6), 3.5), (Vector3::new(104.0, -5.0, -2.6), 5.5)];
        let mut data = gen_data(11, 120, &classes, &[0.5, 0.5], 1.0, true);
        // Duplicate x1 into x2.
        for ind in &mut data.individuals {
            ind.covariates[1] = ind.covariates[0];
        }
        let err = check_design_rank(&data).unwrap_err();
        assert!(matches!(err, Error::NotIdentified(_)), "{err}");
    }

    #[test]
    fn step2_null_coefficients_recovered() {
        // Covariates independent of class: β = 0 within 3 SEs.
        let classes = [(Vector3::new(96.0, -5.0, -2.6), 3.5), (Vector3::new(104.0, -5.0, -2.6), 5.5)];
        let data = gen_data(13, 300, &classes, &[0.5, 0.5], 1.0, true);
        let opts = FitOptions { seed: 2, ..FitOptions::default() };
        let s1 = fit_step1(&data, 2, &opts).unwrap();
        assert!(s1.converged(), "{:?}", s1.status);
        let s2 = fit_step2(&data, &s1, &opts).unwrap();
        assert!(s2.converged(), "{:?}", s2.status);
        let coefs = &s2.logistic.as_ref().unwrap()[0];
        for est in std::iter::once(&coefs.intercept).chain(&coefs.slopes) {
            let se = est.se.expect("step-2 SE");
            assert!(est.value.abs() < 3.0 * se, "{} (se {se})", est.value);
        }
        // Measurement block is bit-identical to step 1.
        assert_eq!(s1.repar, s2.repar);
        assert_eq!(s1.original, s2.original);
    }
}
