//! Exploratory factor analysis for covariate reduction: correlation matrix,
//! retention criteria (eigenvalues > 1, parallel analysis, scree data),
//! maximum-likelihood extraction with the loadings profiled out, varimax
//! rotation, and Bartlett weighted-least-squares factor scores.
//!
//! The ML objective is the profile likelihood over uniquenesses: with
//! `R* = Ψᵤ^{-1/2} R Ψᵤ^{-1/2}` and eigenvalues `λ₁ ≥ … ≥ λ_p`, minimize
//! `Σ_{j>m} (λ_j − ln λ_j) − (p−m)`; the loadings then come from the top-m
//! eigenpairs. Uniquenesses live in [0.005, 1] through a scaled logistic
//! map, and a solution touching the floor is flagged as a Heywood case.

use nalgebra::DMatrix;
#[cfg(test)]
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, BfgsOptions};

const UNIQUENESS_FLOOR: f64 = 0.005;

/// Result of a factor extraction (plus rotation, when applied).
#[derive(Debug, Clone, PartialEq)]
pub struct EfaResult {
    /// p×m loading matrix, columns sign-fixed so the largest-magnitude entry
    /// is positive.
    pub loadings: DMatrix<f64>,
    pub uniquenesses: Vec<f64>,
    /// Orthogonal rotation applied to the extraction, if any.
    pub rotation: Option<DMatrix<f64>>,
    /// Column sums of squared loadings.
    pub ss_loadings: Vec<f64>,
    /// `ss_loadings / p`.
    pub proportion_var: Vec<f64>,
    pub cumulative_var: Vec<f64>,
    /// Eigenvalues of the correlation matrix (scree data).
    pub eigenvalues: Vec<f64>,
    pub n: usize,
    pub converged: bool,
    /// A uniqueness hit the 0.005 floor.
    pub heywood: bool,
    /// Final value of the profile discrepancy.
    pub criterion: f64,
}

/// Factor-retention diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    /// Eigenvalues of the observed correlation matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// #{eigenvalues > 1}.
    pub evg1: usize,
    /// #{eigenvalues above the matching parallel-analysis threshold}.
    pub parallel: usize,
    /// 95th-percentile eigenvalues from the simulated datasets.
    pub pa_thresholds: Vec<f64>,
}

/// Per-individual factor scores (n×m).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorScores(pub DMatrix<f64>);

/// Center and scale columns to mean 0, variance 1 (n−1 denominator).
pub fn standardize_columns(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::invalid("standardize_columns: need at least 2 rows"));
    }
    let mut out = x.clone();
    for j in 0..p {
        let col = x.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        if var <= 0.0 {
            return Err(Error::invalid(format!("column {j} is constant")));
        }
        let sd = var.sqrt();
        for i in 0..n {
            out[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    Ok(out)
}

/// Pearson correlation matrix of the columns of `x` (n×p).
pub fn correlation_matrix(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let std = standardize_columns(x)?;
    let n = x.nrows() as f64;
    let mut r = std.transpose() * &std / (n - 1.0);
    // Unit diagonal and exact symmetry against round-off.
    let p = r.nrows();
    for i in 0..p {
        r[(i, i)] = 1.0;
        for j in 0..i {
            let v = 0.5 * (r[(i, j)] + r[(j, i)]);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

fn sorted_eigenvalues_desc(r: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = r.clone().symmetric_eigenvalues().iter().cloned().collect();
    e.sort_by(|a, b| b.partial_cmp(a).unwrap());
    e
}

/// EVG1 count, parallel-analysis count (95th percentile over 200 simulated
/// standard-normal datasets of the same shape), and the scree eigenvalues.
pub fn retention_criteria<R: Rng>(r: &DMatrix<f64>, n: usize, rng: &mut R) -> Result<Retention> {
    let p = r.nrows();
    if r.ncols() != p || p < 2 {
        return Err(Error::invalid("retention_criteria: need a square correlation matrix, p ≥ 2"));
    }
    if n < p + 1 {
        return Err(Error::invalid("retention_criteria: need n > p"));
    }
    let eig = sorted_eigenvalues_desc(r);
    if eig.last().copied().unwrap_or(0.0) < -1e-8 * p as f64 {
        return Err(Error::numerical(format!(
            "retention_criteria: correlation matrix is not PSD (min eigenvalue {:.3e})",
            eig.last().unwrap()
        )));
    }
    let evg1 = eig.iter().filter(|&&l| l > 1.0).count();

    const SIMS: usize = 200;
    let mut sim_eigs: Vec<Vec<f64>> = Vec::with_capacity(SIMS);
    for _ in 0..SIMS {
        let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng));
        let rr = correlation_matrix(&x)?;
        sim_eigs.push(sorted_eigenvalues_desc(&rr));
    }
    let mut pa_thresholds = Vec::with_capacity(p);
    for j in 0..p {
        let mut col: Vec<f64> = sim_eigs.iter().map(|e| e[j]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // 95th percentile, nearest-rank.
        let idx = ((0.95 * SIMS as f64).ceil() as usize).clamp(1, SIMS) - 1;
        pa_thresholds.push(col[idx]);
    }
    let parallel = eig.iter().zip(&pa_thresholds).take_while(|(l, t)| l > t).count();
    Ok(Retention { eigenvalues: eig, evg1, parallel, pa_thresholds })
}

fn logit01(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

fn uniqueness_from_raw(z: f64) -> f64 {
    UNIQUENESS_FLOOR + (1.0 - UNIQUENESS_FLOOR) * crate::estimate::params::sigmoid(z)
}

/// Profile discrepancy in the uniquenesses.
fn profile_criterion(r: &DMatrix<f64>, u: &[f64], m: usize) -> f64 {
    let p = u.len();
    let mut rstar = r.clone();
    for i in 0..p {
        for j in 0..p {
            rstar[(i, j)] /= (u[i] * u[j]).sqrt();
        }
    }
    let eig = sorted_eigenvalues_desc(&rstar);
    let mut f = 0.0;
    for &l in &eig[m..] {
        if l <= 0.0 {
            return f64::INFINITY;
        }
        f += l - l.ln();
    }
    f - (p - m) as f64
}

/// Maximum-likelihood factor extraction (unrotated).
pub fn fit_efa_ml(r: &DMatrix<f64>, n: usize, m: usize) -> Result<EfaResult> {
    let p = r.nrows();
    if r.ncols() != p || p < 1 {
        return Err(Error::invalid("fit_efa_ml: need a square correlation matrix"));
    }
    let eigenvalues = sorted_eigenvalues_desc(r);
    if m == 0 {
        // Perfect-diagonal model: standardized variables, uniquenesses 1.
        return Ok(EfaResult {
            loadings: DMatrix::zeros(p, 0),
            uniquenesses: vec![1.0; p],
            rotation: None,
            ss_loadings: vec![],
            proportion_var: vec![],
            cumulative_var: vec![],
            eigenvalues,
            n,
            converged: true,
            heywood: false,
            criterion: profile_criterion(r, &vec![1.0; p], 0),
        });
    }
    if m >= p {
        return Err(Error::invalid("fit_efa_ml: need m < p"));
    }
    let df = ((p - m) * (p - m)) as i64 - (p + m) as i64;
    if df < 0 {
        return Err(Error::invalid(format!(
            "fit_efa_ml: {m} factors for {p} variables leave negative degrees of freedom"
        )));
    }

    // factanal-style start: (1 − m/2p) / diag(R⁻¹).
    let start_diag: Vec<f64> = match r.clone().try_inverse() {
        Some(inv) => (0..p).map(|i| (1.0 - 0.5 * m as f64 / p as f64) / inv[(i, i)]).collect(),
        None => vec![0.5; p],
    };
    let z0: Vec<f64> = start_diag
        .iter()
        .map(|&u| {
            let v = ((u - UNIQUENESS_FLOOR) / (1.0 - UNIQUENESS_FLOOR)).clamp(0.02, 0.95);
            logit01(v)
        })
        .collect();

    let objective = |z: &[f64]| {
        let u: Vec<f64> = z.iter().map(|&v| uniqueness_from_raw(v)).collect();
        profile_criterion(r, &u, m)
    };
    let res = optim::minimize(&objective, &z0, &BfgsOptions { grad_tol: 1e-8, max_evals: 20_000 });
    let u: Vec<f64> = res.x.iter().map(|&v| uniqueness_from_raw(v)).collect();
    let heywood = u.iter().any(|&v| v < UNIQUENESS_FLOOR + 1e-5);

    // Loadings from the top-m eigenpairs of Ψᵤ^{-1/2} R Ψᵤ^{-1/2}.
    let mut rstar = r.clone();
    for i in 0..p {
        for j in 0..p {
            rstar[(i, j)] /= (u[i] * u[j]).sqrt();
        }
    }
    let eig = rstar.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut loadings = DMatrix::zeros(p, m);
    for (col, &src) in order.iter().take(m).enumerate() {
        let scale = (eig.eigenvalues[src] - 1.0).max(0.0).sqrt();
        for i in 0..p {
            loadings[(i, col)] = u[i].sqrt() * eig.eigenvectors[(i, src)] * scale;
        }
    }
    fix_column_signs(&mut loadings);

    let (ss, prop, cum) = explained_variance(&loadings);
    Ok(EfaResult {
        loadings,
        uniquenesses: u,
        rotation: None,
        ss_loadings: ss,
        proportion_var: prop,
        cumulative_var: cum,
        eigenvalues,
        n,
        converged: res.converged,
        heywood,
        criterion: res.value,
    })
}

fn explained_variance(loadings: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = loadings.nrows() as f64;
    let ss: Vec<f64> = (0..loadings.ncols())
        .map(|j| loadings.column(j).iter().map(|v| v * v).sum())
        .collect();
    let prop: Vec<f64> = ss.iter().map(|s| s / p).collect();
    let mut cum = Vec::with_capacity(prop.len());
    let mut acc = 0.0;
    for &v in &prop {
        acc += v;
        cum.push(acc);
    }
    (ss, prop, cum)
}

fn fix_column_signs(loadings: &mut DMatrix<f64>) {
    for j in 0..loadings.ncols() {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for v in loadings.column(j).iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..loadings.nrows() {
                loadings[(i, j)] = -loadings[(i, j)];
            }
        }
    }
}

/// Varimax criterion (raw, column-normalized form).
fn varimax_criterion(l: &DMatrix<f64>) -> f64 {
    let p = l.nrows() as f64;
    (0..l.ncols())
        .map(|j| {
            let s2: f64 = l.column(j).iter().map(|v| v * v).sum::<f64>() / p;
            let s4: f64 = l.column(j).iter().map(|v| v.powi(4)).sum::<f64>() / p;
            s4 - s2 * s2
        })
        .sum()
}

/// Kaiser-normalized pairwise varimax rotation.
///
/// Returns the rotated loadings and the orthogonal rotation matrix `T` with
/// `rotated = loadings · T`; stops when a full sweep improves the criterion
/// by less than 1e−8.
pub fn varimax_rotate(loadings: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (p, m) = loadings.shape();
    let mut rotation = DMatrix::<f64>::identity(m.max(1), m.max(1));
    if m <= 1 {
        let mut out = loadings.clone();
        fix_column_signs(&mut out);
        return (out, rotation);
    }
    // Kaiser normalization: weight rows to unit communality.
    let comm: Vec<f64> = (0..p)
        .map(|i| loadings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let mut work = loadings.clone();
    for i in 0..p {
        for j in 0..m {
            work[(i, j)] /= comm[i];
        }
    }
    let mut crit = varimax_criterion(&work);
    for _sweep in 0..200 {
        for a in 0..m - 1 {
            for b in a + 1..m {
                let (mut big_a, mut big_b, mut big_c, mut big_d) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..p {
                    let x = work[(i, a)];
                    let y = work[(i, b)];
                    let u = x * x - y * y;
                    let v = 2.0 * x * y;
                    big_a += u;
                    big_b += v;
                    big_c += u * u - v * v;
                    big_d += 2.0 * u * v;
                }
                let num = big_d - 2.0 * big_a * big_b / p as f64;
                let den = big_c - (big_a * big_a - big_b * big_b) / p as f64;
                let phi = 0.25 * num.atan2(den);
                if phi.abs() < 1e-12 {
                    continue;
                }
                let (s, c) = phi.sin_cos();
                for i in 0..p {
                    let x = work[(i, a)];
                    let y = work[(i, b)];
                    work[(i, a)] = c * x + s * y;
                    work[(i, b)] = -s * x + c * y;
                }
                for i in 0..m {
                    let x = rotation[(i, a)];
                    let y = rotation[(i, b)];
                    rotation[(i, a)] = c * x + s * y;
                    rotation[(i, b)] = -s * x + c * y;
                }
            }
        }
        let new_crit = varimax_criterion(&work);
        if new_crit - crit < 1e-8 {
            break;
        }
        crit = new_crit;
    }
    // Undo the normalization.
    for i in 0..p {
        for j in 0..m {
            work[(i, j)] *= comm[i];
        }
    }
    // Order factors by explained variance (descending SS loadings).
    let ss: Vec<f64> = (0..m).map(|j| work.column(j).iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| ss[b].partial_cmp(&ss[a]).unwrap().then(a.cmp(&b)));
    if order.windows(2).any(|w| w[0] > w[1]) {
        let old_work = work.clone();
        let old_rot = rotation.clone();
        for (new_j, &src) in order.iter().enumerate() {
            work.set_column(new_j, &old_work.column(src));
            rotation.set_column(new_j, &old_rot.column(src));
        }
    }
    // Sign-fix columns, mirroring the flips into the rotation matrix.
    for j in 0..m {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for v in work.column(j).iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..p {
                work[(i, j)] = -work[(i, j)];
            }
            for i in 0..m {
                rotation[(i, j)] = -rotation[(i, j)];
            }
        }
    }
    (work, rotation)
}

impl EfaResult {
    /// Apply varimax to this extraction, refreshing the explained-variance
    /// block.
    pub fn varimax(&self) -> EfaResult {
        let (loadings, rotation) = varimax_rotate(&self.loadings);
        let (ss, prop, cum) = explained_variance(&loadings);
        EfaResult {
            loadings,
            rotation: Some(rotation),
            ss_loadings: ss,
            proportion_var: prop,
            cumulative_var: cum,
            ..self.clone()
        }
    }
}

/// Bartlett weighted-least-squares factor scores from standardized
/// covariates: `scores = X Ψᵤ⁻¹Λ (ΛᵀΨᵤ⁻¹Λ)⁻¹`.
pub fn bartlett_scores(x_std: &DMatrix<f64>, efa: &EfaResult) -> Result<FactorScores> {
    let (p, m) = efa.loadings.shape();
    if x_std.ncols() != p {
        return Err(Error::invalid(format!(
            "bartlett_scores: {} covariate columns but {} loading rows",
            x_std.ncols(),
            p
        )));
    }
    let mut weighted = efa.loadings.clone(); // Ψᵤ⁻¹Λ
    for i in 0..p {
        for j in 0..m {
            weighted[(i, j)] /= efa.uniquenesses[i];
        }
    }
    let gram = efa.loadings.transpose() * &weighted; // ΛᵀΨᵤ⁻¹Λ
    let inv = gram.try_inverse().ok_or_else(|| {
        Error::numerical("bartlett_scores: ΛᵀΨᵤ⁻¹Λ is singular")
    })?;
    Ok(FactorScores(x_std * weighted * inv))
}
