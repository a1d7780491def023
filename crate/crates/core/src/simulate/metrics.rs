//! Performance metrics over replications: relative bias, empirical SE,
//! relative RMSE, coverage, and the Monte Carlo SE of the bias.
//!
//! Parameters with a zero population value fall back to raw bias/RMSE with
//! the `relative` flag cleared (relative versions diverge there).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregated metrics for one parameter across converged replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMetrics {
    pub name: String,
    pub truth: f64,
    /// False when `truth == 0`: bias and RMSE are then raw, not relative.
    pub relative: bool,
    pub bias: f64,
    pub empirical_se: f64,
    pub rmse: f64,
    /// Share of replications whose CI covered the truth, over replications
    /// that produced a CI.
    pub coverage: Option<f64>,
    /// Number of replications contributing to `coverage`.
    pub ci_count: usize,
    /// `√(Var(θ̂)/S)`, raw scale.
    pub mc_se_bias: f64,
}

/// `√(Var(θ̂)/S)` with the S−1 variance estimator.
pub fn monte_carlo_se(samples: &[f64]) -> Result<f64> {
    let s = samples.len();
    if s < 2 {
        return Err(Error::invalid("monte_carlo_se: need at least 2 samples"));
    }
    let mean = samples.iter().sum::<f64>() / s as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s as f64 - 1.0);
    Ok((var / s as f64).sqrt())
}

/// Table-1-style metrics for each parameter.
///
/// `estimates[s][p]` and `cis[s][p]` index replication `s`, parameter `p`.
pub fn performance_metrics(
    names: &[String],
    truths: &[f64],
    estimates: &[Vec<f64>],
    cis: &[Vec<Option<(f64, f64)>>],
) -> Result<Vec<ParamMetrics>> {
    let s = estimates.len();
    if s < 2 {
        return Err(Error::invalid("performance_metrics: need at least 2 replications"));
    }
    let p = names.len();
    if truths.len() != p
        || estimates.iter().any(|e| e.len() != p)
        || cis.len() != s
        || cis.iter().any(|c| c.len() != p)
    {
        return Err(Error::invalid("performance_metrics: ragged inputs"));
    }
    let sf = s as f64;
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let theta = truths[j];
        let col: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
        let mean = col.iter().sum::<f64>() / sf;
        let raw_bias = col.iter().map(|v| v - theta).sum::<f64>() / sf;
        let emp_se =
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (sf - 1.0)).sqrt();
        let raw_rmse = (col.iter().map(|v| (v - theta).powi(2)).sum::<f64>() / sf).sqrt();
        let relative = theta != 0.0;
        let (bias, rmse) = if relative {
            (raw_bias / theta, raw_rmse / theta)
        } else {
            (raw_bias, raw_rmse)
        };
        let mut covered = 0usize;
        let mut ci_count = 0usize;
        for rep in cis {
            if let Some((lo, hi)) = rep[j] {
                ci_count += 1;
                if lo <= theta && theta <= hi {
                    covered += 1;
                }
            }
        }
        out.push(ParamMetrics {
            name: names[j].clone(),
            truth: theta,
            relative,
            bias,
            empirical_se: emp_se,
            rmse,
            coverage: (ci_count > 0).then(|| covered as f64 / ci_count as f64),
            ci_count,
            mc_se_bias: monte_carlo_se(&col)?,
        });
    }
    Ok(out)
}
