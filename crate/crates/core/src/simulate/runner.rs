//! Replication loop: generate → fit step 1 → fit step 2 → posterior and
//! accuracy, repeated until the target number of convergent solutions, with
//! column-maxima label-switch repair before aggregation.
//!
//! Replication `r` draws everything from a seed derived from
//! `(condition seed, r)`, so results are identical for any thread count; the
//! runner scans outcomes in replication order and cuts off after the
//! S-th convergence, discarding any overshoot from parallel batches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{self, cov_index, wald_ci, FitOptions, FitResult};
use crate::likelihood::accuracy;
use crate::seeding;
use crate::simulate::{generate_dataset, performance_metrics, ParamMetrics, SimCondition};

const DATA_STREAM: u64 = 0xda7a;
const FIT_STREAM: u64 = 0xf17;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Per-fit options; the seed field is ignored (replication-derived).
    pub fit: FitOptions,
    /// Confidence level for coverage.
    pub ci_level: f64,
    /// Keep per-replication records in the report.
    pub keep_records: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { fit: FitOptions::default(), ci_level: 0.95, keep_records: true }
    }
}

/// One converged replication's contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    /// Replication index (drives the seed).
    pub replication: u64,
    pub estimates: Vec<f64>,
    pub cis: Vec<Option<(f64, f64)>>,
    pub accuracy: f64,
    pub loglik: f64,
    pub step1_attempts: u32,
    /// True when the column-maxima check had to relabel.
    pub relabeled: bool,
}

/// Aggregated report for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub parameter_names: Vec<String>,
    pub truths: Vec<f64>,
    pub metrics: Vec<ParamMetrics>,
    pub mean_accuracy: f64,
    pub converged: usize,
    pub attempted: usize,
    pub records: Vec<RepRecord>,
}

/// Cross-tabulation of true × assigned labels.
fn cross_tab(truth: &[usize], assigned: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut tab = vec![vec![0usize; k]; k];
    for (&t, &a) in truth.iter().zip(assigned) {
        tab[t][a] += 1;
    }
    tab
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        let k = used.len();
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for c in 0..k {
            if !used[c] {
                used[c] = true;
                prefix.push(c);
                rec(prefix, used, out);
                prefix.pop();
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Detect label switching against the true labels and repair it.
///
/// Builds the true × assigned cross-tabulation; if the column maxima are off
/// the diagonal, the implied relabeling is applied to every class-indexed
/// quantity. When the column-maxima map is not a permutation the assignment
/// maximizing the diagonal sum takes over. Returns the repaired fit and the
/// old→new label map.
pub fn detect_and_relabel(fit: &FitResult, truth: &[usize]) -> Result<(FitResult, Vec<usize>)> {
    let k = fit.class_count;
    if truth.len() != fit.modal.len() {
        return Err(Error::invalid("detect_and_relabel: label length mismatch"));
    }
    if truth.iter().any(|&t| t >= k) {
        return Err(Error::invalid("detect_and_relabel: true label out of range"));
    }
    let tab = cross_tab(truth, &fit.modal, k);
    // Column maxima: assigned column j is relabeled to its dominant true row.
    let col_max: Vec<usize> = (0..k)
        .map(|j| (0..k).max_by_key(|&i| (tab[i][j], k - i)).unwrap())
        .collect();
    let mut seen = vec![false; k];
    let is_perm = col_max.iter().all(|&m| !std::mem::replace(&mut seen[m], true));
    let old_to_new = if is_perm {
        col_max
    } else {
        // Fall back to the relabeling with the largest diagonal sum.
        permutations(k)
            .into_iter()
            .max_by_key(|sigma| (0..k).map(|j| tab[sigma[j]][j]).sum::<usize>())
            .unwrap()
    };
    if old_to_new.iter().enumerate().all(|(j, &m)| j == m) {
        return Ok((fit.clone(), old_to_new));
    }
    // permute_classes takes new→old.
    let mut new_to_old = vec![0usize; k];
    for (old, &new) in old_to_new.iter().enumerate() {
        new_to_old[new] = old;
    }
    Ok((fit.permute_classes(&new_to_old)?, old_to_new))
}

/// Names and true values of the tracked parameters, in report order.
pub fn parameter_truths(cond: &SimCondition) -> (Vec<String>, Vec<f64>) {
    let mut names = Vec::new();
    let mut truths = Vec::new();
    for k in 0..cond.class_count {
        let c = k + 1;
        names.push(format!("class{c}.mu_eta0"));
        truths.push(cond.class_means[k][0]);
        names.push(format!("class{c}.mu_eta1"));
        truths.push(cond.class_means[k][1]);
        names.push(format!("class{c}.mu_eta2"));
        truths.push(cond.class_means[k][2]);
        names.push(format!("class{c}.knot"));
        truths.push(cond.knots[k]);
        names.push(format!("class{c}.psi00"));
        truths.push(cond.growth_cov[(0, 0)]);
        names.push(format!("class{c}.psi11"));
        truths.push(cond.growth_cov[(1, 1)]);
        names.push(format!("class{c}.psi22"));
        truths.push(cond.growth_cov[(2, 2)]);
        names.push(format!("class{c}.theta_eps"));
        truths.push(cond.residual_var);
    }
    for (j, coef) in cond.logistic.iter().enumerate() {
        let c = j + 2;
        names.push(format!("class{c}.beta0"));
        truths.push(coef.intercept);
        for (b, slope) in coef.slopes.iter().enumerate() {
            names.push(format!("class{c}.beta{}", b + 1));
            truths.push(*slope);
        }
    }
    (names, truths)
}

/// Extract the tracked parameter estimates and Wald CIs from a repaired fit.
fn extract_estimates(
    fit: &FitResult,
    level: f64,
) -> Result<(Vec<f64>, Vec<Option<(f64, f64)>>)> {
    let mut est = Vec::new();
    let mut cis = Vec::new();
    for k in 0..fit.class_count {
        let orig = &fit.original[k];
        let items = [
            orig.mean[0],
            orig.mean[1],
            orig.mean[2],
            orig.knot,
            orig.cov[cov_index(0, 0)],
            orig.cov[cov_index(1, 1)],
            orig.cov[cov_index(2, 2)],
            orig.residual_var,
        ];
        for e in items {
            est.push(e.value);
            cis.push(wald_ci(&e, level)?);
        }
    }
    if let Some(logistic) = &fit.logistic {
        for coef in logistic {
            est.push(coef.intercept.value);
            cis.push(wald_ci(&coef.intercept, level)?);
            for s in &coef.slopes {
                est.push(s.value);
                cis.push(wald_ci(s, level)?);
            }
        }
    }
    Ok((est, cis))
}

enum RepOutcome {
    Converged(Box<RepRecord>),
    Failed,
    Error(Error),
}

fn run_replication(cond: &SimCondition, r: u64, opts: &RunOptions) -> RepOutcome {
    let mut rng = seeding::rng(cond.seed, DATA_STREAM, r);
    let data = match generate_dataset(cond, &mut rng) {
        Ok(d) => d,
        Err(e) => return RepOutcome::Error(e),
    };
    let fit_opts = FitOptions { seed: seeding::derive(cond.seed, FIT_STREAM, r), ..opts.fit.clone() };
    let step1 = match estimate::fit_step1(&data, cond.class_count, &fit_opts) {
        Ok(f) => f,
        Err(e) => return RepOutcome::Error(e),
    };
    if !step1.converged() {
        return RepOutcome::Failed;
    }
    let with_step2 = cond.class_count >= 2 && cond.covariate_count() > 0;
    let fit = if with_step2 {
        match estimate::fit_step2(&data, &step1, &fit_opts) {
            Ok(f) if f.converged() => f,
            Ok(_) => return RepOutcome::Failed,
            Err(e) => return RepOutcome::Error(e),
        }
    } else {
        step1
    };
    let truth = data.labels().expect("generated data carries labels");
    let (repaired, map) = match detect_and_relabel(&fit, &truth) {
        Ok(x) => x,
        Err(e) => return RepOutcome::Error(e),
    };
    let acc = match accuracy(&repaired.modal, &truth) {
        Ok(a) => a,
        Err(e) => return RepOutcome::Error(e),
    };
    match extract_estimates(&repaired, opts.ci_level) {
        Ok((estimates, cis)) => RepOutcome::Converged(Box::new(RepRecord {
            replication: r,
            estimates,
            cis,
            accuracy: acc,
            loglik: repaired.loglik,
            step1_attempts: repaired.attempts,
            relabeled: map.iter().enumerate().any(|(j, &m)| j != m),
        })),
        Err(e) => RepOutcome::Error(e),
    }
}

/// Run replications until `s_target` convergent solutions (generate → fit →
/// classify → relabel), then aggregate the performance metrics.
///
/// Deterministic for a fixed condition seed under any parallelism degree.
pub fn run_condition(
    cond: &SimCondition,
    s_target: usize,
    opts: &RunOptions,
) -> Result<ConditionReport> {
    if s_target < 1 {
        return Err(Error::invalid("run_condition: target must be at least 1"));
    }
    let batch = s_target.max(8);
    let mut converged = 0usize;
    let mut attempted = 0usize;
    let mut records: Vec<RepRecord> = Vec::new();
    let mut next_r = 0u64;
    'outer: loop {
        // Batches may overshoot the S-th convergence; the in-order scan below
        // discards the overshoot, so the attempted set is batch-independent.
        let batch_results: Vec<(u64, RepOutcome)> = (next_r..next_r + batch as u64)
            .into_par_iter()
            .map(|r| (r, run_replication(cond, r, opts)))
            .collect();
        next_r += batch as u64;
        for (r, outcome) in batch_results {
            attempted += 1;
            match outcome {
                RepOutcome::Error(e) => {
                    return Err(Error::numerical(format!("replication {r}: {e}")))
                }
                RepOutcome::Failed => {}
                RepOutcome::Converged(rec) => {
                    converged += 1;
                    records.push(*rec);
                    if converged == s_target {
                        break 'outer;
                    }
                }
            }
            if attempted >= 50 && (converged as f64) < 0.10 * attempted as f64 {
                return Err(Error::numerical(format!(
                    "condition `{}`: convergence rate {}/{} fell below 10% — aborting",
                    cond.name, converged, attempted
                )));
            }
        }
    }

    let (names, truths) = parameter_truths(cond);
    let estimates: Vec<Vec<f64>> = records.iter().map(|r| r.estimates.clone()).collect();
    let cis: Vec<Vec<Option<(f64, f64)>>> = records.iter().map(|r| r.cis.clone()).collect();
    let metrics = performance_metrics(&names, &truths, &estimates, &cis)?;
    let mean_accuracy = records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64;
    Ok(ConditionReport {
        condition: cond.name.clone(),
        parameter_names: names,
        truths,
        metrics,
        mean_accuracy,
        converged,
        attempted,
        records: if opts.keep_records { records } else { Vec::new() },
    })
}
