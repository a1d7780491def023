//! Artifact emission: schema-versioned JSON and CSV reports plus the fixed-
//! width text tables. Every number is written with shortest-round-trip
//! formatting, so artifacts are byte-stable for a given seed.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::efa::{EfaResult, FactorScores, Retention};
use crate::error::{Error, Result};
use crate::estimate::{
    cov_index, odds_ratios, wald_ci, ClassEstimates, ClassSelection, Estimate, FitResult,
    FitStatus, OddsRatioRow,
};
use crate::likelihood::{MixingSpec, MixtureModel};
use crate::model::{trajectory_value, ClassParams, Frame};
use crate::simulate::ConditionReport;

pub const ARTIFACT_SCHEMA: u32 = 1;

/// Estimate with its Wald interval, as written to JSON artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Est {
    pub value: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

fn est(e: &Estimate, level: f64) -> Result<Est> {
    Ok(Est { value: e.value, se: e.se, ci: wald_ci(e, level)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBlock {
    pub mean: [Est; 3],
    pub cov: [Est; 6],
    pub knot: Est,
    pub residual_var: Est,
}

fn class_block(c: &ClassEstimates, level: f64) -> Result<ClassBlock> {
    Ok(ClassBlock {
        mean: [est(&c.mean[0], level)?, est(&c.mean[1], level)?, est(&c.mean[2], level)?],
        cov: [
            est(&c.cov[0], level)?,
            est(&c.cov[1], level)?,
            est(&c.cov[2], level)?,
            est(&c.cov[3], level)?,
            est(&c.cov[4], level)?,
            est(&c.cov[5], level)?,
        ],
        knot: est(&c.knot, level)?,
        residual_var: est(&c.residual_var, level)?,
    })
}

impl ClassBlock {
    fn to_params(&self, frame: Frame) -> Result<ClassParams> {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBlock {
    #[serde(flatten)]
    pub status: FitStatus,
    pub attempts: u32,
    pub class_count: usize,
    pub free_params: usize,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub proportions: Vec<Est>,
    pub repar: Vec<ClassBlock>,
    pub original: Vec<ClassBlock>,
}

fn fit_block(fit: &FitResult, level: f64) -> Result<FitBlock> {
    Ok(FitBlock {
        status: fit.status.clone(),
        attempts: fit.attempts,
        class_count: fit.class_count,
        free_params: fit.free_params,
        loglik: fit.loglik,
        aic: fit.aic,
        bic: fit.bic,
        proportions: fit.proportions.iter().map(|p| est(p, level)).collect::<Result<_>>()?,
        repar: fit.repar.iter().map(|c| class_block(c, level)).collect::<Result<_>>()?,
        original: fit.original.iter().map(|c| class_block(c, level)).collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefBlock {
    /// 1-based class label (class 1 is the reference).
    pub class: usize,
    pub intercept: Est,
    pub slopes: Vec<Est>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step2Block {
    #[serde(flatten)]
    pub status: FitStatus,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub free_params: usize,
    pub covariates: Vec<String>,
    pub coefficients: Vec<CoefBlock>,
    pub odds_ratios: Vec<OddsRatioRow>,
}

fn step2_block(fit: &FitResult, level: f64) -> Result<Step2Block> {
    let logistic = fit
        .logistic
        .as_ref()
        .ok_or_else(|| Error::invalid("step2_block: fit has no logistic coefficients"))?;
    let coefficients = logistic
        .iter()
        .enumerate()
        .map(|(j, c)| {
            Ok(CoefBlock {
                class: j + 2,
                intercept: est(&c.intercept, level)?,
                slopes: c.slopes.iter().map(|s| est(s, level)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Step2Block {
        status: fit.status.clone(),
        loglik: fit.loglik,
        aic: fit.aic,
        bic: fit.bic,
        free_params: fit.free_params,
        covariates: fit.covariate_names.clone(),
        coefficients,
        odds_ratios: if fit.converged() { odds_ratios(fit, level)? } else { Vec::new() },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub class_count: usize,
    pub converged: bool,
    pub attempts: u32,
    pub neg2_loglik: f64,
    pub aic: f64,
    pub bic: f64,
    /// Per-class residual-variance estimates.
    pub residual_vars: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfaArtifact {
    pub schema_version: u32,
    pub n: usize,
    pub covariate_names: Vec<String>,
    pub factors: usize,
    pub converged: bool,
    pub heywood: bool,
    pub rotated: bool,
    pub loadings: Vec<Vec<f64>>,
    pub uniquenesses: Vec<f64>,
    pub rotation: Option<Vec<Vec<f64>>>,
    pub ss_loadings: Vec<f64>,
    pub proportion_var: Vec<f64>,
    pub cumulative_var: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub retention: Option<Retention>,
}

pub fn efa_artifact(
    efa: &EfaResult,
    names: &[String],
    retention: Option<Retention>,
) -> EfaArtifact {
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
    };
    EfaArtifact {
        schema_version: ARTIFACT_SCHEMA,
        n: efa.n,
        covariate_names: names.to_vec(),
        factors: efa.loadings.ncols(),
        converged: efa.converged,
        heywood: efa.heywood,
        rotated: efa.rotation.is_some(),
        loadings: rows(&efa.loadings),
        uniquenesses: efa.uniquenesses.clone(),
        rotation: efa.rotation.as_ref().map(rows),
        ss_loadings: efa.ss_loadings.clone(),
        proportion_var: efa.proportion_var.clone(),
        cumulative_var: efa.cumulative_var.clone(),
        eigenvalues: efa.eigenvalues.clone(),
        retention,
    }
}

/// The `fit.json` artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub schema_version: u32,
    pub n: usize,
    pub time_range: (f64, f64),
    pub ci_level: f64,
    pub selection: Vec<SelectionRow>,
    pub best_k: Option<usize>,
    pub step1: Option<FitBlock>,
    pub step2: Option<Step2Block>,
    pub efa: Option<EfaArtifact>,
}

pub fn fit_artifact(
    selection: &ClassSelection,
    step2: Option<&FitResult>,
    efa: Option<EfaArtifact>,
    level: f64,
) -> Result<FitArtifact> {
    let rows = selection
        .fits
        .iter()
        .map(|f| SelectionRow {
            class_count: f.class_count,
            converged: f.converged(),
            attempts: f.attempts,
            neg2_loglik: -2.0 * f.loglik,
            aic: f.aic,
            bic: f.bic,
            residual_vars: f.repar.iter().map(|c| c.residual_var.value).collect(),
        })
        .collect();
    let best = selection.best_fit();
    Ok(FitArtifact {
        schema_version: ARTIFACT_SCHEMA,
        n: best.map_or(0, |f| f.n),
        time_range: best.map_or((0.0, 0.0), |f| f.time_range),
        ci_level: level,
        selection: rows,
        best_k: selection.best_k,
        step1: best.map(|f| fit_block(f, level)).transpose()?,
        step2: step2.map(|f| step2_block(f, level)).transpose()?,
        efa,
    })
}

impl FitArtifact {
    /// Rebuild the step-1 mixture model recorded in the artifact.
    pub fn step1_model(&self) -> Result<MixtureModel> {
        let block = self
            .step1
            .as_ref()
            .ok_or_else(|| Error::invalid("artifact has no step-1 fit"))?;
        let classes = block
            .repar
            .iter()
            .map(|c| c.to_params(Frame::Reparameterized))
            .collect::<Result<Vec<_>>>()?;
        MixtureModel::new(
            classes,
            MixingSpec::free(block.proportions.iter().map(|p| p.value).collect()),
        )
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_fit_json(path: &Path) -> Result<FitArtifact> {
    let raw = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&raw)?)
}

/// `classes.csv`: id, posterior columns, modal class (1-based).
pub fn write_classes_csv(path: &Path, data: &LongitudinalDataset, fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = fit.class_count;
    let mut header = vec!["id".to_string()];
    header.extend((1..=k).map(|c| format!("post{c}")));
    header.push("modal".into());
    w.write_record(&header)?;
    for (i, ind) in data.individuals.iter().enumerate() {
        let mut row = vec![ind.id.clone()];
        for c in 0..k {
            row.push(fit.posterior.get(i, c).to_string());
        }
        row.push((fit.modal[i] + 1).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `trajectories.csv`: class mean curves at `points` times across the
/// observed range; values are direct `trajectory_value` evaluations.
pub fn write_trajectories_csv(path: &Path, fit: &FitResult, points: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "t", "value"])?;
    let (lo, hi) = fit.time_range;
    for (k, c) in fit.original.iter().enumerate() {
        let params = c.to_params(Frame::Original)?;
        for j in 0..points {
            let t = lo + (hi - lo) * j as f64 / (points - 1) as f64;
            let v = trajectory_value(&params, t)?;
            w.write_record([(k + 1).to_string(), t.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width model-fit table (one row per class count).
pub fn model_table(selection: &[SelectionRow]) -> String {
    let max_k = selection.iter().map(|r| r.class_count).max().unwrap_or(0);
    let mut out = String::new();
    out.push_str(&format!("{:<10}{:>12}{:>12}{:>12}", "Model", "-2LL", "AIC", "BIC"));
    for k in 1..=max_k {
        out.push_str(&format!("{:>12}", format!("Residual {k}")));
    }
    out.push('\n');
    for row in selection {
        if row.converged {
            out.push_str(&format!(
                "{:<10}{:>12.2}{:>12.2}{:>12.2}",
                format!("{}-Class", row.class_count),
                row.neg2_loglik,
                row.aic,
                row.bic
            ));
        } else {
            out.push_str(&format!(
                "{:<10}{:>12}{:>12}{:>12}",
                format!("{}-Class", row.class_count),
                "failed",
                "-",
                "-"
            ));
        }
        for k in 0..max_k {
            match row.residual_vars.get(k) {
                Some(v) if row.converged => out.push_str(&format!("{:>12.2}", v)),
                _ => out.push_str(&format!("{:>12}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

/// Factor-loading table with the explained-variance block.
pub fn loadings_table(names: &[String], efa: &EfaResult) -> String {
    let m = efa.loadings.ncols();
    let mut out = String::new();
    out.push_str(&format!("{:<28}", "Baseline Characteristic"));
    for j in 1..=m {
        out.push_str(&format!("{:>10}", format!("Factor {j}")));
    }
    out.push('\n');
    for (i, name) in names.iter().enumerate() {
        out.push_str(&format!("{:<28}", name));
        for j in 0..m {
            out.push_str(&format!("{:>10.2}", efa.loadings[(i, j)]));
        }
        out.push('\n');
    }
    out.push('\n');
    for (label, vals) in [
        ("SS Loadings", &efa.ss_loadings),
        ("Proportion Variance", &efa.proportion_var),
        ("Cumulative Variance", &efa.cumulative_var),
    ] {
        out.push_str(&format!("{:<28}", label));
        for v in vals {
            out.push_str(&format!("{:>10.2}", v));
        }
        out.push('\n');
    }
    out
}

/// Per-replication records for one condition.
pub fn write_records_csv(path: &Path, report: &ConditionReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["replication".to_string(), "accuracy".into(), "loglik".into(),
        "step1_attempts".into(), "relabeled".into()];
    header.extend(report.parameter_names.iter().cloned());
    w.write_record(&header)?;
    for rec in &report.records {
        let mut row = vec![
            rec.replication.to_string(),
            rec.accuracy.to_string(),
            rec.loglik.to_string(),
            rec.step1_attempts.to_string(),
            rec.relabeled.to_string(),
        ];
        row.extend(rec.estimates.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Combined summary over cells: median (min, max) of each metric per
/// parameter, plus accuracy and convergence rows per cell.
pub fn summary_csv(reports: &[ConditionReport]) -> String {
    fn median(v: &mut Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
    let mut out = String::from("parameter,metric,median,min,max,cells\n");
    // Collect the union of parameter names in first-seen order.
    let mut params: Vec<String> = Vec::new();
    for r in reports {
        for name in &r.parameter_names {
            if !params.contains(name) {
                params.push(name.clone());
            }
        }
    }
    let metrics: [(&str, fn(&crate::simulate::ParamMetrics) -> Option<f64>); 4] = [
        ("bias", |m| Some(m.bias)),
        ("empirical_se", |m| Some(m.empirical_se)),
        ("rmse", |m| Some(m.rmse)),
        ("coverage", |m| m.coverage),
    ];
    for p in &params {
        for (metric, get) in &metrics {
            let mut vals: Vec<f64> = reports
                .iter()
                .flat_map(|r| r.metrics.iter().filter(|m| &m.name == p).filter_map(get))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
            let med = median(&mut vals);
            out.push_str(&format!("{p},{metric},{med},{lo},{hi},{}\n", vals.len()));
        }
    }
    let mut acc: Vec<f64> = reports.iter().map(|r| r.mean_accuracy).collect();
    let (lo, hi) =
        acc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let med = median(&mut acc);
    out.push_str(&format!("accuracy,mean,{med},{lo},{hi},{}\n", reports.len()));
    for r in reports {
        out.push_str(&format!(
            "{},convergence,{},{},{},1\n",
            r.condition,
            r.converged as f64 / r.attempted as f64,
            r.converged,
            r.attempted
        ));
    }
    out
}

/// Correlation matrix with named rows/columns.
pub fn write_correlation_csv(
    path: &Path,
    names: &[String],
    r: &nalgebra::DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        for j in 0..names.len() {
            row.push(r[(i, j)].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `scores.csv`: id plus one column per factor.
pub fn write_scores_csv(path: &Path, ids: &[String], scores: &FactorScores) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let m = scores.0.ncols();
    let mut header = vec!["id".to_string()];
    header.extend((1..=m).map(|j| format!("factor{j}")));
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        for j in 0..m {
            row.push(scores.0[(i, j)].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_table_shape() {
        let rows = vec![
            SelectionRow {
                class_count: 1,
                converged: true,
                attempts: 1,
                neg2_loglik: 31659.87,
                aic: 31681.87,
                bic: 31728.23,
                residual_vars: vec![35.60],
            },
            SelectionRow {
                class_count: 2,
                converged: false,
                attempts: 10,
                neg2_loglik: f64::NAN,
                aic: f64::NAN,
                bic: f64::NAN,
                residual_vars: vec![],
            },
        ];
        let table = model_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].contains("-2LL") && lines[0].contains("Residual 2"));
        assert!(lines[1].contains("1-Class") && lines[1].contains("31728.23"));
        assert!(lines[2].contains("failed"));
    }

    #[test]
    fn summary_median_and_range() {
        use crate::simulate::ParamMetrics;
        let mk = |bias: f64, acc: f64| ConditionReport {
            condition: format!("c{bias}"),
            parameter_names: vec!["p".into()],
            truths: vec![1.0],
            metrics: vec![ParamMetrics {
                name: "p".into(),
                truth: 1.0,
                relative: true,
                bias,
                empirical_se: 0.1,
                rmse: 0.2,
                coverage: Some(0.95),
                ci_count: 10,
                mc_se_bias: 0.01,
            }],
            mean_accuracy: acc,
            converged: 10,
            attempted: 11,
            records: vec![],
        };
        let s = summary_csv(&[mk(0.01, 0.9), mk(0.03, 0.8), mk(0.02, 0.85)]);
        assert!(s.contains("p,bias,0.02,0.01,0.03,3"), "{s}");
        assert!(s.contains("accuracy,mean,0.85,0.8,0.9,3"), "{s}");
    }
}
