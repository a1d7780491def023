//! Command-line front end: `fit`, `simulate`, and `efa` subcommands.
//!
//! Every command reads a TOML config, honors `--seed`, `--threads`, and
//! `--out` overrides, and writes its artifacts under the output directory.
//! Exit code 0 means every requested computation converged.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use crate::config::{EfaConfig, FactorCount, FitConfig, SimulateConfig};
use crate::data::{read_wide_csv, LongitudinalDataset};
use crate::efa::{
    bartlett_scores, correlation_matrix, fit_efa_ml, retention_criteria, standardize_columns,
    EfaResult, Retention,
};
use crate::error::{Error, Result};
use crate::estimate::{fit_step2, select_classes, FitResult};
use crate::report::{self, EfaArtifact};
use crate::seeding;
use crate::simulate::{run_condition, ConditionReport, RunOptions, SimCondition};

const EFA_STREAM: u64 = 0xefa;

#[derive(Parser)]
#[command(
    name = "splinemix",
    about = "Two-step growth mixture models with bilinear-spline trajectories",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a class count, fit both steps, and write fit artifacts.
    Fit {
        /// Wide-format dataset (id, t1..tJ, y1..yJ, covariates, [label]).
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory (default: config `out` or the working directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo condition grid and write per-cell metrics.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlation, retention, ML factor analysis, varimax, Bartlett scores.
    Efa {
        /// Wide-format dataset; only the covariate block is used.
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit { data, config, seed, threads, out } => {
            with_pool(threads, || {
                let mut cfg = FitConfig::load(&config)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                let dir = out_dir(out, cfg.out.as_deref())?;
                cmd_fit(&data, &cfg, &dir)
            })
        }
        Command::Simulate { config, seed, threads, out } => with_pool(threads, || {
            let mut cfg = SimulateConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out_dir(out, cfg.out.as_deref())?;
            cmd_simulate(&cfg, &dir)
        }),
        Command::Efa { data, config, seed, threads, out } => with_pool(threads, || {
            let mut cfg = EfaConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out_dir(out, cfg.out.as_deref())?;
            cmd_efa(&data, &cfg, &dir)
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: not all requested computations converged (artifacts written)");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn with_pool<T>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f),
        _ => f(),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: Option<&str>) -> Result<PathBuf> {
    let dir = flag.unwrap_or_else(|| PathBuf::from(cfg.unwrap_or(".")));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn covariate_matrix(data: &LongitudinalDataset) -> DMatrix<f64> {
    let q = data.covariate_names.len();
    DMatrix::from_fn(data.len(), q, |i, j| data.individuals[i].covariates[j])
}

/// Standardize the covariate block, naming the offending column on failure.
fn standardized_covariates(data: &LongitudinalDataset) -> Result<DMatrix<f64>> {
    standardize_columns(&covariate_matrix(data)).map_err(|e| match e {
        Error::InvalidArgument(msg) => {
            let named = data
                .covariate_names
                .iter()
                .enumerate()
                .find(|(j, _)| msg.contains(&format!("column {j}")))
                .map(|(_, name)| format!("covariate `{name}` is constant"))
                .unwrap_or(msg);
            Error::InvalidArgument(named)
        }
        other => other,
    })
}

struct EfaOutcome {
    efa: EfaResult,
    retention: Retention,
    scores: DMatrix<f64>,
    factor_names: Vec<String>,
}

/// Shared EFA pipeline: correlation → retention → ML fit → varimax →
/// Bartlett scores. `factors` 0 means "auto": the parallel-analysis count
/// decides (EVG1 over-retains on noise, so it stays diagnostic-only).
fn efa_pipeline(data: &LongitudinalDataset, factors: usize, seed: u64) -> Result<EfaOutcome> {
    let x = standardized_covariates(data)?;
    let r = correlation_matrix(&x)?;
    let mut rng = seeding::rng(seed, EFA_STREAM, 0);
    let retention = retention_criteria(&r, data.len(), &mut rng)?;
    let m = if factors > 0 { factors } else { retention.parallel };
    let efa = fit_efa_ml(&r, data.len(), m)?;
    let efa = if m >= 2 { efa.varimax() } else { efa };
    let scores = if m > 0 { bartlett_scores(&x, &efa)?.0 } else { DMatrix::zeros(data.len(), 0) };
    let factor_names = (1..=m).map(|j| format!("factor{j}")).collect();
    Ok(EfaOutcome { efa, retention, scores, factor_names })
}

/// `fit` command: class-count selection, optional EFA covariate reduction,
/// step-2 logistic fit, artifact emission.
pub fn cmd_fit(data_path: &Path, cfg: &FitConfig, out: &Path) -> Result<bool> {
    let data = read_wide_csv(data_path)?;
    let options = cfg.fit_options();
    let level = cfg.fit.ci_level;
    let selection = select_classes(&data, &cfg.k_values(), &options)?;

    let mut step2: Option<FitResult> = None;
    let mut efa_art: Option<EfaArtifact> = None;
    if let Some(best) = selection.best_fit() {
        let has_covariates = !data.covariate_names.is_empty();
        if best.class_count >= 2 && has_covariates {
            let sub = match &cfg.fit.covariates {
                Some(names) => data.select_covariates(names)?,
                None => data.clone(),
            };
            let step2_data = match &cfg.fit.efa {
                None => sub,
                Some(block) => {
                    let m = match &block.factors {
                        FactorCount::Fixed(m) => *m,
                        FactorCount::Auto(_) => 0,
                    };
                    let outcome = efa_pipeline(&sub, m, cfg.seed)?;
                    if outcome.scores.ncols() == 0 {
                        return Err(Error::Config(
                            "efa retained no factors; drop the [fit.efa] block to use raw covariates"
                                .into(),
                        ));
                    }
                    efa_art = Some(report::efa_artifact(
                        &outcome.efa,
                        &sub.covariate_names,
                        Some(outcome.retention),
                    ));
                    let rows: Vec<Vec<f64>> = (0..outcome.scores.nrows())
                        .map(|i| outcome.scores.row(i).iter().cloned().collect())
                        .collect();
                    sub.with_covariates(outcome.factor_names.clone(), rows)?
                }
            };
            step2 = Some(fit_step2(&step2_data, best, &options)?);
        }
    }

    let artifact = report::fit_artifact(&selection, step2.as_ref(), efa_art, level)?;
    report::write_json(&out.join("fit.json"), &artifact)?;
    std::fs::write(&out.join("model_table.txt"), report::model_table(&artifact.selection))?;
    if let Some(best) = selection.best_fit() {
        report::write_classes_csv(&out.join("classes.csv"), &data, best)?;
        report::write_trajectories_csv(&out.join("trajectories.csv"), best, 200)?;
    }
    let ok = selection.best_k.is_some() && step2.as_ref().map_or(true, |f| f.converged());
    Ok(ok)
}

/// `simulate` command: expand the grid, run every cell, write per-cell
/// artifacts and the combined summary.
pub fn cmd_simulate(cfg: &SimulateConfig, out: &Path) -> Result<bool> {
    let cells = cfg.expand_cells()?;
    let opts = RunOptions {
        fit: cfg.fit_options(),
        ci_level: cfg.ci_level,
        keep_records: cfg.keep_records,
    };
    let mut reports: Vec<ConditionReport> = Vec::new();
    for cell in &cells {
        let cond = SimCondition::from_design(cell)?;
        let report = run_condition(&cond, cfg.s_target, &opts)
            .map_err(|e| Error::numerical(format!("cell `{}`: {e}", cell.name)))?;
        let dir = out.join("cells").join(&cell.name);
        std::fs::create_dir_all(&dir)?;
        report::write_json(&dir.join("metrics.json"), &report)?;
        report::write_records_csv(&dir.join("records.csv"), &report)?;
        reports.push(report);
    }
    std::fs::write(&out.join("summary.csv"), report::summary_csv(&reports))?;
    Ok(true)
}

/// `efa` command: correlation matrix, retention diagnostics, loadings table,
/// factor scores.
pub fn cmd_efa(data_path: &Path, cfg: &EfaConfig, out: &Path) -> Result<bool> {
    let data = read_wide_csv(data_path)?;
    let sub = match &cfg.efa.covariates {
        Some(names) => data.select_covariates(names)?,
        None => data.clone(),
    };
    if sub.covariate_names.len() < 2 {
        return Err(Error::invalid("efa needs at least 2 covariate columns"));
    }
    let x = standardized_covariates(&sub)?;
    let r = correlation_matrix(&x)?;
    report::write_correlation_csv(&out.join("correlation.csv"), &sub.covariate_names, &r)?;

    let m = match &cfg.efa.factors {
        FactorCount::Fixed(m) => *m,
        FactorCount::Auto(_) => 0,
    };
    let outcome = efa_pipeline(&sub, m, cfg.seed)?;
    report::write_json(
        &out.join("efa.json"),
        &report::efa_artifact(&outcome.efa, &sub.covariate_names, Some(outcome.retention)),
    )?;
    std::fs::write(
        &out.join("loadings.txt"),
        report::loadings_table(&sub.covariate_names, &outcome.efa),
    )?;
    let ids: Vec<String> = sub.individuals.iter().map(|i| i.id.clone()).collect();
    report::write_scores_csv(
        &out.join("scores.csv"),
        &ids,
        &crate::efa::FactorScores(outcome.scores),
    )?;
    Ok(true)
}
