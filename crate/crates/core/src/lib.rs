//! Two-step growth mixture modeling with bilinear-spline class trajectories.
//!
//! The within-class model is a latent growth curve whose mean trajectory is
//! two linear segments joined at an estimated, class-specific knot. Fitting
//! is full-information maximum likelihood over individually varying
//! measurement occasions, in two steps: the measurement mixture first, then
//! logistic regression of class membership on baseline covariates with the
//! measurement parameters frozen. The crate also ships the Monte Carlo
//! harness used to evaluate the estimator and an EFA pipeline for reducing
//! correlated covariate blocks to factor scores.
//!
//! See the `book/` guide for a narrative walkthrough of each piece.

pub mod data;
pub mod efa;
pub mod error;
pub mod estimate;
pub mod likelihood;
pub mod model;
pub mod optim;
pub mod seeding;
pub mod simulate;

pub mod cli;
pub mod config;
pub mod report;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    //! Runs every fenced Rust block in the guide as a doctest.
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(growth_model, "../../../book/src/growth-model.md");
    chapter!(mixture_likelihood, "../../../book/src/mixture-likelihood.md");
    chapter!(two_step, "../../../book/src/two-step.md");
    chapter!(simulation, "../../../book/src/simulation.md");
    chapter!(factor_analysis, "../../../book/src/factor-analysis.md");
    chapter!(cli, "../../../book/src/cli.md");
}
