//! End-to-end command tests: artifacts, exit behavior, determinism.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use splinemix::cli::{cmd_efa, cmd_fit, cmd_simulate};
use splinemix::config::{EfaConfig, FitConfig, SimulateConfig};
use splinemix::data::{read_wide_csv, write_wide_csv, Individual, LongitudinalDataset};
use splinemix::likelihood::step1_loglik;
use splinemix::report::read_fit_json;
use splinemix::simulate::{generate_dataset, DesignCell, SimCondition};

fn fixture_two_class(n: usize, seed: u64) -> LongitudinalDataset {
    let cell = DesignCell {
        name: "fixture".into(),
        n,
        scenario: 1,
        mahalanobis: 1.72,
        knots: vec![3.5, 5.5],
        knot_sd: 0.0,
        ratio: vec![1.0, 1.0],
        residual_var: 1.0,
        beta_slopes: vec![1.0, 1.0],
        seed,
    };
    let cond = SimCondition::from_design(&cell).unwrap();
    let mut rng = splinemix::seeding::rng(seed, 1, 0);
    generate_dataset(&cond, &mut rng).unwrap()
}

fn fit_config(toml: &str, dir: &Path) -> FitConfig {
    let path = dir.join("fit.toml");
    std::fs::write(&path, toml).unwrap();
    FitConfig::load(&path).unwrap()
}

#[test]
fn fit_command_selects_two_classes_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixture_two_class(220, 7);
    let data_path = tmp.path().join("data.csv");
    write_wide_csv(&data, &data_path).unwrap();

    let cfg = fit_config(
        "seed = 3\n[fit]\nk_range = [1, 3]\nattempt_cap = 4\nmax_evals = 8000\n",
        tmp.path(),
    );
    let out = tmp.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let ok = cmd_fit(&data_path, &cfg, &out).unwrap();
    assert!(ok, "fit command reported non-convergence");

    // BIC column minimized at K = 2.
    let artifact = read_fit_json(&out.join("fit.json")).unwrap();
    assert_eq!(artifact.best_k, Some(2));
    let k2 = artifact.selection.iter().find(|r| r.class_count == 2).unwrap();
    for row in &artifact.selection {
        if row.converged && row.class_count != 2 {
            assert!(k2.bic < row.bic, "K=2 BIC {} vs K={} BIC {}", k2.bic, row.class_count, row.bic);
        }
    }

    // fit.json reconstructs the model up to the recorded log-likelihood.
    let model = artifact.step1_model().unwrap();
    let ll = step1_loglik(&data, &model).unwrap();
    let recorded = artifact.step1.as_ref().unwrap().loglik;
    assert!((ll - recorded).abs() < 1e-8, "{ll} vs {recorded}");

    // Step-2 block exists with odds ratios for both covariates.
    let step2 = artifact.step2.unwrap();
    assert_eq!(step2.covariates, vec!["x1", "x2"]);
    assert_eq!(step2.odds_ratios.len(), 3); // intercept + x1 + x2

    // Posterior table shape and trajectories grid.
    let table = std::fs::read_to_string(out.join("model_table.txt")).unwrap();
    assert!(table.lines().next().unwrap().contains("BIC"), "{table}");
    let classes = std::fs::read_to_string(out.join("classes.csv")).unwrap();
    assert_eq!(classes.lines().count(), data.len() + 1);
    let traj = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 2 * 200 + 1);
}

#[test]
fn fit_command_rejects_single_individual() {
    let tmp = tempfile::tempdir().unwrap();
    let data_path = tmp.path().join("tiny.csv");
    std::fs::write(&data_path, "id,t1,t2,y1,y2\nonly,0,1,5,6\n").unwrap();
    let cfg = fit_config("[fit]\nk_range = [1, 1]\n", tmp.path());
    let err = cmd_fit(&data_path, &cfg, tmp.path()).unwrap_err();
    assert!(err.to_string().contains("free parameters"), "{err}");
}

#[test]
fn fit_command_malformed_file_names_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data_path = tmp.path().join("bad.csv");
    std::fs::write(&data_path, "id,t1,t2,y1,y2\na,0,1,5,6\nb,1,0,5,6\n").unwrap();
    let cfg = fit_config("[fit]\nk_range = [1, 1]\n", tmp.path());
    let err = cmd_fit(&data_path, &cfg, tmp.path()).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn simulate_command_is_deterministic_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("grid.toml");
    std::fs::write(
        &cfg_path,
        "seed = 11\ns_target = 2\nattempt_cap = 3\n\
         [[cell]]\nname = \"a\"\nn = 60\nscenario = 1\nd = 1.72\nknots = [3.5, 5.5]\n\
         ratio = [1, 1]\nresidual_var = 1.0\n\
         [[cell]]\nname = \"b\"\nn = 60\nscenario = 3\nd = 1.72\nknots = [3.5, 5.5]\n\
         ratio = [1, 1]\nresidual_var = 1.0\n",
    )
    .unwrap();
    let cfg = SimulateConfig::load(&cfg_path).unwrap();

    let mut outputs: Vec<(String, String, String)> = Vec::new();
    for (run, threads) in [(0usize, 1usize), (1, 1), (2, 3)] {
        let out = tmp.path().join(format!("out{run}"));
        std::fs::create_dir_all(&out).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let ok = pool.install(|| cmd_simulate(&cfg, &out)).unwrap();
        assert!(ok);
        outputs.push((
            std::fs::read_to_string(out.join("summary.csv")).unwrap(),
            std::fs::read_to_string(out.join("cells/a/metrics.json")).unwrap(),
            std::fs::read_to_string(out.join("cells/b/records.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1], "same seed, same thread count");
    assert_eq!(outputs[0], outputs[2], "same seed, different thread count");
}

fn planted_two_factor_csv(path: &Path, n: usize, seed: u64) {
    // Nine covariates: six "skill" items on factor 1 (one reversed, one
    // weak), two socioeconomic items on factor 2, cross-loadings zero.
    let loadings: [(f64, f64); 9] = [
        (0.0, 0.76),
        (0.0, 0.86),
        (0.90, 0.0),
        (0.77, 0.0),
        (0.76, 0.0),
        (-0.72, 0.0),
        (-0.24, 0.0),
        (0.83, 0.0),
        (0.89, 0.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut individuals = Vec::with_capacity(n);
    for i in 0..n {
        let f1: f64 = StandardNormal.sample(&mut rng);
        let f2: f64 = StandardNormal.sample(&mut rng);
        let covariates: Vec<f64> = loadings
            .iter()
            .map(|&(l1, l2)| {
                let u = (1.0 - l1 * l1 - l2 * l2).max(0.05);
                let e: f64 = StandardNormal.sample(&mut rng);
                l1 * f1 + l2 * f2 + u.sqrt() * e
            })
            .collect();
        let y: f64 = rng.random_range(-1.0..1.0);
        individuals
            .push(Individual::new(format!("p{i}"), vec![0.0], vec![y], covariates, None).unwrap());
    }
    let names = vec![
        "edu".into(),
        "income".into(),
        "learning".into(),
        "selfcontrol".into(),
        "interpersonal".into(),
        "external".into(),
        "internal".into(),
        "attention".into(),
        "inhibitory".into(),
    ];
    let ds = LongitudinalDataset::new(individuals, names).unwrap();
    write_wide_csv(&ds, path).unwrap();
}

#[test]
fn efa_command_recovers_two_block_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let data_path = tmp.path().join("cov.csv");
    planted_two_factor_csv(&data_path, 1500, 21);
    let cfg_path = tmp.path().join("efa.toml");
    std::fs::write(&cfg_path, "seed = 5\n[efa]\nfactors = \"auto\"\n").unwrap();
    let cfg = EfaConfig::load(&cfg_path).unwrap();
    let out = tmp.path().join("efaout");
    std::fs::create_dir_all(&out).unwrap();
    assert!(cmd_efa(&data_path, &cfg, &out).unwrap());

    let art: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("efa.json")).unwrap()).unwrap();
    assert_eq!(art["factors"], 2);
    assert_eq!(art["retention"]["evg1"], 2);
    assert_eq!(art["retention"]["parallel"], 2);
    // Factor 1 carries the skill block, factor 2 the socioeconomic block.
    let loadings = art["loadings"].as_array().unwrap();
    let get = |i: usize, j: usize| loadings[i].as_array().unwrap()[j].as_f64().unwrap();
    for i in [2usize, 3, 4, 7, 8] {
        assert!(get(i, 0).abs() > 0.6, "skill item {i}: {}", get(i, 0));
        assert!(get(i, 1).abs() < 0.2);
    }
    for i in [0usize, 1] {
        assert!(get(i, 1).abs() > 0.6, "ses item {i}: {}", get(i, 1));
        assert!(get(i, 0).abs() < 0.2);
    }
    // Scores exist for every row.
    let scores = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1501);
    let corr = std::fs::read_to_string(out.join("correlation.csv")).unwrap();
    assert!(corr.lines().next().unwrap().contains("income"));
}

#[test]
fn efa_command_identity_correlation_exits_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let data_path = tmp.path().join("noise.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let individuals = (0..300)
        .map(|i| {
            let covariates: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            Individual::new(format!("r{i}"), vec![0.0], vec![0.0], covariates, None).unwrap()
        })
        .collect();
    let ds = LongitudinalDataset::new(
        individuals,
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
    )
    .unwrap();
    write_wide_csv(&ds, &data_path).unwrap();

    let cfg_path = tmp.path().join("efa.toml");
    std::fs::write(&cfg_path, "[efa]\nfactors = \"auto\"\n").unwrap();
    let cfg = EfaConfig::load(&cfg_path).unwrap();
    let out = tmp.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    assert!(cmd_efa(&data_path, &cfg, &out).unwrap());
    let art: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("efa.json")).unwrap()).unwrap();
    assert_eq!(art["factors"], 0);
    assert!(art["eigenvalues"].as_array().unwrap().len() == 4);
}

#[test]
fn efa_command_names_constant_column() {
    let tmp = tempfile::tempdir().unwrap();
    let data_path = tmp.path().join("const.csv");
    std::fs::write(
        &data_path,
        "id,t1,y1,good,flat\na,0,1,0.3,7\nb,0,2,-0.1,7\nc,0,3,0.9,7\n",
    )
    .unwrap();
    let cfg_path = tmp.path().join("efa.toml");
    std::fs::write(&cfg_path, "[efa]\nfactors = 1\n").unwrap();
    let cfg = EfaConfig::load(&cfg_path).unwrap();
    let err = cmd_efa(&data_path, &cfg, tmp.path()).unwrap_err();
    assert!(err.to_string().contains("flat"), "{err}");
}

#[test]
fn binary_reports_errors_with_nonzero_exit() {
    let exe = env!("CARGO_BIN_EXE_splinemix");
    let out = std::process::Command::new(exe)
        .args(["fit", "/nonexistent.csv", "--config", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn wide_csv_read_matches_generated_dataset() {
    // The writer/reader pair preserves a generated dataset bit-for-bit.
    let tmp = tempfile::tempdir().unwrap();
    let data = fixture_two_class(25, 99);
    let path = tmp.path().join("roundtrip.csv");
    write_wide_csv(&data, &path).unwrap();
    let back = read_wide_csv(&path).unwrap();
    assert_eq!(back, data);
    // Covariate matrix helper sees the same numbers.
    let x = DMatrix::from_fn(back.len(), 2, |i, j| back.individuals[i].covariates[j]);
    assert_eq!(x[(3, 1)], data.individuals[3].covariates[1]);
}
