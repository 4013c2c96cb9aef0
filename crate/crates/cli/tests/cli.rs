use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecrm::TwoPartPolicy;
use ecrm_cli::run::{input_hash, Manifest};
use ecrm_cli::ExperimentConfig;
use serde_json::{json, Value};

fn ecrm(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ecrm"));
    cmd.args(args).env_remove("ECRM_OUTPUT_DIR").env_remove("ECRM_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn cliff_config(out: &Path, lambdas: &[f64], runs: usize, episodes: usize) -> Value {
    json!({
        "env": { "kind": "cliffwalk", "slip_prob": 0.1 },
        "risk": { "alpha": 0.05, "eta_grid": [1.0, 5.0] },
        "gamma": 0.98,
        "algorithm": "reinforce",
        "params": { "episodes": episodes, "eval_every": 10 },
        "sweep": { "lambda": lambdas },
        "runs": runs,
        "base_seed": 3,
        "output_dir": out,
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

fn run_ok(config: &Path, envs: &[(&str, &str)]) {
    let out = ecrm(&["run", config.to_str().unwrap()], envs);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn two_runs_two_lambdas_give_four_run_files_and_two_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("art");
    let cfg = write_config(tmp.path(), "c.json", &cliff_config(&out, &[0.0, 1.0], 2, 50));
    run_ok(&cfg, &[]);
    assert_eq!(files_in(&out.join("runs")).len(), 4);
    assert_eq!(files_in(&out.join("policies")).len(), 4);
    assert_eq!(
        files_in(&out.join("aggregate")),
        vec!["lam0.0_kap0.0.csv", "lam1.0_kap0.0.csv"]
    );
    let manifest = Manifest::read(&out).unwrap();
    assert!(manifest.complete);
    assert_eq!(manifest.settings.len(), 2);
    assert!(manifest.settings.iter().flat_map(|s| &s.runs).all(|r| r.status == "ok"));
    let first = fs::read_to_string(out.join("runs/lam0.0_kap0.0_run000.csv")).unwrap();
    assert_eq!(first.lines().next(), Some("run,episode,test_cost"));
    assert_eq!(first.lines().count(), 1 + 5);
}

#[test]
fn reruns_are_byte_identical_for_any_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let cfg = write_config(tmp.path(), "c.json", &cliff_config(&a, &[0.0, 0.5], 3, 40));
    run_ok(&cfg, &[("ECRM_THREADS", "1")]);
    let manifest_a = fs::read(a.join("manifest.json")).unwrap();
    let b = tmp.path().join("b");
    run_ok(&cfg, &[("ECRM_THREADS", "3"), ("ECRM_OUTPUT_DIR", b.to_str().unwrap())]);
    for sub in ["runs", "policies", "aggregate"] {
        let names = files_in(&a.join(sub));
        assert_eq!(names, files_in(&b.join(sub)));
        for n in names {
            assert_eq!(
                fs::read(a.join(sub).join(&n)).unwrap(),
                fs::read(b.join(sub).join(&n)).unwrap(),
                "{sub}/{n}"
            );
        }
    }
    // same config and output directory: the manifest repeats too
    run_ok(&cfg, &[("ECRM_THREADS", "2")]);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), manifest_a);
}

#[test]
fn output_dir_override_is_echoed_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &cliff_config(&tmp.path().join("unused"), &[1.0], 1, 10),
    );
    let target = tmp.path().join("elsewhere");
    run_ok(&cfg, &[("ECRM_OUTPUT_DIR", target.to_str().unwrap())]);
    assert!(!tmp.path().join("unused").exists());
    assert_eq!(Manifest::read(&target).unwrap().config.output_dir, target);
}

type Edit = fn(&mut Value);

fn parse(cfg: &Value) -> ExperimentConfig {
    serde_json::from_value(cfg.clone()).unwrap()
}

#[test]
fn input_hash_tracks_every_config_field() {
    let base = cliff_config(Path::new("out"), &[0.0, 1.0], 2, 100);
    let h0 = input_hash(&parse(&base), None).unwrap();
    // key order and formatting of the document do not matter
    let reordered: Value = serde_json::from_str(
        r#"{"runs":2,"base_seed":3,"output_dir":"out","sweep":{"lambda":[0.0,1.0]},"params":{"eval_every":10,"episodes":100},
        "algorithm":"reinforce","gamma":0.98,"risk":{"eta_grid":[1.0,5.0],"alpha":0.05},"env":{"slip_prob":0.1,"kind":"cliffwalk"}}"#,
    )
    .unwrap();
    assert_eq!(input_hash(&parse(&reordered), None).unwrap(), h0);

    let edits: [(&str, Edit); 15] = [
        ("slip", |c| c["env"]["slip_prob"] = json!(0.2)),
        ("width", |c| c["env"]["width"] = json!(5)),
        ("alpha", |c| c["risk"]["alpha"] = json!(0.1)),
        ("grid", |c| c["risk"]["eta_grid"] = json!([1.0, 4.0])),
        ("gamma", |c| c["gamma"] = json!(0.9)),
        ("algorithm", |c| c["algorithm"] = json!("gd-softmax")),
        ("step", |c| c["params"]["step"] = json!(0.001)),
        ("episodes", |c| c["params"]["episodes"] = json!(101)),
        ("max_steps", |c| c["params"]["max_steps"] = json!(50)),
        ("tie", |c| c["params"]["share_first_step"] = json!(false)),
        ("lambda", |c| c["sweep"]["lambda"] = json!([0.0, 0.5])),
        ("kappa", |c| c["sweep"]["kappa"] = json!([0.0, 0.1])),
        ("runs", |c| c["runs"] = json!(3)),
        ("seed", |c| c["base_seed"] = json!(4)),
        ("output", |c| c["output_dir"] = json!("other")),
    ];
    let mut seen = vec![h0];
    for (name, edit) in edits {
        let mut c = base.clone();
        edit(&mut c);
        let h = input_hash(&parse(&c), None).unwrap();
        assert!(!seen.contains(&h), "editing {name} left the hash unchanged");
        seen.push(h);
    }
    // an MDP file's contents enter the hash as well
    let cfg = parse(&base);
    assert_ne!(
        input_hash(&cfg, Some(b"a")).unwrap(),
        input_hash(&cfg, Some(b"b")).unwrap()
    );
}

/// Independent recomputation: sample standard deviation, rows aligned by index.
fn recompute(columns: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let len = columns.iter().map(Vec::len).max().unwrap();
    (0..len)
        .map(|i| {
            let v: Vec<f64> = columns.iter().filter_map(|c| c.get(i).copied()).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        })
        .collect()
}

fn read_column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

fn check_aggregates(out: &Path, value_col: &str, mean_col: &str, std_col: &str) {
    let manifest = Manifest::read(out).unwrap();
    for s in &manifest.settings {
        let columns: Vec<Vec<f64>> = s
            .runs
            .iter()
            .map(|r| read_column(&out.join(&r.csv), value_col))
            .collect();
        let expected = recompute(&columns);
        let agg = out.join(&s.aggregate);
        let (mean, std) = (read_column(&agg, mean_col), read_column(&agg, std_col));
        assert_eq!(mean.len(), expected.len());
        for (i, (m, sd)) in expected.iter().enumerate() {
            assert!((mean[i] - m).abs() <= 1e-12, "row {i}: mean {} vs {m}", mean[i]);
            assert!((std[i] - sd).abs() <= 1e-12, "row {i}: std {} vs {sd}", std[i]);
        }
    }
}

#[test]
fn aggregates_match_recomputation_from_run_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rl");
    let cfg = write_config(tmp.path(), "c.json", &cliff_config(&out, &[0.0, 1.0], 4, 200));
    run_ok(&cfg, &[]);
    check_aggregates(&out, "test_cost", "test_cost_mean", "test_cost_std");

    let out = tmp.path().join("exact");
    let cfg = json!({
        "env": { "kind": "random", "n_states": 3, "n_actions": 2, "seed": 5 },
        "risk": { "alpha": 0.3, "eta_grid": [0.0, 0.5, 1.0] },
        "gamma": 0.8,
        "algorithm": "pgd-direct",
        "params": { "step": 0.5, "budget": 60, "init": "random" },
        "sweep": { "lambda": [0.5] },
        "runs": 3,
        "output_dir": out,
    });
    run_ok(&write_config(tmp.path(), "e.json", &cfg), &[]);
    check_aggregates(&out, "J_rho", "J_rho_mean", "J_rho_std");
    let header = fs::read_to_string(out.join("runs/lam0.5_kap0.0_run000.csv")).unwrap();
    assert_eq!(header.lines().next(), Some(ecrm::optim::CSV_HEADER));
}

fn svg_series(svg: &str) -> Vec<String> {
    svg.split("data-label=\"")
        .skip(1)
        .map(|s| s[..s.find('"').unwrap()].to_string())
        .collect()
}

fn band_points(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.split(r#"class="band" d=""#)
        .skip(1)
        .map(|s| {
            s[..s.find('"').unwrap()]
                .trim_end_matches('Z')
                .split_whitespace()
                .map(|p| {
                    let (x, y) = p.trim_start_matches(['M', 'L']).split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

#[test]
fn five_lambda_sweep_renders_five_series_with_legend() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &cliff_config(&out, &[0.0, 0.25, 0.5, 0.75, 1.0], 2, 30),
    );
    run_ok(&cfg, &[]);
    let res = ecrm(&["plot", out.to_str().unwrap(), "--states", "8,12"], &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let svg = fs::read_to_string(out.join("plots/curves_kap0.0.svg")).unwrap();
    assert_eq!(
        svg_series(&svg),
        vec!["λ = 0.0", "λ = 0.25", "λ = 0.5", "λ = 0.75", "λ = 1.0"]
    );
    let legend = &svg[svg.find(r#"<g class="legend">"#).unwrap()..];
    let mut colors: Vec<&str> = legend.split("fill=\"").skip(1).map(|s| &s[..7]).collect();
    assert_eq!(colors.len(), 5);
    colors.dedup();
    assert_eq!(colors.len(), 5, "series colors must differ");
    assert_eq!(band_points(&svg).len(), 5);
    assert_eq!(
        files_in(&out.join("plots"))
            .iter()
            .filter(|n| n.starts_with("heatmap"))
            .count(),
        5
    );
}

#[test]
fn single_run_band_has_zero_width() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("one");
    let cfg = write_config(tmp.path(), "c.json", &cliff_config(&out, &[1.0], 1, 50));
    run_ok(&cfg, &[]);
    assert!(read_column(&out.join("aggregate/lam1.0_kap0.0.csv"), "test_cost_std")
        .iter()
        .all(|&s| s == 0.0));
    ecrm_cli::plot::plot(&out, Some(&[12]), false, 1).unwrap();
    let svg = fs::read_to_string(out.join("plots/curves_kap0.0.svg")).unwrap();
    let band = &band_points(&svg)[0];
    let n = band.len() / 2;
    let upper = &band[..n];
    let lower: Vec<_> = band[n..].iter().rev().copied().collect();
    assert_eq!(upper, &lower[..]);
}

#[test]
fn uniform_policy_heatmap_has_identical_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("u");
    let cfg = write_config(tmp.path(), "c.json", &cliff_config(&out, &[1.0], 1, 20));
    run_ok(&cfg, &[]);
    let uniform = TwoPartPolicy::uniform_softmax(16, 4, 2);
    fs::write(
        out.join("policies/lam1.0_kap0.0_run000.json"),
        uniform.to_json().unwrap(),
    )
    .unwrap();
    let written = ecrm_cli::plot::plot(&out, Some(&[4, 8, 12]), false, 1).unwrap();
    let heat = written
        .iter()
        .find(|p| p.to_string_lossy().contains("heatmap"))
        .unwrap();
    let svg = fs::read_to_string(heat).unwrap();
    let fills: Vec<&str> = svg
        .split(r#"class="cell""#)
        .skip(1)
        .map(|s| {
            let f = &s[s.find("fill=\"").unwrap() + 6..];
            &f[..f.find('"').unwrap()]
        })
        .collect();
    // 3 states × 2 incoming η × (2 × 4) cells
    assert_eq!(fills.len(), 48);
    assert!(fills.iter().all(|f| *f == fills[0]), "{fills:?}");
    assert_eq!(fills[0], "rgb(32,32,32)");
}

#[test]
fn missing_aggregate_column_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    let cfg = write_config(tmp.path(), "c.json", &cliff_config(&out, &[1.0], 1, 20));
    run_ok(&cfg, &[]);
    fs::write(
        out.join("aggregate/lam1.0_kap0.0.csv"),
        "episode,test_cost_mean,n_runs\n10,7.0,1\n",
    )
    .unwrap();
    let res = ecrm(&["plot", out.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(
        err.contains("missing column `*_std`") && err.contains("lam1.0_kap0.0.csv"),
        "{err}"
    );
}

#[test]
fn failed_run_marks_manifest_incomplete() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("f");
    let cfg = write_config(tmp.path(), "c.json", &cliff_config(&out, &[1.0], 2, 20));
    // a directory where run 1's CSV should go makes that write fail
    fs::create_dir_all(out.join("runs/lam1.0_kap0.0_run001.csv")).unwrap();
    let res = ecrm(&["run", cfg.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(1));
    let manifest = Manifest::read(&out).unwrap();
    assert!(!manifest.complete);
    let runs = &manifest.settings[0].runs;
    assert_eq!(runs[0].status, "ok");
    assert!(
        runs[1].status.starts_with("failed:") && runs[1].status.contains("run001.csv"),
        "{}",
        runs[1].status
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bad = cliff_config(&tmp.path().join("x"), &[1.0], 1, 10);
    bad["runs"] = json!(0);
    let res = ecrm(
        &["run", write_config(tmp.path(), "runs0.json", &bad).to_str().unwrap()],
        &[],
    );
    assert_eq!(res.status.code(), Some(2));
    let mut bad = cliff_config(&tmp.path().join("x"), &[], 1, 10);
    bad["sweep"]["lambda"] = json!([]);
    assert_eq!(
        ecrm(
            &["run", write_config(tmp.path(), "empty.json", &bad).to_str().unwrap()],
            &[]
        )
        .status
        .code(),
        Some(2)
    );
    let mut bad = cliff_config(&tmp.path().join("x"), &[1.5], 1, 10);
    bad["params"]["bogus"] = json!(1);
    assert_eq!(
        ecrm(
            &["run", write_config(tmp.path(), "field.json", &bad).to_str().unwrap()],
            &[]
        )
        .status
        .code(),
        Some(2)
    );
    let good = write_config(
        tmp.path(),
        "good.json",
        &cliff_config(&tmp.path().join("x"), &[1.0], 1, 10),
    );
    assert_eq!(
        ecrm(&["run", good.to_str().unwrap()], &[("ECRM_THREADS", "zero")])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(ecrm(&["run", "does-not-exist.json"], &[]).status.code(), Some(2));
    assert_eq!(ecrm(&["frobnicate"], &[]).status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn verify_fast_passes_and_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("report.json");
    let res = ecrm(
        &["verify", "--report", report.to_str().unwrap()],
        &[("ECRM_THREADS", "2")],
    );
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let rep: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["level"], "fast");
    assert_eq!(rep["passed"], true);
    let checks = rep["checks"].as_array().unwrap();
    assert_eq!(checks.len(), ecrm::verify::registry().len());
    assert!(checks
        .iter()
        .all(|c| c["slack"].as_f64().unwrap() >= 0.0 && c["residual"].is_number()));
    assert_eq!(
        String::from_utf8_lossy(&res.stderr)
            .lines()
            .filter(|l| l.starts_with("PASS"))
            .count(),
        checks.len()
    );
}

#[test]
fn solve_exact_prints_risk_dependent_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &cliff_config(&tmp.path().join("x"), &[0.0, 1.0], 1, 10),
    );
    let res = ecrm(&["solve-exact", cfg.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(0));
    let out: Value = serde_json::from_slice(&res.stdout).unwrap();
    let path = |i: usize| {
        out[i]["nominal_path"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(path(0), ["[3,0]", "[2,0]", "[2,1]", "[2,2]", "[2,3]", "[3,3]"]);
    assert_eq!(
        path(1),
        ["[3,0]", "[2,0]", "[1,0]", "[1,1]", "[1,2]", "[1,3]", "[2,3]", "[3,3]"]
    );
    assert_eq!(out[1]["path_cost"], 7.0);
    assert!(out[0]["j_star_rho"].as_f64().unwrap() < out[1]["j_star_rho"].as_f64().unwrap());
}

#[test]
fn constants_reports_the_unit_cost_smoothness() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "env": { "kind": "random", "n_states": 3, "n_actions": 2, "seed": 1 },
        "risk": { "alpha": 0.5, "eta_grid": [0.0, 1.0] },
        "gamma": 0.5,
        "algorithm": "gd-softmax",
        "sweep": { "lambda": [0.5], "kappa": [0.0] },
    });
    let res = ecrm(
        &["constants", write_config(tmp.path(), "c.json", &cfg).to_str().unwrap()],
        &[],
    );
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let out: Value = serde_json::from_slice(&res.stdout).unwrap();
    let c = &out[0]["constants"];
    assert_eq!(c["sigma"], 56.0);
    assert_eq!(c["c_bar_inf"], 1.75);
}
