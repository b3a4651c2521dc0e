//! End-to-end behaviour of the `dynpanel` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynpanel::dgp::{read_panel_csv, write_panel_csv};
use dynpanel::kernels::sample_orthogonal;
use dynpanel_cli::EstimateEntry;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn dynpanel(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynpanel"))
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn cfg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_entries(path: &Path) -> Vec<EstimateEntry> {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_panel_and_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = dynpanel(d.path(), &["simulate", &cfg("simulate_canonical.json")]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csv_a = std::fs::read_to_string(a.path().join("simulate_canonical.csv")).unwrap();
    let csv_b = std::fs::read_to_string(b.path().join("simulate_canonical.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let mut lines = csv_a.lines();
    assert_eq!(lines.next().unwrap(), "id,y1,y2,y3,y4,y5");
    assert_eq!(lines.count(), 500);
    assert!(csv_a.lines().skip(1).all(|l| l.split(',').count() == 6));
    assert!(a.path().join("simulate_canonical.meta.json").exists());
    assert!(a
        .path()
        .join("simulate_canonical.simulate.manifest.json")
        .exists());
}

#[test]
fn fixture_reproduces_archived_csv() {
    let d = tempfile::tempdir().unwrap();
    let o = dynpanel(d.path(), &["simulate", &cfg("multimodal_fixture.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["multimodal_fixture.csv", "multimodal_fixture.meta.json"] {
        assert_eq!(
            std::fs::read(d.path().join(f)).unwrap(),
            std::fs::read(golden(f)).unwrap(),
            "{f} differs from the archived copy"
        );
    }
}

#[test]
fn seed_flag_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    let o = dynpanel(
        d.path(),
        &["--seed", "99", "simulate", &cfg("simulate_canonical.json")],
    );
    assert!(o.status.success());
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(d.path().join("simulate_canonical.simulate.manifest.json"))
            .unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["master_seed"], 99);
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["versions"]["config_schema"], "1");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn unit_root_stationary_config_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let o = dynpanel(
        d.path(),
        &["simulate", &cfg("simulate_stationary_unit_root.json")],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("|rho_star| < 1"), "{}", stderr(&o));
}

#[test]
fn malformed_config_reports_position() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"rho_star\": 0.5,\n  \"n\": oops\n}\n").unwrap();
    let o = dynpanel(d.path(), &["simulate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    std::fs::write(
        &bad,
        r#"{"rho_star": 0.5, "sigma2_star": 1, "n": 10, "t": 3, "seed": 1, "colour": 1,
        "eta_law": {"kind": "scaled-to-omega", "omega2": 1}, "init_regime": {"kind": "zero"}}"#,
    )
    .unwrap();
    let o = dynpanel(d.path(), &["simulate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(dynpanel(d.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(dynpanel(d.path(), &["--help"]).status.code(), Some(0));
    let fixture = golden("multimodal_fixture.csv");
    let o = dynpanel(
        d.path(),
        &[
            "estimate",
            fixture.to_str().unwrap(),
            "--lancaster-rule",
            "nearest",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn estimate_all_estimators_gives_three_rows() {
    let d = tempfile::tempdir().unwrap();
    let o = dynpanel(d.path(), &["simulate", &cfg("simulate_canonical.json")]);
    assert!(o.status.success());
    let data = d.path().join("simulate_canonical.csv");
    let o = dynpanel(
        d.path(),
        &["--format", "csv", "estimate", data.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 4, "{table}");
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert!(rows[0].starts_with("mile,levels,"));
    assert!(rows[1].starts_with("lancaster,levels,"));
    assert!(rows[2].starts_with("conditional,") && rows[2].contains("skipped"));

    let entries = read_entries(
        &d.path()
            .join("simulate_canonical.min-abs-sml.estimates.json"),
    );
    let lanc = entries[1].result.as_ref().unwrap();
    assert!(!lanc.all_roots.is_empty());
    assert!((entries[0].result.as_ref().unwrap().theta_hat.rho - 0.5).abs() < 0.15);
}

#[test]
fn estimate_differences_nonzero_initial_data() {
    let d = tempfile::tempdir().unwrap();
    assert!(
        dynpanel(d.path(), &["simulate", &cfg("simulate_conditional.json")])
            .status
            .success()
    );
    let data = d.path().join("simulate_conditional.csv");
    let o = dynpanel(d.path(), &["estimate", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let entries = read_entries(
        &d.path()
            .join("simulate_conditional.min-abs-sml.estimates.json"),
    );
    assert_eq!(entries.len(), 3);
    assert!(entries[0].differenced && entries[1].differenced && !entries[2].differenced);
    let cond = entries[2].result.as_ref().unwrap();
    assert!(cond.theta_hat.delta.is_some());
    assert!(entries.iter().all(|e| e.result.as_ref().unwrap().converged));
}

#[test]
fn conditional_on_zero_initial_is_an_actionable_error() {
    let d = tempfile::tempdir().unwrap();
    let fixture = golden("multimodal_fixture.csv");
    let o = dynpanel(
        d.path(),
        &["estimate", fixture.to_str().unwrap(), "--conditional"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("drop --conditional"), "{}", stderr(&o));
}

#[test]
fn every_rule_on_the_fixture() {
    let d = tempfile::tempdir().unwrap();
    let fixture = golden("multimodal_fixture.csv");
    let search = cfg("search_multimodal.json");
    for rule in ["dhaene-jochmans", "kruiniger-hessian", "min-abs-sml"] {
        let o = dynpanel(
            d.path(),
            &[
                "estimate",
                fixture.to_str().unwrap(),
                "--lancaster",
                "--lancaster-rule",
                rule,
                "--search",
                &search,
            ],
        );
        assert!(o.status.success(), "{rule}: {}", stderr(&o));
        let entries = read_entries(
            &d.path()
                .join(format!("multimodal_fixture.{rule}.estimates.json")),
        );
        let r = entries[0].result.as_ref().unwrap();
        assert_eq!(r.selection_rule.name(), rule);
        assert_eq!(r.n_local_maxima, Some(2));
        // All three rules agree on this fixture: the root near rho* = -6.
        assert!(
            (r.theta_hat.rho + 6.0).abs() < 0.01,
            "{rule}: {}",
            r.theta_hat.rho
        );
    }
}

#[test]
fn rotated_dataset_gives_the_same_estimates() {
    let d = tempfile::tempdir().unwrap();
    assert!(
        dynpanel(d.path(), &["simulate", &cfg("simulate_conditional.json")])
            .status
            .success()
    );
    let original = d.path().join("simulate_conditional.csv");
    let data = read_panel_csv(&original).unwrap();
    let g = sample_orthogonal(data.n(), Some(&data.y1()), 5).unwrap();
    let rotated = d.path().join("rotated.csv");
    write_panel_csv(&data.rotated(&g).unwrap(), &rotated).unwrap();
    for p in [&original, &rotated] {
        assert!(dynpanel(
            d.path(),
            &["estimate", "--mile", "--conditional", p.to_str().unwrap()]
        )
        .status
        .success());
    }
    let a = read_entries(
        &d.path()
            .join("simulate_conditional.min-abs-sml.estimates.json"),
    );
    let b = read_entries(&d.path().join("rotated.min-abs-sml.estimates.json"));
    for (x, y) in a.iter().zip(&b) {
        let (x, y) = (x.result.as_ref().unwrap(), y.result.as_ref().unwrap());
        assert!((x.theta_hat.rho - y.theta_hat.rho).abs() < 1e-8);
        assert!((x.theta_hat.sigma2 - y.theta_hat.sigma2).abs() < 1e-8);
    }
}

#[test]
fn avar_points_report_equality_and_singularity() {
    let d = tempfile::tempdir().unwrap();
    let o = dynpanel(d.path(), &["avar", &cfg("avar_point.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("equal (delta + rho = 1)"), "{text}");
    assert!(text.contains("singular at T = 2"), "{text}");
    let csv = std::fs::read_to_string(d.path().join("avar_point.avar.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.lines().any(|l| l.contains(",equal,")));
}

#[test]
fn avar_sweep_one_row_per_point() {
    let d = tempfile::tempdir().unwrap();
    let o = dynpanel(
        d.path(),
        &["--format", "csv", "avar", &cfg("avar_sweep.json")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("avar_sweep.avar.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 4 * 3);
}

#[test]
fn avar_rejects_zero_omega() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("pt.json");
    std::fs::write(
        &p,
        r#"{"points": [{"t": 4, "rho": 0.5, "sigma2": 1.0, "omega2": 0.0}]}"#,
    )
    .unwrap();
    let o = dynpanel(d.path(), &["avar", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("omega2"), "{}", stderr(&o));
}

#[test]
fn mc_smoke_matches_golden() {
    let d = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let o = dynpanel(d.path(), &["mc", &cfg("mc_smoke.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 5);
    let got = std::fs::read_to_string(d.path().join("mc_smoke.summary.json")).unwrap();
    // Set DYNPANEL_BLESS=1 to regenerate after an intended change.
    if std::env::var_os("DYNPANEL_BLESS").is_some() {
        std::fs::write(golden("mc_smoke.summary.json"), &got).unwrap();
    }
    assert_eq!(
        got,
        std::fs::read_to_string(golden("mc_smoke.summary.json")).unwrap()
    );
    let reps = std::fs::read_to_string(d.path().join("mc_smoke.replications.csv")).unwrap();
    assert_eq!(
        reps.lines().next().unwrap(),
        "replication,estimator,parameter,estimate"
    );
}

/// Parse the CSV comparison table into (label, var_rho, ratio_rho) rows.
fn mc_rows(table: &str) -> Vec<(String, f64, f64)> {
    table
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (
                c[0].to_string(),
                c[6].parse().unwrap(),
                c[8].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn efficiency_study_mile_dominates_lancaster() {
    let d = tempfile::tempdir().unwrap();
    let o = dynpanel(
        d.path(),
        &["--format", "csv", "mc", &cfg("mc_efficiency.json")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = mc_rows(&stdout(&o));
    let mile = &rows[0];
    let lanc = &rows[1];
    assert_eq!(mile.0, "mile");
    assert!((0.85..=1.15).contains(&mile.2), "mile ratio {}", mile.2);
    assert!(
        lanc.1 > mile.1,
        "lancaster var {} vs mile {}",
        lanc.1,
        mile.1
    );
    let exact = &rows[2];
    assert!(exact.0.ends_with("[exact score variance]"));
    assert!(
        (0.85..=1.15).contains(&exact.2),
        "lancaster exact-sandwich ratio {}",
        exact.2
    );
}

#[test]
fn conditional_beats_differenced_in_study() {
    let d = tempfile::tempdir().unwrap();
    let o = dynpanel(
        d.path(),
        &[
            "--format",
            "csv",
            "mc",
            &cfg("mc_conditional_vs_differenced.json"),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = mc_rows(&stdout(&o));
    let (mile, cond) = (&rows[0], &rows[1]);
    assert_eq!(cond.0, "conditional");
    assert!(cond.1 < mile.1);
    assert!(
        cond.2 < mile.2,
        "ratios: conditional {} differenced {}",
        cond.2,
        mile.2
    );
}

#[test]
fn mc_reports_failure_histogram() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("doomed.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("mc_smoke.json")).unwrap())
            .unwrap();
    cfg["estimators"] = serde_json::json!([{ "kind": "mile" }]);
    cfg["replications"] = serde_json::json!(4);
    cfg["search"] = serde_json::json!({ "gradient_tol": 1e-300 });
    std::fs::write(&p, cfg.to_string()).unwrap();
    let o = dynpanel(d.path(), &["mc", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("4 of 4 replications failed"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn zero_local_shift_reproduces_plain_run() {
    let d = tempfile::tempdir().unwrap();
    let o = dynpanel(d.path(), &["mc", &cfg("mc_smoke.json"), "--h", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(d.path().join("mc_smoke.summary.json")).unwrap(),
        std::fs::read_to_string(golden("mc_smoke.summary.json")).unwrap()
    );
}
