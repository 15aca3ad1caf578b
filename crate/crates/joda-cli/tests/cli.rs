use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_joda"))
        .args(args)
        .output()
        .expect("failed to spawn binary")
}

fn run_ok(args: &[&str]) -> Output {
    let output = run(args);
    assert!(
        output.status.success(),
        "command {:?} failed\nstderr:\n{}",
        args,
        String::from_utf8_lossy(&output.stderr),
    );
    output
}

/// Parse the single structured line every failure prints to stderr.
fn error_line(output: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line)
        .unwrap_or_else(|e| panic!("stderr is not one JSON line ({e}): {stderr}"))
}

fn path_arg(path: &Path) -> &str {
    path.to_str().expect("fixture paths are UTF-8")
}

#[test]
fn validate_accepts_the_fixture_proposal() {
    let output = run_ok(&["validate", path_arg(&fixture("proposal.json"))]);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("3 effect proposal(s)"), "stdout: {stdout}");
}

#[test]
fn validate_names_the_json_path_on_bad_intervals() {
    let output = run(&["validate", path_arg(&fixture("proposal_bad_interval.json"))]);
    assert_eq!(output.status.code(), Some(1));
    let err = error_line(&output);
    assert_eq!(err["kind"], "validation");
    let message = err["error"].as_str().unwrap();
    assert!(
        message.contains("effect_proposals[0].start_ratio"),
        "error does not name the path: {message}"
    );
}

#[test]
fn compile_is_deterministic_and_matches_the_golden() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.json");
    let second = dir.path().join("b.json");
    for out in [&first, &second] {
        run_ok(&[
            "compile",
            "--context",
            path_arg(&fixture("context.json")),
            "--proposal",
            path_arg(&fixture("proposal.json")),
            "-o",
            out.to_str().unwrap(),
        ]);
    }
    let a = fs::read(&first).unwrap();
    let b = fs::read(&second).unwrap();
    assert_eq!(a, b, "repeated compilations differ");
    let golden = fs::read(fixture("composed.json")).unwrap();
    assert_eq!(a, golden, "compilation drifted from the committed golden");
}

#[test]
fn plot_matches_the_golden_svg_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("profile.svg");
    let csv = dir.path().join("profile.csv");
    run_ok(&[
        "plot",
        path_arg(&fixture("composed.json")),
        "-o",
        svg.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--annotate-equilibria",
    ]);
    let rendered = fs::read(&svg).unwrap();
    let golden = fs::read(fixture("profile.svg")).unwrap();
    assert_eq!(rendered, golden, "SVG drifted from the committed golden");
    let header = fs::read_to_string(&csv).unwrap();
    assert!(header.starts_with("s,f_cons,f_fric_max,c_damp,"));
}

#[test]
fn analyze_matches_the_golden_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("analysis.json");
    run_ok(&[
        "analyze",
        path_arg(&fixture("composed.json")),
        "-o",
        out.to_str().unwrap(),
    ]);
    let produced = fs::read(&out).unwrap();
    let golden = fs::read(fixture("analysis.json")).unwrap();
    assert_eq!(
        produced, golden,
        "analysis drifted from the committed golden"
    );
}

#[test]
fn simulate_matches_the_golden_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trajectory.csv");
    run_ok(&[
        "simulate",
        path_arg(&fixture("composed.json")),
        "--scenario",
        path_arg(&fixture("scenario.json")),
        "-o",
        out.to_str().unwrap(),
    ]);
    let produced = fs::read(&out).unwrap();
    let golden = fs::read(fixture("targets.csv")).unwrap();
    assert_eq!(
        produced, golden,
        "trajectory drifted from the committed golden"
    );
}

#[test]
fn diverging_scenario_exits_with_the_divergence_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trajectory.csv");
    let output = run(&[
        "simulate",
        path_arg(&fixture("composed.json")),
        "--scenario",
        path_arg(&fixture("scenario_diverging.json")),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(4));
    assert_eq!(error_line(&output)["kind"], "divergence");
}

#[test]
fn missing_input_exits_with_the_io_code() {
    let output = run(&["validate", "does-not-exist.json"]);
    assert_eq!(output.status.code(), Some(2));
    let err = error_line(&output);
    assert_eq!(err["kind"], "io");
    assert!(err["error"]
        .as_str()
        .unwrap()
        .contains("does-not-exist.json"));
}

#[test]
fn interact_replays_a_recorded_trajectory_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("replay.csv");
    run_ok(&[
        "interact",
        path_arg(&fixture("composed.json")),
        "--targets",
        path_arg(&fixture("targets.csv")),
        "-o",
        out.to_str().unwrap(),
    ]);
    let produced = fs::read(&out).unwrap();
    let recorded = fs::read(fixture("targets.csv")).unwrap();
    assert_eq!(
        produced, recorded,
        "replaying a recorded rollout through the same field must reproduce it"
    );
}

#[test]
fn baselines_produce_analyzable_fields() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["constant", "spring"] {
        let field = dir.path().join(format!("{kind}.json"));
        run_ok(&[
            "baseline",
            "--kind",
            kind,
            "--context",
            path_arg(&fixture("context.json")),
            "-o",
            field.to_str().unwrap(),
        ]);
        let summary = dir.path().join(format!("{kind}_analysis.json"));
        run_ok(&[
            "analyze",
            field.to_str().unwrap(),
            "-o",
            summary.to_str().unwrap(),
        ]);
        let value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
        assert!(value["open_force"]["max"]["value"].is_number());
    }
}

#[test]
fn optimize_writes_a_report_and_a_refined_field() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let refined = dir.path().join("refined.json");
    run_ok(&[
        "optimize",
        path_arg(&fixture("composed.json")),
        "--targets",
        path_arg(&fixture("targets.csv")),
        "-o",
        report.to_str().unwrap(),
        "--iters",
        "2",
        "--params",
        "cons_scale,fric_scale",
        "--write-field",
        refined.to_str().unwrap(),
    ]);
    let value: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(value["n_iterations"], 2);
    assert_eq!(value["n_parameters"], 2);
    // The refined field must itself be loadable.
    let analysis = dir.path().join("refined_analysis.json");
    run_ok(&[
        "analyze",
        refined.to_str().unwrap(),
        "-o",
        analysis.to_str().unwrap(),
    ]);
}

#[test]
fn propose_requires_an_image_decision() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&[
        "propose",
        "--context",
        path_arg(&fixture("context.json")),
        "--backend",
        "openai",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    let message = error_line(&output)["error"].as_str().unwrap().to_string();
    assert!(message.contains("--no-images"), "message: {message}");
}

#[test]
fn propose_without_a_key_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_joda"))
        .args([
            "propose",
            "--context",
            path_arg(&fixture("context.json")),
            "--no-images",
            "--backend",
            "gemini",
            "-o",
            dir.path().to_str().unwrap(),
        ])
        .env_remove("JODA_API_KEY")
        .output()
        .expect("failed to spawn binary");
    assert_eq!(output.status.code(), Some(1));
    let message = error_line(&output)["error"].as_str().unwrap().to_string();
    assert!(message.contains("JODA_API_KEY"), "message: {message}");
}

#[test]
fn help_documents_every_subcommand() {
    let output = run_ok(&["--help"]);
    let stdout = String::from_utf8_lossy(&output.stdout);
    for name in [
        "validate", "compile", "plot", "analyze", "simulate", "interact", "baseline", "optimize",
        "propose",
    ] {
        assert!(stdout.contains(name), "--help does not list {name}");
    }
}
