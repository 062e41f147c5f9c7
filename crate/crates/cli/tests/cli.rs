use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use gbp_core::pgm::{parse_pgm, GrayImage};
use gbp_core::problems::{salt_and_pepper, step_image};
use serde_json::Value;

fn gbp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbp"))
        .args(args)
        .env("GBP_THREADS", "0")
        .output()
        .expect("run gbp")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TWO_VARIABLES: &str = r#"{
  "variables": [
    {"id": "a", "dim": 1, "prior": {"eta": [1], "lambda": [[1]]}},
    {"id": "b", "dim": 1, "prior": {"eta": [1], "lambda": [[1]]}}
  ],
  "factors": [
    {"id": "ab", "type": "custom_linear", "neighbors": ["a", "b"], "J": [[-1, 1]], "d": [0], "sigma_n": [[1]]}
  ]
}"#;

#[test]
fn solve_two_variable_system() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g.json");
    std::fs::write(&graph, TWO_VARIABLES).unwrap();
    let out = dir.path().join("out");
    let o = gbp(&[
        "solve", "--graph", graph.to_str().unwrap(), "--schedule", "synchronous", "--tol", "1e-8", "--oracle",
        "--out-dir", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let result = read_json(&out.join("result.json"));
    for id in ["a", "b"] {
        let mean = result[id]["mean"][0].as_f64().unwrap();
        let var = result[id]["cov"][0][0].as_f64().unwrap();
        assert!((mean - 1.0).abs() < 1e-12, "{id}: {mean}");
        assert!((var - 2.0 / 3.0).abs() < 1e-12, "{id}: {var}");
    }
    let cmp = read_json(&out.join("comparison.json"));
    assert!(cmp["max_mean_err"].as_f64().unwrap() < 1e-12);
    assert!(cmp["max_var_err"].as_f64().unwrap() < 1e-12);
    assert!(out.join("oracle.json").exists());
}

#[test]
fn trace_has_header_and_finite_energy() {
    let dir = tempfile::tempdir().unwrap();
    let o = gbp(&["solve", "--preset", "grid", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iter,messages_sent,delta,total_energy"));
    let energies: Vec<f64> = lines
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .collect();
    assert!(!energies.is_empty());
    assert!(energies.iter().all(|e| e.is_finite()));
    assert!(energies.last().unwrap() <= energies.first().unwrap());
}

#[test]
fn denoise_writes_same_size_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let noisy = salt_and_pepper(&step_image(12, 10), 0.05, 1);
    let input = dir.path().join("img.pgm");
    std::fs::write(&input, GrayImage::from_unit(12, 10, &noisy).unwrap().to_p2()).unwrap();
    let output = dir.path().join("d.pgm");
    for levels in ["1", "2"] {
        let o = gbp(&[
            "denoise", "--in", input.to_str().unwrap(), "--loss", "huber", "--huber-t", "1", "--out",
            output.to_str().unwrap(), "--levels", levels, "--tol", "1e-6", "--out-dir", dir.path().to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(&output).unwrap();
        assert!(text.starts_with("P2\n"));
        let img = parse_pgm(text.as_bytes()).unwrap();
        assert_eq!((img.width, img.height), (12, 10));
    }
}

#[test]
fn huber_linefit_tracks_the_outlier_free_fit() {
    let dir = tempfile::tempdir().unwrap();
    let err = |loss: &str| {
        let out = dir.path().join(loss);
        let o = gbp(&["linefit", "--preset", "outlier", "--loss", loss, "--oracle", "--out-dir", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        read_json(&out.join("comparison.json"))["max_mean_err"].as_f64().unwrap()
    };
    assert!(err("huber") < err("squared"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(gbp(&["solve", "--preset", "grid", "--iters", "2", "--out-dir", d]).status.code(), Some(2));
    assert_eq!(gbp(&["solve", "--graph", "/nonexistent.json", "--out-dir", d]).status.code(), Some(1));
    assert_eq!(gbp(&["solve", "--preset", "chain", "--damping", "0", "--out-dir", d]).status.code(), Some(1));
    assert_eq!(gbp(&["solve", "--preset", "chain", "--tol", "0", "--out-dir", d]).status.code(), Some(1));
    assert_eq!(gbp(&["solve", "--preset", "nope", "--out-dir", d]).status.code(), Some(1));
    let o = gbp(&["solve", "--preset", "grid", "--schedule", "attention", "--out-dir", d]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("focus"));
}

#[test]
fn every_schedule_runs_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for schedule in ["synchronous", "random", "sweep", "round-robin", "residual"] {
        let o = gbp(&["solve", "--preset", "loop", "--schedule", schedule, "--seed", "3", "--out-dir", d]);
        assert_eq!(o.status.code(), Some(0), "{schedule}");
    }
    let o = gbp(&[
        "solve", "--preset", "grid", "--schedule", "attention", "--focus", "p2_2", "--radius", "1", "--out-dir", d,
    ]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn posegraph_exports_a_reloadable_problem() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let o = gbp(&["posegraph", "--seed", "4", "--out-dir", sim.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let truth = read_json(&sim.join("ground_truth.json"));
    assert_eq!(truth["x0"].as_array().unwrap().len(), 2);
    let again = dir.path().join("again");
    let o = gbp(&[
        "posegraph", "--graph", sim.join("graph.json").to_str().unwrap(), "--out-dir", again.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(sim.join("result.json")).unwrap(),
        std::fs::read(again.join("result.json")).unwrap()
    );
}

#[test]
fn serve_stdio_answers_each_frame() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_gbp"))
        .args(["serve", "--stdio"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let frames = [
        r#"{"v": 1, "request_id": 1, "op": "create_session"}"#,
        r#"{"v": 1, "request_id": 2, "op": "load_preset", "session": "s1", "args": {"name": "chain"}}"#,
        r#"{"v": 1, "request_id": 3, "op": "set_policy", "session": "s1", "args": {"kind": "sweep"}}"#,
        r#"{"v": 1, "request_id": 4, "op": "step", "session": "s1"}"#,
        "garbage",
    ];
    {
        let mut stdin = child.stdin.take().unwrap();
        for f in frames {
            writeln!(stdin, "{f}").unwrap();
        }
    }
    let out = child.wait_with_output().unwrap();
    let events: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events.len(), frames.len());
    assert_eq!(events[0]["session"], "s1");
    assert_eq!(events[3]["request_id"], 4);
    assert_eq!(events[3]["state_delta"].as_object().unwrap().len(), 4);
    assert!(events[3]["messages_sent"].as_u64().unwrap() > 0);
    assert_eq!(events[4]["error"]["code"], "BadFrame");
}
