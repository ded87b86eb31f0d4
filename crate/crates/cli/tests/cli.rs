use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flag-agg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn base_config(mode: &str, clients: usize) -> Value {
    json!({
        "mode": mode,
        "n": 32, "m": 64, "q": 65536, "b": 8,
        "N": clients, "T": 6,
        "eta": 0.2, "momentum": 0.0,
        "C0": 50.0,
        "clip_schedule": {"kind": "fixed"},
        "model": {"kind": "logistic_regression"},
        "dataset": {"source": "synthetic", "task": "logistic", "n_features": 30,
                    "samples_per_client": 40, "test_samples": 50, "noise": 0.1},
        "seeds": {"matrix": 1, "data": 2,
                  "client_rng": (0..clients).map(|i| 100 + i).collect::<Vec<_>>(),
                  "client_dither": (0..clients).map(|i| 200 + i).collect::<Vec<_>>()}
    })
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn train(config: &Path, out: &Path) -> Output {
    run(&[
        "train",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn csv_columns(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let rows: Vec<Vec<String>> = text
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].clone()).collect())
        .collect()
}

#[test]
fn comm_formula_at_384() {
    let v = stdout_json(&run(&["analyze", "comm", "--b", "6", "--m", "384"]));
    let tau = v["formula_value"].as_f64().unwrap();
    assert!((tau - 3.347).abs() < 1e-3, "{tau}");
    assert_eq!(v["details"]["tau_table"], 3.5);
}

#[test]
fn comm_measured_ratio() {
    let v = stdout_json(&run(&[
        "analyze", "comm", "--b", "8", "--q", "65536", "--mc",
    ]));
    assert_eq!(v["details"]["tau_measured"], 2.0);
    assert_eq!(v["mc_estimate"], 2.0);
}

#[test]
fn overflow_threshold_meets_delta() {
    let v = stdout_json(&run(&[
        "analyze", "overflow", "--N", "100", "--sigma", "0.01", "--delta", "1e-6",
    ]));
    let c = v["details"]["C"].as_f64().unwrap();
    assert!(c > 0.0);
    assert!(v["formula_value"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn overflow_monte_carlo_check() {
    let v = stdout_json(&run(&[
        "analyze", "overflow", "--N", "4", "--sigma", "1", "--C", "5", "--dim", "4", "--mc",
        "--trials", "20000",
    ]));
    assert!(v["mc_estimate"].is_number());
    assert!(
        v["verdict"].as_str().unwrap().contains("matches"),
        "{}",
        v["verdict"]
    );
}

#[test]
fn overflow_domain_error_names_parameter() {
    let out = run(&["analyze", "overflow", "--N", "4", "--sigma", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_json(&out);
    assert!(e["error"]["message"].as_str().unwrap().contains("sigma"));
}

#[test]
fn bound_terms_and_step_condition() {
    let args = [
        "analyze", "bound", "--f0-gap", "1", "--T", "100", "--eta", "0.5", "--sigma", "1", "--B",
        "4", "--N", "2", "--d", "8", "--C", "1", "--b", "4", "--nu", "1",
    ];
    let v = stdout_json(&run(&args));
    let total = 2.0 / 50.0 + 1.0 / 8.0 + 8.0 / (2.0 * 256.0);
    assert!((v["formula_value"].as_f64().unwrap() - total).abs() < 1e-12);

    let mut bad = args.to_vec();
    bad[7] = "1.5";
    let out = run(&bad);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("eta"));
}

#[test]
fn bound_simulation_stays_below() {
    let v = stdout_json(&run(&[
        "analyze", "bound", "--f0-gap", "1", "--T", "200", "--eta", "0.5", "--sigma", "1", "--B",
        "4", "--N", "4", "--d", "8", "--C", "8", "--b", "8", "--nu", "1", "--mc", "--n", "16",
        "--m", "8",
    ]));
    let measured = v["mc_estimate"].as_f64().unwrap();
    assert!(measured <= v["formula_value"].as_f64().unwrap(), "{v}");
    assert_eq!(v["details"]["overflow_total"], 0);
}

#[test]
fn keydemo_is_verified_and_stable() {
    let a = run(&["keydemo", "--N", "3", "--seed", "9"]);
    let b = run(&["keydemo", "--N", "3", "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout_json(&a)["status"], "VERIFIED");
}

#[test]
fn keydemo_small_modulus_by_hand() {
    let v = stdout_json(&run(&["keydemo", "--N", "2", "--n", "4", "--q", "17"]));
    let vec = |x: &Value| -> Vec<u64> {
        x.as_array()
            .unwrap()
            .iter()
            .map(|e| e.as_u64().unwrap())
            .collect()
    };
    let keys: Vec<Vec<u64>> = v["keys"].as_array().unwrap().iter().map(vec).collect();
    let shares = v["shares"].as_array().unwrap();
    assert_eq!(shares.len(), 4);
    // each key is the sum of its two shares mod 17
    for (i, key) in keys.iter().enumerate() {
        let mine: Vec<Vec<u64>> = shares
            .iter()
            .filter(|s| s["from"] == i)
            .map(|s| vec(&s["share"]))
            .collect();
        for j in 0..4 {
            assert_eq!((mine[0][j] + mine[1][j]) % 17, key[j]);
        }
    }
    let s_sum = vec(&v["s_sum"]);
    for j in 0..4 {
        assert!(s_sum[j] < 17);
        assert_eq!(s_sum[j], (keys[0][j] + keys[1][j]) % 17);
    }
}

#[test]
fn keydemo_single_client_is_usage_error() {
    let out = run(&["keydemo", "--N", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["field"], "N");
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = run(&["analyze", "nothing"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");
}

#[test]
fn flag_and_plaintext_runs_differ_only_in_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cols = Vec::new();
    for mode in ["flag", "quantized_plain"] {
        let cfg = write_config(dir.path(), &format!("{mode}.json"), &base_config(mode, 3));
        let out_dir = dir.path().join(mode);
        stdout_json(&train(&cfg, &out_dir));
        cols.push(csv_columns(&out_dir.join("metrics.csv")));
    }
    let header = [
        "round",
        "loss",
        "grad_norm_sq",
        "upload_bytes",
        "broadcast_bytes",
        "overflow_count",
        "C_t",
    ];
    for (c, name) in header.iter().enumerate() {
        assert_eq!(cols[0][c][0], *name);
        if name.ends_with("_bytes") {
            assert_ne!(cols[0][c][1..], cols[1][c][1..], "{name}");
        } else {
            assert_eq!(cols[0][c], cols[1][c], "{name}");
        }
    }
}

#[test]
fn rerun_from_resolved_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &base_config("flag", 2));
    let first = dir.path().join("first");
    stdout_json(&train(&cfg, &first));
    let second = dir.path().join("second");
    stdout_json(&train(&first.join("resolved-config.json"), &second));
    assert_eq!(
        std::fs::read(first.join("metrics.csv")).unwrap(),
        std::fs::read(second.join("metrics.csv")).unwrap()
    );
    let mut written: Vec<String> = std::fs::read_dir(&first)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    written.sort();
    assert_eq!(
        written,
        ["metrics.csv", "resolved-config.json", "summary.json"]
    );
    let mut top: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["first", "run.json", "second"]);
}

#[test]
fn default_output_dir_sits_beside_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exp.json", &base_config("vanilla", 2));
    let v = stdout_json(&run(&["train", cfg.to_str().unwrap()]));
    assert!(dir.path().join("exp-out/summary.json").exists());
    assert_eq!(v["total_key_share_bytes"], 0);
}

#[test]
fn invalid_eta_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config("flag", 2);
    cfg["eta"] = json!(0.0);
    let path = write_config(dir.path(), "bad.json", &cfg);
    let out = train(&path, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_json(&out);
    assert_eq!(e["error"]["kind"], "config");
    assert_eq!(e["error"]["field"], "eta");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_and_missing_fields_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config("flag", 2);
    cfg["learning_rate"] = json!(0.1);
    let out = train(
        &write_config(dir.path(), "a.json", &cfg),
        &dir.path().join("a"),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["field"], "learning_rate");

    let mut cfg = base_config("flag", 2);
    cfg.as_object_mut().unwrap().remove("b");
    let out = train(
        &write_config(dir.path(), "b.json", &cfg),
        &dir.path().join("b"),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["field"], "b");

    let out = train(&dir.path().join("missing.json"), &dir.path().join("c"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_finite_gradients_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config("flag", 2);
    cfg["model"] = Value::Null;
    cfg["dataset"] = json!({"source": "quadratic", "curvature": [1e300, 1.0], "optimum": [0.0, 0.0],
                            "sigma": 0.0, "theta0": [1e300, 0.0]});
    let out = train(
        &write_config(dir.path(), "q.json", &cfg),
        &dir.path().join("q"),
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(stderr_json(&out)["error"]["kind"], "protocol");
}

#[test]
fn csv_fixture_config_trains() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config("flag", 4);
    cfg["dataset"] = json!({"source": "csv", "path": fixtures().join("logistic_small.csv"),
                            "label_column": "label", "test_path": fixtures().join("logistic_small_test.csv")});
    cfg["T"] = json!(40);
    cfg["eta"] = json!(0.5);
    cfg["clip_schedule"] = json!({"kind": "previous_aggregate"});
    cfg["C0"] = json!(1.0);
    let v = stdout_json(&train(
        &write_config(dir.path(), "csv.json", &cfg),
        &dir.path().join("out"),
    ));
    assert!(v["final_test_accuracy"].as_f64().unwrap() > 0.8, "{v}");
    assert_eq!(v["dim"], 4);
}

/// Final loss should not get worse with more bits: over 5 seeds, a
/// majority of seeds has `loss(b=4) >= loss(b=6) >= loss(b=8)`.
#[test]
fn more_bits_do_not_hurt_final_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut ordered = 0;
    for seed in 0..5u64 {
        let mut losses = Vec::new();
        for b in [4, 6, 8] {
            let mut cfg = base_config("flag", 4);
            cfg["b"] = json!(b);
            cfg["T"] = json!(60);
            cfg["eta"] = json!(0.5);
            cfg["clip_schedule"] = json!({"kind": "previous_aggregate"});
            cfg["C0"] = json!(1.0);
            cfg["seeds"]["data"] = json!(seed);
            cfg["seeds"]["matrix"] = json!(seed + 50);
            let name = format!("s{seed}b{b}");
            let v = stdout_json(&train(
                &write_config(dir.path(), &format!("{name}.json"), &cfg),
                &dir.path().join(name),
            ));
            losses.push(v["final_loss"].as_f64().unwrap());
        }
        if losses[0] >= losses[1] && losses[1] >= losses[2] {
            ordered += 1;
        }
        eprintln!("seed {seed}: {losses:?}");
    }
    assert!(ordered >= 3, "only {ordered}/5 seeds ordered");
}
