use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &[&str] = &["--widths", "8,16", "--k-set", "4,8"];

fn gmnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gmnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn dir_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str, seed: &str| {
        let d = dir_arg(&tmp.path().join(name));
        ok(&["synth", "--objects", "2", "--motion", "rotational", "--seed", seed, "--out-dir", &d]);
        json(&tmp.path().join(name).join("manifest.json"))["artifacts"][0]["sha256"].clone()
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_ne!(a, run("c", "2"));
}

#[test]
fn synth_without_noise_has_no_background_events() {
    let tmp = TempDir::new().unwrap();
    let d = dir_arg(tmp.path());
    let out = ok(&["synth", "--objects", "2", "--noise-rate", "0", "--seed", "3", "--out-dir", &d]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(!stdout.contains("class 0 "), "{stdout}");
    let text = std::fs::read_to_string(tmp.path().join("events.txt")).unwrap();
    assert!(text.lines().count() > 100);
    for line in text.lines() {
        let label = line.rsplit(',').next().unwrap();
        assert_ne!(label, "0", "{line}");
    }
}

#[test]
fn train_defaults_follow_the_reference_recipe() {
    let tmp = TempDir::new().unwrap();
    let d = dir_arg(tmp.path());
    let mut args = vec!["train", "--fixture", "--iterations", "1", "--out-dir", &d];
    args.extend_from_slice(SMALL);
    ok(&args);
    let m = json(&tmp.path().join("manifest.json"));
    let cfg = &m["config"];
    assert_eq!(cfg["train"]["lr"], 0.001);
    assert_eq!(cfg["train"]["momentum"], 0.9);
    assert_eq!(cfg["train"]["weight_decay"], 0.0001);
    assert_eq!(cfg["train"]["batch"], 4);
    assert_eq!(cfg["window"]["window_ms"], 100.0);
    assert_eq!(cfg["window"]["n_max"], 10000);
    assert_eq!(cfg["window"]["width"], 346);
    assert_eq!(cfg["window"]["height"], 260);
    assert_eq!(cfg["model"]["classes"], 2);
    assert_eq!(m["command"], "train");
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 3);
    assert!(tmp.path().join("model.ckpt").exists());
    assert_eq!(std::fs::read_to_string(tmp.path().join("loss.txt")).unwrap().lines().count(), 1);
}

#[test]
fn help_lists_recipe_defaults() {
    let out = ok(&["train", "--help"]);
    let help = String::from_utf8(out.stdout).unwrap();
    for needle in ["--lr", "0.001", "--momentum", "0.9", "--weight-decay", "0.0001", "--batch", "--window-ms", "--n-max", "10000"] {
        assert!(help.contains(needle), "missing {needle}");
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let tmp = TempDir::new().unwrap();
    let digest = |name: &str| {
        let d = dir_arg(&tmp.path().join(name));
        let mut args = vec!["train", "--fixture", "--iterations", "2", "--seed", "4", "--out-dir", &d];
        args.extend_from_slice(SMALL);
        ok(&args);
        let m = json(&tmp.path().join(name).join("manifest.json"));
        m["artifacts"][0]["sha256"].clone()
    };
    assert_eq!(digest("a"), digest("b"));
}

#[test]
fn single_subset_visits_every_graph_each_iteration() {
    let tmp = TempDir::new().unwrap();
    let d = dir_arg(tmp.path());
    let mut args = vec!["train", "--fixture", "--iterations", "3", "--subsets", "1", "--out-dir", &d];
    args.extend_from_slice(SMALL);
    ok(&args);
    let report = json(&tmp.path().join("train_report.json"));
    for rec in report["history"].as_array().unwrap() {
        assert_eq!(rec["subset"], 0);
    }
}

#[test]
fn eval_on_training_set_matches_training_accuracy() {
    let tmp = TempDir::new().unwrap();
    let t = dir_arg(&tmp.path().join("t"));
    let e = dir_arg(&tmp.path().join("e"));
    let mut args = vec!["train", "--fixture", "--seed", "2", "--iterations", "5", "--eval-every", "5", "--out-dir", &t];
    args.extend_from_slice(SMALL);
    ok(&args);
    let ckpt = tmp.path().join("t").join("model.ckpt");
    ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--fixture", "--seed", "2", "--out-dir", &e]);
    let report = json(&tmp.path().join("t").join("train_report.json"));
    let metrics = json(&tmp.path().join("e").join("metrics.json"));
    let train_acc = report["final_accuracy"].as_f64().unwrap();
    let eval_acc = metrics["accuracy"].as_f64().unwrap();
    assert!((train_acc - eval_acc).abs() < 1e-12, "{train_acc} vs {eval_acc}");
    let m = json(&tmp.path().join("e").join("manifest.json"));
    assert_eq!(m["config"]["eval"]["boundary_radius_px"], 2.0);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);
}

#[test]
fn eval_without_labels_fails_with_data_code() {
    let tmp = TempDir::new().unwrap();
    let t = dir_arg(&tmp.path().join("t"));
    let mut args = vec!["train", "--fixture", "--iterations", "1", "--out-dir", &t];
    args.extend_from_slice(SMALL);
    ok(&args);
    let events = tmp.path().join("unlabelled.txt");
    let lines: String = (0..50).map(|i| format!("{},{},{},1\n", 10 + i, 20 + i % 7, 100 * i)).collect();
    std::fs::write(&events, lines).unwrap();
    let ckpt = tmp.path().join("t").join("model.ckpt");
    let out = gmnn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--events",
        events.to_str().unwrap(),
        "--out-dir",
        &dir_arg(&tmp.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label"));
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = TempDir::new().unwrap();
    let d = dir_arg(&tmp.path().join("o"));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = gmnn(&["train", "--fixture", "--config", cfg.to_str().unwrap(), "--out-dir", &d]);
    assert_eq!(out.status.code(), Some(2));

    let out = gmnn(&["train", "--fixture", "--lr", "inf", "--out-dir", &d]);
    assert_eq!(out.status.code(), Some(2));

    let out = gmnn(&["train", "--events", "/nonexistent/events.txt", "--out-dir", &d]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/events.txt"));

    let garbage = tmp.path().join("garbage.txt");
    std::fs::write(&garbage, "1,2,three,1\n").unwrap();
    let out = gmnn(&["train", "--events", garbage.to_str().unwrap(), "--out-dir", &d]);
    assert_eq!(out.status.code(), Some(3));

    let out = gmnn(&["train", "--fixture", "--lr", "1e300", "--iterations", "3", "--widths", "4", "--k-set", "2", "--out-dir", &d]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let d = dir_arg(&tmp.path().join("o"));
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 9\n[train]\nlr = 0.5\niterations = 2\n[model]\nwidths = [8]\nk_set = [4]\n",
    )
    .unwrap();
    ok(&["train", "--fixture", "--config", cfg.to_str().unwrap(), "--lr", "0.01", "--out-dir", &d]);
    let m = json(&tmp.path().join("o").join("manifest.json"));
    assert_eq!(m["config"]["train"]["lr"], 0.01);
    assert_eq!(m["config"]["train"]["iterations"], 2);
    assert_eq!(m["config"]["model"]["widths"], serde_json::json!([8]));
    assert_eq!(m["seeds"], serde_json::json!([9]));
}

#[test]
fn graph_dumps_nodes_and_map_rows() {
    let tmp = TempDir::new().unwrap();
    let s = dir_arg(&tmp.path().join("s"));
    ok(&["synth", "--seed", "5", "--duration-ms", "200", "--out-dir", &s]);
    let events = tmp.path().join("s").join("events.txt");
    let g = dir_arg(&tmp.path().join("g"));
    ok(&["graph", "--events", events.to_str().unwrap(), "--window", "0", "--k-set", "2,3", "--out-dir", &g]);
    let dump = std::fs::read_to_string(tmp.path().join("g").join("graph_0.txt")).unwrap();
    let nodes = dump.lines().filter(|l| !l.starts_with('M')).count();
    let rows: Vec<&str> = dump.lines().filter(|l| l.starts_with('M')).collect();
    assert!(nodes > 0);
    assert_eq!(rows.len(), 2 * nodes);
    assert!(rows[0].starts_with("M 2 0:"));
    assert_eq!(rows[0].split_whitespace().count(), 3 + 2);
    assert_eq!(rows[nodes].split_whitespace().count(), 3 + 3);

    let out = gmnn(&["graph", "--events", events.to_str().unwrap(), "--window", "99", "--out-dir", &g]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_emits_one_row_per_layer_count() {
    let tmp = TempDir::new().unwrap();
    let d = dir_arg(tmp.path());
    ok(&[
        "ablate", "--layers", "1..7", "--no-k-sets", "--widths", "4", "--iterations", "1", "--train-graphs", "2",
        "--eval-graphs", "1", "--graph-ms", "10", "--out-dir", &d,
    ]);
    let rows = json(&tmp.path().join("ablation.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 7);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["k_set"].as_array().unwrap().len(), i + 1);
    }
    let table = std::fs::read_to_string(tmp.path().join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 8);
}

#[test]
fn bench_reports_both_modes() {
    let tmp = TempDir::new().unwrap();
    let d = dir_arg(tmp.path());
    let out = ok(&["bench", "--graphs", "3", "--graph-ms", "10", "--repetitions", "2", "--widths", "8", "--out-dir", &d]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("sequential"));
    let r = json(&tmp.path().join("bench.json"));
    assert_eq!(r["graphs"], 3);
    assert_eq!(r["repetitions"], 2);
    assert!(r["sequential_mean_s"].as_f64().unwrap() > 0.0);
    assert!(r["batch_mean_s"].as_f64().unwrap() > 0.0);
}
