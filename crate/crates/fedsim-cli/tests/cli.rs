//! End-to-end tests of the `fedsim` binary: exit codes, file outputs, and
//! the documented CSV/JSON schemas.

use std::path::Path;
use std::process::Output;

fn fedsim(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .output()
        .expect("spawn fedsim")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

/// Small synthetic scenario that runs in well under a second.
const SMALL: &str = "[data]\n\
    synth_classes = 3\n\
    synth_dim = 4\n\
    synth_per_class = 60\n\
    num_clients = 3\n\
    \n\
    [run]\n\
    rounds = 4\n\
    epochs = 1\n\
    seed = 11\n";

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[run]\nround_count = 3\n");
    let out = dir.path().join("out");
    let result = fedsim(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2), "stderr: {}", stderr(&result));
    assert!(stderr(&result).contains("round_count"), "stderr: {}", stderr(&result));
}

#[test]
fn infeasible_plan_exits_2_and_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    // 60 rows per class pre-holdout leaves 48; class 1 of client 0 asks for 50.
    let config = write_config(
        dir.path(),
        "[data]\n\
         synth_classes = 2\n\
         synth_dim = 4\n\
         synth_per_class = 60\n\
         scenario = \"plan\"\n\
         plan = [[5, 50], [5, 5]]\n",
    );
    let out = dir.path().join("out");
    let result = fedsim(&["partition", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2), "stderr: {}", stderr(&result));
    let message = stderr(&result);
    assert!(
        message.contains("client 0") && message.contains("class 1"),
        "offending cell not named: {message}"
    );
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert!(fedsim(&["partition", "--config", &config, "--out", out_str]).status.success());

    let again = fedsim(&["partition", "--config", &config, "--out", out_str]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"), "stderr: {}", stderr(&again));

    let forced = fedsim(&["partition", "--config", &config, "--out", out_str, "--force"]);
    assert!(forced.status.success(), "stderr: {}", stderr(&forced));
}

#[test]
fn partition_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let result = fedsim(&["partition", "--config", &config, "--out", out.to_str().unwrap()]);
        assert!(result.status.success(), "stderr: {}", stderr(&result));
    }
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let left = std::fs::read(a.join(&name)).unwrap();
        let right = std::fs::read(b.join(&name)).unwrap();
        assert_eq!(left, right, "{name:?} differs between identical reruns");
    }
}

#[test]
fn partition_table_matches_library_partitioner() {
    use fedsim::data::{partition_homogeneous, LabeledDataset};
    // Class histogram (724, 49, 2566, 1781); a separate eval source keeps
    // the whole file available for client shards.
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::new();
    for (class, count) in [(0, 724usize), (1, 49), (2, 2566), (3, 1781)] {
        for i in 0..count {
            rows.push_str(&format!("{}.5,{class}\n", i % 7));
        }
    }
    std::fs::write(dir.path().join("train.csv"), &rows).unwrap();
    let mut eval_rows = String::new();
    for class in 0..4 {
        for i in 0..5 {
            eval_rows.push_str(&format!("{i}.25,{class}\n"));
        }
    }
    std::fs::write(dir.path().join("eval.csv"), &eval_rows).unwrap();

    let config = write_config(
        dir.path(),
        &format!(
            "[data]\nsource = {:?}\neval_source = {:?}\nnum_clients = 4\n\n[run]\nseed = 5\n",
            dir.path().join("train.csv"),
            dir.path().join("eval.csv"),
        ),
    );
    let out = dir.path().join("out");
    let result = fedsim(&["partition", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));

    let features: Vec<f64> = rows.lines().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    let labels: Vec<usize> = rows.lines().map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let source = LabeledDataset::new(features, 1, labels, 4).unwrap();
    let expected = partition_homogeneous(&source, 4, 5).unwrap();

    let printed = stdout(&result);
    let mut lines = printed.lines();
    assert_eq!(lines.next(), Some("client,total,class_0,class_1,class_2,class_3"));
    for (i, client) in expected.iter().enumerate() {
        let counts = client.class_counts();
        let cells: Vec<String> = counts.iter().map(|n| n.to_string()).collect();
        assert_eq!(
            lines.next(),
            Some(format!("{i},{},{}", client.len(), cells.join(",")).as_str())
        );
        assert_eq!(client.len(), 1280);
    }
    assert!(lines.next().unwrap().starts_with("server,validation="));
}

fn read_csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect::<Vec<_>>())
        .collect();
    (header, rows)
}

#[test]
fn run_emits_one_csv_row_per_round_and_quiet_sigma_without_privacy() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[data]\n\
         synth_classes = 3\n\
         synth_dim = 4\n\
         synth_per_class = 80\n\
         num_clients = 3\n\
         \n\
         [run]\n\
         rounds = 20\n\
         epochs = 1\n\
         seed = 13\n",
    );
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert!(fedsim(&["partition", "--config", &config, "--out", out_str]).status.success());
    let result = fedsim(&["run", "--config", &config, "--out", out_str, "--force"]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));

    let (header, rows) = read_csv_rows(&out.join("round_metrics.csv"));
    assert_eq!(
        header,
        [
            "round",
            "agg_acc",
            "agg_loss",
            "client0_acc",
            "client0_loss",
            "client1_acc",
            "client1_loss",
            "client2_acc",
            "client2_loss",
            "d_metric",
            "sigma",
            "warning",
            "ctilde",
        ]
        .map(String::from)
        .to_vec()
    );
    assert_eq!(rows.len(), 20);
    let sigma_col = header.iter().position(|h| h == "sigma").unwrap();
    let ctilde_col = header.iter().position(|h| h == "ctilde").unwrap();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        assert_eq!(row[sigma_col], "0", "round {} sigma", i + 1);
        if i == 0 {
            assert!(!row[ctilde_col].is_empty(), "round 1 must report ctilde");
        } else {
            assert!(row[ctilde_col].is_empty(), "ctilde only applies to round 1");
        }
    }

    // Every numeric cell round-trips through f64 without loss.
    for row in &rows {
        for (h, cell) in header.iter().zip(row) {
            if h == "warning" || (h == "ctilde" && cell.is_empty()) {
                continue;
            }
            let value: f64 = cell.parse().unwrap();
            assert_eq!(&value.to_string(), cell, "column {h} does not round-trip");
        }
    }
}

#[test]
fn summary_window_matches_csv_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert!(fedsim(&["partition", "--config", &config, "--out", out_str]).status.success());
    assert!(fedsim(&["run", "--config", &config, "--out", out_str, "--force"]).status.success());

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let window = summary["last_rounds"]["window"].as_u64().unwrap() as usize;
    let (header, rows) = read_csv_rows(&out.join("round_metrics.csv"));
    let acc_col = header.iter().position(|h| h == "agg_acc").unwrap();
    let tail: Vec<f64> =
        rows[rows.len() - window..].iter().map(|r| r[acc_col].parse().unwrap()).collect();

    // Same incremental mean and population std the summary uses.
    let mut mean = 0.0;
    for (k, &v) in tail.iter().enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    let var = tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / window as f64;
    assert_eq!(summary["last_rounds"]["mean_accuracy"].as_f64().unwrap(), mean);
    assert_eq!(summary["last_rounds"]["std_accuracy"].as_f64().unwrap(), var.sqrt());
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let base = dir.path().join("base");
    let reseeded = dir.path().join("reseeded");
    let repeat = dir.path().join("repeat");
    for (out, seed) in [(&base, None), (&reseeded, Some("99")), (&repeat, Some("99"))] {
        let out_str = out.to_str().unwrap();
        let mut args = vec!["partition", "--config", config.as_str(), "--out", out_str];
        if let Some(seed) = seed {
            args.extend(["--seed", seed]);
        }
        assert!(fedsim(&args).status.success());
    }
    let name = "client0_train.bin";
    let base_bytes = std::fs::read(base.join(name)).unwrap();
    let reseeded_bytes = std::fs::read(reseeded.join(name)).unwrap();
    let repeat_bytes = std::fs::read(repeat.join(name)).unwrap();
    assert_ne!(base_bytes, reseeded_bytes, "--seed 99 must override the file's seed 11");
    assert_eq!(reseeded_bytes, repeat_bytes);
}

#[test]
fn set_flag_overrides_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert!(fedsim(&["partition", "--config", &config, "--out", out_str]).status.success());
    let result = fedsim(&[
        "run",
        "--config",
        &config,
        "--out",
        out_str,
        "--force",
        "--set",
        "strategy.kind=fedmedian",
        "--set",
        "run.rounds=2",
    ]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["strategy"], "fedmedian");
    assert_eq!(summary["rounds"], 2);
}

#[test]
fn missing_partitions_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let result = fedsim(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2), "stderr: {}", stderr(&result));
}

#[test]
fn report_row_is_byte_equal_to_summary_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert!(fedsim(&["partition", "--config", &config, "--out", out_str]).status.success());
    assert!(fedsim(&["run", "--config", &config, "--out", out_str, "--force"]).status.success());
    let result = fedsim(&["report", "--out", out_str]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));

    let (header, rows) = read_csv_rows(&out.join("report.csv"));
    assert_eq!(rows.len(), 1, "single summary must yield a single row");
    let row = &rows[0];
    let raw = std::fs::read_to_string(out.join("summary.json")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&raw).unwrap();

    // Numbers are copied as written in the JSON document, not re-parsed.
    let columns = [
        ("strategy", &summary["strategy"]),
        ("privacy_mode", &summary["privacy_mode"]),
        ("last_mean_acc", &summary["last_rounds"]["mean_accuracy"]),
        ("last_std_acc", &summary["last_rounds"]["std_accuracy"]),
        ("final_accuracy", &summary["final_eval"]["accuracy"]),
        ("final_loss", &summary["final_eval"]["loss"]),
    ];
    for (name, expected) in columns {
        let col = header.iter().position(|h| h == name).unwrap();
        let expected = match expected {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        assert_eq!(row[col], expected, "column {name}");
    }
}

#[test]
fn cia_report_has_recomputable_differences_and_stable_vanilla_losses() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[data]\n\
         synth_classes = 3\n\
         synth_dim = 4\n\
         synth_per_class = 100\n\
         num_clients = 3\n\
         \n\
         [run]\n\
         epochs = 1\n\
         seed = 19\n\
         attacker_id = 0\n\
         target_id = 2\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let result = fedsim(&["cia", "--config", &config, "--out", out.to_str().unwrap()]);
        assert!(result.status.success(), "stderr: {}", stderr(&result));
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("cia_report.json")).unwrap()).unwrap();
    let modes = report["modes"].as_array().unwrap();
    assert_eq!(modes.len(), 3);
    for entry in modes {
        let aggregated = entry["aggregated_test_loss"].as_f64().unwrap();
        let shadow = entry["target_shadow_loss"].as_f64().unwrap();
        let pct = entry["relative_difference_pct"].as_f64().unwrap();
        assert!(
            (pct - (shadow - aggregated) / shadow * 100.0).abs() < 1e-9,
            "difference must recompute from the two losses"
        );
        assert_eq!(entry["first_round_test_loss"], entry["aggregated_test_loss"]);
    }
    // Same seed, separate invocation: identical document.
    let again = std::fs::read(b.join("cia_report.json")).unwrap();
    assert_eq!(std::fs::read(a.join("cia_report.json")).unwrap(), again);
}

#[test]
fn cia_single_mode_list_yields_single_entry() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "[data]\n\
         synth_classes = 3\n\
         synth_dim = 4\n\
         synth_per_class = 100\n\
         num_clients = 3\n\
         \n\
         [run]\n\
         epochs = 1\n\
         seed = 19\n\
         cia_modes = [\"none\"]\n",
    );
    let out = dir.path().join("out");
    let result = fedsim(&["cia", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("cia_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["modes"].as_array().unwrap().len(), 1);
    assert_eq!(report["modes"][0]["mode"], "none");
}

#[test]
fn report_joins_many_runs_into_sorted_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let root = dir.path().join("runs");
    for (strategy, mode) in
        [("fedavg", "none"), ("fedavg", "global_dp"), ("fedmedian", "none")]
    {
        let out = root.join(format!("{strategy}_{mode}"));
        let out_str = out.to_str().unwrap();
        assert!(fedsim(&["partition", "--config", &config, "--out", out_str]).status.success());
        let run = fedsim(&[
            "run",
            "--config",
            &config,
            "--out",
            out_str,
            "--force",
            "--set",
            &format!("strategy.kind={strategy}"),
            "--set",
            &format!("privacy.mode={mode}"),
        ]);
        assert!(run.status.success(), "stderr: {}", stderr(&run));
    }
    let result = fedsim(&["report", "--out", root.to_str().unwrap()]);
    assert!(result.status.success(), "stderr: {}", stderr(&result));
    let (header, rows) = read_csv_rows(&root.join("report.csv"));
    assert_eq!(rows.len(), 3);
    let strategy_col = header.iter().position(|h| h == "strategy").unwrap();
    let mode_col = header.iter().position(|h| h == "privacy_mode").unwrap();
    let keys: Vec<(String, String)> =
        rows.iter().map(|r| (r[strategy_col].clone(), r[mode_col].clone())).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted, "rows must sort by (strategy, mode)");
    assert_eq!(
        keys,
        [
            ("fedavg".into(), "global_dp".into()),
            ("fedavg".into(), "none".into()),
            ("fedmedian".into(), "none".into()),
        ]
    );
}
