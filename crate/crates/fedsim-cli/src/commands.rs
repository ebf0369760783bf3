//! The four subcommands: `partition`, `run`, `cia`, `report`.
//!
//! Each command owns one output directory. `partition` lays down the binary
//! dataset files a `run` later consumes; `cia` is self-contained; `report`
//! joins any number of `summary.json` files into one comparison table.
//! Existing outputs are never overwritten without `--force`.

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use fedsim::data::LabeledDataset;
use fedsim::metrics::EvalReport;
use fedsim::orchestrator::{
    prepare_data, run_cia, run_experiment, summarize_last_k, CiaConfig, ClientData, PreparedData,
    RunOutput,
};
use fedsim::{Error, Result};

use crate::config::{load_config, FileConfig};
use crate::CommonArgs;

fn client_train_name(i: usize) -> String {
    format!("client{i}_train.bin")
}

fn client_test_name(i: usize) -> String {
    format!("client{i}_test.bin")
}

const SERVER_VALIDATION: &str = "server_validation.bin";
const SERVER_TEST: &str = "server_test.bin";
const ROUND_METRICS: &str = "round_metrics.csv";
const SUMMARY: &str = "summary.json";
const CIA_REPORT: &str = "cia_report.json";
const REPORT: &str = "report.csv";

/// Creates the output directory and refuses to clobber existing outputs
/// unless forced.
fn ensure_fresh(out: &Path, names: &[String], force: bool) -> Result<()> {
    fs::create_dir_all(out)?;
    if force {
        return Ok(());
    }
    for name in names {
        let path = out.join(name);
        if path.exists() {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
    }
    Ok(())
}

fn resolve(args: &CommonArgs, config: &FileConfig) -> (u64, usize) {
    (
        args.seed.unwrap_or(config.run.seed),
        args.threads.unwrap_or(config.run.threads),
    )
}

/// `partition`: split the source dataset into per-client train/test files
/// plus the server validation/test splits, and print the per-client
/// per-class count table.
pub fn cmd_partition(args: &CommonArgs) -> Result<()> {
    let config = load_config(&args.config, &args.set)?;
    let (seed, _) = resolve(args, &config);
    let layout = config.data_config()?;
    let train_source = config.train_source(seed)?;
    let eval_source = config.eval_source()?;
    let data = prepare_data(&train_source, eval_source.as_ref(), &layout, seed)?;

    let mut names: Vec<String> = Vec::new();
    for i in 0..data.clients.len() {
        names.push(client_train_name(i));
        names.push(client_test_name(i));
    }
    names.push(SERVER_VALIDATION.into());
    names.push(SERVER_TEST.into());
    ensure_fresh(&args.out, &names, args.force)?;

    for (i, client) in data.clients.iter().enumerate() {
        client.train.save(args.out.join(client_train_name(i)))?;
        client.test.save(args.out.join(client_test_name(i)))?;
    }
    data.server_validation.save(args.out.join(SERVER_VALIDATION))?;
    data.server_test.save(args.out.join(SERVER_TEST))?;

    let num_classes = data
        .clients
        .iter()
        .flat_map(|c| [c.train.num_classes(), c.test.num_classes()])
        .max()
        .unwrap_or(0);
    let classes: Vec<String> = (0..num_classes).map(|k| format!("class_{k}")).collect();
    println!("client,total,{}", classes.join(","));
    for (i, client) in data.clients.iter().enumerate() {
        let mut counts = vec![0usize; num_classes];
        for part in [&client.train, &client.test] {
            for (k, n) in part.class_counts().iter().enumerate() {
                counts[k] += n;
            }
        }
        let total: usize = counts.iter().sum();
        let cells: Vec<String> = counts.iter().map(|n| n.to_string()).collect();
        println!("{i},{total},{}", cells.join(","));
    }
    println!(
        "server,validation={},test={}",
        data.server_validation.len(),
        data.server_test.len()
    );
    Ok(())
}

/// Loads the partition files `cmd_partition` wrote into `out`.
fn load_partitions(out: &Path) -> Result<PreparedData> {
    let mut clients = Vec::new();
    loop {
        let train_path = out.join(client_train_name(clients.len()));
        if !train_path.exists() {
            break;
        }
        let test_path = out.join(client_test_name(clients.len()));
        clients.push(ClientData {
            train: LabeledDataset::load(train_path)?,
            test: LabeledDataset::load(test_path)?,
        });
    }
    if clients.is_empty() {
        return Err(Error::Config(format!(
            "no partitions found in {}; run the partition command first",
            out.display()
        )));
    }
    Ok(PreparedData {
        clients,
        server_validation: LabeledDataset::load(out.join(SERVER_VALIDATION))?,
        server_test: LabeledDataset::load(out.join(SERVER_TEST))?,
    })
}

/// Class count for the model: the maximum any split exhibits (a small split
/// may be missing the top class).
fn observed_classes(data: &PreparedData) -> usize {
    data.clients
        .iter()
        .flat_map(|c| [c.train.num_classes(), c.test.num_classes()])
        .chain([data.server_validation.num_classes(), data.server_test.num_classes()])
        .max()
        .unwrap_or(0)
}

#[derive(Serialize)]
struct LastWindow {
    window: usize,
    mean_accuracy: f64,
    std_accuracy: f64,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    strategy: &'a str,
    privacy_mode: &'a str,
    seed: u64,
    rounds: u64,
    final_eval: &'a EvalReport,
    last_rounds: LastWindow,
}

fn write_round_metrics(path: &Path, output: &RunOutput, num_clients: usize) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["round".to_string(), "agg_acc".into(), "agg_loss".into()];
    for i in 0..num_clients {
        header.push(format!("client{i}_acc"));
        header.push(format!("client{i}_loss"));
    }
    header.extend(["d_metric".into(), "sigma".into(), "warning".into(), "ctilde".into()]);
    writer.write_record(&header)?;
    for record in &output.records {
        let mut row = vec![
            record.round.to_string(),
            record.agg_accuracy.to_string(),
            record.agg_loss.to_string(),
        ];
        for client in &record.clients {
            row.push(client.test_accuracy.to_string());
            row.push(client.test_loss.to_string());
        }
        row.push(record.privacy.distance.to_string());
        row.push(record.privacy.sigma.to_string());
        row.push(record.privacy.zero_distance_warning.to_string());
        row.push(record.privacy.ctilde.map(|v| v.to_string()).unwrap_or_default());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// `run`: execute the federated loop on previously written partitions and
/// emit `round_metrics.csv` plus `summary.json`.
pub fn cmd_run(args: &CommonArgs) -> Result<()> {
    let config = load_config(&args.config, &args.set)?;
    let (seed, threads) = resolve(args, &config);
    ensure_fresh(&args.out, &[ROUND_METRICS.into(), SUMMARY.into()], args.force)?;

    let data = load_partitions(&args.out)?;
    let model = config.model_spec(data.clients[0].train.width(), observed_classes(&data))?;
    let experiment = config.experiment(model, data.clients.len() as u64, seed, threads)?;
    let output = run_experiment(&experiment, &data)?;

    write_round_metrics(&args.out.join(ROUND_METRICS), &output, data.clients.len())?;

    let window = output.records.len().min(5);
    let (mean_accuracy, std_accuracy) = summarize_last_k(&output.records, window)?;
    let summary = RunSummary {
        strategy: experiment.strategy.kind_name(),
        privacy_mode: experiment.privacy.mode.name(),
        seed,
        rounds: experiment.rounds,
        final_eval: &output.final_eval,
        last_rounds: LastWindow { window, mean_accuracy, std_accuracy },
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("serializing summary: {e}")))?;
    fs::write(args.out.join(SUMMARY), json + "\n")?;

    println!(
        "{} + {}: final accuracy {:.4}, last-{} mean {:.4} (std {:.4})",
        summary.strategy,
        summary.privacy_mode,
        output.final_eval.accuracy,
        window,
        mean_accuracy,
        std_accuracy,
    );
    Ok(())
}

#[derive(Serialize)]
struct CiaModeEntry {
    mode: &'static str,
    aggregated_test_loss: f64,
    target_shadow_loss: f64,
    relative_difference_pct: f64,
    shadow_size: usize,
    /// Test loss after the attack's single round; equals the aggregated
    /// test loss by construction.
    first_round_test_loss: f64,
}

#[derive(Serialize)]
struct CiaDocument {
    attacker_id: usize,
    target_id: usize,
    shadow_fraction: f64,
    modes: Vec<CiaModeEntry>,
}

/// `cia`: run the one-round client inference attack under each configured
/// privacy mode and emit `cia_report.json`.
pub fn cmd_cia(args: &CommonArgs) -> Result<()> {
    let config = load_config(&args.config, &args.set)?;
    let (seed, threads) = resolve(args, &config);
    ensure_fresh(&args.out, &[CIA_REPORT.into()], args.force)?;

    let layout = config.data_config()?;
    let train_source = config.train_source(seed)?;
    let eval_source = config.eval_source()?;
    let data = prepare_data(&train_source, eval_source.as_ref(), &layout, seed)?;
    let model = config.model_spec(data.clients[0].train.width(), observed_classes(&data))?;

    let cia = CiaConfig {
        attacker_id: config.run.attacker_id,
        target_id: config.run.target_id,
        shadow_fraction: config.run.shadow_fraction,
    };
    let mut modes = Vec::new();
    for &mode in &config.run.cia_modes {
        let mut experiment =
            config.experiment(model.clone(), data.clients.len() as u64, seed, threads)?;
        experiment.privacy.mode = mode;
        let report = run_cia(&experiment, &data, &cia)?;
        println!(
            "mode {}: aggregated loss {:.4}, shadow loss {:.4}, difference {:.3}%",
            mode.name(),
            report.aggregated_test_loss,
            report.target_shadow_loss,
            report.relative_difference_pct,
        );
        modes.push(CiaModeEntry {
            mode: mode.name(),
            aggregated_test_loss: report.aggregated_test_loss,
            target_shadow_loss: report.target_shadow_loss,
            relative_difference_pct: report.relative_difference_pct,
            shadow_size: report.shadow_size,
            first_round_test_loss: report.aggregated_test_loss,
        });
    }
    let document = CiaDocument {
        attacker_id: cia.attacker_id,
        target_id: cia.target_id,
        shadow_fraction: cia.shadow_fraction,
        modes,
    };
    let json = serde_json::to_string_pretty(&document)
        .map_err(|e| Error::Config(format!("serializing report: {e}")))?;
    fs::write(args.out.join(CIA_REPORT), json + "\n")?;
    Ok(())
}

fn find_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            find_summaries(&path, found)?;
        } else if path.file_name() == Some(OsStr::new(SUMMARY)) {
            found.push(path);
        }
    }
    Ok(())
}

/// One `summary.json`, with numbers kept as their JSON source text so the
/// report is byte-faithful to the runs it joins.
struct ReportRow {
    strategy: String,
    privacy_mode: String,
    cells: Vec<String>,
    path: String,
}

fn field<'a>(
    value: &'a serde_json::Value,
    path: &[&str],
    file: &Path,
) -> Result<&'a serde_json::Value> {
    let mut current = value;
    for key in path {
        current = current.get(key).ok_or_else(|| {
            Error::Decode(format!("{}: missing field {}", file.display(), path.join(".")))
        })?;
    }
    Ok(current)
}

fn number_field(value: &serde_json::Value, path: &[&str], file: &Path) -> Result<String> {
    match field(value, path, file)? {
        serde_json::Value::Number(n) => Ok(n.to_string()),
        _ => Err(Error::Decode(format!(
            "{}: field {} is not a number",
            file.display(),
            path.join(".")
        ))),
    }
}

fn string_field(value: &serde_json::Value, path: &[&str], file: &Path) -> Result<String> {
    match field(value, path, file)? {
        serde_json::Value::String(s) => Ok(s.clone()),
        _ => Err(Error::Decode(format!(
            "{}: field {} is not a string",
            file.display(),
            path.join(".")
        ))),
    }
}

const REPORT_NUMBERS: &[&[&str]] = &[
    &["last_rounds", "mean_accuracy"],
    &["last_rounds", "std_accuracy"],
    &["final_eval", "accuracy"],
    &["final_eval", "loss"],
    &["final_eval", "macro_f1"],
    &["final_eval", "macro_precision"],
    &["final_eval", "auc_micro_ovr"],
];

/// `report`: join every `summary.json` under the output directory into one
/// comparison table, written as `report.csv` and printed.
pub fn cmd_report(out: &Path, force: bool) -> Result<()> {
    let mut files = Vec::new();
    find_summaries(out, &mut files)?;
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no {SUMMARY} files under {}; run some experiments first",
            out.display()
        )));
    }
    files.sort();
    ensure_fresh(out, &[REPORT.into()], force)?;

    let mut rows = Vec::new();
    for file in &files {
        let text = fs::read_to_string(file)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Decode(format!("{}: {e}", file.display())))?;
        let mut cells = Vec::new();
        for path in REPORT_NUMBERS {
            cells.push(number_field(&value, path, file)?);
        }
        rows.push(ReportRow {
            strategy: string_field(&value, &["strategy"], file)?,
            privacy_mode: string_field(&value, &["privacy_mode"], file)?,
            cells,
            path: file
                .strip_prefix(out)
                .unwrap_or(file)
                .to_string_lossy()
                .into_owned(),
        });
    }
    rows.sort_by(|a, b| {
        (&a.strategy, &a.privacy_mode, &a.path).cmp(&(&b.strategy, &b.privacy_mode, &b.path))
    });

    let header = [
        "strategy",
        "privacy_mode",
        "last_mean_acc",
        "last_std_acc",
        "final_accuracy",
        "final_loss",
        "final_macro_f1",
        "final_macro_precision",
        "final_auc",
        "path",
    ];
    let mut writer = csv::Writer::from_path(out.join(REPORT))?;
    writer.write_record(header)?;
    for row in &rows {
        let mut record = vec![row.strategy.clone(), row.privacy_mode.clone()];
        record.extend(row.cells.iter().cloned());
        record.push(row.path.clone());
        writer.write_record(&record)?;
    }
    writer.flush()?;

    println!("{}", header.join(","));
    for row in &rows {
        let mut record = vec![row.strategy.clone(), row.privacy_mode.clone()];
        record.extend(row.cells.iter().cloned());
        record.push(row.path.clone());
        println!("{}", record.join(","));
    }
    Ok(())
}
