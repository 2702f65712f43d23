//! Command-line front end: `gradcheck`, `oracle-diff`, `train` and `sweep`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or usage
//! error, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{train_fields, ExperimentConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{all_passed, run_gradcheck, GradcheckOptions};
use crate::oracle_diff::{all_within, oracle_diff};
use crate::report::{aggregate, csv_header, csv_row, run_csv, RunSummary};
use crate::trainer::{train, EpochMetrics, Objective};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// `oracle-diff` fails when any loss differs by this much or more.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(
    name = "simcon",
    version,
    about = "Similarity-aware contrastive losses on a synthetic noisy-caption benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment config (flat TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds` from the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Extra `key=value` settings applied on top of the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Append a wall-clock `seconds` column to the CSVs.
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    Loss,
    #[value(alias = "noise_rho")]
    NoiseRho,
    #[value(alias = "batch_size")]
    BatchSize,
    Ablation,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        /// Random instances per loss.
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        instances: u64,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..=64))]
        max_batch: u64,
        #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(2..=64))]
        max_dim: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the analytic gradient of the named loss (fault injection).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Compare vectorized losses against brute-force oracles.
    OracleDiff {
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one config for every seed; writes one CSV per seed and a JSON
    /// summary.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the final parameters of every seed as JSON.
        #[arg(long)]
        export_params: bool,
    },
    /// Run a config across the values of one axis and every seed.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values; `loss` and `ablation` default to all.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidSpec(_) | Error::InvalidParameter(_) => {
                    EXIT_CONFIG
                }
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gradcheck {
            instances,
            max_batch,
            max_dim,
            seed,
            corrupt,
        } => cmd_gradcheck(GradcheckOptions {
            instances: instances as usize,
            max_batch: max_batch as usize,
            max_dim: max_dim as usize,
            seed,
            corrupt,
            ..GradcheckOptions::default()
        }),
        Command::OracleDiff { trials, seed } => cmd_oracle_diff(trials as usize, seed),
        Command::Train { run, export_params } => cmd_train(&run, export_params),
        Command::Sweep { run, axis, values } => cmd_sweep(&run, axis, &values),
    }
}

fn cmd_gradcheck(opts: GradcheckOptions) -> Result<i32> {
    let report = run_gradcheck(&opts)?;
    println!(
        "{:<12} {:>9} {:>12} {:>12}  status",
        "loss", "instances", "max_rel_err", "max_abs_err"
    );
    for c in &report {
        println!(
            "{:<12} {:>9} {:>12.3e} {:>12.3e}  {}",
            c.name,
            c.instances,
            c.max_rel_err,
            c.max_abs_err,
            match &c.failure {
                None => "ok".to_owned(),
                Some(f) => format!("FAIL at {f}"),
            }
        );
    }
    Ok(if all_passed(&report) {
        EXIT_OK
    } else {
        EXIT_VERIFY
    })
}

fn cmd_oracle_diff(trials: usize, seed: u64) -> Result<i32> {
    let report = oracle_diff(trials, seed)?;
    println!("{:<20} {:>7} {:>14}", "loss", "trials", "max_abs_diff");
    for r in &report {
        println!("{:<20} {:>7} {:>14.3e}", r.name, r.trials, r.max_abs_diff);
    }
    Ok(if all_within(&report, ORACLE_TOLERANCE) {
        EXIT_OK
    } else {
        EXIT_VERIFY
    })
}

fn load(run: &RunArgs, extra: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&run.config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", run.config.display())))?;
    let mut overrides = run.set.clone();
    overrides.extend_from_slice(extra);
    let mut cfg = ExperimentConfig::parse(&text, &overrides)?;
    if let Some(seeds) = &run.seeds {
        if seeds.is_empty() {
            return Err(Error::Config("--seeds must not be empty".into()));
        }
        cfg.seeds = seeds.clone();
    }
    Ok(cfg)
}

fn out_dir(run: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    run.out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f =
        fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(contents.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Vec<EpochMetrics>, crate::trainer::Model)> {
    let out = train(&cfg.for_seed(seed))?;
    Ok((out.history, out.model))
}

fn cmd_train(run: &RunArgs, export_params: bool) -> Result<i32> {
    let cfg = load(run, &[])?;
    let dir = out_dir(run, &cfg);
    create_dir(&dir)?;
    let hash = cfg.hash();
    let mut summaries = Vec::new();
    let mut csvs = Vec::new();
    for &seed in &cfg.seeds {
        let (history, model) = run_seed(&cfg, seed)?;
        let name = format!("{hash}_seed{seed}.csv");
        write_file(
            &dir.join(&name),
            &run_csv(&hash, seed, &history, run.timings),
        )?;
        if export_params {
            let params = json!({ "config_hash": hash, "seed": seed, "tau": model.temperature().tau(), "params": model.flatten() });
            write_file(
                &dir.join(format!("{hash}_seed{seed}_params.json")),
                &params.to_string(),
            )?;
        }
        let s = RunSummary::from_history(seed, &history, cfg.recall_threshold);
        println!(
            "seed {seed}: final recall@1 i2t {:.4} t2i {:.4}, alignment {:.4} -> {}",
            s.final_recall_i2t,
            s.final_recall_t2i,
            s.final_alignment_accuracy,
            dir.join(&name).display()
        );
        summaries.push(s);
        csvs.push(name);
    }
    let config: serde_json::Map<String, serde_json::Value> = cfg
        .fields()
        .into_iter()
        .map(|(k, v)| (k.to_owned(), serde_json::Value::String(v)))
        .collect();
    let summary = json!({
        "config_hash": hash,
        "objective": cfg.train.objective.label(),
        "config": config,
        "seeds": cfg.seeds,
        "recall_threshold": cfg.recall_threshold,
        "csv_files": csvs,
        "runs": summaries,
        "aggregate": aggregate(&summaries),
    });
    let path = dir.join(format!("{hash}_summary.json"));
    write_file(
        &path,
        &serde_json::to_string_pretty(&summary).expect("serializable summary"),
    )?;
    println!("summary -> {}", path.display());
    Ok(EXIT_OK)
}

/// Overrides for one ablation row; every flag is set explicitly so the base
/// config's own flags cannot conflict.
fn ablation_overrides(row: Objective) -> Vec<String> {
    let (kind, views, ncs, joint) = match row {
        Objective::InfoNce => ("infonce", false, false, false),
        Objective::SimCon => ("simcon", false, false, false),
        Objective::MultiView {
            ncs,
            joint_positives,
        } => ("simcon", true, ncs, joint_positives),
    };
    vec![
        format!("loss_kind={kind}"),
        format!("use_multiple_views={views}"),
        format!("use_ncs={ncs}"),
        format!("use_joint_positives={joint}"),
    ]
}

/// `(axis value label, overrides)` for every point of the sweep.
fn sweep_points(axis: Axis, values: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    let need_values = || {
        if values.is_empty() {
            Err(Error::Config("--values is required for this axis".into()))
        } else {
            Ok(())
        }
    };
    match axis {
        Axis::Loss => {
            let values: Vec<String> = if values.is_empty() {
                ["infonce", "simcon", "mv_simcon"]
                    .map(String::from)
                    .to_vec()
            } else {
                values.to_vec()
            };
            values
                .iter()
                .map(|v| {
                    let row = match v.as_str() {
                        "infonce" => Objective::InfoNce,
                        "simcon" => Objective::SimCon,
                        "mv_simcon" => Objective::FULL,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown loss {other:?} for axis loss"
                            )))
                        }
                    };
                    let mut o = ablation_overrides(row);
                    if row == Objective::FULL {
                        o[0] = "loss_kind=mv_simcon".into();
                    }
                    Ok((v.clone(), o))
                })
                .collect()
        }
        Axis::NoiseRho => {
            need_values()?;
            values
                .iter()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| {
                        Error::Config(format!("noise_rho value {v:?} is not a number"))
                    })?;
                    Ok((v.clone(), vec![format!("swap_prob={v}")]))
                })
                .collect()
        }
        Axis::BatchSize => {
            need_values()?;
            values
                .iter()
                .map(|v| {
                    v.parse::<usize>().map_err(|_| {
                        Error::Config(format!("batch_size value {v:?} is not an integer"))
                    })?;
                    Ok((v.clone(), vec![format!("batch_size={v}")]))
                })
                .collect()
        }
        Axis::Ablation => {
            let rows: Vec<Objective> = if values.is_empty() {
                Objective::ABLATION.to_vec()
            } else {
                values
                    .iter()
                    .map(|v| {
                        Objective::ABLATION
                            .into_iter()
                            .find(|o| o.label() == v)
                            .ok_or_else(|| Error::Config(format!("unknown ablation row {v:?}")))
                    })
                    .collect::<Result<_>>()?
            };
            Ok(rows
                .into_iter()
                .map(|r| (r.label().to_owned(), ablation_overrides(r)))
                .collect())
        }
    }
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Loss => "loss",
        Axis::NoiseRho => "noise_rho",
        Axis::BatchSize => "batch_size",
        Axis::Ablation => "ablation",
    }
}

fn cmd_sweep(run: &RunArgs, axis: Axis, values: &[String]) -> Result<i32> {
    let points = sweep_points(axis, values)?;
    // resolve every point up front so config errors surface before training
    let configs: Vec<(String, ExperimentConfig)> = points
        .into_iter()
        .map(|(label, extra)| Ok((label, load(run, &extra)?)))
        .collect::<Result<_>>()?;
    let dir = out_dir(run, &configs[0].1);
    let runs_dir = dir.join("runs");
    create_dir(&runs_dir)?;

    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, (_, c))| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Result<Vec<EpochMetrics>>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let (label, cfg) = &configs[i];
            let (history, _) = run_seed(cfg, seed)?;
            let hash = cfg.hash();
            let name = format!(
                "{}_{}_{hash}_seed{seed}.csv",
                axis_name(axis),
                label.replace(['/', '+'], "-")
            );
            write_file(
                &runs_dir.join(name),
                &run_csv(&hash, seed, &history, run.timings),
            )?;
            Ok(history)
        })
        .collect();

    let field_names: Vec<&str> = train_fields(configs[0].1.loss_kind, &configs[0].1.train)
        .iter()
        .map(|(k, _)| *k)
        .collect();
    let mut out = format!(
        "axis,axis_value,{},{}\n",
        field_names.join(","),
        csv_header(run.timings)
    );
    let mut first_err = None;
    for (&(i, seed), res) in jobs.iter().zip(results) {
        let (label, cfg) = &configs[i];
        match res {
            Ok(history) => {
                let fields: Vec<String> = cfg.fields().into_iter().map(|(_, v)| v).collect();
                let prefix = format!("{},{label},{}", axis_name(axis), fields.join(","));
                for m in &history {
                    out.push_str(&format!(
                        "{prefix},{}\n",
                        csv_row(&cfg.hash(), seed, m, run.timings)
                    ));
                }
            }
            Err(e) => {
                eprintln!("run {label} seed {seed} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let path = dir.join(format!("sweep_{}.csv", axis_name(axis)));
    write_file(&path, &out)?;
    println!("{} runs -> {}", jobs.len(), path.display());
    match first_err {
        Some(e) => Err(e),
        None => Ok(EXIT_OK),
    }
}
