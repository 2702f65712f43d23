use std::fs;
use std::path::{Path, PathBuf};

use simcon::cli::{run, EXIT_CONFIG, EXIT_OK, EXIT_VERIFY};

const TINY: &str = r#"
loss_kind = "mv_simcon"
classes = 4
samples = 320
eval_samples = 40
image_dim = 12
text_dim = 10
image_hidden = [8]
text_hidden = [8]
embed_dim = 6
head_hidden = 12
batch_size = 32
epochs = 2
seeds = [0]
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("simcon").chain(args.iter().copied()))
}

fn files_with_suffix(dir: &Path, suffix: &str) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(suffix))
        .collect();
    names.sort();
    names
}

#[test]
fn gradcheck_default_passes() {
    assert_eq!(cli(&["gradcheck", "--instances", "3"]), EXIT_OK);
}

#[test]
fn corrupted_gradient_is_a_verification_failure() {
    assert_eq!(
        cli(&["gradcheck", "--instances", "3", "--corrupt", "simcon"]),
        EXIT_VERIFY
    );
}

#[test]
fn oracle_diff_exit_codes() {
    assert_eq!(cli(&["oracle-diff", "--trials", "12"]), EXIT_OK);
    assert_eq!(cli(&["oracle-diff", "--trials", "0"]), EXIT_CONFIG);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(cli(&["frobnicate"]), EXIT_CONFIG);
    assert_eq!(cli(&["train"]), EXIT_CONFIG);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn missing_loss_kind_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "samples = 100\nseeds = [0]\n");
    let out = dir.path().join("out");
    assert_eq!(
        cli(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        EXIT_CONFIG
    );
    assert!(!out.exists());
}

#[test]
fn unknown_key_and_missing_file_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "loss_kind = \"simcon\"\nbatchsize = 12\n");
    assert_eq!(
        cli(&["train", "--config", cfg.to_str().unwrap()]),
        EXIT_CONFIG
    );
    let missing = dir.path().join("nope.toml");
    assert_eq!(
        cli(&["train", "--config", missing.to_str().unwrap()]),
        EXIT_CONFIG
    );
}

#[test]
fn two_seeds_write_two_csvs_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let code = cli(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "3,4",
    ]);
    assert_eq!(code, EXIT_OK);
    let csvs = files_with_suffix(&out, ".csv");
    assert_eq!(csvs.len(), 2);
    assert!(csvs[0].ends_with("_seed3.csv") && csvs[1].ends_with("_seed4.csv"));
    for name in &csvs {
        let text = fs::read_to_string(out.join(name)).unwrap();
        // header plus one row per epoch
        assert_eq!(text.lines().count(), 3);
    }
    let summaries = files_with_suffix(&out, "_summary.json");
    assert_eq!(summaries.len(), 1);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(&summaries[0])).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
    assert_eq!(summary["objective"], "mv_simcon");
    assert!(summary["aggregate"]["final_recall_i2t"]["std"].is_number());
}

#[test]
fn repeated_train_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut contents = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let code = cli(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
        let csv = &files_with_suffix(&out, ".csv")[0];
        contents.push(fs::read(out.join(csv)).unwrap());
    }
    assert_eq!(contents[0], contents[1]);
}

#[test]
fn set_overrides_change_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let path = cfg.to_str().unwrap();
    let o = out.to_str().unwrap();
    assert_eq!(cli(&["train", "--config", path, "--out", o]), EXIT_OK);
    assert_eq!(
        cli(&[
            "train",
            "--config",
            path,
            "--out",
            o,
            "--set",
            "swap_prob=0.3"
        ]),
        EXIT_OK
    );
    assert_eq!(files_with_suffix(&out, "_summary.json").len(), 2);
    assert_eq!(
        cli(&[
            "train",
            "--config",
            path,
            "--out",
            o,
            "--set",
            "swap_prob=oops"
        ]),
        EXIT_CONFIG
    );
}

fn sweep_rows(out: &Path, axis: &str) -> Vec<Vec<String>> {
    let text = fs::read_to_string(out.join(format!("sweep_{axis}.csv"))).unwrap();
    text.lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn ablation_sweep_has_the_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("epochs = 2", "epochs = 1"));
    let out = dir.path().join("out");
    let code = cli(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--axis",
        "ablation",
    ]);
    assert_eq!(code, EXIT_OK);
    let rows = sweep_rows(&out, "ablation");
    let header = &rows[0];
    assert_eq!(&header[..2], ["axis", "axis_value"]);
    let width = header.len();
    assert!(rows.iter().all(|r| r.len() == width));
    let labels: Vec<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(
        labels,
        [
            "infonce",
            "simcon",
            "simcon+views",
            "simcon+views+ncs",
            "mv_simcon"
        ]
    );
    assert_eq!(files_with_suffix(&out.join("runs"), ".csv").len(), 5);
}

#[test]
fn batch_size_sweep_runs_every_value_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY
            .replace("epochs = 2", "epochs = 1")
            .replace("loss_kind = \"mv_simcon\"", "loss_kind = \"infonce\""),
    );
    let out = dir.path().join("out");
    let code = cli(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--axis",
        "batch-size",
        "--values",
        "32,64,128,256",
        "--seeds",
        "0,1",
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(files_with_suffix(&out.join("runs"), ".csv").len(), 8);
    assert_eq!(sweep_rows(&out, "batch_size").len(), 1 + 8);
}

#[test]
fn noise_sweeps_for_two_losses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("epochs = 2", "epochs = 1"));
    let out = dir.path().join("out");
    for loss in ["infonce", "mv_simcon"] {
        let code = cli(&[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--axis",
            "noise_rho",
            "--values",
            "0,0.2,0.4",
            "--set",
            &format!("loss_kind={loss}"),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    assert_eq!(files_with_suffix(&out.join("runs"), ".csv").len(), 6);
}

#[test]
fn sweep_without_values_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(
        cli(&[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--axis",
            "batch-size"
        ]),
        EXIT_CONFIG
    );
}
