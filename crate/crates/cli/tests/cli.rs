use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::CommandFactory;
use srsupm_cli::Cli;

const SMALL: &str = "[data]\ninput = \"data/interactions.tsv\"\n\n[model.encoder]\nd = 8\nmax_len = 6\nlayers = 1\n\n[train]\nmax_epochs = 2\npatience = 1\n";

fn srsupm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srsupm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = srsupm(args, cwd);
    assert!(
        out.status.success(),
        "srsupm {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Synthetic log plus a prepared store in `run/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("run.toml"), SMALL).unwrap();
    ok(&["--seed", "3", "--out-dir", "data", "synth", "--users", "150", "--items", "60", "--categories", "8"], root);
    ok(&["--out-dir", "run", "prepare", "-c", "run.toml"], root);
    dir
}

#[test]
fn every_argument_has_help() {
    let cmd = Cli::command();
    for arg in cmd.get_arguments() {
        assert!(arg.get_help().is_some(), "global --{} has no help", arg.get_id());
    }
    for sub in cmd.get_subcommands() {
        assert!(sub.get_about().is_some(), "{} has no description", sub.get_name());
        for arg in sub.get_arguments() {
            assert!(
                arg.is_global_set() || arg.get_help().is_some(),
                "{} --{} has no help",
                sub.get_name(),
                arg.get_id()
            );
        }
    }
    Cli::command().debug_assert();
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nlearnin_rate = 0.1\n").unwrap();
    let out = srsupm(&["train", "-c", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learnin_rate"), "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = srsupm(&["eval", "--checkpoint", "nowhere/model.ckpt"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nowhere/model.ckpt"), "{}", stderr(&out));
}

#[test]
fn conflicting_ablation_flags_are_rejected() {
    let w = workspace();
    let out = srsupm(&["--out-dir", "run", "train", "-c", "run.toml", "--no-pmi", "--no-pmsid"], w.path());
    assert!(!out.status.success());
}

#[test]
fn busy_output_directory_is_refused() {
    let w = workspace();
    fs::write(w.path().join("run/.srsupm.lock"), "").unwrap();
    let out = srsupm(&["--out-dir", "run", "train", "-c", "run.toml"], w.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("in use"), "{}", stderr(&out));
}

#[test]
fn train_eval_analyze_write_provenanced_outputs() {
    let w = workspace();
    let root = w.path();
    ok(&["--out-dir", "run", "--seed", "4", "train", "-c", "run.toml"], root);
    ok(&["eval", "--checkpoint", "run/model.ckpt"], root);
    let first = fs::read(root.join("run/metrics.json")).unwrap();
    ok(&["eval", "--checkpoint", "run/model.ckpt"], root);
    assert_eq!(first, fs::read(root.join("run/metrics.json")).unwrap());
    ok(&["analyze", "--checkpoint", "run/model.ckpt", "--max-pairs", "500"], root);

    let metrics: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let hash = metrics["provenance"]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(metrics["provenance"]["seed"], 4);
    let header = format!("# config_hash={hash} seed=4");
    for f in ["train_log.csv", "metrics_by_level.csv", "heatmap.csv", "distances.csv", "subgroup.csv"] {
        let text = fs::read_to_string(root.join("run").join(f)).unwrap();
        assert_eq!(text.lines().next().unwrap(), header, "{f}");
    }
    assert!(!root.join("run/.srsupm.lock").exists());
}

#[test]
fn ablate_tabulates_five_variants() {
    let w = workspace();
    ok(&["--out-dir", "run", "ablate", "-c", "run.toml"], w.path());
    let text = fs::read_to_string(w.path().join("run/ablation.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 5);
    for v in ["full", "w/o PMSID", "w/o PMSIM", "w/o PMSID&PMSIM", "w/o PMI"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{v},"))), "{v} missing");
    }
}

#[test]
fn sweep_records_failed_points() {
    let w = workspace();
    ok(
        &["--out-dir", "sw", "sweep", "-c", "run.toml", "--axis", "gamma2", "--values", "0,-1"],
        w.path(),
    );
    let text = fs::read_to_string(w.path().join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].contains("gamma2"), "{}", rows[1]);
}
