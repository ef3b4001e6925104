//! End-to-end runs of the `mocolab` binary on the smoke config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mocolab_cli::manifest::{CellState, RunManifest};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn mocolab(args: &[&str], out: &Path, config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mocolab"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(out: &Path, command: &str) -> RunManifest {
    let text = fs::read_to_string(out.join(format!("manifest-{command}.json"))).expect("manifest");
    serde_json::from_str(&text).expect("manifest parses")
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mocolab(&["--help"], dir.path(), None)), 0);
    assert_eq!(code(&mocolab(&["experiment", "--bogus"], dir.path(), None)), 1);
    assert_eq!(code(&mocolab(&["experiment"], dir.path(), None)), 1);

    let bad = dir.path().join("bad.toml");
    let text = fs::read_to_string(smoke_config())
        .unwrap()
        .replace("replicates = 2", "replicas = 2");
    fs::write(&bad, text).unwrap();
    let o = mocolab(&["experiment"], &dir.path().join("out"), Some(&bad));
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("replicas"), "{}", stderr(&o));

    let dangling = dir.path().join("dangling.toml");
    let text = fs::read_to_string(smoke_config()).unwrap().replace(
        "dataset = \"target\"\n\n[finetune]",
        "dataset = \"nowhere\"\n\n[finetune]",
    );
    fs::write(&dangling, text).unwrap();
    assert_eq!(
        code(&mocolab(&["experiment"], &dir.path().join("out"), Some(&dangling))),
        1
    );
}

#[test]
fn synth_data_exports_folders_that_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = mocolab(&["synth-data"], &out, Some(&smoke_config()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["generic", "target", "related"] {
        assert!(out.join(name).join("labels.csv").exists());
    }
    assert_eq!(manifest(&out, "synth-data").command, "synth-data");
    assert_eq!(code(&mocolab(&["synth-data"], &out, Some(&smoke_config()))), 1);

    let folder_config = dir.path().join("folder.toml");
    let text = fs::read_to_string(smoke_config()).unwrap().replace(
        "synthetic = { domain = \"small_domain\", n = 120, shift = 0.6, image_size = 16 }",
        &format!("folder = {{ path = {:?} }}", out.join("target")),
    );
    fs::write(&folder_config, text).unwrap();
    let o = mocolab(
        &["finetune", "--init", "baseline", "--fraction", "0.5"],
        &dir.path().join("ft"),
        Some(&folder_config),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn experiment_writes_tables_figures_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mocolab(&["experiment"], &out, Some(&smoke_config()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "results/cells.csv",
        "results/summary.csv",
        "results/table_linear.csv",
        "results/table_end_to_end.csv",
        "figures/transfer_linear.png",
        "figures/transfer_end_to_end.png",
        "config-experiment.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = manifest(&out, "experiment");
    // 4 inits x 2 modes x 2 fractions x 2 replicates.
    assert_eq!(m.cells.len(), 32);
    assert!(m.cells.iter().all(|c| c.state == CellState::Completed));
    assert_eq!(m.subset_sizes.len(), 2);
    assert!(m.artifacts.iter().all(|a| out.join(a).exists()), "{:?}", m.artifacts);

    let table = fs::read_to_string(out.join("results/table_linear.csv")).unwrap();
    let header = table.lines().next().unwrap();
    for init in ["baseline", "moco_in_domain", "moco_related", "moco_limited"] {
        assert!(header.contains(init), "{header}");
    }
    assert!(table.lines().any(|l| l.starts_with("10%")), "{table}");

    let summary = fs::read(out.join("results/summary.csv")).unwrap();
    assert_eq!(code(&mocolab(&["experiment"], &out, Some(&smoke_config()))), 1);
    let o = mocolab(&["experiment", "--resume"], &out, Some(&smoke_config()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out, "experiment");
    assert!(m.cells.iter().all(|c| c.state == CellState::Resumed));
    assert_eq!(fs::read(out.join("results/summary.csv")).unwrap(), summary);

    fs::remove_file(out.join("figures/transfer_linear.png")).unwrap();
    let o = mocolab(&["plot"], &out, None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("figures/transfer_linear.png").exists());
}

#[test]
fn finetune_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mocolab(
        &[
            "finetune",
            "--init",
            "moco_limited",
            "--mode",
            "linear",
            "--fraction",
            "0.1",
            "--replicate",
            "1",
        ],
        &out,
        Some(&smoke_config()),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
    for f in ["model.ckpt", "history.csv", "predictions.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(run.join("predictions.csv")).unwrap();
    assert!(header.starts_with("score_0,label_0"), "{header}");
    assert!(out.join("checkpoints/moco_limited-n7.ckpt").exists());

    let o = mocolab(
        &[
            "evaluate",
            "--predictions",
            run.join("predictions.csv").to_str().unwrap(),
        ],
        &out,
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: mocolab::MetricReport =
        serde_json::from_str(&fs::read_to_string(out.join("evaluate/predictions.json")).unwrap()).unwrap();
    assert_eq!(report.resamples, 500);

    let o = mocolab(
        &[
            "finetune",
            "--checkpoint",
            run.join("model.ckpt").to_str().unwrap(),
            "--mode",
            "end_to_end",
        ],
        &dir.path().join("again"),
        Some(&smoke_config()),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = mocolab(&["finetune", "--init", "nonexistent"], &out, Some(&smoke_config()));
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = mocolab(
        &["finetune", "--init", "baseline", "--fraction", "1.5"],
        &out,
        Some(&smoke_config()),
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn similarity_and_epoch_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mocolab(&["similarity"], &out, Some(&smoke_config()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let scores = fs::read_to_string(out.join("similarity/scores.csv")).unwrap();
    // 3 datasets give 6 unordered pairs with self-pairs, at 2 layers.
    assert_eq!(scores.lines().count(), 1 + 12);
    assert!(out.join("figures/similarity.png").exists());

    let o = mocolab(&["epoch-sweep"], &out, Some(&smoke_config()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = fs::read_to_string(out.join("sweep/sweep.csv")).unwrap();
    // 4 inits x 2 grid points.
    assert_eq!(sweep.lines().count(), 1 + 8);
    assert_eq!(sweep.lines().filter(|l| l.ends_with("true")).count(), 4);
    assert!(out.join("figures/epoch_sweep.png").exists());
}
