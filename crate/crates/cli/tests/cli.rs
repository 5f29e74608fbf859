use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use concept_moe::synthdata::read_dataset;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_concept-moe"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut pending = vec![root.to_path_buf()];
    while let Some(dir) = pending.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                pending.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

const TINY: [&str; 8] = [
    "--epochs",
    "2",
    "--num_concepts",
    "3",
    "--batch_size",
    "16",
    "--learning_rate",
    "0.02",
];

/// Dataset plus trained stage 1 and stage 2 in `dir`.
fn trained(dir: &Path) {
    ok(dir, &["gen-data", "--n", "32", "--seed", "1", "--out", "d.cmds"]);
    ok(
        dir,
        &[
            "gen-data", "--n", "16", "--seed", "1", "--split", "test", "--out", "t.cmds",
        ],
    );
    let mut args = vec!["train-partition", "--train", "d.cmds", "--out", "p"];
    args.extend(TINY);
    ok(dir, &args);
    ok(
        dir,
        &[
            "train-moe",
            "--train",
            "d.cmds",
            "--partition",
            "p/partition.ckpt",
            "--out",
            "m",
        ],
    );
}

#[test]
fn gen_data_writes_readable_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["gen-data", "--spec", "default", "--n", "2048", "--out", "d.cmds"],
    );
    let data = read_dataset(dir.path().join("d.cmds")).unwrap();
    assert_eq!(data.len(), 2048);
    let manifest = fs::read_to_string(dir.path().join("d.cmds.manifest.txt")).unwrap();
    assert!(manifest.contains("version = v0.1.0"));
    assert!(manifest.contains("command = concept-moe gen-data"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        run(d, &["gen-data", "--out", "x.cmds", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(d, &["eval", "--model", "none.ckpt", "--data", "none.cmds"])
            .status
            .code(),
        Some(3)
    );
    ok(d, &["gen-data", "--n", "8", "--out", "d.cmds"]);
    let bad = run(
        d,
        &["train-partition", "--train", "d.cmds", "--epochs", "many", "--out", "p"],
    );
    assert_eq!(bad.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    fs::write(d.join("bad.cfg"), "epochs: 3\n").unwrap();
    let code = run(
        d,
        &[
            "train-partition",
            "--train",
            "d.cmds",
            "--config",
            "bad.cfg",
            "--out",
            "p",
        ],
    )
    .status
    .code();
    assert_eq!(code, Some(4));
    let code = run(
        d,
        &[
            "train-partition",
            "--train",
            "d.cmds",
            "--config",
            "missing.cfg",
            "--out",
            "p",
        ],
    )
    .status
    .code();
    assert_eq!(code, Some(3));
}

#[test]
fn help_lists_every_config_flag() {
    let out = bin().args(["train-partition", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for key in concept_moe::pipeline::KEYS {
        assert!(text.contains(&format!("--{key}")), "missing --{key}");
    }
    assert!(text.contains("--config"));
    let top = bin().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&top.stdout);
    for cmd in [
        "gen-data",
        "train-partition",
        "train-moe",
        "explain",
        "ablate",
        "gradcheck",
        "eval",
    ] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn gradcheck_passes() {
    let out = bin().args(["gradcheck", "--seeds", "20"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for case in concept_moe::gradsuite::cases() {
        assert!(text.contains(case.name), "missing {}", case.name);
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn full_flow_writes_only_declared_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(
        d,
        &[
            "explain",
            "--model",
            "m/moe.ckpt",
            "--data",
            "t.cmds",
            "--overlays",
            "2",
            "--out",
            "e",
        ],
    );
    let out = ok(
        d,
        &[
            "ablate",
            "--model",
            "m/moe.ckpt",
            "--data",
            "t.cmds",
            "--mode",
            "remove",
            "--out",
            "a",
        ],
    );
    let eval = ok(d, &["eval", "--model", "m/moe.ckpt", "--data", "t.cmds"]);
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("accuracy "));

    let csv = fs::read_to_string(d.join("a/ablation_remove.csv")).unwrap();
    assert_eq!(csv, String::from_utf8_lossy(&out.stdout));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 + 1);
    for (k, row) in rows.iter().enumerate() {
        assert!(row.starts_with(&format!("{k},")));
    }

    let names: Vec<String> = files_under(d).iter().map(|p| p.display().to_string()).collect();
    assert_eq!(
        names,
        [
            "a/ablation_remove.csv",
            "a/manifest.txt",
            "d.cmds",
            "d.cmds.manifest.txt",
            "e/importance.csv",
            "e/manifest.txt",
            "e/overlay_0.ppm",
            "e/overlay_1.ppm",
            "e/purity.csv",
            "m/config.txt",
            "m/manifest.txt",
            "m/moe.ckpt",
            "m/moe_metrics.csv",
            "p/config.txt",
            "p/manifest.txt",
            "p/partition.ckpt",
            "p/partition_metrics.csv",
            "t.cmds",
            "t.cmds.manifest.txt",
        ]
    );
    let manifest = fs::read_to_string(d.join("m/manifest.txt")).unwrap();
    assert!(manifest.contains("config_sha256 = "));
    assert!(manifest.contains("artifacts = moe.ckpt, moe_metrics.csv, config.txt"));
}

#[test]
fn identical_invocations_give_identical_csvs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    trained(a.path());
    trained(b.path());
    for file in [
        "p/partition_metrics.csv",
        "m/moe_metrics.csv",
        "p/manifest.txt",
        "m/manifest.txt",
    ] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    for dir in [a.path(), b.path()] {
        ok(
            dir,
            &[
                "ablate",
                "--model",
                "m/moe.ckpt",
                "--data",
                "t.cmds",
                "--mode",
                "add",
                "--out",
                "x",
            ],
        );
    }
    assert_eq!(
        fs::read(a.path().join("x/ablation_add.csv")).unwrap(),
        fs::read(b.path().join("x/ablation_add.csv")).unwrap()
    );
}

#[test]
fn flags_override_config_file_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--n", "16", "--out", "d.cmds"]);
    fs::write(
        d.join("run.cfg"),
        "epochs = 2\nnum_concepts = 2\nbatch_size = 8\nlearning_rate = 0.02\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "train-partition",
            "--train",
            "d.cmds",
            "--config",
            "run.cfg",
            "--epochs",
            "1",
            "--out",
            "one",
        ],
    );
    let csv = fs::read_to_string(d.join("one/partition_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(fs::read_to_string(d.join("one/config.txt"))
        .unwrap()
        .contains("num_concepts = 2"));

    ok(
        d,
        &[
            "train-partition",
            "--train",
            "d.cmds",
            "--config",
            "run.cfg",
            "--out",
            "two",
        ],
    );
    ok(
        d,
        &[
            "train-partition",
            "--train",
            "d.cmds",
            "--resume",
            "one/partition.ckpt",
            "--epochs",
            "2",
            "--out",
            "resumed",
        ],
    );
    assert_eq!(
        fs::read(d.join("two/partition_metrics.csv")).unwrap(),
        fs::read(d.join("resumed/partition_metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("two/partition.ckpt")).unwrap(),
        fs::read(d.join("resumed/partition.ckpt")).unwrap()
    );
}
