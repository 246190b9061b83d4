use std::fs;
use std::path::Path;
use std::process::{Command, Output};

mod common;

const TINY: &str = r#"
seed = 3

[data.synthetic]
num_classes = 4
samples_per_class = 15
ood_classes = 2

[[data.synthetic.modalities]]
name = "vision"
dim = 6
separation = 6.0
noise = 1.0
ambiguous_fraction = 0.5

[[data.synthetic.modalities]]
name = "audio"
dim = 5
separation = 6.0
noise = 1.0
ambiguous_fraction = 0.5

[model]
hidden = [8, 6]

[train]
learning_rate = 0.01
max_epochs = 2

[inference]
mc_passes = 4
"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayes-fusion"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stage(cmd: &str, cfg: &Path, out: &Path) -> Output {
    cli(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "2"])
}

#[test]
fn fuse_before_avu_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    for cmd in ["gen-synth", "train", "predict"] {
        assert!(stage(cmd, &cfg, &out).status.success(), "{cmd} failed");
    }
    let res = stage("fuse", &cfg, &out);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("run `avu` first"), "{err}");
}

#[test]
fn unknown_flags_are_rejected_and_help_lists_flags() {
    assert!(!cli(&["train", "--bogus"]).status.success());
    let help = String::from_utf8_lossy(&cli(&["predict", "--help"]).stdout).into_owned();
    for flag in ["--config", "--seed", "--out", "--threads"] {
        assert!(help.contains(flag), "{flag} missing from help:\n{help}");
    }
}

#[test]
fn reruns_produce_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for out in &runs {
        for cmd in ["gen-synth", "train", "predict", "avu", "fuse", "ood", "eval"] {
            let res = stage(cmd, &cfg, out);
            assert!(res.status.success(), "{cmd}: {}", String::from_utf8_lossy(&res.stderr));
        }
    }
    let csvs = common::files_with_extension(&runs[0], "csv");
    assert!(csvs.len() > 20);
    for rel in csvs {
        let a = fs::read(runs[0].join(&rel)).unwrap();
        let b = fs::read(runs[1].join(&rel)).unwrap();
        assert!(a == b, "{} differs", rel.display());
    }
}
