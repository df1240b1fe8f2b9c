use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn binas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binas")).current_dir(root()).env_remove("BINAS_OUTPUT_DIR").args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const GENOTYPE: &str = "binas-genotype v1
[normal]
concat = 1 2
edge 1 -1 sep_conv_3x3
edge 1 0 skip_connect
edge 2 0 dil_conv_3x3
edge 2 1 max_pool_3x3
[reduce]
concat = 1 2
edge 1 -1 avg_pool_3x3
edge 1 0 sep_conv_5x5
edge 2 -1 dil_conv_5x5
edge 2 1 skip_connect
";

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&binas(&["--help"])), 0);
    assert_eq!(code(&binas(&["--version"])), 0);
    assert_eq!(code(&binas(&["search", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&binas(&[])), 1);
    assert_eq!(code(&binas(&["search", "--no-such-flag"])), 1);
    assert_eq!(code(&binas(&["search", "--binarize", "ternary"])), 1);
    assert_eq!(code(&binas(&["--threads", "0", "search"])), 1);
}

#[test]
fn config_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[search]\nrounds = \"three\"\n").unwrap();
    let o = binas(&["search", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));

    let invalid = dir.path().join("invalid.toml");
    std::fs::write(&invalid, "[space]\noperations = 12\n").unwrap();
    assert_eq!(code(&binas(&["search", "--config", invalid.to_str().unwrap()])), 1);

    let missing = dir.path().join("none.toml");
    assert_eq!(code(&binas(&["search", "--config", missing.to_str().unwrap()])), 2);
    assert_eq!(code(&binas(&["export-dot", "--genotype", missing.to_str().unwrap()])), 2);

    let g = dir.path().join("g.txt");
    std::fs::write(&g, GENOTYPE.replace("skip_connect", "conv_7x7")).unwrap();
    assert_eq!(code(&binas(&["export-dot", "--genotype", g.to_str().unwrap()])), 2);
}

#[test]
fn export_dot_to_stdout_and_directory() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.txt");
    std::fs::write(&g, GENOTYPE).unwrap();
    let o = binas(&["export-dot", "--genotype", g.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let dot = String::from_utf8(o.stdout).unwrap();
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.lines().filter(|l| l.contains("->") && l.contains("label=\"")).count(), 8);

    let out = dir.path().join("dots");
    assert_eq!(code(&binas(&["export-dot", "--genotype", g.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])), 0);
    for f in ["genotype.dot", "normal.dot", "reduce.dot"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

/// A seconds-scale configuration on a slice of the MNIST subset.
pub fn micro_config(dir: &Path) -> PathBuf {
    let text = format!(
        "seed = 3
output_dir = {out:?}

[data]
path = {data:?}
format = \"mnist-idx\"
train_limit = 300
test_limit = 200

[space]
nodes = 2

[supernet]
cells = 2
reduction_positions = [1]
init_channels = 4
stem_stride = 2

[search]
warmup_epochs = 2
frozen_epochs = 1
rounds = 1
research_epochs = 1
reduction_batch = 64

[optimizer]
batch_size = 32

[train]
cells = 2
init_channels = 4
reduction_positions = [1]
stem_stride = 2
epochs = 2
batch_size = 32
",
        out = dir.join("from-file"),
        data = root().join("data/mnist5k"),
    );
    let p = dir.join("micro.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn output_dir_precedence_flag_env_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let g = dir.path().join("g.txt");
    std::fs::write(&g, GENOTYPE).unwrap();
    let args = ["train", "--config", cfg.to_str().unwrap(), "--genotype", g.to_str().unwrap(), "--epochs", "1"];

    let o = binas(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("from-file/model.bin").is_file());

    let env_dir = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_binas")).current_dir(root()).env("BINAS_OUTPUT_DIR", &env_dir).args(args).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(env_dir.join("train_summary.json").is_file());

    let flag_dir = dir.path().join("from-flag");
    let mut with_flag = args.to_vec();
    with_flag.extend(["--output-dir", flag_dir.to_str().unwrap()]);
    let o = Command::new(env!("CARGO_BIN_EXE_binas")).current_dir(root()).env("BINAS_OUTPUT_DIR", &env_dir).args(&with_flag).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(flag_dir.join("train_summary.json").is_file());

    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["epochs"], 1);
    let model = flag_dir.join("model.bin");
    for packed in [false, true] {
        let mut a = vec!["eval", "--config", cfg.to_str().unwrap(), "--model", model.to_str().unwrap()];
        if packed {
            a.push("--packed");
        }
        let o = binas(&a);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(r["images"], 200);
        assert!((0.0..=1.0).contains(&r["accuracy"].as_f64().unwrap()));
    }

    std::fs::write(&model, b"BNASMDL1 truncated").unwrap();
    assert_eq!(code(&binas(&["eval", "--config", cfg.to_str().unwrap(), "--model", model.to_str().unwrap()])), 2);
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = dir.path().join("s");
    let o = binas(&["search", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap(), "--stop-after", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = out.join("checkpoint.json");
    assert!(ck.is_file());
    let o = binas(&["search", "--config", cfg.to_str().unwrap(), "--seed", "9", "--output-dir", out.to_str().unwrap(), "--resume", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}
