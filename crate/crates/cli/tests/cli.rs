use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 7
[dataset]
counts = [6, 6, 1]
frames = 16
resolution = 8
[codec]
kind = "identity"
[denoiser]
widths = [8, 16]
text_dim = 8
max_groups = 4
[schedule]
steps = 100
[stage1]
steps = 5
batch_size = 2
[stage2]
steps = 5
batch_size = 2
[generate]
num_candidates = 4
steps = 5
[filter]
k = 1
steps = 5
[metrics]
knn = 2
pca_dim = 4
[downstream]
seeds = 2
steps = 5
width = 4
oracle_clips_per_class = 2
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn clipdiff(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipdiff"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run_manifest.json" {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn make_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = clipdiff(&["make-data"], &write_config(d.path(), TINY));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (ta, tb) = (tree(&a.path().join("data")), tree(&b.path().join("data")));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn filter_without_candidates_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert!(clipdiff(&["make-data"], &cfg).status.success());
    let out = clipdiff(&["filter"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing synthetic manifest"), "{err}");
    assert!(err.contains("stage filter failed"), "{err}");
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TINY.replace("counts = [6, 6, 1]", "counts = [6, 6]");
    let out = clipdiff(&["make-data"], &write_config(dir.path(), &bad));
    assert_eq!(out.status.code(), Some(2));
    let unknown = format!("{TINY}\n[bogus]\nx = 1\n");
    let out = clipdiff(&["make-data"], &write_config(dir.path(), &unknown));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_config_round_trips() {
    let out = Command::new(env!("CARGO_BIN_EXE_clipdiff")).arg("default-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = clipdiff::pipeline::PipelineConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, clipdiff::pipeline::PipelineConfig::default());
}

#[test]
fn full_pipeline_prints_ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = clipdiff(&["full-pipeline"], &write_config(dir.path(), TINY));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for row in ["real_only", "with_rs", "without_rs", "oracle"] {
        assert!(stdout.contains(row), "missing {row} in\n{stdout}");
    }
    assert!(dir.path().join("output/downstream/ablation.json").exists());
}
