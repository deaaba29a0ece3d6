use std::path::Path;
use std::process::{Command, Output};

fn kattn(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kattn"));
    cmd.args(args).env_remove("KATTN_OUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("KATTN_OUT_DIR", dir);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = kattn(&[], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flags_and_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["decompose-check", "--bogus"],
        vec!["frobnicate"],
        vec!["--out", out, "train", "--variant", "softmax"],
        vec!["--out", out, "train", "--task", "translation"],
        vec!["--out", out, "gradcheck", "--variant", "nope"],
    ] {
        let o = kattn(&args, None);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let out = dir.path().join("out");
    let o = kattn(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "decompose-check",
        ],
        None,
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
    let missing = kattn(&["--config", "/nonexistent.toml", "decompose-check"], None);
    assert_eq!(code(&missing), 2);
}

#[test]
fn help_exits_0() {
    let o = kattn(&["--help"], None);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "decompose-check",
        "kernel-converge",
        "sparsity-sweep",
        "train",
        "bench-complexity",
        "gradcheck",
    ] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn decompose_check_passes_and_writes_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let o = kattn(
        &["decompose-check", "--seed", "1", "--trials", "1000"],
        Some(dir.path()),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&dir.path().join("decomposition.csv"));
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# seed=1 config_hash="));
    assert!(lines.next().unwrap().starts_with("case,"));
}

#[test]
fn out_flag_overrides_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = kattn(
        &["--out", flag_dir.path().to_str().unwrap(), "sparsity-sweep"],
        Some(env_dir.path()),
    );
    assert_eq!(code(&o), 0);
    assert!(flag_dir.path().join("sparsity.csv").exists());
    assert!(!env_dir.path().join("sparsity.csv").exists());
}

#[test]
fn train_writes_metrics_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = kattn(
        &[
            "train",
            "--task",
            "seq",
            "--variant",
            "mikan",
            "--seed",
            "3",
            "--epochs",
            "4",
        ],
        Some(dir.path()),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = read(&dir.path().join("train_seq_mikan_metrics.csv"));
    assert!(metrics
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("task,variant,seed"));
    assert!(metrics.lines().nth(2).unwrap().starts_with("seq,mikan,3,"));
    let log = read(&dir.path().join("train_seq_mikan_log.csv"));
    assert_eq!(log.lines().count(), 2 + 4);
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for args in [
        vec!["gradcheck", "--variant", "ikan", "--seed", "5"],
        vec!["bench-complexity", "--seed", "5"],
        vec![
            "train",
            "--task",
            "graph",
            "--variant",
            "dot",
            "--epochs",
            "3",
            "--seed",
            "5",
        ],
    ] {
        let outs: Vec<Output> = dirs.iter().map(|d| kattn(&args, Some(d.path()))).collect();
        assert_eq!(outs[0].stdout, outs[1].stdout, "{args:?}");
        assert_eq!(code(&outs[0]), code(&outs[1]));
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in names {
        assert_eq!(
            std::fs::read(dirs[0].path().join(&n)).unwrap(),
            std::fs::read(dirs[1].path().join(&n)).unwrap()
        );
    }
}
