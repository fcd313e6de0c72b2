use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_onj-uad"))
}

/// Copies the smoke config into `dir` with its work dir pointed at `dir/run`.
fn smoke_config(dir: &Path) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg");
    let text = fs::read_to_string(src).unwrap();
    let text: String = text
        .lines()
        .map(|l| if l.starts_with("work_dir") { "work_dir = run" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.join("smoke.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn run(cfg: &Path, cmd: &str, extra: &[&str]) -> Output {
    bin().arg(cmd).arg("--config").arg(cfg).arg("-q").args(extra).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_commands() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for c in ["gen", "train1", "train2", "reconstruct", "score", "segment", "export", "all"] {
        assert!(text.contains(c), "{c} missing from help");
    }
}

#[test]
fn unknown_key_is_rejected_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\n[train]\nlearning_rat = 0.1\n").unwrap();
    let o = run(&cfg, "gen", &[]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("learning_rat"), "{err}");
    assert!(err.contains('3'), "{err}");
}

#[test]
fn bad_override_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let o = run(&cfg, "gen", &["--set", "train.batch_size=zero"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("batch_size"));
}

#[test]
fn missing_prerequisite_names_producer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let o = run(&cfg, "train1", &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("`onj-uad gen`"), "{}", stderr(&o));

    let o = run(&cfg, "train2", &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("`onj-uad train1`"), "{}", stderr(&o));

    let o = run(&cfg, "score", &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("first"), "{}", stderr(&o));
}

#[test]
fn step_by_step_chain_matches_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    for cmd in ["gen", "train1", "train2", "reconstruct", "score", "segment", "export"] {
        let o = run(&cfg, cmd, &[]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        let record = dir.path().join("run/records").join(format!("{cmd}.txt"));
        assert!(record.exists(), "no record for {cmd}");
    }
    let root = dir.path().join("run");
    assert!(root.join("ckpt/stage1.ckpt").exists());
    assert!(root.join("ckpt/stage2.ckpt").exists());

    let mut ids = Vec::new();
    for m in ["test_healthy", "test_lesioned"] {
        let text = fs::read_to_string(root.join(format!("data/{m}.manifest"))).unwrap();
        ids.extend(text.lines().filter_map(|l| l.split_whitespace().next()).map(String::from));
    }
    assert_eq!(ids.len(), 4);

    let scores = fs::read_to_string(root.join("reports/scores.txt")).unwrap();
    let lines: Vec<Vec<&str>> = scores.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(lines.len(), 2 * ids.len());
    for (half, mode) in ["dual_recon", "input_vs_recon"].iter().enumerate() {
        for (i, id) in ids.iter().enumerate() {
            let l = &lines[half * ids.len() + i];
            assert_eq!(l.len(), 3);
            assert_eq!(l[0], id);
            assert_eq!(l[1], *mode);
            let s: f64 = l[2].parse().unwrap();
            assert!(s >= 0.0 && s.is_finite());
        }
    }

    let dice = fs::read_to_string(root.join("reports/dice.txt")).unwrap();
    assert!(dice.lines().last().unwrap().starts_with("mean "));
    for id in ids.iter().filter(|id| id.starts_with("lesioned")) {
        assert!(root.join(format!("seg/{id}_map.vol")).exists());
        assert!(root.join(format!("stl/{id}/regions.txt")).exists());
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    assert!(run(&cfg, "all", &["--threads", "1"]).status.success());
    let root = dir.path().join("run");
    let one = fs::read(root.join("reports/scores.txt")).unwrap();
    assert!(run(&cfg, "reconstruct", &["--threads", "3"]).status.success());
    assert!(run(&cfg, "score", &[]).status.success());
    let three = fs::read(root.join("reports/scores.txt")).unwrap();
    assert_eq!(one, three);
}
