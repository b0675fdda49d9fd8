use std::fs;
use std::process::Command;

fn gap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gap"))
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "seed = 1\nlerning_rate = 0.1\n").unwrap();
    let out = gap().arg("--config").arg(&conf).arg("--out").arg(dir.path()).arg("report").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lerning_rate"));
}

#[test]
fn zero_jobs_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = gap().args(["--jobs", "0", "--out"]).arg(dir.path()).arg("report").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_without_a_run_log_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = gap().arg("--out").arg(dir.path()).arg("report").output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn corpora_build_writes_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("small.conf");
    fs::write(
        &conf,
        "train_docs = 4\nmemorized_docs = 2\nheld_out_docs = 2\nood_docs = 2\nvalidation_docs = 1\nmin_snippets = 2\ntask_examples = 8\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = gap().arg("--config").arg(&conf).arg("--out").arg(&out_dir).args(["corpora", "build"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(out_dir.join("corpora/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert!(out_dir.join("tasks/index.json").exists());
}
