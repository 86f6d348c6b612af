use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
grid = 16
patch = 4
d = 16
layers = 1
heads = 2
d_text = 16
samples_per_class_train = 8
gallery_per_class_test = 5
queries_per_class_test = 2
corruption_rate = 0.25
batch_size = 16
epochs = 2
k_list = 10,20
";

fn dmwa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmwa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dmwa(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_and_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.cfg");
    fs::write(&config, SMALL).unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");

    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    assert!(data.join("manifest").exists());

    ok(&["train", "--config", s(&config), "--out", s(&run), "--data", s(&data)]);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    // 12 seen classes x 8 pairs = 96 pairs, 6 steps of 16, 2 epochs.
    assert_eq!(log.lines().count(), 1 + 12);
    assert!(run.join("checkpoints/epoch_000").is_dir());
    assert!(run.join("checkpoints/epoch_001").is_dir());

    for mode in ["fast", "cross"] {
        let json = ok(&["eval", "--config", s(&config), "--out", s(&run), "--data", s(&data), "--mode", mode]);
        assert!(json.contains("map_all"), "{json}");
        assert!(run.join(format!("eval/report_{mode}.json")).exists());
        let per_query = fs::read_to_string(run.join(format!("eval/report_{mode}_per_query.csv"))).unwrap();
        // 4 unseen classes x 2 queries.
        assert_eq!(per_query.lines().count(), 1 + 8);
    }

    ok(&[
        "dump-weights",
        "--config",
        s(&config),
        "--out",
        s(&run),
        "--data",
        s(&data),
        "--epochs",
        "2",
    ]);
    let weights = fs::read_to_string(run.join("weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 1 + 2 * 6 * 16);
}

#[test]
fn unknown_override_is_rejected() {
    let out = dmwa(&["gen-data", "--set", "no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn eval_without_checkpoint_reports_missing_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.cfg");
    fs::write(&config, SMALL).unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let out = dmwa(&["eval", "--config", s(&config), "--out", s(&tmp.path().join("empty")), "--data", s(&data)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));
}
