use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

/// Runs `fedcode` on the desk config, shortened to a few rounds.
fn fedcode(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcode"))
        .arg("--config")
        .arg(desk_config())
        .arg("--out")
        .arg(out)
        .args(["--set", "fed.rounds=3", "--set", "finetune.epochs=2"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = fedcode(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedcode(dir.path(), &["--set", "fed.roundz=2", "pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fed.roundz"));
}

#[test]
fn unknown_sweep_parameter_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedcode(dir.path(), &["sweep", "--param", "rho", "--values", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("rho") && err.contains("t, epsilon, b"), "{err}");
}

#[test]
fn bucket_count_must_be_a_power_of_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedcode(dir.path(), &["sweep", "--param", "b", "--values", "100"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pfct");
    let o = fedcode(dir.path(), &["finetune", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let o = Command::new(env!("CARGO_BIN_EXE_fedcode")).arg("--help").output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("pretrain"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(dir, &["pretrain"]);
    }
    for file in ["pretrain.metrics.json", "pretrain.log.json", "pretrain.pfct"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["--seed", "7", "pretrain"]);
    assert_ne!(
        fs::read(a.path().join("pretrain.pfct")).unwrap(),
        fs::read(c.path().join("pretrain.pfct")).unwrap()
    );
}

#[test]
fn evaluating_the_checkpoint_reproduces_pretrain_metrics() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["pretrain"]);
    let ckpt = dir.path().join("pretrain.pfct");
    ok(dir.path(), &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--split", "valid"]);
    assert_eq!(
        read_json(&dir.path().join("pretrain.metrics.json")),
        read_json(&dir.path().join("evaluate.valid.json"))
    );
}

#[test]
fn single_value_sweep_matches_pretrain() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["pretrain"]);
    let metrics = read_json(&dir.path().join("pretrain.metrics.json"));
    let csv = ok(dir.path(), &["sweep", "--param", "t", "--values", "3"]);
    assert_eq!(csv, fs::read_to_string(dir.path().join("sweep_t.csv")).unwrap());
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, ["param", "value", "domain", "recall@10", "ndcg@10", "recall@50", "ndcg@50"]);
    let mut rows = 0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(&cols[..2], ["t", "3"]);
        for (key, v) in header[3..].iter().zip(&cols[3..]) {
            let want = metrics[cols[2]][*key].as_f64().unwrap();
            assert_eq!(v.parse::<f64>().unwrap(), want, "{} {key}", cols[2]);
        }
        rows += 1;
    }
    assert_eq!(rows, 2);
}

#[test]
fn finetune_writes_prompts_and_keeps_zero_shot_floor() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["pretrain"]);
    let ckpt = dir.path().join("pretrain.pfct");
    for mode in ["light", "full"] {
        ok(dir.path(), &["--prompt", mode, "finetune", "--checkpoint", ckpt.to_str().unwrap()]);
        let log = read_json(&dir.path().join("finetune.log.json"));
        for domain in ["source", "target"] {
            let zero = log[domain]["zero_shot_valid"]["recall@10"].as_f64().unwrap();
            let best = log[domain]["best_valid"]["recall@10"].as_f64().unwrap();
            assert!(best >= zero, "{mode} {domain}: {best} < {zero}");
        }
        let tuned = dir.path().join("finetune.pfct");
        ok(dir.path(), &["evaluate", "--checkpoint", tuned.to_str().unwrap(), "--split", "test"]);
        let m = read_json(&dir.path().join("evaluate.test.json"));
        assert!(m["target"]["ndcg@50"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn files_on_disk_match_the_in_memory_generator() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let codes = dir.path().join("codes");
    ok(&data, &["gen-synthetic"]);
    for ext in ["inter", "pfce", "items.tsv"] {
        assert!(data.join(format!("target.{ext}")).exists(), "{ext}");
    }
    let files = ["--set", "data.source=files", "--set"];
    let data_dir = format!("data.dir={}", data.display());
    ok(&codes, &[files[0], files[1], files[2], &data_dir, "code-items"]);

    let synthetic = dir.path().join("a");
    let from_files = dir.path().join("b");
    let precoded = dir.path().join("c");
    ok(&synthetic, &["pretrain"]);
    ok(&from_files, &[files[0], files[1], files[2], &data_dir, "pretrain"]);
    let codes_dir = format!("data.codes={}", codes.display());
    ok(&precoded, &[files[0], files[1], files[2], &data_dir, "--set", &codes_dir, "pretrain"]);
    let want = read_json(&synthetic.join("pretrain.metrics.json"));
    assert_eq!(read_json(&from_files.join("pretrain.metrics.json")), want);
    assert_eq!(read_json(&precoded.join("pretrain.metrics.json")), want);
}

#[test]
fn untrained_model_can_be_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["evaluate"]);
    let m = read_json(&dir.path().join("evaluate.valid.json"));
    for domain in ["source", "target"] {
        for key in ["recall@10", "ndcg@10", "recall@50", "ndcg@50"] {
            let v = m[domain][key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{domain} {key} {v}");
        }
    }
}
