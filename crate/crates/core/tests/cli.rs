use std::path::Path;
use std::process::{Command, Output};

use ealm::pipeline::{load_jsonl, RunReport, Stage, TIMESTAMP_FIELDS};

const TINY: &str = "bits_grid = [8, 32]
epochs_grid = [1]
k = 1
prune_ratios = [0.5]
nm_patterns = [[2, 4]]
max_new_tokens = 6

[lm]
d_model = 16
n_heads = 2
d_ff = 32
max_seq = 64

[data.synthetic]
n_train = 6
n_eval = 3
";

fn ealm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ealm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stripped(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    for f in TIMESTAMP_FIELDS {
        v.as_object_mut().unwrap().remove(f);
    }
    v
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bits_grid = [4, 8]\n");
    assert_eq!(ealm(&["run-all", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "no_such_key = 1\n");
    assert_eq!(ealm(&["finetune-grid", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(ealm(&["run-all", "--meter", "bogus"]).status.code(), Some(2));
    assert_eq!(ealm(&["run-all", "--w", "1.5"]).status.code(), Some(2));
    let missing = dir.path().join("nope.toml").display().to_string();
    assert_eq!(ealm(&["rank", "--config", &missing]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"prompt\": \"x\"}\n").unwrap();
    let out = ealm(&["stats", &bad.display().to_string()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1:"));

    // ranking before fine-tuning has no stage file to read
    let out_dir = dir.path().join("out").display().to_string();
    assert_eq!(ealm(&["rank", "--out", &out_dir]).status.code(), Some(3));
}

#[test]
fn gen_data_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.display().to_string();
    let out = ealm(&["gen-data", "--out", &d, "--seed", "3", "--records", "10", "--eval-records", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train = load_jsonl(data.join("train.jsonl")).unwrap();
    assert_eq!(train.len(), 10);
    assert_eq!(load_jsonl(data.join("eval.jsonl")).unwrap().len(), 4);

    let out = ealm(&["stats", &data.join("train.jsonl").display().to_string()]);
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["count"], 10);
    let max = train.iter().map(|r| r.token_len()).max().unwrap();
    assert_eq!(stats["max"], max);
}

#[test]
fn staged_commands_match_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let staged = dir.path().join("staged").display().to_string();
    for cmd in ["finetune-grid", "rank", "prune-grid", "report"] {
        let out = ealm(&[cmd, "--config", &cfg, "--out", &staged]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let whole = dir.path().join("whole").display().to_string();
    let out = ealm(&["run-all", "--config", &cfg, "--out", &whole]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut a = stripped(&Path::new(&staged).join("report.json"));
    let mut b = stripped(&Path::new(&whole).join("report.json"));
    a["config"]["out_dir"] = serde_json::Value::Null;
    b["config"]["out_dir"] = serde_json::Value::Null;
    assert_eq!(a, b);

    let report: RunReport =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&whole).join("report.json")).unwrap()).unwrap();
    assert_eq!(report.count(Stage::Finetune), 2);
    assert_eq!(report.count(Stage::Retained), 1);
    assert_eq!(report.count(Stage::Pruned), 2);
    assert_eq!(report.baseline_id, "q32-e1");
    for f in ["finetune.json", "topk.json", "prune.json", "models/q8-e1.ealm", "models/q8-e1.lora"] {
        assert!(Path::new(&whole).join(f).is_file(), "{f}");
    }
}

#[test]
fn rank_honours_w_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out").display().to_string();
    assert!(ealm(&["finetune-grid", "--config", &cfg, "--out", &out_dir]).status.success());
    // w = 1 ranks purely on energy, so the cheaper 8-bit model comes first
    let out = ealm(&["rank", "--config", &cfg, "--out", &out_dir, "--w", "1"]);
    assert!(out.status.success());
    let top: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&out_dir).join("topk.json")).unwrap()).unwrap();
    assert_eq!(top.len(), 1);
    assert_eq!(top[0]["id"], "q8-e1");
}
