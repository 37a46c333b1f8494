use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/web").canonicalize().unwrap()
}

fn base_config() -> Value {
    let text = std::fs::read_to_string(corpus().join("pipeline.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    // absolute paths so the config can live in a temp dir
    let root = corpus();
    cfg["sites_dir"] = json!(root.join("sites"));
    cfg["queries"] = json!(root.join("queries.jsonl"));
    for (_, b) in cfg["backends"].as_object_mut().unwrap() {
        let script = b["script"].as_str().unwrap().to_string();
        b["script"] = json!(root.join(script));
    }
    cfg
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("pipeline.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn trajcur(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajcur"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("TRAJCUR_MISSING_KEY")
        .output()
        .expect("run trajcur")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn prepare(config: &Path, out: &Path) {
    for stage in ["rollout", "reflect", "branch"] {
        let o = trajcur(config, out, &[stage]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn missing_backend_role_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["backends"].as_object_mut().unwrap().remove("proposer");
    let config = write_config(dir.path(), &cfg);
    let o = trajcur(&config, &dir.path().join("out"), &["branch"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("proposer"), "{}", stderr(&o));
}

#[test]
fn unset_variable_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["backends"]["judge"] = json!({
        "kind": "remote",
        "endpoint": "http://${TRAJCUR_MISSING_KEY}/v1/chat/completions",
        "model_name": "m"
    });
    let config = write_config(dir.path(), &cfg);
    let o = trajcur(&config, &dir.path().join("out"), &["rollout"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("TRAJCUR_MISSING_KEY"), "{}", stderr(&o));
}

#[test]
fn unknown_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["rollout"]["max_step"] = json!(3);
    let config = write_config(dir.path(), &cfg);
    let o = trajcur(&config, &dir.path().join("out"), &["rollout"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn script_miss_makes_the_stage_partial() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    let policy = std::fs::read_to_string(corpus().join("scripts/policy.jsonl")).unwrap();
    let kept: String = policy.lines().filter(|l| !l.contains("\"shop-1\"")).map(|l| format!("{l}\n")).collect();
    let script = dir.path().join("policy.jsonl");
    std::fs::write(&script, kept).unwrap();
    cfg["backends"]["policy"]["script"] = json!(script);
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let o = trajcur(&config, &out, &["rollout"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let errors: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("rollout/errors.json")).unwrap()).unwrap();
    let errors = errors.as_object().unwrap();
    assert_eq!(errors.keys().collect::<Vec<_>>(), vec!["shop-1"]);
    // the other queries still land in the pool
    assert_eq!(read_jsonl(&out.join("rollout/pool.jsonl")).len(), 13);
}

#[test]
fn seed_flag_moves_the_pivots() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let out = dir.path().join("out");
    prepare(&config, &out);
    let pivots = |seed: &str| -> Vec<(String, u64)> {
        let o = trajcur(&config, &out, &["rollback", "--seed", seed]);
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stderr(&o));
        read_jsonl(&out.join("rollback/variants.jsonl"))
            .iter()
            .map(|v| (v["variant_id"].as_str().unwrap().to_string(), v["pivot"].as_u64().unwrap()))
            .collect()
    };
    let a = pivots("42");
    let again = pivots("42");
    let b = pivots("7");
    assert_eq!(a, again);
    assert_eq!(a.len(), b.len());
    assert_ne!(a, b);
}

#[test]
fn truncate_mode_ends_at_the_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["rollback"]["mode"] = json!("truncate");
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    prepare(&config, &out);
    let o = trajcur(&config, &out, &["rollback"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pivots: std::collections::BTreeMap<String, u64> = read_jsonl(&out.join("rollback/variants.jsonl"))
        .iter()
        .filter(|v| v["outcome"] == "kept")
        .map(|v| (v["variant_id"].as_str().unwrap().to_string(), v["pivot"].as_u64().unwrap()))
        .collect();
    let variants = read_jsonl(&out.join("rollback/D_R.jsonl"));
    assert_eq!(variants.len(), pivots.len());
    assert!(!variants.is_empty());
    for v in &variants {
        let steps = v["steps"].as_array().unwrap();
        let pivot = pivots[v["query_id"].as_str().unwrap()] as usize;
        assert_eq!(steps.len(), pivot + 2);
        assert_eq!(steps.last().unwrap()["action"], "goback");
    }
}
