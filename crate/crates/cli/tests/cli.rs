use std::path::PathBuf;
use std::process::Command;

fn tact(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tact")).args(args).output().unwrap()
}

fn dir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn reference() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.json").to_string()
}

#[test]
fn invalid_config_exits_with_one_and_names_the_field() {
    let d = dir("invalid");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reference()).unwrap()).unwrap();
    cfg["batch_size"] = 0.into();
    let path = d.join("bad.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = tact(&["train", "--config", path.to_str().unwrap(), "--out", d.join("m.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
}

#[test]
fn malformed_json_exits_with_one() {
    let d = dir("malformed");
    let path = d.join("bad.json");
    std::fs::write(&path, "{not json").unwrap();
    let out = tact(&["ablate", "--config", path.to_str().unwrap(), "--out", d.join("a.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_respects_no_hidden() {
    let d = dir("generate");
    let full = d.join("full.jsonl");
    let bare = d.join("bare.jsonl");
    for (path, extra) in [(&full, None), (&bare, Some("--no-hidden"))] {
        let config = reference();
        let mut args = vec!["generate", "--config", &config, "--out", path.to_str().unwrap(), "--count", "5"];
        args.extend(extra);
        assert!(tact(&args).status.success());
    }
    let full = std::fs::read_to_string(full).unwrap();
    let bare = std::fs::read_to_string(bare).unwrap();
    assert_eq!(full.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(full.lines().next().unwrap()).unwrap();
    for key in ["x", "y", "group", "xc", "xnc"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let first: serde_json::Value = serde_json::from_str(bare.lines().next().unwrap()).unwrap();
    assert!(first.get("xc").is_none() && first.get("xnc").is_none());
}

#[test]
fn verify_writes_a_summary_and_succeeds() {
    let d = dir("verify");
    let out_path = d.join("props.json");
    let out = tact(&["verify", "--props", "--count", "200", "--out", out_path.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_path).unwrap()).unwrap();
    assert_eq!(v["prop1"]["sampled"], 200);
}
