use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn advmesh(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advmesh"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = advmesh(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn err(out: &Path, args: &[&str]) -> String {
    let o = advmesh(out, args);
    assert!(!o.status.success(), "{args:?} should fail");
    String::from_utf8(o.stderr).unwrap()
}

#[test]
fn missing_prerequisites_name_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    assert!(err(dir.path(), &["train-victim"]).contains("gen-scenes"));
    assert!(err(dir.path(), &["eval"]).contains("train-victim"));
    assert!(err(dir.path(), &["eval", "--attack", "bogus"]).contains("unknown attack"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"attack": {"lamda": 0.1}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_advmesh"))
        .arg("--config")
        .arg(&cfg)
        .arg("show-config")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["--seed", "40", "--threads", "1", "show-config"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["seed"], 40);
    assert_eq!(v["data"]["seed"], 40);
    assert_eq!(v["victim"]["seed"], 41);
    assert_eq!(v["attack"]["seed"], 42);
    assert_eq!(v["out_dir"], dir.path().to_str().unwrap());
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(ok(out, &["gen-scenes"]).contains("16 scenes"));
    ok(out, &["train-victim"]);
    assert!(err(out, &["attack", "--phase", "texture"]).contains("attack --phase shape"));
    ok(out, &["attack", "--phase", "shape"]);
    ok(out, &["attack", "--phase", "texture"]);
    let table = ok(out, &["eval"]);
    for row in ["No Attack", "PC: Adv Shape", "Img: Adv Texture", "PC + Img: Adv Object"] {
        assert!(table.contains(row), "{row} missing from\n{table}");
    }
    assert!(ok(out, &["eval", "--attack", "benign"]).contains("Benign Mesh"));

    let ply = out.join("export.ply");
    ok(out, &["export-mesh", out.join("mesh_texture.ckpt").to_str().unwrap(), ply.to_str().unwrap()]);
    let mesh = advmesh::geometry::read_ply(&ply).unwrap();
    let params = advmesh::attack::AttackParams::load(&out.join("mesh_texture.ckpt")).unwrap();
    assert_eq!(mesh, params.mesh());

    let rendered = ok(out, &["render", "--scene", "000000"]);
    assert_eq!(rendered.lines().count(), 3);
    for name in ["config.json", "victim.ckpt", "loss_shape.csv", "loss_texture.csv", "eval_table.csv", "eval_summary.json"] {
        assert!(out.join(name).is_file(), "{name} not written");
    }
    let echoed = advmesh::pipeline::RunConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(echoed.threads, Some(1));
}
