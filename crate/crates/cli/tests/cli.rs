use std::process::Command;

fn weaklab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_weaklab"))
}

#[test]
fn list_studies_names_all_seven() {
    let out = weaklab().arg("list-studies").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["weak-rate", "romberg", "bias-limit", "density", "tailbound", "greeks", "moments"] {
        assert!(text.contains(name), "{name} missing from {text}");
    }
}

#[test]
fn validate_rejects_bad_config_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"study": "weak-rate", "model": {"kind": "gbm", "mu": 0.1, "sigma": 0.2}, "seed": 1, "output": {"csv": "a", "json": "b"}}"#).unwrap();
    let out = weaklab().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("needs a function block"));
}

#[test]
fn run_writes_identical_reports_twice() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let json = dir.path().join("r.json");
    let cfg = format!(
        r#"{{"study": "weak-rate", "model": {{"kind": "ou", "theta": 1.0, "sigma": 0.5}}, "seed": 7,
            "function": {{"kind": "power", "k": 2}}, "x": [1.0], "n_ladder": [4, 8, 16, 32], "samples": 4000,
            "output": {{"csv": {:?}, "json": {:?}}}}}"#,
        csv, json
    );
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg).unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "2"] {
        let out = weaklab().arg("run").arg(&path).env("WEAKLAB_WORKERS", workers).output().unwrap();
        assert!(matches!(out.status.code(), Some(0) | Some(2)), "{:?}", out);
        outputs.push((std::fs::read(&csv).unwrap(), std::fs::read(&json).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(text.starts_with("study,model,f,t,x,n,N,estimate,truth,bias,ci_halfwidth,oracle\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn bad_worker_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, "{}").unwrap();
    let out = weaklab().arg("run").arg(&path).env("WEAKLAB_WORKERS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}
