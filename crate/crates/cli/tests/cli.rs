use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn souplab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_souplab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SOUPLAB_SEED")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn small_config(dir: &Path) -> String {
    let cfg = r#"{
        "scenario_id": "cli",
        "seed": 5,
        "mdp": {"vocab": 2, "horizon": 2, "features": {"kind": "tabular_l_gram", "context": 2}},
        "attributes": {"n_base": 2},
        "training": {"n_specialists": 2, "pairs_per_specialist": 200, "optimizer": {"steps": 80}},
        "online": {"n_users": 2, "events_per_user": 40, "batch_size": 20, "implicit_samples": 300},
        "ablation": {"orders": 1}
    }"#;
    let p = dir.join("cfg.json");
    fs::write(&p, cfg).unwrap();
    p.to_string_lossy().into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_prints_and_writes_solution() {
    let dir = tempfile::tempdir().unwrap();
    let o = souplab(&["solve", "--weights", "0.25,0.25,0.25,0.25"], dir.path());
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("V(root)"));
    let sol = json(&dir.path().join("solution.json"));
    assert_eq!(sol["nodes"].as_array().unwrap().len(), 13);
    let pi: Vec<f64> = serde_json::from_value(sol["nodes"][0]["pi"].clone()).unwrap();
    assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn bad_weights_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = souplab(&["solve", "--weights", "0.5,0.7,0,0"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn seed_flag_and_env_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |extra: &[&str], env: Option<&str>, sub: &str| {
        let out = dir.path().join(sub);
        let mut c = Command::new(env!("CARGO_BIN_EXE_souplab"));
        c.args(["solve", "--config", &cfg]).args(extra).arg("--out").arg(&out).env_remove("SOUPLAB_SEED");
        if let Some(s) = env {
            c.env("SOUPLAB_SEED", s);
        }
        ok(&c.output().unwrap());
        json(&out.join("solution.json"))["w"].clone()
    };
    let base = run(&[], None, "a");
    let env = run(&[], Some("99"), "b");
    let flag = run(&["--seed", "99"], None, "c");
    let same_as_config = run(&["--seed", "5"], Some("99"), "d");
    assert_ne!(base, env);
    assert_eq!(env, flag);
    assert_eq!(base, same_as_config);
}

#[test]
fn offline_then_online() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&souplab(&["train-offline", "--config", &cfg], dir.path()));
    let ad = json(&dir.path().join("adapters/adapter_000.json"));
    assert!(ad.get("theta").is_some() && ad.get("beta").is_some() && ad.get("attribute_id").is_some());

    ok(&souplab(&["adapt-online", "--config", &cfg, "--events", "30"], dir.path()));
    let feedback = fs::read_to_string(dir.path().join("feedback.jsonl")).unwrap();
    assert_eq!(feedback.lines().count(), 30);
    let post = json(&dir.path().join("posterior.json"));
    let sw = json(&dir.path().join("soup_weights.json"));
    assert_eq!(post["mean"].as_array().unwrap().len(), 2);
    assert_eq!(post["covariance"].as_array().unwrap().len(), 2);
    let l1: f64 = sw["lambda"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap().abs()).sum();
    assert!(sw["beta"].as_f64().unwrap() * l1 <= sw["beta_prime"].as_f64().unwrap() + 1e-12);

    // replaying the written stream gives the same posterior
    let replay = dir.path().join("replay");
    let fb = dir.path().join("feedback.jsonl");
    let adapters = dir.path().join("adapters");
    ok(&souplab(
        &[
            "adapt-online",
            "--config",
            &cfg,
            "--adapters",
            adapters.to_str().unwrap(),
            "--feedback",
            fb.to_str().unwrap(),
        ],
        &replay,
    ));
    assert_eq!(json(&replay.join("posterior.json")), post);
}

#[test]
fn feedback_with_wrong_width_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&souplab(&["train-offline", "--config", &cfg], dir.path()));
    let fb = dir.path().join("bad.jsonl");
    fs::write(&fb, "[0.1, 0.2, 0.3]\n").unwrap();
    let o = souplab(&["adapt-online", "--config", &cfg, "--feedback", fb.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
}

#[test]
fn verify_bounds_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = souplab(&["verify-bounds", "--instances", "5", "--seed", "11"], dir.path());
    ok(&o);
    let csv = fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    assert!(csv.starts_with("instance,node,depth,state,lambda,lhs_kl,rhs_kl"));
    let summary = json(&dir.path().join("certification.json"));
    assert_eq!(summary["instances_passed"], 5);
}

#[test]
fn scenario_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&souplab(&["scenario", "--config", &cfg], &a));
    ok(&souplab(&["scenario", "--config", &cfg], &b));
    for f in ["results.csv", "bounds.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    // 2 users, 6 methods, checkpoints 0, 20, 40
    assert_eq!(results.lines().count(), 1 + 2 * 6 * 3);
}

#[test]
fn em_fit_writes_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&souplab(&["em-fit", "--config", &cfg, "--d-out", "2", "--iters", "20"], dir.path()));
    let fit = json(&dir.path().join("em_fit.json"));
    assert_eq!(fit["model"]["w"].as_array().unwrap().len(), 2);
    assert_eq!(fit["nus"].as_array().unwrap().len(), 2);
    assert!(fit["final_mse"].as_f64().unwrap() < 1e-10);
}

#[test]
fn missing_config_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = souplab(&["scenario", "--config", "/nonexistent/cfg.json"], dir.path());
    assert!(!o.status.success());
}
