use std::path::Path;
use std::process::{Command, Output};

fn flowpref(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowpref"));
    cmd.args(args).env_remove("FLOWPREF_SEED");
    if let Some(s) = env_seed {
        cmd.env("FLOWPREF_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(dir: &Path, f: &str) -> String {
    dir.join(f).to_string_lossy().into_owned()
}

#[test]
fn version_prints_and_exits_zero() {
    let out = flowpref(&["--version"], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn missing_corpus_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "nope.fpcr");
    let out = flowpref(&["train-flow", "--corpus", &missing, "--out", &p(dir.path(), "m.fpnn")], None);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.fpcr"));
}

#[test]
fn unknown_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowpref(&["--set", "rl.betta=0.2", "gen-data", "--out", &p(dir.path(), "c.fpcr")], None);
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[flow]\nhiden = [8]\n").unwrap();
    let out = flowpref(
        &["--config", cfg.to_str().unwrap(), "gen-data", "--out", &p(dir.path(), "c.fpcr")],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("c.fpcr").exists());
}

#[test]
fn seed_precedence_runs_file_env_set_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[data]\nn = 20\nsize = 8\n").unwrap();
    let c = cfg.to_str().unwrap();
    let out = p(dir.path(), "c.fpcr");
    let m = dir.path().join("c.fpcr.manifest.json");
    let cases: [(&[&str], Option<&str>, u64); 4] = [
        (&["--config", c, "gen-data", "--out", &out], None, 5),
        (&["--config", c, "gen-data", "--out", &out], Some("6"), 6),
        (&["--config", c, "--set", "seed=7", "gen-data", "--out", &out], Some("6"), 7),
        (&["--config", c, "--set", "seed=7", "gen-data", "--seed", "8", "--out", &out], Some("6"), 8),
    ];
    for (args, env, want) in cases {
        let o = flowpref(args, env);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let v = manifest(&m);
        assert_eq!(v["seed"], want, "{args:?} env {env:?}");
        assert_eq!(v["config"]["data"]["n"], 20);
    }
}

#[test]
fn manifest_records_basenames_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "c.fpcr");
    assert_eq!(flowpref(&["gen-data", "--n", "12", "--size", "8", "--out", &out], None).status.code(), Some(0));
    let v = manifest(&dir.path().join("c.fpcr.manifest.json"));
    assert_eq!(v["command"], "gen-data");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    let rec = &v["outputs"][0];
    assert_eq!(rec["role"], "corpus");
    assert_eq!(rec["file"], "c.fpcr");
    assert_eq!(rec["sha256"].as_str().unwrap(), flowpref::cli::sha256_file(Path::new(&out)).unwrap());
    let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["command", "config", "inputs", "outputs", "seed", "version"]);
}

#[test]
fn analyze_advantage_writes_lf_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rewards.csv");
    std::fs::write(
        &input,
        "group_id,rollout_id,r_1,r_2\r\ng0,a,1.0,0.0\r\ng0,b,0.0,0.1\r\ng1,a,0.0,0.0\r\ng1,b,0.0,100\r\n",
    )
    .unwrap();
    let out = p(dir.path(), "adv.csv");
    for mode in ["scalar", "decoupled"] {
        let o = flowpref(
            &["analyze-advantage", "--mode", mode, "--in", input.to_str().unwrap(), "--out", &out],
            None,
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(!text.contains('\r'));
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].ends_with("advantage,reward_weight"));
        assert_eq!(lines[0].contains("z_1"), mode == "decoupled");
        for row in &lines[1..] {
            let w: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&w));
        }
    }
}

#[test]
fn malformed_rewards_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rewards.csv");
    std::fs::write(&input, "group_id,rollout_id,r_1\ng0,a,x\n").unwrap();
    let o = flowpref(
        &["analyze-advantage", "--mode", "decoupled", "--in", input.to_str().unwrap(), "--out", &p(dir.path(), "a.csv")],
        None,
    );
    assert_eq!(o.status.code(), Some(3));
}
