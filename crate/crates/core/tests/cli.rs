use std::path::Path;
use std::process::{Command, Output};

fn formseek(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_formseek"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FORMSEEK_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map(|d| d.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    names.sort();
    names
}

#[test]
fn run_writes_the_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bundle");
    let o = formseek(&["run", "--rounds", "20", "--seed", "3", "--out-dir", out.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&out), ["manifest.json", "metrics.json", "trajectory.csv"]);
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 21 * 6);
}

#[test]
fn out_dir_flag_beats_environment_and_environment_beats_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("c.toml");
    std::fs::write(&config, "rounds = 2\n[output]\ndir = \"from-config\"\n").unwrap();
    let c = config.to_str().unwrap();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_formseek"));
        cmd.args(["run", "--config", c]).args(extra).current_dir(tmp.path()).env_remove("FORMSEEK_OUT_DIR");
        if let Some(e) = env {
            cmd.env("FORMSEEK_OUT_DIR", e);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run(&[], None);
    assert!(tmp.path().join("from-config/metrics.json").exists());
    run(&[], Some("from-env"));
    assert!(tmp.path().join("from-env/metrics.json").exists());
    run(&["--out-dir", "from-flag"], Some("ignored"));
    assert!(tmp.path().join("from-flag/metrics.json").exists());
    assert!(!tmp.path().join("ignored").exists());
}

#[test]
fn validate_config_lists_problems_for_a_path_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("path.toml");
    std::fs::write(
        &config,
        "[graph]\nkind = \"edges\"\nagents = 6\ndimension = 2\nedges = [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5]]\n",
    )
    .unwrap();
    let o = formseek(&["validate-config", "--config", config.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("agent 0"), "{err}");
    assert!(err.contains("agent 5"), "{err}");
}

#[test]
fn validate_config_accepts_the_reference_scenario() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/hexagon.toml");
    let tmp = tempfile::tempdir().unwrap();
    let o = formseek(&["validate-config", "--config", config.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_config_fails_without_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "rounds = 5\n[control]\nslack = -1.0\n").unwrap();
    let out = tmp.path().join("out");
    let o = formseek(&["run", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(files(&out).is_empty());

    std::fs::write(&config, "rounds = 5\nunknown_key = 1\n").unwrap();
    let o = formseek(&["run", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(files(&out).is_empty());
}

#[test]
fn ablate_writes_both_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    let o = formseek(&["ablate", "--rounds", "10", "--out-dir", "ab"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&tmp.path().join("ab")), ["network", "no-formation"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("gap ratio"));
}

#[test]
fn delta_oracle_records_the_perturbation() {
    let tmp = tempfile::tempdir().unwrap();
    let o = formseek(&["delta-oracle", "--rounds", "5", "--delta-bar", "0.25", "--out-dir", "d"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("d/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["mode"], "delta-oracle");
    assert_eq!(metrics["agents"][0]["delta_bar"], 0.25);
}
