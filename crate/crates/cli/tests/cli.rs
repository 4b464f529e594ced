use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rwre-lab"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn run(cfg: &Path, out: &Path, sub: &str) -> Output {
    bin().arg("--config").arg(cfg).arg("--out").arg(out).args(["--jobs", "1", "run", sub]).output().unwrap()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn resolvent_at_zero_epsilon_is_exact() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "epsilon = 0.0\nradius = 4.0\n");
    let out = t.path().join("out");
    let o = run(&cfg, &out, "resolvent");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("resolvent.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let v: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v <= 1e-12, "{r}");
    }
    assert_eq!(manifest(&out)["status"], 0);
}

#[test]
fn invalid_config_exits_two_with_json() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("out");
    for body in ["epsilon = 0.5\n", "radius = -1.0\n", "no_such_key = 1\n"] {
        let cfg = write_config(t.path(), body);
        let o = run(&cfg, &out, "exit-exact");
        assert_eq!(o.status.code(), Some(2), "{body}");
        let line = String::from_utf8_lossy(&o.stderr);
        let v: Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
        assert_eq!(v["error"], "config");
        let f: Value = serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
        assert_eq!(f, v);
    }
}

#[test]
fn domain_errors_exit_two() {
    // r equal to r_L leaves no room for boundary layers.
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "radius = 8.0\n");
    let out = t.path().join("out");
    let o = run(&cfg, &out, "census");
    assert_eq!(o.status.code(), Some(2));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(v["error"], "domain");
}

#[test]
fn failed_checks_exit_three() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "epsilon = 0.02\nn_paths = 200\ntransience_threshold = 0.99\nscales = [1]\n");
    let out = t.path().join("out");
    let o = run(&cfg, &out, "transience");
    assert_eq!(o.status.code(), Some(3));
    let m = manifest(&out);
    assert_eq!(m["status"], 3);
    assert_eq!(m["checks"][0]["pass"], false);
}

#[test]
fn every_csv_carries_the_config_hash_and_output_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "radius = 5.0\nn_paths = 500\n");
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for sub in ["exit-exact", "exit-mc", "smoothed-exit"] {
        assert_eq!(run(&cfg, &a.join(sub), sub).status.code(), Some(0));
        assert_eq!(run(&cfg, &b.join(sub), sub).status.code(), Some(0));
        let m = manifest(&a.join(sub));
        let hash = m["config_sha256"].as_str().unwrap().to_string();
        assert_eq!(hash.len(), 64);
        for f in m["files"].as_array().unwrap() {
            let name = f.as_str().unwrap();
            let x = std::fs::read(a.join(sub).join(name)).unwrap();
            let y = std::fs::read(b.join(sub).join(name)).unwrap();
            assert_eq!(x, y, "{sub}/{name}");
            let text = String::from_utf8(x).unwrap();
            let header: Vec<&str> = text.lines().take(3).collect();
            assert_eq!(header[0], format!("# rwre-lab {sub}"));
            assert_eq!(header[1], format!("# config_sha256: {hash}"));
            assert!(header[2].starts_with("# config: {"));
        }
    }
}

#[test]
fn seed_flag_overrides_config() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "radius = 4.0\nn_paths = 300\n");
    let out = t.path().join("out");
    let o = bin().arg("--config").arg(&cfg).arg("--out").arg(&out).args(["--seed", "99", "run", "exit-mc"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(manifest(&out)["master_seed"], 99);
}

#[test]
fn p_flow_reports_four_rows_per_direction() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "n_env = 2\ngrid = [8.0, 12.0, 16.0, 24.0]\n");
    let out = t.path().join("out");
    assert_eq!(run(&cfg, &out, "p-flow").status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("flow.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next().unwrap(), "L,i,pL_i,stderr,n_env");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    for i in 1..=3 {
        let radii: Vec<f64> = rows.iter().filter(|r| r[1] == i.to_string()).map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(radii, vec![8.0, 12.0, 16.0, 24.0]);
    }
}

#[test]
fn all_fixtures_reproduce_the_frozen_set() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("out");
    let o = bin()
        .env("RWRE_LAB_FIXTURES", fixtures().join("expected"))
        .arg("--config")
        .arg(fixtures().join("config.toml"))
        .arg("--out")
        .arg(&out)
        .args(["run", "all-fixtures"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rwre_lab::compare_fixtures(&out, &fixtures().join("expected")).unwrap().is_empty());
}
