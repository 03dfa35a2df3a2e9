use std::process::{Command, Output};

fn zc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zc")).args(args).env("ZC_THREADS", "2").output().unwrap()
}

fn data_rows(out: &Output) -> Vec<Vec<String>> {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const SMALL: [&str; 8] = ["--T", "1e4", "--n-disorder", "4", "--n-draws", "300", "--grid-n", "256"];

#[test]
fn two_overlap_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let mut args = vec!["two-overlap", "--output", path.to_str().unwrap()];
        args.extend(SMALL);
        let out = zc(&args);
        assert!(out.status.success());
        std::fs::read(path).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("# seed = 20240917"));
    assert!(text.contains("T,beta,statistic,estimate,stderr,n_disorder,n_draws,seed_base"));
}

#[test]
fn two_overlap_bands_sum_to_one() {
    let rows = data_rows(&zc(&[&["two-overlap"][..], &SMALL].concat()));
    let total: f64 = rows.iter().map(|r| r[3].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn free_energy_curve_limit_at_zero() {
    let args = [
        &["free-energy-curve", "--beta", "3", "--alpha", "0.5", "--u-grid", "-0.5,0,0.5"][..],
        &SMALL,
    ]
    .concat();
    let rows = data_rows(&zc(&args));
    let at_zero = rows.iter().find(|r| r[3] == "0").unwrap();
    assert_eq!(at_zero[6], "2");
    assert_eq!(at_zero[7], "3");
}

#[test]
fn pd_moment_near_exact() {
    let rows = data_rows(&zc(&["pd-moments", "--beta", "4", "--m", "3", "--n-pd-samples", "3000"]));
    let get = |name: &str| rows.iter().find(|r| r[1] == name).unwrap();
    let est: f64 = get("power_sum_3")[2].parse().unwrap();
    let se: f64 = get("power_sum_3")[3].parse().unwrap();
    assert_eq!(get("power_sum_3_exact")[2], "0.375");
    assert!((est - 0.375).abs() < 4.0 * se, "{est} +- {se}");
}

#[test]
fn json_output_embeds_config() {
    let out = zc(&["pd-moments", "--beta", "4", "--m", "2", "--n-pd-samples", "50", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["theta"], "0.5");
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn errors_exit_nonzero() {
    let out = zc(&["no-such-thing"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown subcommand"));

    let out = zc(&["two-overlap", "--beta", "-1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));

    let out = zc(&["sieve-stats", "--T", "1e4", "--output", "/nonexistent-dir/out.csv"]);
    assert!(!out.status.success());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "T = 1e4\nalpha = 0.25\n").unwrap();
    let rows = data_rows(&zc(&["sieve-stats", "--config", cfg.to_str().unwrap(), "--alpha", "0.6"]));
    assert!(rows.iter().all(|r| r[0] == "10000"));
    assert!(rows.iter().any(|r| r[1] == "0.6"));
}
