use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spiked_lss::contour::ContourOptions;
use spiked_lss::kernels::Kernel;
use spiked_lss::presets::Preset;
use spiked_lss::spectrum::{resolve_spikes, MomentProfile};
use spiked_lss::spiked::clt_prediction;
use spiked_lss_cli::config::RunConfig;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spiked-lss"))
        .args(args)
        .output()
        .unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn fixtures_match_the_presets() {
    for (k, name) in ["spectrum1.json", "spectrum2.json", "spectrum3.json"]
        .iter()
        .enumerate()
    {
        let cfg = RunConfig::load(&fixture(name)).unwrap();
        assert_eq!(
            cfg.spectrum().unwrap(),
            Preset::ALL[k].spectrum(100, 3000).unwrap()
        );
    }
    let cfg = RunConfig::load(&fixture("spectrum3.json")).unwrap();
    let spikes = resolve_spikes(&cfg.spectrum().unwrap()).unwrap();
    let expected = [3000.0, 3000f64.sqrt(), 3000f64.cbrt()];
    assert_eq!(spikes.len(), 3);
    for (s, e) in spikes.iter().zip(expected) {
        assert!((s.value - e).abs() < 1e-9 * e);
        assert_eq!(s.multiplicity, 6);
    }
}

#[test]
fn theory_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "theory",
        "--config",
        fixture("spectrum3.json").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(tmp.path());
    let s = Preset::Linear.spectrum(100, 3000).unwrap();
    let pred = clt_prediction(
        &s,
        &MomentProfile::real_gaussian(),
        &[Kernel::Identity],
        &ContourOptions::default(),
    )
    .unwrap();
    assert_eq!(
        r["prediction"]["cov"][0][0].as_f64().unwrap(),
        pred.cov[0][0]
    );
    assert!(r["prediction"]["mean"][0].as_f64().unwrap().abs() < 1e-10);
    assert_eq!(r["config"]["p"], 100);
    assert_eq!(r["resolved_spikes"].as_array().unwrap().len(), 3);
}

#[test]
fn density_is_supported_on_the_marchenko_pastur_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"p": 250, "n": 1000, "bulk": [{"value": 1, "weight": 1}], "kernels": ["x"]}"#,
    );
    let out = run(&[
        "density",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut rdr = csv::Reader::from_path(tmp.path().join("density.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["x", "density"]);
    let c: f64 = 0.25;
    let (a, b) = ((1.0 - c.sqrt()).powi(2), (1.0 + c.sqrt()).powi(2));
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let x: f64 = rec[0].parse().unwrap();
        let d: f64 = rec[1].parse().unwrap();
        let exact = if x > a && x < b {
            ((b - x) * (x - a)).sqrt() / (2.0 * std::f64::consts::PI * c * x)
        } else {
            0.0
        };
        assert!((d - exact).abs() < 1e-6, "x = {x}: {d} vs {exact}");
        rows += 1;
    }
    assert_eq!(rows, 400);
}

#[test]
fn simulate_writes_histograms_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = fixture("spectrum2.json");
    for dir in [&a, &b] {
        let out = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--reps",
            "60",
            "--seed",
            "5",
            "--kernels",
            "x;log",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    // Identical apart from the output directory recorded in the config.
    let (mut r, mut r2) = (report(&a), report(&b));
    assert_ne!(r["config"]["output"], r2["config"]["output"]);
    r["config"]["output"] = Value::Null;
    r2["config"]["output"] = Value::Null;
    assert_eq!(r, r2);
    assert_eq!(r["seed"], 5);
    assert_eq!(r["config"]["simulation"]["reps"], 60);
    assert_eq!(
        r["simulation"]["kernels"][1]["samples"]
            .as_array()
            .unwrap()
            .len(),
        60
    );
    for name in ["hist_x.csv", "hist_log.csv"] {
        let mut rdr = csv::Reader::from_path(a.join(name)).unwrap();
        assert_eq!(
            rdr.headers().unwrap(),
            vec!["bin_left", "bin_right", "count", "density"]
        );
        let counts: usize = rdr
            .records()
            .map(|r| r.unwrap()[2].parse::<usize>().unwrap())
            .sum();
        assert!((55..=60).contains(&counts), "{counts}");
    }
}

#[test]
fn compare_passes_on_spectrum_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "compare",
        "--config",
        fixture("spectrum1.json").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.contains("pass"));
    assert_eq!(report(tmp.path())["pass"], true);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();

    let bad = write_config(
        tmp.path(),
        r#"{"p": 50, "n": 500, "bulk": [{"value": 1, "weight": -1}], "kernels": ["x"]}"#,
    );
    let out = run(&["theory", "--config", bad.to_str().unwrap(), "--out", dir]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bulk[0].weight"));

    let out = run(&[
        "theory",
        "--config",
        fixture("spectrum1.json").to_str().unwrap(),
        "--kernels",
        "exp",
        "--out",
        dir,
    ]);
    assert_eq!(out.status.code(), Some(1));

    // A spike below the phase transition of a c = 1 bulk.
    let weak = write_config(
        tmp.path(),
        r#"{"p": 100, "n": 100, "spikes": [{"coeff": 1.5}], "bulk": [{"value": 1, "count": 99}], "kernels": ["x"]}"#,
    );
    let out = run(&["theory", "--config", weak.to_str().unwrap(), "--out", dir]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let strict = write_config(
        tmp.path(),
        r#"{"p": 40, "n": 400, "bulk": [{"value": 1, "weight": 1}], "kernels": ["x"],
            "simulation": {"reps": 20}, "tolerances": {"mean": 0.0, "variance": 0.0, "ks_p_value": 1.0}}"#,
    );
    let out = run(&[
        "compare",
        "--config",
        strict.to_str().unwrap(),
        "--out",
        dir,
    ]);
    assert_eq!(out.status.code(), Some(3));
}
