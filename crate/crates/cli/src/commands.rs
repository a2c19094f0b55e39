//! The four subcommands. Each returns its report; writing files and printing
//! summaries happen in the `run_*` wrappers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use spiked_lss::kernels::{
    default_probe_grid, derivative_growth_check, DerivativeGrowthReport, Kernel,
};
use spiked_lss::montecarlo::{run_experiment, SampleConfig, SimulationReport};
use spiked_lss::spectrum::{
    resolve_spikes, validate_assumptions, PopulationSpectrum, ResolvedSpike, ValidationReport,
};
use spiked_lss::spiked::{clt_prediction, CltPrediction};
use spiked_lss::stieltjes::SilversteinEquation;

use crate::config::RunConfig;
use crate::Failure;

/// Command-line overrides of configuration values.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Path to the JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Simulation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo repetitions.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Kernels separated by ';', e.g. "x;x^2;log;poly:1,2".
    #[arg(long)]
    pub kernels: Option<String>,
    /// Nodes per contour side for single integrals.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Contour margin.
    #[arg(long)]
    pub margin: Option<f64>,
}

/// Loads the configuration and applies the overrides.
pub fn load(o: &Overrides) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&o.config).map_err(Failure::Config)?;
    if let Some(seed) = o.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(reps) = o.reps {
        cfg.simulation.reps = reps;
    }
    if let Some(out) = &o.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    if let Some(list) = &o.kernels {
        cfg.kernels = list
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.parse::<Kernel>()
                    .map_err(|e| Failure::Config(anyhow::anyhow!("--kernels: {e}")))
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(nodes) = o.nodes {
        cfg.contour.nodes = nodes;
    }
    if let Some(margin) = o.margin {
        cfg.contour.margin = margin;
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn spectrum(cfg: &RunConfig) -> Result<PopulationSpectrum, Failure> {
    cfg.spectrum().map_err(Failure::Config)
}

fn numeric<T>(r: spiked_lss::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Numeric(e.into()))
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub config: RunConfig,
    pub resolved_spikes: Vec<ResolvedSpike>,
    pub validation: ValidationReport,
    pub kernel_checks: Vec<DerivativeGrowthReport>,
    pub prediction: CltPrediction,
}

pub fn theory(cfg: &RunConfig) -> Result<TheoryReport, Failure> {
    let s = spectrum(cfg)?;
    let moments = cfg.moment_profile().map_err(Failure::Config)?;
    let resolved_spikes = resolve_spikes(&s).map_err(|e| Failure::Config(e.into()))?;
    let validation = validate_assumptions(&s, &moments, &cfg.validation);
    let grid = default_probe_grid();
    let kernel_checks = cfg
        .kernels
        .iter()
        .map(|k| derivative_growth_check(k, &grid))
        .collect();
    let prediction = numeric(clt_prediction(&s, &moments, &cfg.kernels, &cfg.contour))?;
    Ok(TheoryReport {
        config: cfg.clone(),
        resolved_spikes,
        validation,
        kernel_checks,
        prediction,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub config: RunConfig,
    pub seed: u64,
    pub prediction: CltPrediction,
    pub simulation: SimulationReport,
}

pub fn simulate(cfg: &RunConfig) -> Result<SimulateReport, Failure> {
    let theory = theory(cfg)?;
    let s = spectrum(cfg)?;
    let sample = SampleConfig {
        spectrum: s,
        entry_dist: cfg.simulation.entry_dist,
        reps: cfg.simulation.reps,
        seed: cfg.simulation.seed,
        parallel: cfg.simulation.parallel,
        submatrix: cfg.simulation.submatrix,
    };
    let simulation = numeric(run_experiment(&sample, &theory.prediction))?;
    Ok(SimulateReport {
        config: cfg.clone(),
        seed: cfg.simulation.seed,
        prediction: theory.prediction,
        simulation,
    })
}

/// One kernel's predicted-versus-empirical line, on the normalized scale
/// where the prediction is mean 0 and variance 1.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub kernel: Kernel,
    pub empirical_mean: f64,
    pub empirical_variance: Option<f64>,
    pub ks_p_value: Option<f64>,
    pub mean_ok: bool,
    pub variance_ok: bool,
    pub ks_ok: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    #[serde(flatten)]
    pub run: SimulateReport,
    pub rows: Vec<ComparisonRow>,
    pub pass: bool,
}

pub fn compare(cfg: &RunConfig) -> Result<CompareReport, Failure> {
    let run = simulate(cfg)?;
    let tol = &cfg.tolerances;
    let rows: Vec<ComparisonRow> = run
        .simulation
        .kernels
        .iter()
        .map(|k| {
            let mean_ok = k.normalized.mean.abs() <= tol.mean;
            let variance_ok = k
                .normalized
                .variance
                .is_some_and(|v| (v - 1.0).abs() <= tol.variance);
            let ks_ok = k.ks_p_value.is_some_and(|p| p > tol.ks_p_value);
            ComparisonRow {
                kernel: k.kernel.clone(),
                empirical_mean: k.normalized.mean,
                empirical_variance: k.normalized.variance,
                ks_p_value: k.ks_p_value,
                mean_ok,
                variance_ok,
                ks_ok,
                pass: mean_ok && variance_ok && ks_ok,
            }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(CompareReport { run, rows, pass })
}

/// `(x, density)` of the bulk limiting distribution over a grid that covers
/// the support with a 10% border on each side.
pub fn density(cfg: &RunConfig, points: usize) -> Result<Vec<(f64, f64)>, Failure> {
    let s = spectrum(cfg)?;
    let eq = numeric(SilversteinEquation::bulk(&s))?;
    let (l, r) = (eq.left_edge(), eq.right_edge());
    let pad = 0.1 * (r - l);
    let (a, b) = ((l - pad).max(0.0), r + pad);
    Ok((0..points)
        .map(|k| {
            let x = a + (b - a) * (k as f64 + 0.5) / points as f64;
            (x, eq.density(x))
        })
        .collect())
}

pub const DENSITY_POINTS: usize = 400;

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Config)?;
    Ok(dir)
}

fn write_json(dir: &Path, value: &impl Serialize) -> Result<PathBuf, Failure> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Numeric(e.into()))?;
    fs::write(&path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Numeric)?;
    Ok(path)
}

fn io(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Numeric(e.into())
}

fn write_histograms(dir: &Path, sim: &SimulationReport) -> Result<(), Failure> {
    for k in &sim.kernels {
        let path = dir.join(format!("hist_{}.csv", k.kernel.slug()));
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(["bin_left", "bin_right", "count", "density"])
            .map_err(io)?;
        let h = &k.histogram;
        for (i, count) in h.counts.iter().enumerate() {
            w.write_record([
                h.edges[i].to_string(),
                h.edges[i + 1].to_string(),
                count.to_string(),
                h.density[i].to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    Ok(())
}

fn print_prediction(pred: &CltPrediction) {
    println!(
        "{:<16} {:>10} {:>14} {:>14}",
        "kernel", "rho", "mean", "variance"
    );
    for (l, k) in pred.kernels.iter().enumerate() {
        println!(
            "{:<16} {:>10.6} {:>14.6e} {:>14.6e}",
            k.to_string(),
            pred.rho[l],
            pred.mean[l],
            pred.cov[l][l]
        );
    }
}

pub fn run_theory(o: &Overrides) -> Result<(), Failure> {
    let cfg = load(o)?;
    let report = theory(&cfg)?;
    let dir = out_dir(&cfg)?;
    let path = write_json(&dir, &report)?;
    print_prediction(&report.prediction);
    for c in &report.validation.checks {
        if c.status != spiked_lss::spectrum::CheckStatus::Pass {
            println!("{:?}: {} ({})", c.status, c.name, c.detail);
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run_simulate(o: &Overrides) -> Result<(), Failure> {
    let cfg = load(o)?;
    let report = simulate(&cfg)?;
    let dir = out_dir(&cfg)?;
    write_histograms(&dir, &report.simulation)?;
    let path = write_json(&dir, &report)?;
    print_prediction(&report.prediction);
    for k in &report.simulation.kernels {
        println!(
            "{}: normalized mean {:+.4}, variance {}, KS p {}",
            k.kernel,
            k.normalized.mean,
            k.normalized
                .variance
                .map_or("n/a".into(), |v| format!("{v:.4}")),
            k.ks_p_value.map_or("n/a".into(), |p| format!("{p:.4}"))
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run_compare(o: &Overrides) -> Result<(), Failure> {
    let cfg = load(o)?;
    let report = compare(&cfg)?;
    let dir = out_dir(&cfg)?;
    write_histograms(&dir, &report.run.simulation)?;
    let path = write_json(&dir, &report)?;
    let tol = &cfg.tolerances;
    println!(
        "{:<16} {:>10} {:>10} {:>10} {:>10} {:>10} {:>6}",
        "kernel", "pred mean", "emp mean", "pred var", "emp var", "KS p", "result"
    );
    for r in &report.rows {
        println!(
            "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>10} {:>10} {:>6}",
            r.kernel.to_string(),
            0.0,
            r.empirical_mean,
            1.0,
            r.empirical_variance
                .map_or("n/a".into(), |v| format!("{v:.4}")),
            r.ks_p_value.map_or("n/a".into(), |p| format!("{p:.4}")),
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    println!(
        "tolerances: |mean| <= {}, |var - 1| <= {}, KS p > {}",
        tol.mean, tol.variance, tol.ks_p_value
    );
    println!("wrote {}", path.display());
    if report.pass {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .rows
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.kernel.to_string())
            .collect();
        Err(Failure::Acceptance(format!(
            "out of tolerance for {}",
            failed.join(", ")
        )))
    }
}

pub fn run_density(o: &Overrides) -> Result<(), Failure> {
    let cfg = load(o)?;
    let curve = density(&cfg, DENSITY_POINTS)?;
    let dir = out_dir(&cfg)?;
    let path = dir.join("density.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(["x", "density"]).map_err(io)?;
    for (x, d) in &curve {
        w.write_record([x.to_string(), d.to_string()]).map_err(io)?;
    }
    w.flush().map_err(io)?;
    println!("wrote {}", path.display());
    Ok(())
}
