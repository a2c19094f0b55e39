//! Monte Carlo harness: samples spiked sample covariance matrices, evaluates
//! the normalized statistics and compares them with a [`CltPrediction`].

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::spectrum::{MomentProfile, PopulationSpectrum};
use crate::spiked::CltPrediction;

/// Standardized real entry laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryDist {
    #[default]
    Gaussian,
    /// `±1` with equal probability.
    Rademacher,
    /// Uniform on `[-√3, √3]`.
    Uniform,
}

impl EntryDist {
    pub fn fourth_moment(self) -> f64 {
        match self {
            EntryDist::Gaussian => 3.0,
            EntryDist::Rademacher => 1.0,
            EntryDist::Uniform => 1.8,
        }
    }

    /// Moment profile of the entries, canonical spike basis.
    pub fn moments(self) -> MomentProfile {
        MomentProfile::real(self.fourth_moment())
    }

    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            EntryDist::Gaussian => rng.sample(StandardNormal),
            EntryDist::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            EntryDist::Uniform => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub spectrum: PopulationSpectrum,
    pub entry_dist: EntryDist,
    pub reps: usize,
    pub seed: u64,
    pub parallel: bool,
    /// Also compute the bulk-submatrix comparison `L1 - L2` per rep.
    pub submatrix: bool,
}

impl SampleConfig {
    pub fn new(spectrum: PopulationSpectrum, reps: usize, seed: u64) -> Self {
        SampleConfig {
            spectrum,
            entry_dist: EntryDist::Gaussian,
            reps,
            seed,
            parallel: true,
            submatrix: false,
        }
    }
}

/// Stream for repetition `rep`: the seed fixes the key, the repetition index
/// the stream, so draws do not depend on scheduling.
pub fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// One draw of `B = (1/n) T X X^T T` with `T = diag(√σ)`, spikes in the
/// leading coordinates.
pub fn sample_matrix(
    population: &[f64],
    n: usize,
    dist: EntryDist,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let p = population.len();
    let scale: Vec<f64> = population.iter().map(|v| v.sqrt()).collect();
    let mut y = DMatrix::<f64>::zeros(p, n);
    for j in 0..n {
        for i in 0..p {
            y[(i, j)] = scale[i] * dist.draw(rng);
        }
    }
    let mut b = &y * y.transpose();
    b /= n as f64;
    b
}

/// Eigenvalues of a symmetric matrix, descending, with the trace identity
/// checked.
pub fn descending_eigenvalues(b: DMatrix<f64>) -> Result<Vec<f64>> {
    let trace = b.trace();
    let mut values: Vec<f64> = b.symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let sum: f64 = values.iter().sum();
    if !((sum - trace).abs() <= 1e-8 * trace.abs().max(1e-300)) {
        return Err(Error::Numeric(format!(
            "eigenvalue sum {sum} differs from trace {trace}"
        )));
    }
    Ok(values)
}

/// Eigenvalues of `B` for repetition stream `rep_seed`, descending.
pub fn sample_b(
    spectrum: &PopulationSpectrum,
    dist: EntryDist,
    rep_seed: (u64, u64),
) -> Result<Vec<f64>> {
    let population = spectrum.population_eigenvalues()?;
    let mut rng = rep_rng(rep_seed.0, rep_seed.1);
    descending_eigenvalues(sample_matrix(&population, spectrum.n, dist, &mut rng))
}

/// Deterministic terms of `Y_n(f_l)`, computed once per configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryTerms {
    pub kernels: Vec<Kernel>,
    pub rho: Vec<f64>,
    pub centering: Vec<f64>,
    pub spiked_centering: Vec<f64>,
    pub correction: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// `(φ_k, m_k)` per spike group, in descending order.
    pub groups: Vec<(f64, usize)>,
    pub n: usize,
}

impl TheoryTerms {
    pub fn from_prediction(pred: &CltPrediction) -> Self {
        TheoryTerms {
            kernels: pred.kernels.clone(),
            rho: pred.rho.clone(),
            centering: pred.centering.clone(),
            spiked_centering: pred.spiked_centering.clone(),
            correction: pred.correction.clone(),
            mean: pred.mean.clone(),
            sd: (0..pred.kernels.len()).map(|l| pred.sd(l)).collect(),
            groups: pred
                .spiked
                .groups
                .iter()
                .map(|g| (g.phi, g.multiplicity))
                .collect(),
            n: pred.n,
        }
    }

    pub fn total_multiplicity(&self) -> usize {
        self.groups.iter().map(|g| g.1).sum()
    }
}

fn kernel_sum(f: &Kernel, values: &[f64]) -> Result<f64> {
    values
        .iter()
        .try_fold(0.0, |acc, &x| Ok(acc + f.eval_real(x)?))
}

/// Spiked and bulk parts of the centered statistic, before scaling by `ρ`:
/// `Σ_{j≤M} f(λ_j) - Σ_k m_k f(φ_k)` and
/// `Σ_{j>M} f(λ_j) - centering - correction`.
pub fn lss_parts(eigenvalues: &[f64], l: usize, terms: &TheoryTerms) -> Result<(f64, f64)> {
    let f = &terms.kernels[l];
    let m = terms.total_multiplicity();
    let spiked = kernel_sum(f, &eigenvalues[..m])? - terms.spiked_centering[l];
    let bulk = kernel_sum(f, &eigenvalues[m..])? - terms.centering[l] - terms.correction[l];
    Ok((spiked, bulk))
}

/// `Y_n(f_l) = ρ_l [Σ_j f(λ_j) - centering - Σ_k m_k f(φ_k) - correction]`.
pub fn lss_statistic(eigenvalues: &[f64], l: usize, terms: &TheoryTerms) -> Result<f64> {
    let (s, b) = lss_parts(eigenvalues, l, terms)?;
    Ok(terms.rho[l] * (s + b))
}

/// `γ_kj = √n (λ_j - φ_k) / φ_k`, eigenvalues assigned to groups in
/// descending blocks.
pub fn spiked_gamma(eigenvalues: &[f64], groups: &[(f64, usize)], n: usize) -> Vec<Vec<f64>> {
    let sqrt_n = (n as f64).sqrt();
    let mut offset = 0;
    groups
        .iter()
        .map(|&(phi, m)| {
            let g = eigenvalues[offset..offset + m]
                .iter()
                .map(|&l| sqrt_n * (l - phi) / phi)
                .collect();
            offset += m;
            g
        })
        .collect()
}

/// One-sample Kolmogorov–Smirnov test against `N(mean, variance)`; the
/// p-value uses the asymptotic Kolmogorov series.
pub fn ks_normal(samples: &[f64], mean: f64, variance: f64) -> Result<(f64, f64)> {
    if samples.len() < 8 {
        return Err(Error::Validation(format!(
            "KS needs at least 8 samples, got {}",
            samples.len()
        )));
    }
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Validation(format!(
            "KS variance must be positive, got {variance}"
        )));
    }
    let normal =
        Normal::new(mean, variance.sqrt()).map_err(|e| Error::Validation(e.to_string()))?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let d = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = normal.cdf(x);
            (cdf - i as f64 / n).max((i + 1) as f64 / n - cdf)
        })
        .fold(0.0, f64::max);
    Ok((d, kolmogorov_q(n.sqrt() * d)))
}

/// `Q(λ) = 2 Σ_{k≥1} (-1)^{k-1} e^{-2k²λ²}`, 100 terms.
fn kolmogorov_q(lambda: f64) -> f64 {
    // Below 0.2 the series has not decayed by 100 terms, and Q = 1 to
    // double precision anyway.
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub density: Vec<f64>,
    /// Samples outside the binned range.
    pub outside: usize,
}

pub const HIST_BINS: usize = 50;
pub const HIST_RANGE: (f64, f64) = (-4.0, 4.0);

pub fn histogram(samples: &[f64], bins: usize, range: (f64, f64)) -> Histogram {
    let width = (range.1 - range.0) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut outside = 0;
    for &x in samples {
        let k = ((x - range.0) / width).floor();
        if k >= 0.0 && (k as usize) < bins {
            counts[k as usize] += 1;
        } else {
            outside += 1;
        }
    }
    let total = samples.len().max(1) as f64;
    Histogram {
        edges: (0..=bins).map(|k| range.0 + k as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
        counts,
        outside,
    }
}

/// Mean, unbiased variance and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: Option<f64>,
    pub standard_error: Option<f64>,
}

pub fn moments(x: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let variance =
        (x.len() > 1).then(|| x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0));
    Moments {
        mean,
        variance,
        standard_error: variance.map(|v| (v / n).sqrt()),
    }
}

pub fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (moments(x).mean, moments(y).mean);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let r = sxy / (sxx * syy).sqrt();
    r.is_finite().then_some(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelSummary {
    pub kernel: Kernel,
    pub predicted_mean: f64,
    pub predicted_variance: f64,
    pub rho: f64,
    /// Raw `Y_n(f)` samples.
    pub samples: Vec<f64>,
    pub raw: Moments,
    /// `(Y - predicted mean) / predicted sd`.
    pub normalized: Moments,
    pub ks_statistic: Option<f64>,
    pub ks_p_value: Option<f64>,
    pub histogram: Histogram,
    /// Correlation between the spiked and bulk parts of the statistic.
    pub spiked_bulk_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub phi: f64,
    pub multiplicity: usize,
    pub predicted_variance: f64,
    /// `Σ_{j∈J_k} γ_kj` per rep.
    pub sums: Vec<f64>,
    pub sum_moments: Moments,
}

/// `Σ_{j>M} f(λ_j) - Σ_j f(λ̃_j)` with `λ̃` the eigenvalues of the bulk block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmatrixSummary {
    pub kernel: Kernel,
    pub predicted: f64,
    pub predicted_finite: f64,
    pub samples: Vec<f64>,
    pub moments: Moments,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub reps: usize,
    pub valid_reps: usize,
    pub invalid_reps: usize,
    pub entry_dist: EntryDist,
    pub normalization: String,
    pub kernels: Vec<KernelSummary>,
    pub groups: Vec<GroupSummary>,
    pub submatrix: Option<Vec<SubmatrixSummary>>,
}

impl SimulationReport {
    /// Normalized samples of kernel `l`.
    pub fn normalized(&self, l: usize) -> Vec<f64> {
        let k = &self.kernels[l];
        let sd = k.predicted_variance.sqrt();
        k.samples
            .iter()
            .map(|y| (y - k.predicted_mean) / sd)
            .collect()
    }
}

/// Share of repetitions allowed to be invalid.
pub const MAX_INVALID_FRACTION: f64 = 0.01;

struct RepOutcome {
    y: Vec<f64>,
    parts: Vec<(f64, f64)>,
    gamma_sums: Vec<f64>,
    submatrix: Vec<f64>,
}

fn run_rep(
    config: &SampleConfig,
    population: &[f64],
    terms: &TheoryTerms,
    rep: usize,
) -> Result<Option<RepOutcome>> {
    let mut rng = rep_rng(config.seed, rep as u64);
    let b = sample_matrix(population, config.spectrum.n, config.entry_dist, &mut rng);
    let m = terms.total_multiplicity();
    let block = config
        .submatrix
        .then(|| b.view((m, m), (b.nrows() - m, b.ncols() - m)).into_owned());
    let eig = descending_eigenvalues(b)?;
    let mut y = Vec::new();
    let mut parts = Vec::new();
    for l in 0..terms.kernels.len() {
        match lss_parts(&eig, l, terms) {
            Ok((s, bulk)) => {
                y.push(terms.rho[l] * (s + bulk));
                parts.push((s, bulk));
            }
            Err(Error::KernelDomain(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    let gamma_sums = spiked_gamma(&eig, &terms.groups, terms.n)
        .iter()
        .map(|g| g.iter().sum())
        .collect();
    let mut submatrix = Vec::new();
    if let Some(block) = block {
        let tilde = descending_eigenvalues(block)?;
        for f in &terms.kernels {
            match (kernel_sum(f, &eig[m..]), kernel_sum(f, &tilde)) {
                (Ok(a), Ok(b)) => submatrix.push(a - b),
                (Err(Error::KernelDomain(_)), _) | (_, Err(Error::KernelDomain(_))) => {
                    return Ok(None)
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
    }
    Ok(Some(RepOutcome {
        y,
        parts,
        gamma_sums,
        submatrix,
    }))
}

/// Runs `config.reps` independent repetitions and compares them with the
/// prediction. The report is a pure function of the configuration and seed;
/// parallel and serial runs agree bit for bit.
pub fn run_experiment(config: &SampleConfig, pred: &CltPrediction) -> Result<SimulationReport> {
    if config.reps == 0 {
        return Err(Error::Validation("reps must be at least 1".into()));
    }
    if pred.n != config.spectrum.n {
        return Err(Error::Validation(
            "prediction was computed for a different n".into(),
        ));
    }
    let population = config.spectrum.population_eigenvalues()?;
    let terms = TheoryTerms::from_prediction(pred);
    let run = |rep| run_rep(config, &population, &terms, rep);
    let outcomes: Vec<Option<RepOutcome>> = if config.parallel {
        (0..config.reps)
            .into_par_iter()
            .map(run)
            .collect::<Result<_>>()?
    } else {
        (0..config.reps).map(run).collect::<Result<_>>()?
    };
    let valid: Vec<RepOutcome> = outcomes.into_iter().flatten().collect();
    let invalid = config.reps - valid.len();
    if invalid as f64 > MAX_INVALID_FRACTION * config.reps as f64 {
        return Err(Error::TooManyInvalidReps {
            invalid,
            reps: config.reps,
        });
    }
    if valid.is_empty() {
        return Err(Error::TooManyInvalidReps {
            invalid,
            reps: config.reps,
        });
    }

    let mut kernels = Vec::new();
    for (l, f) in terms.kernels.iter().enumerate() {
        let samples: Vec<f64> = valid.iter().map(|o| o.y[l]).collect();
        let normalized: Vec<f64> = samples
            .iter()
            .map(|y| (y - terms.mean[l]) / terms.sd[l])
            .collect();
        let ks = if normalized.len() >= 8 {
            Some(ks_normal(&normalized, 0.0, 1.0)?)
        } else {
            None
        };
        let spiked: Vec<f64> = valid.iter().map(|o| o.parts[l].0).collect();
        let bulk: Vec<f64> = valid.iter().map(|o| o.parts[l].1).collect();
        let spiked_bulk_correlation = if terms.groups.is_empty() || valid.len() < 3 {
            None
        } else {
            correlation(&spiked, &bulk)
        };
        kernels.push(KernelSummary {
            kernel: f.clone(),
            predicted_mean: terms.mean[l],
            predicted_variance: pred.cov[l][l],
            rho: terms.rho[l],
            raw: moments(&samples),
            normalized: moments(&normalized),
            ks_statistic: ks.map(|k| k.0),
            ks_p_value: ks.map(|k| k.1),
            histogram: histogram(&normalized, HIST_BINS, HIST_RANGE),
            spiked_bulk_correlation,
            samples,
        });
    }

    let groups = pred
        .spiked
        .groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let sums: Vec<f64> = valid.iter().map(|o| o.gamma_sums[k]).collect();
            GroupSummary {
                phi: g.phi,
                multiplicity: g.multiplicity,
                predicted_variance: g.sigma_sq,
                sum_moments: moments(&sums),
                sums,
            }
        })
        .collect();

    let submatrix = config.submatrix.then(|| {
        terms
            .kernels
            .iter()
            .enumerate()
            .map(|(l, f)| {
                let samples: Vec<f64> = valid.iter().map(|o| o.submatrix[l]).collect();
                SubmatrixSummary {
                    kernel: f.clone(),
                    predicted: pred.correction[l],
                    predicted_finite: pred.correction_finite[l],
                    moments: moments(&samples),
                    samples,
                }
            })
            .collect()
    });

    Ok(SimulationReport {
        seed: config.seed,
        reps: config.reps,
        valid_reps: valid.len(),
        invalid_reps: invalid,
        entry_dist: config.entry_dist,
        normalization: "(Y - predicted mean) / sqrt(predicted variance)".into(),
        kernels,
        groups,
        submatrix,
    })
}
