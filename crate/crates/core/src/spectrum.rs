//! Population covariance spectra: divergent spiked eigenvalues on top of a
//! bounded atomic bulk, the phase-transition map `phi`, and model checks.
//!
//! A spike group is written as `coeff * n^exponent + offset`, so spectra whose
//! spikes grow with the sample size are described once and materialized for
//! any `n`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

/// A group of `multiplicity` equal spiked eigenvalues `coeff * n^exponent + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpikeGroup {
    pub coeff: f64,
    pub exponent: f64,
    pub offset: f64,
    pub multiplicity: usize,
}

impl SpikeGroup {
    pub fn new(coeff: f64, exponent: f64, offset: f64, multiplicity: usize) -> Self {
        SpikeGroup {
            coeff,
            exponent,
            offset,
            multiplicity,
        }
    }

    /// A spike that does not depend on `n`.
    pub fn constant(value: f64, multiplicity: usize) -> Self {
        SpikeGroup::new(0.0, 0.0, value, multiplicity)
    }

    pub fn value(&self, n: usize) -> f64 {
        self.coeff * (n as f64).powf(self.exponent) + self.offset
    }
}

/// One atom of an atomic bulk distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Atom {
    pub value: f64,
    pub weight: f64,
}

/// Finitely supported population spectral distribution `H`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BulkDistribution {
    atoms: Vec<Atom>,
}

impl BulkDistribution {
    /// Builds a distribution from `(value, weight)` atoms. Weights must be
    /// positive and sum to one; values must be finite and nonnegative.
    /// Atoms sharing a value are merged.
    pub fn new(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut merged: Vec<Atom> = Vec::new();
        for (value, weight) in atoms {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidBulk(format!(
                    "atom value {value} must be finite and nonnegative"
                )));
            }
            if !weight.is_finite() || weight <= 0.0 {
                return Err(Error::InvalidBulk(format!(
                    "atom weight {weight} must be positive"
                )));
            }
            match merged.iter_mut().find(|a| a.value == value) {
                Some(a) => a.weight += weight,
                None => merged.push(Atom { value, weight }),
            }
        }
        if merged.is_empty() {
            return Err(Error::InvalidBulk("no atoms".into()));
        }
        let total: f64 = merged.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidBulk(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        merged.sort_by(|a, b| a.value.total_cmp(&b.value));
        Ok(BulkDistribution { atoms: merged })
    }

    /// Builds a distribution from eigenvalue counts, normalizing the weights.
    pub fn from_counts(counts: impl IntoIterator<Item = (f64, usize)>) -> Result<Self> {
        let counts: Vec<(f64, usize)> = counts.into_iter().filter(|&(_, k)| k > 0).collect();
        let total: usize = counts.iter().map(|&(_, k)| k).sum();
        if total == 0 {
            return Err(Error::InvalidBulk("no eigenvalues".into()));
        }
        let mut atoms: Vec<(f64, f64)> = counts
            .iter()
            .map(|&(v, k)| (v, k as f64 / total as f64))
            .collect();
        renormalize(&mut atoms);
        BulkDistribution::new(atoms)
    }

    /// Point mass at `value`.
    pub fn point(value: f64) -> Result<Self> {
        BulkDistribution::new([(value, 1.0)])
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn max_atom(&self) -> f64 {
        self.atoms.last().map(|a| a.value).unwrap_or(0.0)
    }

    /// Smallest strictly positive atom, if any.
    pub fn min_positive_atom(&self) -> Option<f64> {
        self.atoms.iter().map(|a| a.value).find(|&v| v > 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.expect(|t| t)
    }

    pub fn second_moment(&self) -> f64 {
        self.expect(|t| t * t)
    }

    /// `E_H[g(t)]`.
    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * g(a.value)).sum()
    }

    /// Total weight of the zero atom.
    pub fn zero_mass(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.value == 0.0)
            .map(|a| a.weight)
            .sum()
    }
}

/// Rescales weights so that they sum to one to the last bit available.
fn renormalize(atoms: &mut [(f64, f64)]) {
    let total: f64 = atoms.iter().map(|a| a.1).sum();
    for a in atoms.iter_mut() {
        a.1 /= total;
    }
}

/// A resolved spike: numeric eigenvalue and its multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolvedSpike {
    pub value: f64,
    pub multiplicity: usize,
}

/// Spiked plus bulk population spectrum for a `p x p` covariance with `n` samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationSpectrum {
    pub spikes: Vec<SpikeGroup>,
    pub bulk: BulkDistribution,
    pub p: usize,
    pub n: usize,
}

impl PopulationSpectrum {
    pub fn new(
        spikes: Vec<SpikeGroup>,
        bulk: BulkDistribution,
        p: usize,
        n: usize,
    ) -> Result<Self> {
        if p == 0 || n == 0 {
            return Err(Error::InvalidSpectrum("p and n must be positive".into()));
        }
        if let Some(g) = spikes.iter().find(|g| g.multiplicity == 0) {
            return Err(Error::InvalidSpectrum(format!(
                "spike group {g:?} has zero multiplicity"
            )));
        }
        let spectrum = PopulationSpectrum { spikes, bulk, p, n };
        let m = spectrum.total_multiplicity();
        if m >= p {
            return Err(Error::InvalidSpectrum(format!(
                "total spike multiplicity {m} leaves no bulk eigenvalues (p = {p})"
            )));
        }
        if m >= n {
            return Err(Error::InvalidSpectrum(format!(
                "total spike multiplicity {m} must be below n = {n}"
            )));
        }
        Ok(spectrum)
    }

    /// Total spike multiplicity `M`.
    pub fn total_multiplicity(&self) -> usize {
        self.spikes.iter().map(|g| g.multiplicity).sum()
    }

    pub fn bulk_count(&self) -> usize {
        self.p - self.total_multiplicity()
    }

    /// `c_n = p / n`.
    pub fn ratio(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    /// `(p - M) / n`, the dimension ratio of the bulk block.
    pub fn bulk_ratio(&self) -> f64 {
        self.bulk_count() as f64 / self.n as f64
    }

    /// The `p - M` bulk eigenvalues, descending. Fails when the bulk weights
    /// do not correspond to integer eigenvalue counts.
    pub fn bulk_eigenvalues(&self) -> Result<Vec<f64>> {
        let count = self.bulk_count();
        let mut values = Vec::with_capacity(count);
        for atom in self.bulk.atoms().iter().rev() {
            let k = atom.weight * count as f64;
            let rounded = k.round();
            if (k - rounded).abs() > 1e-6 {
                return Err(Error::InvalidSpectrum(format!(
                    "bulk weight {} of atom {} is not a multiple of 1/{count}",
                    atom.weight, atom.value
                )));
            }
            values.extend(std::iter::repeat_n(atom.value, rounded as usize));
        }
        if values.len() != count {
            return Err(Error::InvalidSpectrum(format!(
                "bulk counts sum to {}, expected {count}",
                values.len()
            )));
        }
        Ok(values)
    }

    /// All `p` population eigenvalues, spikes first (descending by group order
    /// after resolution) followed by the bulk.
    pub fn population_eigenvalues(&self) -> Result<Vec<f64>> {
        let mut values = Vec::with_capacity(self.p);
        for s in resolve_spikes(self)? {
            values.extend(std::iter::repeat_n(s.value, s.multiplicity));
        }
        values.extend(self.bulk_eigenvalues()?);
        Ok(values)
    }
}

/// Materializes the spike groups at the spectrum's `n`: a descending list of
/// numeric spikes with groups of equal value merged.
pub fn resolve_spikes(spectrum: &PopulationSpectrum) -> Result<Vec<ResolvedSpike>> {
    if spectrum.n == 0 {
        return Err(Error::InvalidSpectrum("n must be at least 1".into()));
    }
    let bulk_max = spectrum.bulk.max_atom();
    let mut out: Vec<ResolvedSpike> = Vec::with_capacity(spectrum.spikes.len());
    for g in &spectrum.spikes {
        let value = g.value(spectrum.n);
        if !value.is_finite() || value <= bulk_max {
            return Err(Error::SpikeBelowBulk { value, bulk_max });
        }
        match out
            .iter_mut()
            .find(|s| (s.value - value).abs() <= 1e-12 * value.abs())
        {
            Some(s) => s.multiplicity += g.multiplicity,
            None => out.push(ResolvedSpike {
                value,
                multiplicity: g.multiplicity,
            }),
        }
    }
    out.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(out)
}

fn check_pole(alpha: f64, h: &BulkDistribution) -> Result<()> {
    if h.atoms()
        .iter()
        .any(|a| (alpha - a.value).abs() <= 1e-12 * a.value.abs().max(1.0))
    {
        return Err(Error::Pole(alpha));
    }
    Ok(())
}

/// `phi(alpha) = alpha * (1 + c * E_H[t / (alpha - t)])`, the almost-sure
/// limit location of a sample spike generated by population spike `alpha`.
pub fn phi(alpha: f64, c: f64, h: &BulkDistribution) -> Result<f64> {
    check_pole(alpha, h)?;
    Ok(alpha * (1.0 + c * h.expect(|t| t / (alpha - t))))
}

/// Derivative of [`phi`]: `1 - c * E_H[t^2 / (alpha - t)^2]`.
pub fn phi_prime(alpha: f64, c: f64, h: &BulkDistribution) -> Result<f64> {
    check_pole(alpha, h)?;
    Ok(1.0 - c * h.expect(|t| t * t / ((alpha - t) * (alpha - t))))
}

/// Returns `(H_n, H_2n)`: `H_n` is the spectrum of the bulk part embedded in
/// `p` dimensions (spike positions carry mass at zero); `H_2n` is the bulk
/// spectrum alone. With no spikes the two coincide.
pub fn build_h_n(spectrum: &PopulationSpectrum) -> (BulkDistribution, BulkDistribution) {
    let h2 = spectrum.bulk.clone();
    let m = spectrum.total_multiplicity();
    if m == 0 {
        return (h2.clone(), h2);
    }
    let p = spectrum.p as f64;
    let bulk_share = spectrum.bulk_count() as f64 / p;
    let mut atoms: Vec<(f64, f64)> = vec![(0.0, m as f64 / p)];
    atoms.extend(h2.atoms().iter().map(|a| (a.value, a.weight * bulk_share)));
    renormalize(&mut atoms);
    let hn = BulkDistribution::new(atoms).expect("embedding a valid bulk stays valid");
    (hn, h2)
}

/// Fourth-moment description of the i.i.d. entries.
///
/// `alpha_x = |E x^2|^2`, `beta_x = E|x|^4 - alpha_x - 2`, `q = 1` for real
/// entries and `0` for complex ones. `u1` optionally holds the `p x M` block of
/// population eigenvectors belonging to the spikes (canonical basis when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentProfile {
    pub alpha_x: f64,
    pub beta_x: f64,
    pub q: u8,
    pub fourth_moment: f64,
    pub u1: Option<DMatrix<f64>>,
}

impl MomentProfile {
    pub fn new(alpha_x: f64, beta_x: f64, q: u8, fourth_moment: f64) -> Result<Self> {
        let profile = MomentProfile {
            alpha_x,
            beta_x,
            q,
            fourth_moment,
            u1: None,
        };
        profile.check()?;
        Ok(profile)
    }

    /// Real entries with the given fourth moment.
    pub fn real(fourth_moment: f64) -> Self {
        MomentProfile {
            alpha_x: 1.0,
            beta_x: fourth_moment - 3.0,
            q: 1,
            fourth_moment,
            u1: None,
        }
    }

    pub fn real_gaussian() -> Self {
        MomentProfile::real(3.0)
    }

    /// Complex Gaussian parameters (`E x^2 = 0`, `E|x|^4 = 2`).
    pub fn complex_gaussian() -> Self {
        MomentProfile {
            alpha_x: 0.0,
            beta_x: 0.0,
            q: 0,
            fourth_moment: 2.0,
            u1: None,
        }
    }

    pub fn with_u1(mut self, u1: DMatrix<f64>) -> Self {
        self.u1 = Some(u1);
        self
    }

    pub fn is_real(&self) -> bool {
        self.q == 1
    }

    /// Checks the internal consistency of the profile.
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_x) {
            return Err(Error::InvalidMoments(format!(
                "alpha_x = {} outside [0, 1]",
                self.alpha_x
            )));
        }
        match self.q {
            1 if self.alpha_x != 1.0 => {
                return Err(Error::InvalidMoments(
                    "real entries (q = 1) require alpha_x = 1".into(),
                ))
            }
            0 | 1 => {}
            q => return Err(Error::InvalidMoments(format!("q = {q}, expected 0 or 1"))),
        }
        let expected = self.fourth_moment - self.alpha_x - 2.0;
        if (self.beta_x - expected).abs() > 1e-9 {
            return Err(Error::InvalidMoments(format!(
                "beta_x = {} but E|x|^4 - alpha_x - 2 = {expected}",
                self.beta_x
            )));
        }
        if let Some(u1) = &self.u1 {
            check_orthonormal(u1)?;
        }
        Ok(())
    }
}

pub(crate) fn check_orthonormal(u: &DMatrix<f64>) -> Result<()> {
    let gram = u.transpose() * u;
    let k = gram.nrows();
    let err = (gram - DMatrix::<f64>::identity(k, k)).amax();
    if err > 1e-8 {
        return Err(Error::Validation(format!(
            "columns are not orthonormal (max deviation {err:e})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn worst(&self) -> CheckStatus {
        if self.checks.iter().any(|c| c.status == CheckStatus::Fail) {
            CheckStatus::Fail
        } else if self.checks.iter().any(|c| c.status == CheckStatus::Warn) {
            CheckStatus::Warn
        } else {
            CheckStatus::Pass
        }
    }

    pub fn get<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Check> + 'a {
        self.checks.iter().filter(move |c| c.name == name)
    }

    fn push(&mut self, name: &str, status: CheckStatus, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            status,
            detail,
        });
    }
}

/// Knobs for the heuristic parts of [`validate_assumptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationThresholds {
    /// Warn when `M / n` exceeds this.
    pub max_spike_fraction: f64,
    /// Warn when `sqrt(n) (phi_k - phi_{k+1}) / phi_k` falls below this.
    pub min_separation: f64,
}

impl Default for ValidationThresholds {
    fn default() -> Self {
        ValidationThresholds {
            max_spike_fraction: 0.1,
            min_separation: 3.0,
        }
    }
}

/// Checks the model assumptions and returns structured pass/warn/fail
/// entries. Never fails.
pub fn validate_assumptions(
    spectrum: &PopulationSpectrum,
    moments: &MomentProfile,
    thresholds: &ValidationThresholds,
) -> ValidationReport {
    let mut report = ValidationReport { checks: Vec::new() };
    let c_n = spectrum.ratio();
    if c_n.is_finite() && c_n > 0.0 {
        report.push("ratio", CheckStatus::Pass, format!("c_n = {c_n}"));
    } else {
        report.push("ratio", CheckStatus::Fail, format!("c_n = {c_n}"));
    }

    let (h_n, _) = build_h_n(spectrum);
    let bulk_max = spectrum.bulk.max_atom();
    let mut phis: Vec<f64> = Vec::new();
    for g in &spectrum.spikes {
        let alpha = g.value(spectrum.n);
        if alpha <= bulk_max {
            report.push(
                "phase_transition",
                CheckStatus::Fail,
                format!("spike {alpha} does not exceed the bulk maximum {bulk_max}"),
            );
            continue;
        }
        match phi_prime(alpha, c_n, &h_n) {
            Ok(d) if d > 0.0 => {
                report.push(
                    "phase_transition",
                    CheckStatus::Pass,
                    format!("phi'({alpha}) = {d}"),
                );
                if let Ok(v) = phi(alpha, c_n, &h_n) {
                    phis.push(v);
                }
            }
            Ok(d) => report.push(
                "phase_transition",
                CheckStatus::Fail,
                format!("phi'({alpha}) = {d} is not positive"),
            ),
            Err(e) => report.push("phase_transition", CheckStatus::Fail, e.to_string()),
        }
    }

    let m = spectrum.total_multiplicity();
    let frac = m as f64 / spectrum.n as f64;
    let status = if frac < thresholds.max_spike_fraction {
        CheckStatus::Pass
    } else {
        CheckStatus::Warn
    };
    report.push("spike_fraction", status, format!("M / n = {frac}"));

    phis.sort_by(|a, b| b.total_cmp(a));
    phis.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    let sqrt_n = (spectrum.n as f64).sqrt();
    for pair in phis.windows(2) {
        let sep = sqrt_n * (pair[0] - pair[1]) / pair[0];
        let status = if sep >= thresholds.min_separation {
            CheckStatus::Pass
        } else {
            CheckStatus::Warn
        };
        report.push(
            "separation",
            status,
            format!("sqrt(n) (phi {} - phi {}) / phi = {sep}", pair[0], pair[1]),
        );
    }

    match moments.check() {
        Ok(()) => report.push(
            "moments",
            CheckStatus::Pass,
            format!(
                "alpha_x = {}, beta_x = {}, q = {}",
                moments.alpha_x, moments.beta_x, moments.q
            ),
        ),
        Err(e) => report.push("moments", CheckStatus::Fail, e.to_string()),
    }
    if let Some(u1) = &moments.u1 {
        if u1.nrows() != spectrum.p || u1.ncols() != m {
            report.push(
                "moments",
                CheckStatus::Fail,
                format!(
                    "u1 is {}x{}, expected {}x{m}",
                    u1.nrows(),
                    u1.ncols(),
                    spectrum.p
                ),
            );
        }
    }
    report
}
