//! Spiked-part quantities and the assembled Gaussian limit of the normalized
//! statistics `Y_n(f_1), ..., Y_n(f_h)`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::contour::{
    centering_integral, spike_locations, BulkIntegrals, ContourOptions, ContourPair, ContourSpec,
};
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::spectrum::{
    check_orthonormal, phi, phi_prime, resolve_spikes, MomentProfile, PopulationSpectrum,
};
use crate::stieltjes::SilversteinEquation;

/// Per-group quantities at `λ = φ_n(α_k)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikeQuantities {
    pub alpha: f64,
    pub multiplicity: usize,
    pub phi: f64,
    pub phi_prime: f64,
    pub m_under: f64,
    pub m_under2: f64,
    /// `φ² m_2(φ)`.
    pub theta: f64,
    /// `φ² m(φ)²`.
    pub nu: f64,
    /// Limiting variance of `Σ_{j∈J_k} γ_kj`.
    pub sigma_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikedQuantities {
    pub groups: Vec<SpikeQuantities>,
}

impl SpikedQuantities {
    pub fn total_multiplicity(&self) -> usize {
        self.groups.iter().map(|g| g.multiplicity).sum()
    }

    pub fn phis(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.phi).collect()
    }
}

/// `Σ_t u_{t i1} u_{t j1} u_{t i2} u_{t j2} (E|x|⁴ - 2 - q)` for real `u1`.
/// Without a basis the columns are the canonical ones.
pub fn pi_x(moments: &MomentProfile, indices: (usize, usize, usize, usize)) -> Result<f64> {
    let factor = moments.fourth_moment - 2.0 - moments.q as f64;
    let (i1, j1, i2, j2) = indices;
    match &moments.u1 {
        None => Ok(if i1 == j1 && j1 == i2 && i2 == j2 {
            factor
        } else {
            0.0
        }),
        Some(u) => {
            check_orthonormal(u)?;
            let m = u.ncols();
            if [i1, j1, i2, j2].iter().any(|&i| i >= m) {
                return Err(Error::Validation(format!(
                    "index out of range for a basis with {m} columns"
                )));
            }
            let s: f64 = (0..u.nrows())
                .map(|t| u[(t, i1)] * u[(t, j1)] * u[(t, i2)] * u[(t, j2)])
                .sum();
            Ok(s * factor)
        }
    }
}

/// `φ_n`, `θ_k`, `ν_k` and `σ_k²` for every spike group, evaluated with the
/// bulk equation `((p - M)/n, H_2n)`.
pub fn spiked_quantities(
    spectrum: &PopulationSpectrum,
    moments: &MomentProfile,
) -> Result<SpikedQuantities> {
    let eq = SilversteinEquation::bulk(spectrum)?;
    spiked_quantities_with(spectrum, moments, &eq)
}

fn spiked_quantities_with(
    spectrum: &PopulationSpectrum,
    moments: &MomentProfile,
    eq: &SilversteinEquation,
) -> Result<SpikedQuantities> {
    moments.check()?;
    if let Some(u) = &moments.u1 {
        if u.nrows() != spectrum.p || u.ncols() != spectrum.total_multiplicity() {
            return Err(Error::InvalidMoments(format!(
                "u1 is {}x{}, expected {}x{}",
                u.nrows(),
                u.ncols(),
                spectrum.p,
                spectrum.total_multiplicity()
            )));
        }
    }
    let c = eq.ratio();
    let h = eq.population();
    let q = moments.q as f64;
    let mut groups = Vec::new();
    let mut offset = 0;
    for s in resolve_spikes(spectrum)? {
        let slope = phi_prime(s.value, c, h)?;
        if !(slope > 0.0) {
            return Err(Error::BelowPhaseTransition {
                alpha: s.value,
                slope,
            });
        }
        let location = phi(s.value, c, h)?;
        let (m, m2) = eq.solve_real(location)?;
        let theta = location * location * m2;
        let nu = location * location * m * m;
        let idx = offset..offset + s.multiplicity;
        let mut numerator = 0.0;
        for j in idx.clone() {
            numerator += (q + 1.0) * theta + pi_x(moments, (j, j, j, j))? * nu;
        }
        for j1 in idx.clone() {
            for j2 in idx.clone() {
                if j1 != j2 {
                    numerator += pi_x(moments, (j1, j1, j2, j2))? * nu;
                }
            }
        }
        groups.push(SpikeQuantities {
            alpha: s.value,
            multiplicity: s.multiplicity,
            phi: location,
            phi_prime: slope,
            m_under: m,
            m_under2: m2,
            theta,
            nu,
            sigma_sq: numerator / (theta * theta),
        });
        offset += s.multiplicity;
    }
    Ok(SpikedQuantities { groups })
}

/// `ρ_l = (Σ_k (φ_k f'_l(φ_k) / √n)² + 1)^{-1/2}`, summed over groups.
pub fn rho(kernels: &[Kernel], phis: &[f64], n: usize) -> Result<Vec<f64>> {
    rho_weighted(kernels, phis, &vec![1; phis.len()], n)
}

/// Same with each group's term multiplied by its multiplicity.
pub fn rho_weighted(
    kernels: &[Kernel],
    phis: &[f64],
    weights: &[usize],
    n: usize,
) -> Result<Vec<f64>> {
    let sqrt_n = (n as f64).sqrt();
    kernels
        .iter()
        .map(|f| {
            let mut s = 0.0;
            for (&x, &w) in phis.iter().zip(weights) {
                let term = x * f.deriv(x)? / sqrt_n;
                s += w as f64 * term * term;
            }
            Ok(1.0 / (s + 1.0).sqrt())
        })
        .collect()
}

/// Law of the normalized fluctuations of one spike group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaLaw {
    pub mean: f64,
    /// Variance of `Σ_{j∈J_k} γ_kj`.
    pub group_variance: f64,
    /// Variance of a single `γ_kj` when the group has multiplicity one.
    pub marginal_variance: Option<f64>,
}

pub fn gamma_law(
    spectrum: &PopulationSpectrum,
    moments: &MomentProfile,
    k: usize,
) -> Result<GammaLaw> {
    let sq = spiked_quantities(spectrum, moments)?;
    let g = sq
        .groups
        .get(k)
        .ok_or_else(|| Error::Validation(format!("no spike group {k}")))?;
    let marginal_variance = if g.multiplicity == 1 {
        let j: usize = sq.groups[..k].iter().map(|g| g.multiplicity).sum();
        let pi = pi_x(moments, (j, j, j, j))?;
        Some(((moments.q as f64 + 1.0) * g.theta + pi * g.nu) / (g.theta * g.theta))
    } else {
        None
    };
    Ok(GammaLaw {
        mean: 0.0,
        group_variance: g.sigma_sq,
        marginal_variance,
    })
}

/// Spiked and bulk parts of the prediction, kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltComponents {
    /// Bulk means `μ_l` before scaling by `ρ_l`.
    pub bulk_mean: Vec<f64>,
    /// `σ²_{s,t}` and its three terms.
    pub bulk_cov: Vec<Vec<f64>>,
    pub bulk_cov_t1: Vec<Vec<f64>>,
    pub bulk_cov_t2: Vec<Vec<f64>>,
    pub bulk_cov_t3: Vec<Vec<f64>>,
    /// `(1/n) Σ_k φ_k² f'_s(φ_k) f'_t(φ_k) σ_k²`.
    pub spiked_cov: Vec<Vec<f64>>,
    /// Share of each diagonal variance coming from the spiked part.
    pub spiked_share: Vec<f64>,
    /// `ρ` with multiplicity-weighted group terms, for comparison.
    pub rho_weighted: Vec<f64>,
}

/// Everything needed to evaluate and judge `Y_n(f_l)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltPrediction {
    pub kernels: Vec<Kernel>,
    pub rho: Vec<f64>,
    /// `ρ_l μ_l`.
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// `p ∫ f dF^{c_n, H_n}`.
    pub centering: Vec<f64>,
    /// `Σ_k m_k f(φ_k)`.
    pub spiked_centering: Vec<f64>,
    /// `(M/2πi) ∮ f m'/m dz`.
    pub correction: Vec<f64>,
    /// Finite-spike version of the correction.
    pub correction_finite: Vec<f64>,
    pub spiked: SpikedQuantities,
    pub components: CltComponents,
    pub ratio: f64,
    pub bulk_ratio: f64,
    pub n: usize,
    pub contour: ContourSpec,
    pub contour_pair: ContourPair,
}

impl CltPrediction {
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.cov)
    }

    pub fn sd(&self, l: usize) -> f64 {
        self.cov[l][l].sqrt()
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let h = rows.len();
    DMatrix::from_fn(h, h, |i, j| rows[i][j])
}

pub fn clt_prediction(
    spectrum: &PopulationSpectrum,
    moments: &MomentProfile,
    kernels: &[Kernel],
    options: &ContourOptions,
) -> Result<CltPrediction> {
    if kernels.is_empty() {
        return Err(Error::Validation("no kernels".into()));
    }
    let eq = SilversteinEquation::bulk(spectrum)?;
    let spiked = spiked_quantities_with(spectrum, moments, &eq)?;
    let phis = spike_locations(spectrum)?;
    for &x in &phis {
        if eq.in_support(x) || x <= eq.right_edge() {
            return Err(Error::Domain(format!(
                "spiked location {x} is not right of the bulk support"
            )));
        }
    }
    let integrals = BulkIntegrals::new(eq, &phis, kernels, options)?;
    let resolved = resolve_spikes(spectrum)?;
    let m_total = spectrum.total_multiplicity();

    let mut bulk_mean = Vec::new();
    let mut centering = Vec::new();
    let mut spiked_centering = Vec::new();
    let mut correction = Vec::new();
    let mut correction_finite = Vec::new();
    for f in kernels {
        bulk_mean.push(integrals.mean(f, moments.alpha_x, moments.beta_x)?);
        centering.push(centering_integral(f, spectrum, options)?);
        let mut sc = 0.0;
        for g in &spiked.groups {
            sc += g.multiplicity as f64 * f.eval_real(g.phi)?;
        }
        spiked_centering.push(sc);
        correction.push(integrals.correction(f, m_total)?);
        correction_finite.push(integrals.correction_finite(f, &resolved)?);
    }

    let terms = integrals.covariance(kernels, moments.alpha_x, moments.beta_x)?;
    let h = kernels.len();
    let n = spectrum.n;
    let derivs: Vec<Vec<f64>> = kernels
        .iter()
        .map(|f| spiked.groups.iter().map(|g| f.deriv(g.phi)).collect())
        .collect::<Result<_>>()?;
    let spiked_cov = DMatrix::from_fn(h, h, |s, t| {
        spiked
            .groups
            .iter()
            .enumerate()
            .map(|(k, g)| g.phi * g.phi * derivs[s][k] * derivs[t][k] * g.sigma_sq)
            .sum::<f64>()
            / n as f64
    });
    // Symmetrize away the last-digit differences of the double sum.
    let bulk = (&terms.total + terms.total.transpose()) * 0.5;

    let group_phis = spiked.phis();
    let rho_v = rho(kernels, &group_phis, n)?;
    let weights: Vec<usize> = spiked.groups.iter().map(|g| g.multiplicity).collect();
    let rho_w = rho_weighted(kernels, &group_phis, &weights, n)?;
    let cov = DMatrix::from_fn(h, h, |s, t| {
        let (i, j) = (s.min(t), s.max(t));
        rho_v[i] * rho_v[j] * (spiked_cov[(i, j)] + bulk[(i, j)])
    });
    let spiked_share = (0..h)
        .map(|l| spiked_cov[(l, l)] / (spiked_cov[(l, l)] + bulk[(l, l)]))
        .collect();

    Ok(CltPrediction {
        kernels: kernels.to_vec(),
        mean: rho_v.iter().zip(&bulk_mean).map(|(r, m)| r * m).collect(),
        rho: rho_v,
        cov: to_rows(&cov),
        centering,
        spiked_centering,
        correction,
        correction_finite,
        components: CltComponents {
            bulk_mean,
            bulk_cov: to_rows(&bulk),
            bulk_cov_t1: to_rows(&terms.t1),
            bulk_cov_t2: to_rows(&terms.t2),
            bulk_cov_t3: to_rows(&terms.t3),
            spiked_cov: to_rows(&spiked_cov),
            spiked_share,
            rho_weighted: rho_w,
        },
        spiked,
        ratio: spectrum.ratio(),
        bulk_ratio: spectrum.bulk_ratio(),
        n,
        contour: integrals.grid().spec,
        contour_pair: *integrals.contour_pair(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::Preset;
    use crate::spectrum::{BulkDistribution, SpikeGroup};

    fn single_spike(alpha: f64, mult: usize) -> PopulationSpectrum {
        PopulationSpectrum::new(
            vec![SpikeGroup::constant(alpha, mult)],
            BulkDistribution::point(1.0).unwrap(),
            200,
            1000,
        )
        .unwrap()
    }

    #[test]
    fn sigma_sq_by_profile() {
        let s = single_spike(20.0, 1);
        let g = &spiked_quantities(&s, &MomentProfile::real_gaussian())
            .unwrap()
            .groups[0];
        assert!((g.sigma_sq - 2.0 / g.theta).abs() < 1e-12);
        let g6 = &spiked_quantities(&single_spike(20.0, 6), &MomentProfile::real_gaussian())
            .unwrap()
            .groups[0];
        assert!((g6.sigma_sq - 12.0 / g6.theta).abs() < 1e-12);
        let gc = &spiked_quantities(&s, &MomentProfile::complex_gaussian())
            .unwrap()
            .groups[0];
        assert!((gc.sigma_sq - 1.0 / gc.theta).abs() < 1e-12);
    }

    #[test]
    fn theta_and_nu_identities() {
        let s = single_spike(20.0, 1);
        let g = &spiked_quantities(&s, &MomentProfile::real_gaussian())
            .unwrap()
            .groups[0];
        // m(φ(α)) = -1/α, so ν = (φ/α)².
        assert!((g.m_under + 1.0 / 20.0).abs() < 1e-12);
        assert!((g.nu - (g.phi / 20.0).powi(2)).abs() < 1e-10);
        assert!(g.theta / g.nu >= 1.0);
    }

    #[test]
    fn pi_values() {
        let gauss = MomentProfile::real_gaussian();
        assert_eq!(pi_x(&gauss, (0, 0, 0, 0)).unwrap(), 0.0);
        let rad = MomentProfile::real(1.0);
        assert_eq!(pi_x(&rad, (2, 2, 2, 2)).unwrap(), -2.0);
        assert_eq!(pi_x(&rad, (1, 1, 2, 2)).unwrap(), 0.0);
        let u = DMatrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let rad_u = MomentProfile::real(1.0).with_u1(u);
        assert_eq!(pi_x(&rad_u, (1, 1, 1, 1)).unwrap(), -2.0);
        let bad = MomentProfile::real(1.0).with_u1(DMatrix::from_element(4, 2, 1.0));
        assert!(pi_x(&bad, (0, 0, 0, 0)).is_err());
    }

    #[test]
    fn rho_examples() {
        let k = [Kernel::Identity];
        assert_eq!(rho(&k, &[], 3000).unwrap(), vec![1.0]);
        let r = rho(&k, &[3000f64.sqrt()], 3000).unwrap()[0];
        assert!((r - 0.5f64.sqrt()).abs() < 1e-15);
        let s = Preset::CubeRoot.spectrum(100, 3000).unwrap();
        let phis = spike_locations(&s).unwrap();
        let r = rho(&k, &phis, 3000).unwrap()[0];
        assert!(r < 1.0 && r > 0.8, "{r}");
    }

    #[test]
    fn below_transition_is_rejected() {
        // φ'(α) < 0 for α < 1 + √c with identity bulk.
        let s = PopulationSpectrum::new(
            vec![SpikeGroup::constant(1.2, 1)],
            BulkDistribution::point(1.0).unwrap(),
            500,
            1000,
        )
        .unwrap();
        assert!(matches!(
            spiked_quantities(&s, &MomentProfile::real_gaussian()),
            Err(Error::BelowPhaseTransition { .. })
        ));
    }

    #[test]
    fn gamma_law_marginals() {
        let s = single_spike(20.0, 1);
        let law = gamma_law(&s, &MomentProfile::real_gaussian(), 0).unwrap();
        assert_eq!(law.marginal_variance, Some(law.group_variance));
        let law6 = gamma_law(&single_spike(20.0, 6), &MomentProfile::real_gaussian(), 0).unwrap();
        assert_eq!(law6.marginal_variance, None);
        assert!(gamma_law(&s, &MomentProfile::real_gaussian(), 3).is_err());
    }
}
