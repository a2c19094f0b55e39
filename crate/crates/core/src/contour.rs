//! Rectangular contours around the bulk support and the contour integrals
//! that make up the centering, the bulk mean and covariance, and the
//! spike-removal correction.
//!
//! Every side of a rectangle carries an `N`-point Gauss–Legendre rule. The
//! companion transform is solved at each node by continuation along the
//! counterclockwise path, so consecutive solves start from the previous
//! node's value.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::quadrature::{gauss_legendre, pairwise_sum};
use crate::spectrum::{phi, resolve_spikes, PopulationSpectrum, ResolvedSpike};
use crate::stieltjes::{SilversteinEquation, SupportInterval};

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);
/// Right-gap factor of the outer contour.
const OUTER_WIDEN: f64 = 2.0;
/// Height factor of the outer contour.
const OUTER_RAISE: f64 = 1.5;

/// How the mixed partial of `log(1 - a(z1, z2))` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixedPartial {
    #[default]
    Analytic,
    /// Central differences with one Richardson step; for cross-checks only.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContourOptions {
    pub margin: f64,
    /// Nodes per side for single integrals.
    pub nodes: usize,
    /// Nodes per side of each contour for double integrals.
    pub double_nodes: usize,
    pub mixed_partial: MixedPartial,
}

impl Default for ContourOptions {
    fn default() -> Self {
        ContourOptions {
            margin: 0.1,
            nodes: 1024,
            double_nodes: 256,
            mixed_partial: MixedPartial::Analytic,
        }
    }
}

/// Axis-aligned rectangle `[x_left, x_right] x [-half_height, half_height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourSpec {
    pub x_left: f64,
    pub x_right: f64,
    pub half_height: f64,
    pub nodes_per_side: usize,
}

impl ContourSpec {
    pub fn new(x_left: f64, x_right: f64, half_height: f64, nodes_per_side: usize) -> Result<Self> {
        if !(x_left.is_finite() && x_right.is_finite() && x_left < x_right) {
            return Err(Error::Domain(format!(
                "contour needs x_left < x_right, got [{x_left}, {x_right}]"
            )));
        }
        if !(half_height.is_finite() && half_height > 0.0) {
            return Err(Error::Domain(format!(
                "half height {half_height} must be positive"
            )));
        }
        if nodes_per_side < 2 {
            return Err(Error::Domain("at least two nodes per side".into()));
        }
        Ok(ContourSpec {
            x_left,
            x_right,
            half_height,
            nodes_per_side: nodes_per_side + nodes_per_side % 2,
        })
    }

    pub fn with_nodes(&self, nodes_per_side: usize) -> Self {
        ContourSpec {
            nodes_per_side: nodes_per_side.max(2) + nodes_per_side % 2,
            ..*self
        }
    }

    /// Whether the point lies strictly inside the rectangle.
    pub fn contains(&self, z: C) -> bool {
        z.re > self.x_left && z.re < self.x_right && z.im.abs() < self.half_height
    }

    /// Whether `self` lies strictly inside `other` without touching it.
    pub fn nested_in(&self, other: &ContourSpec) -> bool {
        self.x_left > other.x_left
            && self.x_right < other.x_right
            && self.half_height < other.half_height
    }

    /// Breakpoints of the bottom side, left to right. The first panel spans
    /// ten half heights (the whole side for a contour hugging the support);
    /// beyond it the side is cut into panels growing by a factor of four, so
    /// that a contour stretched out to a distant spike still resolves the
    /// region near the support.
    fn horizontal_breaks(&self) -> Vec<f64> {
        let mut breaks = vec![self.x_left];
        let mut b = self.x_left + 10.0 * self.half_height;
        while b < self.x_right * (1.0 - 1e-12) {
            breaks.push(b);
            b *= 4.0;
        }
        breaks.push(self.x_right);
        breaks
    }

    /// Counterclockwise nodes and their `dz` weights.
    ///
    /// Each vertical side is split at the real axis into two panels so that
    /// the rules cluster nodes where the contour passes closest to the
    /// support edges, and no node lies on the axis itself. Horizontal sides
    /// carry `nodes_per_side` nodes on their first panel and half as many on
    /// each further panel.
    pub fn path(&self) -> (Vec<C>, Vec<C>) {
        type Rule = (Vec<f64>, Vec<f64>);
        let n = self.nodes_per_side;
        let full = gauss_legendre(n);
        let half = gauss_legendre((n / 2).max(2));
        let v = self.half_height;
        let breaks = self.horizontal_breaks();
        let mut panels: Vec<(C, C, &Rule)> = Vec::new();
        for (i, w) in breaks.windows(2).enumerate() {
            let rule = if i == 0 { &full } else { &half };
            panels.push((C::new(w[0], -v), C::new(w[1], -v), rule));
        }
        let (xr, xl) = (self.x_right, self.x_left);
        panels.push((C::new(xr, -v), C::new(xr, 0.0), &half));
        panels.push((C::new(xr, 0.0), C::new(xr, v), &half));
        for (i, w) in breaks.windows(2).enumerate().rev() {
            let rule = if i == 0 { &full } else { &half };
            panels.push((C::new(w[1], v), C::new(w[0], v), rule));
        }
        panels.push((C::new(xl, v), C::new(xl, 0.0), &half));
        panels.push((C::new(xl, 0.0), C::new(xl, -v), &half));

        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (a, b, (xi, w)) in panels {
            let mid = (a + b) * 0.5;
            let h = (b - a) * 0.5;
            for (x, wk) in xi.iter().zip(w) {
                nodes.push(mid + h * *x);
                weights.push(h * *wk);
            }
        }
        (nodes, weights)
    }
}

/// `∮ dz / (z - z0)` by the contour's quadrature rule: `2πi` inside, `0`
/// outside.
pub fn cauchy_integral(spec: &ContourSpec, z0: C) -> C {
    let (nodes, weights) = spec.path();
    let terms: Vec<C> = nodes
        .iter()
        .zip(&weights)
        .map(|(z, w)| w / (z - z0))
        .collect();
    pairwise_sum(&terms)
}

/// Inner and outer contours for double integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourPair {
    pub inner: ContourSpec,
    pub outer: ContourSpec,
}

fn support_hull(support: &[SupportInterval]) -> Result<(f64, f64)> {
    match (support.first(), support.last()) {
        (Some(a), Some(b)) => Ok((a.left_edge, b.right_edge)),
        _ => Err(Error::Domain("empty support".into())),
    }
}

fn kernel_floor(kernels: &[Kernel]) -> Option<f64> {
    kernels
        .iter()
        .filter_map(|k| k.domain_floor())
        .max_by(f64::total_cmp)
}

/// Places the rectangle: `x_left = left_edge (1 - margin)`, `x_right` at the
/// geometric midpoint of the right edge and the smallest spiked location (or
/// `right_edge (1 + margin)` without spikes), half height `margin` times the
/// width.
pub fn build_contour(
    support: &[SupportInterval],
    spike_locations: &[f64],
    kernels: &[Kernel],
    margin: f64,
    nodes_per_side: usize,
) -> Result<ContourSpec> {
    if !(margin > 0.0 && margin < 0.5) {
        return Err(Error::Domain(format!(
            "margin {margin} must lie in (0, 0.5)"
        )));
    }
    let (left, right) = support_hull(support)?;
    if !(left > 0.0) {
        return Err(Error::ContourSqueeze(format!(
            "support [{left}, {right}] reaches zero"
        )));
    }
    let phi_min = spike_locations.iter().copied().min_by(f64::total_cmp);
    if let Some(phi_min) = phi_min {
        if !(phi_min > right * (1.0 + 2.0 * margin)) {
            return Err(Error::ContourSqueeze(format!(
                "spiked location {phi_min} is within {} of the bulk edge {right}",
                2.0 * margin * right
            )));
        }
    }
    let x_left = left * (1.0 - margin);
    if let Some(floor) = kernel_floor(kernels) {
        if !(x_left > floor) {
            return Err(Error::ContourTooTight(format!(
                "x_left = {x_left} is not above the kernel domain floor {floor}"
            )));
        }
    }
    let x_right = match phi_min {
        Some(phi_min) => (right * phi_min).sqrt(),
        None => right * (1.0 + margin),
    };
    // Height follows the support scale rather than a far-away spike.
    let reach = x_right.min(2.0 * right);
    ContourSpec::new(x_left, x_right, margin * (reach - x_left), nodes_per_side)
}

/// Contours for double integrals. The inner one is placed as by
/// [`build_contour`] without spikes (`x_right = right_edge (1 + margin)`,
/// which the squeeze check keeps below every spiked location); the outer one
/// has its left side halfway between the inner left side and zero (or the
/// kernel's domain floor), twice the inner right gap, and 1.5 times the
/// height. Keeping both tight around the support matters because the
/// `(m1 - m2)^{-2}` kernel is nearly singular wherever the two contours run
/// close together.
pub fn build_contour_pair(
    support: &[SupportInterval],
    spike_locations: &[f64],
    kernels: &[Kernel],
    margin: f64,
    nodes_per_side: usize,
) -> Result<ContourPair> {
    // Runs the squeeze checks against the spikes.
    build_contour(support, spike_locations, kernels, margin, nodes_per_side)?;
    let inner = build_contour(support, &[], kernels, margin, nodes_per_side)?;
    let (_, right) = support_hull(support)?;
    let floor = kernel_floor(kernels).unwrap_or(0.0).max(0.0);
    let x_left = 0.5 * (inner.x_left + floor);
    let x_right = right + OUTER_WIDEN * (inner.x_right - right);
    let outer = ContourSpec::new(
        x_left,
        x_right,
        OUTER_RAISE * inner.half_height,
        nodes_per_side,
    )?;
    Ok(ContourPair { inner, outer })
}

/// A discretized contour with the companion transform cached at every node.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub spec: ContourSpec,
    pub nodes: Vec<C>,
    pub weights: Vec<C>,
    pub m_under: Vec<C>,
    pub m_prime: Vec<C>,
}

impl QuadratureGrid {
    pub fn new(spec: &ContourSpec, eq: &SilversteinEquation) -> Result<Self> {
        let (nodes, weights) = spec.path();
        let (m_under, m_prime) = solve_along(&nodes, eq)?;
        Ok(QuadratureGrid {
            spec: *spec,
            nodes,
            weights,
            m_under,
            m_prime,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `∮ g dz` where `g` sees the node, `m` and `m'`.
    pub fn integrate(&self, g: impl Fn(C, C, C) -> Result<C>) -> Result<C> {
        let terms = (0..self.len())
            .map(|k| Ok(self.weights[k] * g(self.nodes[k], self.m_under[k], self.m_prime[k])?))
            .collect::<Result<Vec<C>>>()?;
        Ok(pairwise_sum(&terms))
    }

    /// Largest `|m_{k+1} - m_k| / |z_{k+1} - z_k|` along the path, a branch
    /// jump detector.
    pub fn max_step_ratio(&self) -> f64 {
        (0..self.len())
            .map(|k| {
                let j = (k + 1) % self.len();
                (self.m_under[j] - self.m_under[k]).norm() / (self.nodes[j] - self.nodes[k]).norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Solves at consecutive points, seeding each solve with the previous value
/// (conjugated when the path crosses the real axis).
fn solve_along(points: &[C], eq: &SilversteinEquation) -> Result<(Vec<C>, Vec<C>)> {
    let mut m = Vec::with_capacity(points.len());
    let mut mp = Vec::with_capacity(points.len());
    let mut hint: Option<C> = None;
    for &z in points {
        let seed = hint.map(|h| if h.im * z.im < 0.0 { h.conj() } else { h });
        let sol = eq.solve(z, seed)?;
        hint = Some(sol.m_under);
        m.push(sol.m_under);
        mp.push(sol.m_prime);
    }
    Ok((m, mp))
}

/// Real part of `scale * integral`, rejecting a non-negligible imaginary
/// residue.
fn real_part(value: C, what: &str) -> Result<f64> {
    let tol = 1e-6 * value.re.abs().max(1e-6);
    if value.im.abs() > tol || !value.re.is_finite() {
        return Err(Error::Numeric(format!(
            "{what} has imaginary residue {:e} (real part {:e})",
            value.im, value.re
        )));
    }
    Ok(value.re)
}

fn two_pi_i() -> C {
    C::new(0.0, 2.0 * PI)
}

/// Bulk contour integrals for one fixed-point equation.
#[derive(Debug, Clone)]
pub struct BulkIntegrals {
    eq: SilversteinEquation,
    options: ContourOptions,
    single: QuadratureGrid,
    pair: ContourPair,
}

/// The three parts of the bulk covariance, each an `h x h` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTerms {
    pub t1: DMatrix<f64>,
    pub t2: DMatrix<f64>,
    pub t3: DMatrix<f64>,
    pub total: DMatrix<f64>,
}

impl BulkIntegrals {
    /// Contours around the support of `eq`, kept below every spiked location.
    pub fn new(
        eq: SilversteinEquation,
        spike_locations: &[f64],
        kernels: &[Kernel],
        options: &ContourOptions,
    ) -> Result<Self> {
        let single = build_contour(
            eq.support(),
            spike_locations,
            kernels,
            options.margin,
            options.nodes,
        )?;
        let pair = build_contour_pair(
            eq.support(),
            spike_locations,
            kernels,
            options.margin,
            options.double_nodes,
        )?;
        let single = QuadratureGrid::new(&single, &eq)?;
        Ok(BulkIntegrals {
            eq,
            options: *options,
            single,
            pair,
        })
    }

    /// Same contours with explicit specs, for convergence studies.
    pub fn with_contours(
        eq: SilversteinEquation,
        single: ContourSpec,
        pair: ContourPair,
        options: &ContourOptions,
    ) -> Result<Self> {
        if !pair.inner.nested_in(&pair.outer) {
            return Err(Error::ContourSeparation(
                "inner contour is not nested in the outer one".into(),
            ));
        }
        let single = QuadratureGrid::new(&single, &eq)?;
        Ok(BulkIntegrals {
            eq,
            options: *options,
            single,
            pair,
        })
    }

    pub fn equation(&self) -> &SilversteinEquation {
        &self.eq
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.single
    }

    pub fn contour_pair(&self) -> &ContourPair {
        &self.pair
    }

    /// `-(n / 2πi) ∮ f(z) m(z) dz`, which equals `p ∫ f dF` over the part of
    /// the distribution enclosed by the contour.
    pub fn centering(&self, f: &Kernel, n: usize) -> Result<f64> {
        let v = self.single.integrate(|z, m, _| Ok(f.eval(z)? * m))?;
        real_part(-(n as f64) * v / two_pi_i(), "centering integral")
    }

    /// Limiting mean of the bulk statistic.
    pub fn mean(&self, f: &Kernel, alpha_x: f64, beta_x: f64) -> Result<f64> {
        let c = self.eq.ratio();
        let v = self.single.integrate(|z, m, _| {
            let (mut cubic, mut square) = (ZERO, ZERO);
            for &(t, w) in self.eq.positive_atoms() {
                let d = 1.0 + m * t;
                let r = m * t / d;
                cubic += r * r * m / d * (c * w);
                square += r * r * (c * w);
            }
            let one_minus = 1.0 - square;
            if one_minus.norm() < 1e-10 {
                return Err(Error::ContourTooTight(format!(
                    "1 - c∫m²t²(1+tm)⁻² dH vanishes at {z}"
                )));
            }
            let fz = f.eval(z)?;
            let mut out = ZERO;
            if alpha_x != 0.0 {
                let second = 1.0 - square * alpha_x;
                if second.norm() < 1e-10 {
                    return Err(Error::ContourTooTight(format!(
                        "1 - α c∫m²t²(1+tm)⁻² dH vanishes at {z}"
                    )));
                }
                out += fz * cubic * alpha_x / (one_minus * second);
            }
            if beta_x != 0.0 {
                out += fz * cubic * beta_x / one_minus;
            }
            Ok(out)
        })?;
        real_part(-v / two_pi_i(), "bulk mean")
    }

    /// `(M / 2πi) ∮ f m'/m dz`, the shift between the full statistic with its
    /// spiked eigenvalues removed and the bulk-block statistic when the spikes
    /// are infinitely far out.
    pub fn correction(&self, f: &Kernel, multiplicity: usize) -> Result<f64> {
        if multiplicity == 0 {
            return Ok(0.0);
        }
        let v = self.single.integrate(|z, m, mp| {
            if m.norm() == 0.0 {
                return Err(Error::Numeric(format!("m vanishes at {z}")));
            }
            Ok(f.eval(z)? * mp / m)
        })?;
        real_part(multiplicity as f64 * v / two_pi_i(), "correction term")
    }

    /// The same shift for finite spikes, `Σ_j (1/2πi) ∮ f α_j m' / (1 + α_j m) dz`.
    /// Tends to [`Self::correction`] as every `α_j` grows.
    pub fn correction_finite(&self, f: &Kernel, spikes: &[ResolvedSpike]) -> Result<f64> {
        let mut total = 0.0;
        for s in spikes {
            let a = s.value;
            let v = self.single.integrate(|z, m, mp| {
                let d = 1.0 + m * a;
                if d.norm() == 0.0 {
                    return Err(Error::Numeric(format!("1 + αm vanishes at {z}")));
                }
                Ok(f.eval(z)? * mp * a / d)
            })?;
            total += real_part(s.multiplicity as f64 * v / two_pi_i(), "finite correction")?;
        }
        Ok(total)
    }

    /// Bulk covariance terms for all kernel pairs.
    pub fn covariance(
        &self,
        kernels: &[Kernel],
        alpha_x: f64,
        beta_x: f64,
    ) -> Result<CovarianceTerms> {
        let inner = QuadratureGrid::new(&self.pair.inner, &self.eq)?;
        let outer = QuadratureGrid::new(&self.pair.outer, &self.eq)?;
        let fd = match self.options.mixed_partial {
            MixedPartial::Analytic => None,
            MixedPartial::FiniteDifference => Some((
                ShiftedValues::new(&inner, &self.eq)?,
                ShiftedValues::new(&outer, &self.eq)?,
            )),
        };
        covariance_terms(
            &self.eq,
            kernels,
            alpha_x,
            beta_x,
            &inner,
            &outer,
            fd.as_ref(),
        )
    }
}

/// Transform values at `z ± h` and `z ± h/2` for each node, used by the
/// finite-difference mixed partial.
#[derive(Debug, Clone)]
struct ShiftedValues {
    h: f64,
    /// `[z - h, z - h/2, z + h/2, z + h]` per node.
    m: Vec<[C; 4]>,
}

impl ShiftedValues {
    const OFFSETS: [f64; 4] = [-1.0, -0.5, 0.5, 1.0];

    fn new(grid: &QuadratureGrid, eq: &SilversteinEquation) -> Result<Self> {
        let h = 1e-4 * (grid.spec.x_right - grid.spec.x_left);
        let mut columns = Vec::new();
        for off in Self::OFFSETS {
            let pts: Vec<C> = grid.nodes.iter().map(|z| z + off * h).collect();
            columns.push(solve_along(&pts, eq)?.0);
        }
        let m = (0..grid.len())
            .map(|k| [columns[0][k], columns[1][k], columns[2][k], columns[3][k]])
            .collect();
        Ok(ShiftedValues { h, m })
    }
}

/// `1 - a(z1, z2)` in its defining form `a = α(1 + m1 m2 (z1 - z2)/(m2 - m1))`.
fn one_minus_a_defining(alpha_x: f64, z1: C, m1: C, z2: C, m2: C) -> C {
    1.0 - alpha_x * (1.0 + m1 * m2 * (z1 - z2) / (m2 - m1))
}

fn fd_mixed_partial(alpha_x: f64, z1: C, s1: &[C; 4], z2: C, s2: &[C; 4], h: (f64, f64)) -> C {
    // Index pairs (minus, plus) for the full and the half step.
    let stencil = |lo: usize, hi: usize, step1: f64, step2: f64| {
        let g = |i: usize, j: usize| {
            let d1 = ShiftedValues::OFFSETS[i] * h.0;
            let d2 = ShiftedValues::OFFSETS[j] * h.1;
            one_minus_a_defining(alpha_x, z1 + d1, s1[i], z2 + d2, s2[j])
        };
        let ratio = (g(hi, hi) * g(lo, lo)) / (g(hi, lo) * g(lo, hi));
        ratio.ln() / (4.0 * step1 * step2)
    };
    let full = stencil(0, 3, h.0, h.1);
    let half = stencil(1, 2, 0.5 * h.0, 0.5 * h.1);
    (4.0 * half - full) / 3.0
}

fn covariance_terms(
    eq: &SilversteinEquation,
    kernels: &[Kernel],
    alpha_x: f64,
    beta_x: f64,
    inner: &QuadratureGrid,
    outer: &QuadratureGrid,
    fd: Option<&(ShiftedValues, ShiftedValues)>,
) -> Result<CovarianceTerms> {
    let h = kernels.len();
    let c = eq.ratio();
    let atoms = eq.positive_atoms();
    let eval_all = |grid: &QuadratureGrid| -> Result<Vec<Vec<C>>> {
        grid.nodes
            .iter()
            .zip(&grid.weights)
            .map(|(z, w)| kernels.iter().map(|k| Ok(k.eval(*z)? * w)).collect())
            .collect()
    };
    let f1 = eval_all(inner)?;
    let f2 = eval_all(outer)?;

    // Per-node factors of the separable pieces.
    let sep = |grid: &QuadratureGrid, k: usize| -> (Vec<C>, Vec<C>) {
        let (m, mp) = (grid.m_under[k], grid.m_prime[k]);
        let r: Vec<C> = atoms.iter().map(|&(t, _)| m / (1.0 + m * t)).collect();
        let dr: Vec<C> = atoms
            .iter()
            .map(|&(t, _)| {
                let d = 1.0 + m * t;
                mp / (d * d)
            })
            .collect();
        (r, dr)
    };
    let sep1: Vec<(Vec<C>, Vec<C>)> = (0..inner.len()).map(|k| sep(inner, k)).collect();
    let sep2: Vec<(Vec<C>, Vec<C>)> = (0..outer.len()).map(|k| sep(outer, k)).collect();

    // rows[i] = (v1, v2, v3) with v_term[t] = Σ_j K_term(i, j) f_t(z_j) dz_j.
    let rows: Vec<Result<[Vec<C>; 3]>> = (0..inner.len())
        .into_par_iter()
        .map(|i| {
            let (z1, m1, mp1) = (inner.nodes[i], inner.m_under[i], inner.m_prime[i]);
            let (r1, dr1) = &sep1[i];
            let mut acc: [Vec<Vec<C>>; 3] = [
                vec![Vec::with_capacity(outer.len()); h],
                vec![Vec::with_capacity(outer.len()); h],
                vec![Vec::with_capacity(outer.len()); h],
            ];
            for j in 0..outer.len() {
                let (z2, m2, mp2) = (outer.nodes[j], outer.m_under[j], outer.m_prime[j]);
                let (r2, dr2) = &sep2[j];
                let diff = m1 - m2;
                if diff.norm() < 1e-14 * m1.norm().max(1e-300) {
                    return Err(Error::ContourSeparation(format!(
                        "m coincides at {z1} and {z2}"
                    )));
                }
                let k1 = mp1 * mp2 / (diff * diff);
                let mut k2 = ZERO;
                let (mut a, mut a1, mut a2, mut a12) = (ZERO, ZERO, ZERO, ZERO);
                for (q, &(t, w)) in atoms.iter().enumerate() {
                    let cw = c * w * t * t;
                    // t² (1+tm1)⁻² (1+tm2)⁻² m1' m2' = t² dr1 dr2.
                    k2 += dr1[q] * dr2[q] * cw;
                    a += r1[q] * r2[q] * cw;
                    a1 += dr1[q] * r2[q] * cw;
                    a2 += r1[q] * dr2[q] * cw;
                    a12 += dr1[q] * dr2[q] * cw;
                }
                let k2 = k2 * beta_x;
                let k3 = if alpha_x == 0.0 {
                    ZERO
                } else if let Some((s_in, s_out)) = fd {
                    fd_mixed_partial(alpha_x, z1, &s_in.m[i], z2, &s_out.m[j], (s_in.h, s_out.h))
                } else {
                    let g = 1.0 - a * alpha_x;
                    if g.norm() < 1e-12 {
                        return Err(Error::ContourSeparation(format!(
                            "a(z1, z2) = 1 at ({z1}, {z2})"
                        )));
                    }
                    let (g1, g2, g12) = (-a1 * alpha_x, -a2 * alpha_x, -a12 * alpha_x);
                    (g * g12 - g1 * g2) / (g * g)
                };
                for t in 0..h {
                    let fw = f2[j][t];
                    acc[0][t].push(k1 * fw);
                    acc[1][t].push(k2 * fw);
                    acc[2][t].push(k3 * fw);
                }
            }
            Ok(acc.map(|per_kernel| per_kernel.iter().map(|v| pairwise_sum(v)).collect()))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    // (1/2πi)² = -1/(4π²).
    let pref = -1.0 / (4.0 * PI * PI);
    let contract = |term: usize, sign: f64| -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(h, h);
        for s in 0..h {
            for t in 0..h {
                let terms: Vec<C> = (0..inner.len())
                    .map(|i| f1[i][s] * rows[i][term][t])
                    .collect();
                let v = pairwise_sum(&terms) * (sign * pref);
                out[(s, t)] = real_part(v, "bulk covariance")?;
            }
        }
        Ok(out)
    };
    let t1 = contract(0, 1.0)?;
    let t2 = contract(1, 1.0)?;
    // The log(1 - a) term enters with the opposite sign to T1 and T2; with
    // that orientation the real Gaussian case doubles the complex one.
    let t3 = contract(2, -1.0)?;
    let total = &t1 + &t2 + &t3;
    Ok(CovarianceTerms { t1, t2, t3, total })
}

/// Locations `φ(α_k)` of the resolved spikes under the bulk equation.
pub fn spike_locations(spectrum: &PopulationSpectrum) -> Result<Vec<f64>> {
    let c = spectrum.bulk_ratio();
    resolve_spikes(spectrum)?
        .iter()
        .map(|s| phi(s.value, c, &spectrum.bulk))
        .collect()
}

/// `p ∫ f dF^{c_n, H_n}` through `-(n/2πi) ∮ f m dz` with the embedded
/// equation `(p/n, H_n)`. The contour excludes the mass that the zero atoms
/// of `H_n` put at the origin.
pub fn centering_integral(
    f: &Kernel,
    spectrum: &PopulationSpectrum,
    options: &ContourOptions,
) -> Result<f64> {
    let eq = SilversteinEquation::embedded(spectrum)?;
    let phis = spike_locations(spectrum)?;
    let integrals = BulkIntegrals::new(eq, &phis, std::slice::from_ref(f), options)?;
    integrals.centering(f, spectrum.n)
}

fn spikeless(
    c: f64,
    h: &crate::spectrum::BulkDistribution,
    kernels: &[Kernel],
    options: &ContourOptions,
) -> Result<BulkIntegrals> {
    BulkIntegrals::new(
        SilversteinEquation::new(c, h.clone())?,
        &[],
        kernels,
        options,
    )
}

/// Limiting bulk mean `μ` for ratio `c` and population `H`.
pub fn bulk_mean(
    f: &Kernel,
    c: f64,
    h: &crate::spectrum::BulkDistribution,
    alpha_x: f64,
    beta_x: f64,
    options: &ContourOptions,
) -> Result<f64> {
    spikeless(c, h, std::slice::from_ref(f), options)?.mean(f, alpha_x, beta_x)
}

/// Limiting bulk covariance `σ²_{s,t}` for ratio `c` and population `H`.
pub fn bulk_cov(
    f_s: &Kernel,
    f_t: &Kernel,
    c: f64,
    h: &crate::spectrum::BulkDistribution,
    alpha_x: f64,
    beta_x: f64,
    options: &ContourOptions,
) -> Result<f64> {
    let kernels = [f_s.clone(), f_t.clone()];
    let terms = spikeless(c, h, &kernels, options)?.covariance(&kernels, alpha_x, beta_x)?;
    Ok(0.5 * (terms.total[(0, 1)] + terms.total[(1, 0)]))
}

/// `(M/2πi) ∮ f m'/m dz` for ratio `c` and population `H`.
pub fn correction_term(
    f: &Kernel,
    multiplicity: usize,
    c: f64,
    h: &crate::spectrum::BulkDistribution,
    options: &ContourOptions,
) -> Result<f64> {
    spikeless(c, h, std::slice::from_ref(f), options)?.correction(f, multiplicity)
}

/// Values of an integral at successive node counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// `(nodes per side, value)` in doubling order.
    pub values: Vec<(usize, f64)>,
    /// Node count whose value moved by less than the tolerance on doubling.
    pub converged_at: usize,
}

pub const CONVERGENCE_TOL: f64 = 1e-6;
pub const MAX_NODES: usize = 1 << 14;

/// Doubles the node count from `start` until the relative change drops below
/// `1e-6` (changes below `1e-12` in absolute value also count, for integrals
/// whose value is zero).
pub fn quadrature_convergence(
    start: usize,
    mut op: impl FnMut(usize) -> Result<f64>,
) -> Result<ConvergenceReport> {
    let mut n = start.max(2);
    let mut values = vec![(n, op(n)?)];
    while n < MAX_NODES {
        n *= 2;
        let v = op(n)?;
        let prev = values.last().unwrap().1;
        values.push((n, v));
        let change = (v - prev).abs();
        if change < CONVERGENCE_TOL * v.abs() || change < 1e-12 {
            return Ok(ConvergenceReport {
                values,
                converged_at: n / 2,
            });
        }
    }
    let k = values.len();
    let (a, b) = (values[k - 2].1, values[k - 1].1);
    Err(Error::QuadratureNonConvergence {
        last_change: (b - a).abs() / b.abs().max(1e-300),
        nodes: n,
    })
}
