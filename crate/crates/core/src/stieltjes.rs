//! Companion Stieltjes transform `m(z)` of the limiting spectral distribution
//! of `B = T X X* T* / n`, obtained from the fixed-point equation
//!
//! ```text
//! z = -1/m + c * sum_i w_i t_i / (1 + t_i m)
//! ```
//!
//! for an atomic population distribution `H = sum_i w_i delta_{t_i}`.
//!
//! Off the real axis the solver runs Newton from a caller hint (contour
//! continuation) and falls back to the fixed-point map
//! `m -> 1 / (-z + c sum w t / (1 + t m))`, always returning the branch with
//! `Im m * Im z > 0`. On the real axis outside the support the equation is
//! inverted on the monotone branches of `z(m)`, which are also what locates
//! the support edges.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectrum::{build_h_n, BulkDistribution, PopulationSpectrum};

const MAX_ITER: usize = 500;
const TOL: f64 = 1e-12;
const NEWTON_ITER: usize = 60;
const SCAN_POINTS: usize = 4000;

/// Solution of the fixed-point equation at one complex point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SilversteinSolution {
    pub z: Complex64,
    pub m_under: Complex64,
    /// `dm/dz` from implicit differentiation.
    pub m_prime: Complex64,
    pub residual: f64,
    pub iterations: usize,
}

/// One connected component `[left_edge, right_edge]` of the LSD support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportInterval {
    pub left_edge: f64,
    pub right_edge: f64,
}

impl SupportInterval {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.left_edge && x <= self.right_edge
    }
}

/// Parametrization of an interval of the real `m` axis by a bounded variable,
/// used for scanning and bisection.
#[derive(Debug, Clone, Copy)]
enum Span {
    /// `(a, b)` through a logistic map, evaluated from the nearer end so that
    /// points close to either end keep full relative precision.
    Finite(f64, f64),
    /// `(-inf, b)` through `b - e^u`.
    BelowTo(f64),
    /// `(a, +inf)` through `a + e^u`.
    AboveFrom(f64),
}

impl Span {
    fn u_range(&self) -> (f64, f64) {
        match self {
            Span::Finite(..) => (-40.0, 40.0),
            Span::BelowTo(_) | Span::AboveFrom(_) => (-45.0, 45.0),
        }
    }

    fn at(&self, u: f64) -> f64 {
        match *self {
            Span::Finite(a, b) if u < 0.0 => a + (b - a) / (1.0 + (-u).exp()),
            Span::Finite(a, b) => b - (b - a) / (1.0 + u.exp()),
            Span::BelowTo(b) => b - u.exp(),
            Span::AboveFrom(a) => a + u.exp(),
        }
    }

    /// Whether `m` increases with `u`.
    fn increasing(&self) -> bool {
        !matches!(self, Span::BelowTo(_))
    }
}

/// End of a monotone branch of `z(m)`.
#[derive(Debug, Clone, Copy, PartialEq)]
enum BranchEnd {
    Stationary(f64),
    MinusInfinity,
    ZeroBelow,
    ZeroAbove,
    PlusInfinity,
}

/// A maximal `m` interval on which `z(m)` is strictly increasing.
#[derive(Debug, Clone, Copy)]
struct Branch {
    lo: BranchEnd,
    hi: BranchEnd,
    z_lo: f64,
    z_hi: f64,
}

/// The fixed-point equation for a given ratio `c` and atomic `H`.
#[derive(Debug, Clone)]
pub struct SilversteinEquation {
    c: f64,
    h: BulkDistribution,
    /// Positive atoms `(t, w)`; zero atoms do not enter the equation.
    atoms: Vec<(f64, f64)>,
    branches: Vec<Branch>,
    support: Vec<SupportInterval>,
}

impl SilversteinEquation {
    pub fn new(c: f64, h: BulkDistribution) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Domain(format!("ratio c = {c} must be positive")));
        }
        let atoms: Vec<(f64, f64)> = h
            .atoms()
            .iter()
            .filter(|a| a.value > 0.0)
            .map(|a| (a.value, a.weight))
            .collect();
        if atoms.is_empty() {
            return Err(Error::InvalidBulk("H has no positive atoms".into()));
        }
        let mut eq = SilversteinEquation {
            c,
            h,
            atoms,
            branches: Vec::new(),
            support: Vec::new(),
        };
        eq.branches = eq.increasing_branches()?;
        eq.support = eq.support_from_branches();
        Ok(eq)
    }

    /// Equation for the bulk block of a spectrum: ratio `(p - M)/n` and `H_2n`.
    pub fn bulk(spectrum: &PopulationSpectrum) -> Result<Self> {
        SilversteinEquation::new(spectrum.bulk_ratio(), spectrum.bulk.clone())
    }

    /// Equation for the full `p`-dimensional embedding: ratio `p/n` and `H_n`.
    pub fn embedded(spectrum: &PopulationSpectrum) -> Result<Self> {
        let (h_n, _) = build_h_n(spectrum);
        SilversteinEquation::new(spectrum.ratio(), h_n)
    }

    pub fn ratio(&self) -> f64 {
        self.c
    }

    pub fn population(&self) -> &BulkDistribution {
        &self.h
    }

    /// Positive atoms `(t, w)` of `H`.
    pub fn positive_atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// `c * E_H[g(t)]` over the positive atoms.
    pub fn weighted_sum<T>(&self, g: impl Fn(f64) -> T) -> T
    where
        T: std::ops::Mul<f64, Output = T> + std::iter::Sum<T>,
    {
        self.atoms.iter().map(|&(t, w)| g(t) * (w * self.c)).sum()
    }

    /// `z(m) = -1/m + c E_H[t / (1 + t m)]`.
    pub fn z_of(&self, m: Complex64) -> Complex64 {
        -m.inv() + self.weighted_sum(|t| Complex64::new(t, 0.0) / (1.0 + m * t))
    }

    /// `z'(m) = 1/m^2 - c E_H[t^2 / (1 + t m)^2]`.
    pub fn dz_dm(&self, m: Complex64) -> Complex64 {
        (m * m).inv()
            - self.weighted_sum(|t| {
                let d = 1.0 + m * t;
                Complex64::new(t * t, 0.0) / (d * d)
            })
    }

    fn z_of_real(&self, m: f64) -> f64 {
        -1.0 / m + self.weighted_sum(|t| t / (1.0 + t * m))
    }

    fn dz_dm_real(&self, m: f64) -> f64 {
        1.0 / (m * m) - self.weighted_sum(|t| t * t / ((1.0 + t * m) * (1.0 + t * m)))
    }

    /// `m^2 z'(m)`, finite away from the poles and sharing the sign of `z'`.
    fn scaled_slope(&self, m: f64) -> f64 {
        1.0 - self.weighted_sum(|t| {
            let r = t * m / (1.0 + t * m);
            r * r
        })
    }

    /// Support components of the LSD on `(0, inf)`, sorted ascending.
    pub fn support(&self) -> &[SupportInterval] {
        &self.support
    }

    pub fn right_edge(&self) -> f64 {
        self.support.last().map(|s| s.right_edge).unwrap_or(0.0)
    }

    pub fn left_edge(&self) -> f64 {
        self.support.first().map(|s| s.left_edge).unwrap_or(0.0)
    }

    pub fn in_support(&self, x: f64) -> bool {
        self.support.iter().any(|s| s.contains(x))
    }

    fn spans(&self) -> Vec<Span> {
        let mut poles: Vec<f64> = self.atoms.iter().map(|&(t, _)| -1.0 / t).collect();
        poles.sort_by(f64::total_cmp);
        let mut spans = vec![Span::BelowTo(poles[0])];
        for w in poles.windows(2) {
            spans.push(Span::Finite(w[0], w[1]));
        }
        spans.push(Span::Finite(*poles.last().unwrap(), 0.0));
        spans.push(Span::AboveFrom(0.0));
        spans
    }

    /// Stationary points of `z(m)` inside one span, in increasing `m`.
    fn stationary_points(&self, span: Span) -> Result<Vec<f64>> {
        let (u0, u1) = span.u_range();
        let g = |u: f64| self.scaled_slope(span.at(u));
        let mut roots = Vec::new();
        let mut prev_u = u0;
        let mut prev_g = g(u0);
        for k in 1..=SCAN_POINTS {
            let u = u0 + (u1 - u0) * k as f64 / SCAN_POINTS as f64;
            let gu = g(u);
            if prev_g.is_finite() && gu.is_finite() && prev_g.signum() != gu.signum() {
                let root = bisect(&g, prev_u, u, prev_g)?;
                roots.push(span.at(root));
            }
            prev_u = u;
            prev_g = gu;
        }
        roots.sort_by(f64::total_cmp);
        Ok(roots)
    }

    fn increasing_branches(&self) -> Result<Vec<Branch>> {
        let mut branches = Vec::new();
        for span in self.spans() {
            let stationary = self.stationary_points(span)?;
            let (start, end) = match span {
                Span::BelowTo(b) => (BranchEnd::MinusInfinity, pole_or_zero(b, true)),
                Span::Finite(a, b) => (pole_or_zero(a, false), pole_or_zero(b, true)),
                Span::AboveFrom(_) => (BranchEnd::ZeroAbove, BranchEnd::PlusInfinity),
            };
            let mut ends = vec![start];
            ends.extend(stationary.iter().map(|&s| BranchEnd::Stationary(s)));
            ends.push(end);
            for pair in ends.windows(2) {
                let (lo, hi) = (pair[0], pair[1]);
                let Some(mid) = self.interior_point(lo, hi, span) else {
                    continue;
                };
                if self.scaled_slope(mid) <= 0.0 {
                    continue;
                }
                let z_lo = self.end_value(lo);
                let z_hi = self.end_value(hi);
                if z_lo.is_nan() || z_hi.is_nan() {
                    continue;
                }
                branches.push(Branch { lo, hi, z_lo, z_hi });
            }
        }
        Ok(branches)
    }

    fn interior_point(&self, lo: BranchEnd, hi: BranchEnd, span: Span) -> Option<f64> {
        let a = end_coordinate(lo);
        let b = end_coordinate(hi);
        let m = match (a, b) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (None, Some(b)) => b - 1.0 - b.abs(),
            (Some(a), None) => a + 1.0 + a.abs(),
            (None, None) => return None,
        };
        // Keep the probe inside the span even when an end is a pole.
        let m = match span {
            Span::Finite(a0, b0) if !(m > a0 && m < b0) => 0.5 * (a0 + b0),
            _ => m,
        };
        Some(m)
    }

    /// Limit of `z(m)` at a branch end. Branch ends are never poles because
    /// `z'` is negative next to every pole.
    fn end_value(&self, end: BranchEnd) -> f64 {
        match end {
            BranchEnd::Stationary(s) => self.z_of_real(s),
            BranchEnd::MinusInfinity | BranchEnd::PlusInfinity => 0.0,
            BranchEnd::ZeroBelow => f64::INFINITY,
            BranchEnd::ZeroAbove => f64::NEG_INFINITY,
        }
    }

    fn support_from_branches(&self) -> Vec<SupportInterval> {
        let mut ranges: Vec<(f64, f64)> = self.branches.iter().map(|b| (b.z_lo, b.z_hi)).collect();
        ranges.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Vec::new();
        let mut covered = f64::NEG_INFINITY;
        for (lo, hi) in ranges {
            if lo > covered && covered >= 0.0 && lo - covered > 1e-14 * lo.abs().max(1.0) {
                out.push(SupportInterval {
                    left_edge: covered,
                    right_edge: lo,
                });
            } else if lo > covered && covered < 0.0 && lo > 0.0 {
                out.push(SupportInterval {
                    left_edge: 0.0,
                    right_edge: lo,
                });
            }
            covered = covered.max(hi);
        }
        out
    }

    /// Real solution at `lambda` outside the support, with `dm/dlambda`.
    pub fn solve_real(&self, lambda: f64) -> Result<(f64, f64)> {
        if !lambda.is_finite() {
            return Err(Error::Domain(format!("lambda = {lambda} is not finite")));
        }
        let branch = self
            .branches
            .iter()
            .find(|b| lambda > b.z_lo && lambda < b.z_hi)
            .ok_or_else(|| {
                Error::Domain(format!("lambda = {lambda} lies on the support of the LSD"))
            })?;
        let span = branch_span(branch);
        let (u0, u1) = span.u_range();
        let h = |u: f64| {
            let v = self.z_of_real(span.at(u)) - lambda;
            if span.increasing() {
                v
            } else {
                -v
            }
        };
        let (mut a, mut b) = (u0, u1);
        // Tighten the bracket so that it straddles the root.
        while h(a).is_nan() || h(a) > 0.0 {
            a = 0.5 * (a + b);
            if b - a < 1e-12 {
                return Err(Error::Bracketing(format!("no root for lambda = {lambda}")));
            }
        }
        while h(b).is_nan() || h(b) < 0.0 {
            b = 0.5 * (a + b);
            if b - a < 1e-12 {
                return Err(Error::Bracketing(format!("no root for lambda = {lambda}")));
            }
        }
        let u = bisect(&h, a, b, h(a))?;
        let mut m = span.at(u);
        // Newton polish in m.
        for _ in 0..5 {
            let step = (self.z_of_real(m) - lambda) / self.dz_dm_real(m);
            if !step.is_finite() {
                break;
            }
            m -= step;
        }
        let slope = self.dz_dm_real(m);
        Ok((m, 1.0 / slope))
    }

    /// Solves for `m` at `z`, on the branch with `Im m * Im z > 0` off the
    /// real axis and on the real branch outside the support.
    pub fn solve(&self, z: Complex64, hint: Option<Complex64>) -> Result<SilversteinSolution> {
        if !(z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::Domain(format!("z = {z} is not finite")));
        }
        if z.im == 0.0 {
            let (m, dm) = self.solve_real(z.re)?;
            let m_c = Complex64::new(m, 0.0);
            return Ok(SilversteinSolution {
                z,
                m_under: m_c,
                m_prime: Complex64::new(dm, 0.0),
                residual: (self.z_of(m_c) - z).norm(),
                iterations: 0,
            });
        }
        let sign = z.im.signum();
        let tol = TOL * z.norm().max(1.0);
        let admissible = |m: Complex64| m.is_finite() && m.im * sign > 0.0;

        if let Some(h) = hint.filter(|h| admissible(*h)) {
            if let Some((m, it, res)) = self.newton(z, h, tol) {
                if admissible(m) {
                    return Ok(self.package(z, m, res, it));
                }
            }
        }

        let mut m = hint.filter(|h| admissible(*h)).unwrap_or(-z.inv());
        let mut damping = 1.0;
        let mut residual = (self.z_of(m) - z).norm();
        for it in 1..=MAX_ITER {
            let image = (-z + self.weighted_sum(|t| Complex64::new(t, 0.0) / (1.0 + m * t))).inv();
            let next = m * (1.0 - damping) + image * damping;
            let next_res = (self.z_of(next) - z).norm();
            if !next_res.is_finite() || next_res > residual * 1.5 {
                damping *= 0.5;
                if damping < 1e-4 {
                    break;
                }
                continue;
            }
            m = next;
            residual = next_res;
            if residual < 1e-6 * z.norm().max(1.0) || it % 50 == 0 {
                if let Some((polished, extra, res)) = self.newton(z, m, tol) {
                    if admissible(polished) {
                        return Ok(self.package(z, polished, res, it + extra));
                    }
                }
            }
        }
        Err(Error::NonConvergence {
            residual,
            iterations: MAX_ITER,
        })
    }

    fn newton(&self, z: Complex64, start: Complex64, tol: f64) -> Option<(Complex64, usize, f64)> {
        let mut m = start;
        for it in 1..=NEWTON_ITER {
            let f = self.z_of(m) - z;
            let step = f / self.dz_dm(m);
            if !step.is_finite() {
                return None;
            }
            m -= step;
            let res = (self.z_of(m) - z).norm();
            if res < tol && step.norm() <= 1e-10 * m.norm().max(1e-300) + 1e-300 {
                return Some((m, it, res));
            }
            if res < tol * 1e-2 {
                return Some((m, it, res));
            }
        }
        let res = (self.z_of(m) - z).norm();
        (res < tol).then_some((m, NEWTON_ITER, res))
    }

    fn package(
        &self,
        z: Complex64,
        m: Complex64,
        residual: f64,
        iterations: usize,
    ) -> SilversteinSolution {
        SilversteinSolution {
            z,
            m_under: m,
            m_prime: self.dz_dm(m).inv(),
            residual,
            iterations,
        }
    }

    /// Density of `F^{c,H}` at `x`; zero outside the support.
    pub fn density(&self, x: f64) -> f64 {
        if !(x > 0.0) || !self.in_support(x) {
            return 0.0;
        }
        // Continue from well above the axis down to it.
        let scale = x.max(self.right_edge());
        let mut eta = scale;
        let mut hint: Option<Complex64> = None;
        let floor = 1e-13 * scale;
        loop {
            let z = Complex64::new(x, eta);
            match self.solve(z, hint) {
                Ok(sol) => hint = Some(sol.m_under),
                Err(_) => return f64::NAN,
            }
            if eta <= floor {
                break;
            }
            eta = (eta * 0.25).max(floor);
        }
        let m = hint.expect("at least one solve");
        (m.im / (self.c * std::f64::consts::PI)).max(0.0)
    }
}

fn pole_or_zero(m: f64, upper: bool) -> BranchEnd {
    if m == 0.0 {
        if upper {
            BranchEnd::ZeroBelow
        } else {
            BranchEnd::ZeroAbove
        }
    } else {
        // A pole; such ends never bound an increasing branch and the slope
        // test discards the adjacent sub-interval.
        BranchEnd::Stationary(m)
    }
}

fn end_coordinate(end: BranchEnd) -> Option<f64> {
    match end {
        BranchEnd::Stationary(s) => Some(s),
        BranchEnd::ZeroBelow | BranchEnd::ZeroAbove => Some(0.0),
        BranchEnd::MinusInfinity | BranchEnd::PlusInfinity => None,
    }
}

fn branch_span(b: &Branch) -> Span {
    match (end_coordinate(b.lo), end_coordinate(b.hi)) {
        (Some(a), Some(c)) => Span::Finite(a, c),
        (None, Some(c)) => Span::BelowTo(c),
        (Some(a), None) => Span::AboveFrom(a),
        (None, None) => Span::AboveFrom(0.0),
    }
}

/// Bisection for a sign change of `g` on `[a, b]` given `g(a)`.
fn bisect(g: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut ga: f64) -> Result<f64> {
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let gm = g(mid);
        if gm.is_nan() {
            return Err(Error::Bracketing("NaN inside bracket".into()));
        }
        if gm == 0.0 {
            return Ok(mid);
        }
        if gm.signum() == ga.signum() {
            a = mid;
            ga = gm;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Companion Stieltjes transform at `z` for ratio `c` and population `H`.
pub fn solve_m_under(
    z: Complex64,
    c: f64,
    h: &BulkDistribution,
    hint: Option<Complex64>,
) -> Result<SilversteinSolution> {
    SilversteinEquation::new(c, h.clone())?.solve(z, hint)
}

/// `(m(lambda), m_2(lambda))` for real `lambda > 0` outside the support, where
/// `m_2(lambda) = int (lambda - x)^{-2} dF` equals `dm/dlambda`.
pub fn m_under_real(lambda: f64, c: f64, h: &BulkDistribution) -> Result<(f64, f64)> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda = {lambda} must be positive")));
    }
    SilversteinEquation::new(c, h.clone())?.solve_real(lambda)
}

/// Support components of `F^{c,H}`.
pub fn support_edges(c: f64, h: &BulkDistribution) -> Result<Vec<SupportInterval>> {
    Ok(SilversteinEquation::new(c, h.clone())?.support().to_vec())
}

/// Solves the embedded equation `(c_n, H_n)` and the bulk equation
/// `(c_nM, H_2n)` at the same point. Both describe the same transform, so the
/// two values coincide.
pub fn solve_finite_n_pair(
    z: Complex64,
    spectrum: &PopulationSpectrum,
) -> Result<(SilversteinSolution, SilversteinSolution)> {
    let embedded = SilversteinEquation::embedded(spectrum)?;
    let bulk = SilversteinEquation::bulk(spectrum)?;
    Ok((embedded.solve(z, None)?, bulk.solve(z, None)?))
}

/// Density of `F^{c,H}` at `x`.
pub fn density_at(x: f64, c: f64, h: &BulkDistribution) -> Result<f64> {
    Ok(SilversteinEquation::new(c, h.clone())?.density(x))
}
