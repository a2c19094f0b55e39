//! Analytic test functions for linear spectral statistics.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A kernel `f` applied to eigenvalues. The set is closed so that every
/// kernel's domain (and branch cut) is known when contours are placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Kernel {
    Identity,
    Power(u32),
    Log,
    Affine {
        a: f64,
        b: f64,
    },
    /// `c0 + c1 x + c2 x^2 + ...`
    Polynomial(Vec<f64>),
}

impl Kernel {
    /// Principal-branch value at a complex point.
    pub fn eval(&self, z: Complex64) -> Result<Complex64> {
        Ok(match self {
            Kernel::Identity => z,
            Kernel::Power(k) => z.powi(*k as i32),
            Kernel::Log => {
                if z.im == 0.0 && z.re <= 0.0 {
                    return Err(Error::KernelDomain(format!("log at {z}")));
                }
                z.ln()
            }
            Kernel::Affine { a, b } => z * *a + *b,
            Kernel::Polynomial(c) => c
                .iter()
                .rev()
                .fold(Complex64::new(0.0, 0.0), |acc, &ci| acc * z + ci),
        })
    }

    pub fn eval_real(&self, x: f64) -> Result<f64> {
        Ok(match self {
            Kernel::Identity => x,
            Kernel::Power(k) => x.powi(*k as i32),
            Kernel::Log => {
                if x <= 0.0 {
                    return Err(Error::KernelDomain(format!("log at {x}")));
                }
                x.ln()
            }
            Kernel::Affine { a, b } => a * x + b,
            Kernel::Polynomial(c) => c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci),
        })
    }

    /// Exact derivative on the real axis.
    pub fn deriv(&self, x: f64) -> Result<f64> {
        Ok(match self {
            Kernel::Identity => 1.0,
            Kernel::Power(0) => 0.0,
            Kernel::Power(k) => *k as f64 * x.powi(*k as i32 - 1),
            Kernel::Log => {
                if x <= 0.0 {
                    return Err(Error::KernelDomain(format!("log' at {x}")));
                }
                1.0 / x
            }
            Kernel::Affine { a, .. } => *a,
            Kernel::Polynomial(c) => c
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (i, &ci)| acc * x + i as f64 * ci),
        })
    }

    /// Arguments at or below this value are outside the domain.
    pub fn domain_floor(&self) -> Option<f64> {
        matches!(self, Kernel::Log).then_some(0.0)
    }

    /// File-name friendly label, e.g. `x^2` becomes `x2`.
    pub fn slug(&self) -> String {
        self.to_string()
            .chars()
            .filter_map(|c| match c {
                '.' => Some('p'),
                '-' => Some('m'),
                ',' => Some('_'),
                c if c.is_ascii_alphanumeric() => Some(c),
                _ => None,
            })
            .collect()
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Identity => write!(f, "x"),
            Kernel::Power(k) => write!(f, "x^{k}"),
            Kernel::Log => write!(f, "log"),
            Kernel::Affine { a, b } => write!(f, "affine:{a:?},{b:?}"),
            Kernel::Polynomial(c) => {
                let parts: Vec<String> = c.iter().map(|v| format!("{v:?}")).collect();
                write!(f, "poly:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let numbers = |body: &str| -> Result<Vec<f64>> {
            body.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::KernelParse(s.to_string()))
                })
                .collect()
        };
        if t == "x" {
            return Ok(Kernel::Identity);
        }
        if t == "log" || t == "ln" {
            return Ok(Kernel::Log);
        }
        if let Some(k) = t.strip_prefix("x^") {
            return k
                .trim()
                .parse::<u32>()
                .map(Kernel::Power)
                .map_err(|_| Error::KernelParse(s.to_string()));
        }
        if let Some(body) = t.strip_prefix("poly:") {
            let c = numbers(body)?;
            if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::KernelParse(s.to_string()));
            }
            return Ok(Kernel::Polynomial(c));
        }
        if let Some(body) = t.strip_prefix("affine:") {
            let c = numbers(body)?;
            if c.len() != 2 || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::KernelParse(s.to_string()));
            }
            return Ok(Kernel::Affine { a: c[0], b: c[1] });
        }
        Err(Error::KernelParse(s.to_string()))
    }
}

impl TryFrom<String> for Kernel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Kernel> for String {
    fn from(k: Kernel) -> String {
        k.to_string()
    }
}

/// Outcome of the slowly-varying derivative probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeGrowthReport {
    /// `(n, |f'(n) / f'(n (1 + n^{-1/2})) - 1|)` per grid point.
    pub deviations: Vec<(f64, f64)>,
    pub threshold: f64,
    pub pass: bool,
}

pub const DERIVATIVE_GROWTH_THRESHOLD: f64 = 0.05;

/// Default probe grid, `n = 10^2 .. 10^6`.
pub fn default_probe_grid() -> Vec<f64> {
    (2..=6).map(|e| 10f64.powi(e)).collect()
}

/// Probes `f'(x_n)/f'(y_n) -> 1` for `x_n = n`, `y_n = n(1 + n^{-1/2})`. The
/// verdict uses the largest `n` in the grid.
pub fn derivative_growth_probe(
    deriv: impl Fn(f64) -> f64,
    n_grid: &[f64],
) -> DerivativeGrowthReport {
    let deviations: Vec<(f64, f64)> = n_grid
        .iter()
        .map(|&n| {
            let (dx, dy) = (deriv(n), deriv(n * (1.0 + n.powf(-0.5))));
            let dev = if dx == 0.0 && dy == 0.0 {
                0.0
            } else {
                (dx / dy - 1.0).abs()
            };
            (n, if dev.is_nan() { f64::INFINITY } else { dev })
        })
        .collect();
    let last = deviations
        .iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|d| d.1)
        .unwrap_or(f64::INFINITY);
    DerivativeGrowthReport {
        deviations,
        threshold: DERIVATIVE_GROWTH_THRESHOLD,
        pass: last <= DERIVATIVE_GROWTH_THRESHOLD,
    }
}

pub fn derivative_growth_check(kernel: &Kernel, n_grid: &[f64]) -> DerivativeGrowthReport {
    derivative_growth_probe(|x| kernel.deriv(x).unwrap_or(f64::NAN), n_grid)
}
