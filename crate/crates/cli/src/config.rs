//! JSON run configuration.

use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use spiked_lss::contour::ContourOptions;
use spiked_lss::kernels::Kernel;
use spiked_lss::montecarlo::EntryDist;
use spiked_lss::spectrum::{
    BulkDistribution, MomentProfile, PopulationSpectrum, SpikeGroup, ValidationThresholds,
};

/// A spike exponent, either a number or a fraction such as `"1/3"`. The
/// original spelling is kept so configs round-trip unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Exponent {
    Number(f64),
    Text(String),
}

impl Exponent {
    pub fn value(&self) -> Result<f64> {
        match self {
            Exponent::Number(v) => Ok(*v),
            Exponent::Text(s) => {
                let parse = |t: &str| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| anyhow!("cannot read exponent {s:?}"))
                };
                match s.split_once('/') {
                    Some((a, b)) => {
                        let den = parse(b)?;
                        if den == 0.0 {
                            bail!("exponent {s:?} divides by zero");
                        }
                        Ok(parse(a)? / den)
                    }
                    None => parse(s),
                }
            }
        }
    }
}

impl Default for Exponent {
    fn default() -> Self {
        Exponent::Number(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeConfig {
    #[serde(default = "one")]
    pub coeff: f64,
    #[serde(default)]
    pub exponent: Exponent,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "one_usize")]
    pub multiplicity: usize,
}

/// A bulk atom given by weight or by eigenvalue count (not both).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BulkAtomConfig {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

/// Entry moments. Omitted entirely, they follow `simulation.entry_dist`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    pub alpha_x: f64,
    pub beta_x: f64,
    pub q: u8,
    pub fourth_moment: f64,
    /// Rows of the `p x M` spike eigenvector block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u1: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub reps: usize,
    pub seed: u64,
    pub entry_dist: EntryDist,
    pub parallel: bool,
    /// Also compare with the eigenvalues of the bulk block.
    pub submatrix: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            reps: 3000,
            seed: 1,
            entry_dist: EntryDist::Gaussian,
            parallel: true,
            submatrix: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

/// Pass/fail thresholds of `compare`, on the normalized scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub mean: f64,
    pub variance: f64,
    pub ks_p_value: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            mean: 0.1,
            variance: 0.15,
            ks_p_value: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub p: usize,
    pub n: usize,
    #[serde(default)]
    pub spikes: Vec<SpikeConfig>,
    pub bulk: Vec<BulkAtomConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentsConfig>,
    pub kernels: Vec<Kernel>,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub contour: ContourOptions,
    #[serde(default)]
    pub validation: ValidationThresholds,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

/// A configuration problem, with the offending field's path.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn field_error(path: impl Into<String>, message: impl Into<String>) -> anyhow::Error {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
    .into()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            anyhow::Error::from(ConfigError {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Semantic checks that the types do not express.
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(field_error("p", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(field_error("n", "must be at least 1"));
        }
        if self.kernels.is_empty() {
            return Err(field_error("kernels", "at least one kernel is required"));
        }
        for (i, s) in self.spikes.iter().enumerate() {
            if s.multiplicity == 0 {
                return Err(field_error(
                    format!("spikes[{i}].multiplicity"),
                    "must be at least 1",
                ));
            }
            s.exponent
                .value()
                .map_err(|e| field_error(format!("spikes[{i}].exponent"), e.to_string()))?;
            if !s.coeff.is_finite() || !s.offset.is_finite() {
                return Err(field_error(
                    format!("spikes[{i}]"),
                    "coeff and offset must be finite",
                ));
            }
        }
        if self.bulk.is_empty() {
            return Err(field_error("bulk", "at least one atom is required"));
        }
        let by_weight = self.bulk[0].weight.is_some();
        for (i, a) in self.bulk.iter().enumerate() {
            if !(a.value > 0.0) || !a.value.is_finite() {
                return Err(field_error(format!("bulk[{i}].value"), "must be positive"));
            }
            match (a.weight, a.count) {
                (Some(_), Some(_)) => {
                    return Err(field_error(
                        format!("bulk[{i}]"),
                        "give weight or count, not both",
                    ))
                }
                (None, None) => {
                    return Err(field_error(
                        format!("bulk[{i}]"),
                        "needs a weight or a count",
                    ))
                }
                (Some(w), None) => {
                    if !by_weight {
                        return Err(field_error(
                            format!("bulk[{i}]"),
                            "mixes weights and counts",
                        ));
                    }
                    if !(w > 0.0) || !w.is_finite() {
                        return Err(field_error(format!("bulk[{i}].weight"), "must be positive"));
                    }
                }
                (None, Some(c)) => {
                    if by_weight {
                        return Err(field_error(
                            format!("bulk[{i}]"),
                            "mixes weights and counts",
                        ));
                    }
                    if c == 0 {
                        return Err(field_error(
                            format!("bulk[{i}].count"),
                            "must be at least 1",
                        ));
                    }
                }
            }
        }
        if by_weight {
            let total: f64 = self.bulk.iter().filter_map(|a| a.weight).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(field_error(
                    "bulk",
                    format!("weights sum to {total}, not 1"),
                ));
            }
        } else {
            let total: usize = self.bulk.iter().filter_map(|a| a.count).sum();
            let m: usize = self.spikes.iter().map(|s| s.multiplicity).sum();
            if total + m != self.p {
                return Err(field_error(
                    "bulk",
                    format!(
                        "counts sum to {total}; with {m} spikes that is not p = {}",
                        self.p
                    ),
                ));
            }
        }
        if self.simulation.reps == 0 {
            return Err(field_error("simulation.reps", "must be at least 1"));
        }
        let c = &self.contour;
        if !(c.margin > 0.0 && c.margin < 0.5) {
            return Err(field_error("contour.margin", "must lie in (0, 0.5)"));
        }
        if c.nodes < 2 || c.double_nodes < 2 {
            return Err(field_error("contour", "node counts must be at least 2"));
        }
        self.moment_profile()?;
        Ok(())
    }

    pub fn spectrum(&self) -> Result<PopulationSpectrum> {
        let spikes = self
            .spikes
            .iter()
            .map(|s| {
                Ok(SpikeGroup::new(
                    s.coeff,
                    s.exponent.value()?,
                    s.offset,
                    s.multiplicity,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let bulk = if self.bulk[0].weight.is_some() {
            BulkDistribution::new(self.bulk.iter().map(|a| (a.value, a.weight.unwrap_or(0.0))))
        } else {
            BulkDistribution::from_counts(self.bulk.iter().map(|a| (a.value, a.count.unwrap_or(0))))
        }
        .map_err(|e| field_error("bulk", e.to_string()))?;
        Ok(PopulationSpectrum::new(spikes, bulk, self.p, self.n)?)
    }

    pub fn moment_profile(&self) -> Result<MomentProfile> {
        let Some(m) = &self.moments else {
            return Ok(self.simulation.entry_dist.moments());
        };
        let mut profile = MomentProfile::new(m.alpha_x, m.beta_x, m.q, m.fourth_moment)
            .map_err(|e| field_error("moments", e.to_string()))?;
        if let Some(rows) = &m.u1 {
            let cols = rows.first().map_or(0, |r| r.len());
            if rows.iter().any(|r| r.len() != cols) {
                return Err(field_error("moments.u1", "rows have different lengths"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            profile = profile.with_u1(DMatrix::from_row_slice(rows.len(), cols, &flat));
            profile
                .check()
                .map_err(|e| field_error("moments.u1", e.to_string()))?;
        }
        Ok(profile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        r#"{"p": 50, "n": 500, "bulk": [{"value": 1, "weight": 1}], "kernels": ["x"]}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.simulation.reps, 3000);
        assert_eq!(cfg.simulation.entry_dist, EntryDist::Gaussian);
        assert_eq!(cfg.contour, ContourOptions::default());
        assert_eq!(cfg.contour.margin, 0.1);
        assert_eq!((cfg.contour.nodes, cfg.contour.double_nodes), (1024, 256));
        assert!(cfg.spikes.is_empty());
        assert_eq!(
            cfg.moment_profile().unwrap(),
            MomentProfile::real_gaussian()
        );
    }

    #[test]
    fn emit_then_parse_is_identity() {
        let text = r#"{
            "p": 100, "n": 3000,
            "spikes": [{"coeff": 1, "exponent": "1/3", "offset": -1, "multiplicity": 6},
                       {"exponent": 0.25, "multiplicity": 6}],
            "bulk": [{"value": 1, "count": 88}],
            "moments": {"alpha_x": 1, "beta_x": -1.2, "q": 1, "fourth_moment": 1.8},
            "kernels": ["x", "log", "poly:1.0,2.0"],
            "simulation": {"reps": 10, "entry_dist": "uniform"},
            "contour": {"margin": 0.05}
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_json(), again.to_json());
        assert_eq!(cfg.spikes[0].exponent, Exponent::Text("1/3".into()));
        assert!((cfg.spikes[0].exponent.value().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cfg.contour.nodes, 1024);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (
                r#"{"p": 50, "n": 500, "bulk": [{"value": 1, "weight": -1}], "kernels": ["x"]}"#,
                "bulk[0].weight",
            ),
            (
                r#"{"p": 50, "n": 500, "bulk": [{"value": 1, "weight": 0.5}], "kernels": ["x"]}"#,
                "bulk",
            ),
            (
                r#"{"p": 50, "n": 500, "bulk": [{"value": 1, "weight": 1}], "kernels": ["exp"]}"#,
                "kernels[0]",
            ),
            (
                r#"{"p": 50, "n": 500, "bulk": [{"value": 1, "weight": 1}], "kernels": ["x"], "simulation": {"reps": "many"}}"#,
                "simulation.reps",
            ),
            (
                r#"{"p": 50, "n": 500, "bulk": [{"value": 1, "weight": 1}], "kernels": ["x"], "spikes": [{"exponent": "1/x"}]}"#,
                "spikes[0].exponent",
            ),
            (
                r#"{"p": 50, "n": 500, "bulk": [{"value": 1, "weight": 1}], "kernels": ["x"], "contour": {"margin": 2}}"#,
                "contour.margin",
            ),
            (
                r#"{"p": 50, "n": 500, "bulk": [{"value": 1, "weight": 1}], "kernels": ["x"], "typo": 1}"#,
                "",
            ),
        ];
        for (text, path) in cases {
            let err = RunConfig::from_json(text).unwrap_err();
            let cfg_err = err
                .downcast_ref::<ConfigError>()
                .unwrap_or_else(|| panic!("{err:#}"));
            assert!(cfg_err.path.starts_with(path), "{path}: got {cfg_err}");
        }
    }

    #[test]
    fn counts_must_fill_p() {
        let text = r#"{"p": 100, "n": 3000, "spikes": [{"coeff": 10, "multiplicity": 2}],
                       "bulk": [{"value": 1, "count": 97}], "kernels": ["x"]}"#;
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(err.to_string().starts_with("bulk:"), "{err}");
    }
}
