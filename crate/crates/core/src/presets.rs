//! The three divergent-spike designs used throughout the simulations: six
//! eigenvalues in each of three groups on top of an identity bulk. They are
//! named after the growth rate of the largest group.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::spectrum::{BulkDistribution, PopulationSpectrum, SpikeGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `n^{1/3}`, `n^{1/3} - 1`, `n^{1/4} - 2`.
    CubeRoot,
    /// `n^{1/2}`, `n^{1/3} - 1`, `n^{1/4} - 2`.
    SquareRoot,
    /// `n`, `n^{1/2}`, `n^{1/3}`.
    Linear,
}

pub const GROUP_SIZE: usize = 6;

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::CubeRoot, Preset::SquareRoot, Preset::Linear];

    pub fn groups(self) -> Vec<SpikeGroup> {
        let g = |coeff, exponent, offset| SpikeGroup::new(coeff, exponent, offset, GROUP_SIZE);
        match self {
            Preset::CubeRoot => vec![
                g(1.0, 1.0 / 3.0, 0.0),
                g(1.0, 1.0 / 3.0, -1.0),
                g(1.0, 0.25, -2.0),
            ],
            Preset::SquareRoot => vec![
                g(1.0, 0.5, 0.0),
                g(1.0, 1.0 / 3.0, -1.0),
                g(1.0, 0.25, -2.0),
            ],
            Preset::Linear => vec![g(1.0, 1.0, 0.0), g(1.0, 0.5, 0.0), g(1.0, 1.0 / 3.0, 0.0)],
        }
    }

    pub fn spectrum(self, p: usize, n: usize) -> Result<PopulationSpectrum> {
        PopulationSpectrum::new(self.groups(), BulkDistribution::point(1.0)?, p, n)
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::CubeRoot => "cube_root",
            Preset::SquareRoot => "square_root",
            Preset::Linear => "linear",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::resolve_spikes;

    #[test]
    fn linear_preset_values() {
        let s = Preset::Linear.spectrum(100, 3000).unwrap();
        let r = resolve_spikes(&s).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].value, 3000.0);
        assert!((r[1].value - 3000f64.sqrt()).abs() < 1e-12);
        assert!((r[2].value - 3000f64.cbrt()).abs() < 1e-9);
        assert!(r.iter().all(|g| g.multiplicity == GROUP_SIZE));
        assert_eq!(s.bulk_count(), 82);
    }
}
