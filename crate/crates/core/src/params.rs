//! The versioned kinetic/optical parameter file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{KineticParams, Species};
use crate::provenance::sha256_hex;
use crate::transduce::OpticalConfig;

/// Default parameter file shipped with the crate. Values are
/// order-of-magnitude literature-plausible defaults, not measurements.
pub const BUILTIN_PARAMETERS: &str = include_str!("../../../configs/kinetic_params.toml");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Absorptivity {
    pub wavelength_nm: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticsParams {
    pub path_length_cm: f64,
    pub absorptivity: BTreeMap<Species, Absorptivity>,
    /// AU·L/µmol.
    pub luminescence_gain: f64,
    /// nA·L·s/µmol.
    pub faradaic_gain: f64,
}

impl OpticsParams {
    pub fn optical_config(&self, species: Species) -> Result<OpticalConfig> {
        let a = self
            .absorptivity
            .get(&species)
            .ok_or_else(|| Error::config(format!("no absorptivity configured for {species}")))?;
        let cfg = OpticalConfig {
            wavelength_nm: a.wavelength_nm,
            epsilon: a.epsilon,
            path_length_cm: self.path_length_cm,
            species,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterFile {
    #[serde(flatten)]
    pub kinetics: KineticParams,
    pub optics: OpticsParams,
}

impl ParameterFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!(
                "cannot read parameter file {}: {e}",
                path.display()
            ))
        })?;
        Ok((Self::from_toml_str(&text)?, sha256_hex(text.as_bytes())))
    }

    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_PARAMETERS).expect("built-in parameter file parses")
    }
}
