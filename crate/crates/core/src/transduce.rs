//! Readouts of kinetics traces as physical signals: absorbance
//! (Beer-Lambert), flash-type luminescence and amperometric current.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{CascadeNetwork, Catalyst, KineticsTrace, Species};
use crate::provenance::write_hash_comment;

const MICROMOLAR_TO_MOLAR: f64 = 1e-6;

pub const LUMINESCENCE_WAVELENGTH_NM: f64 = 425.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    pub wavelength_nm: f64,
    /// Molar absorptivity, M⁻¹·cm⁻¹.
    pub epsilon: f64,
    pub path_length_cm: f64,
    pub species: Species,
}

impl OpticalConfig {
    /// NADH at 340 nm, conventional ε = 6220 M⁻¹cm⁻¹.
    pub fn nadh_340() -> Self {
        Self {
            wavelength_nm: 340.0,
            epsilon: 6220.0,
            path_length_cm: 1.0,
            species: Species::NADH,
        }
    }

    /// ABTS radical cation at 405 nm.
    pub fn abtsox_405() -> Self {
        Self {
            wavelength_nm: 405.0,
            epsilon: 36_800.0,
            path_length_cm: 1.0,
            species: Species::ABTSox,
        }
    }

    /// NBT formazan at 580 nm.
    pub fn formazan_580() -> Self {
        Self {
            wavelength_nm: 580.0,
            epsilon: 15_000.0,
            path_length_cm: 1.0,
            species: Species::Formazan,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.path_length_cm > 0.0) {
            return Err(Error::config(format!(
                "optical channel {} nm needs epsilon > 0 and path length > 0",
                self.wavelength_nm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalChannel {
    Absorbance {
        wavelength_nm: f64,
        species: Species,
    },
    Luminescence {
        wavelength_nm: f64,
    },
    Amperometric,
}

impl SignalChannel {
    pub fn label(&self) -> String {
        match self {
            SignalChannel::Absorbance {
                wavelength_nm,
                species,
            } => format!("A{wavelength_nm}({species})"),
            SignalChannel::Luminescence { wavelength_nm } => format!("L{wavelength_nm}"),
            SignalChannel::Amperometric => "I(H2O2)".into(),
        }
    }
}

/// Signal on the time grid of its source trace. Units: AU for absorbance,
/// arbitrary units for luminescence, nA for current.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub channel: SignalChannel,
}

impl SignalTrace {
    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: Option<&str>) -> Result<()> {
        write_hash_comment(&mut w, config_hash)?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["time", "value", "channel"])?;
        let label = self.channel.label();
        for (t, v) in self.times.iter().zip(&self.values) {
            csv.write_record([t.to_string(), v.to_string(), label.clone()])?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Trapezoidal integral over the whole trace.
    pub fn integral(&self) -> f64 {
        self.times
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
            .sum()
    }
}

/// `A(t) = ε · c(t) · l`, with `c` converted from µM to mol/L.
pub fn absorbance(trace: &KineticsTrace, cfg: &OpticalConfig) -> Result<SignalTrace> {
    cfg.validate()?;
    let column = trace.column(cfg.species)?;
    let scale = cfg.epsilon * cfg.path_length_cm * MICROMOLAR_TO_MOLAR;
    Ok(SignalTrace {
        times: trace.times.clone(),
        values: column.into_iter().map(|c| scale * c).collect(),
        channel: SignalChannel::Absorbance {
            wavelength_nm: cfg.wavelength_nm,
            species: cfg.species,
        },
    })
}

fn rate_signal(
    network: &CascadeNetwork,
    trace: &KineticsTrace,
    step: usize,
    gain: f64,
    channel: SignalChannel,
) -> Result<SignalTrace> {
    if trace.species != network.species {
        return Err(Error::config("trace was not produced by this network"));
    }
    if !(gain >= 0.0 && gain.is_finite()) {
        return Err(Error::config(format!(
            "gain must be finite and >= 0, got {gain}"
        )));
    }
    Ok(SignalTrace {
        times: trace.times.clone(),
        values: trace
            .rows()
            .map(|row| gain * network.step_rate(step, row))
            .collect(),
        channel,
    })
}

/// Flash-type emission: proportional to the instantaneous HRP/luminol turnover.
pub fn luminescence(
    network: &CascadeNetwork,
    trace: &KineticsTrace,
    gain: f64,
) -> Result<SignalTrace> {
    let step = network
        .steps
        .iter()
        .position(|s| {
            s.enzyme == Catalyst::HRP && s.substrates.iter().any(|(x, _)| *x == Species::Luminol)
        })
        .ok_or_else(|| Error::config(format!("{:?} has no HRP/luminol branch", network.kind)))?;
    rate_signal(
        network,
        trace,
        step,
        gain,
        SignalChannel::Luminescence {
            wavelength_nm: LUMINESCENCE_WAVELENGTH_NM,
        },
    )
}

/// Current proportional to H₂O₂ turnover at the peroxidase reporter step.
pub fn amperometric_current(
    network: &CascadeNetwork,
    trace: &KineticsTrace,
    faradaic_gain: f64,
) -> Result<SignalTrace> {
    if !network.contains(Species::H2O2) {
        return Err(Error::config(format!(
            "{:?} produces no H2O2 for amperometric readout",
            network.kind
        )));
    }
    let step = network.consuming_step(Species::H2O2).ok_or_else(|| {
        Error::config(format!(
            "{:?} has no H2O2-consuming reporter step",
            network.kind
        ))
    })?;
    rate_signal(
        network,
        trace,
        step,
        faradaic_gain,
        SignalChannel::Amperometric,
    )
}
