//! Canonical scenario presets: six stress profiles at two scales.
//!
//! The stress profiles: S1 off-peak narrowband; S2 rush hour (double demand,
//! mixed radio profiles); S3 road incidents; S4 20% RSU outage; S5 beacon
//! load (20 Hz, double payload); S6 fog CPU at 50%.

use std::fmt;
use std::str::FromStr;

use super::config::ScenarioConfig;
use crate::{Error, Result};

/// Scenario names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::S1,
        Scenario::S2,
        Scenario::S3,
        Scenario::S4,
        Scenario::S5,
        Scenario::S6,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::S1 => "S1",
            Scenario::S2 => "S2",
            Scenario::S3 => "S3",
            Scenario::S4 => "S4",
            Scenario::S5 => "S5",
            Scenario::S6 => "S6",
        }
    }

    /// One-line description for listings.
    pub fn describe(self) -> &'static str {
        match self {
            Scenario::S1 => "off-peak, narrowband radio",
            Scenario::S2 => "rush hour: demand x2, mixed radio profiles",
            Scenario::S3 => "road incidents: random capacity drops",
            Scenario::S4 => "20% of RSUs on rotating outages",
            Scenario::S5 => "beacon load: 20 Hz, double payload",
            Scenario::S6 => "fog contention: CPU capacity at 50%",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            "S4" => Ok(Scenario::S4),
            "S5" => Ok(Scenario::S5),
            "S6" => Ok(Scenario::S6),
            other => Err(Error::UnknownScenario {
                name: other.to_string(),
                valid: "S1, S2, S3, S4, S5, S6",
            }),
        }
    }
}

/// World size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    /// Small enough to sweep on one desk machine.
    Desk,
    /// The full published operating point (not exercised by the test suite).
    Paper,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::UnknownScenario {
                name: other.to_string(),
                valid: "desk, paper",
            }),
        }
    }
}

/// Returns the canonical config for a scenario at a scale.
pub fn scenario(name: Scenario, scale: Scale) -> ScenarioConfig {
    let mut cfg = base(scale);
    apply_stressors(name, &mut cfg);
    cfg
}

/// The scale's baseline before any stressor is applied.
fn base(scale: Scale) -> ScenarioConfig {
    match scale {
        Scale::Desk => ScenarioConfig::default(),
        Scale::Paper => ScenarioConfig {
            grid_dims: (25, 25),
            vehicles: 2000,
            rsus: 40,
            fog_nodes: 12,
            duration_s: 3600.0,
            ..ScenarioConfig::default()
        },
    }
}

/// Overwrites exactly the stressor fields that distinguish the scenarios,
/// leaving scale fields (grid, counts, durations, seed, variant) untouched.
pub fn apply_stressors(name: Scenario, cfg: &mut ScenarioConfig) {
    // Reset to the off-peak stressor baseline first so the function is a
    // projection: applying S_i then S_j equals applying S_j directly.
    cfg.demand_multiplier = 1.0;
    cfg.mixed_radio = false;
    cfg.incident_rate = 0.0;
    cfg.rsu_outage_frac = 0.0;
    cfg.beacon_hz = 10.0;
    cfg.payload_bytes = 256;
    cfg.fog_cpu_frac = 1.0;
    match name {
        Scenario::S1 => {}
        Scenario::S2 => {
            cfg.demand_multiplier = 2.0;
            cfg.mixed_radio = true;
        }
        Scenario::S3 => {
            cfg.incident_rate = 2.0;
        }
        Scenario::S4 => {
            cfg.rsu_outage_frac = 0.2;
        }
        Scenario::S5 => {
            cfg.beacon_hz = 20.0;
            cfg.payload_bytes = 512;
        }
        Scenario::S6 => {
            cfg.fog_cpu_frac = 0.5;
        }
    }
}
