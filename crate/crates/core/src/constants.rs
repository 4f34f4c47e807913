//! Physical constants (CODATA 2018 exact/recommended values) and ion species.

use serde::{Deserialize, Serialize};

/// Elementary charge (C).
pub const E_CHARGE: f64 = 1.602_176_634e-19;
/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant (J/K).
pub const K_B: f64 = 1.380_649e-23;
/// Unified atomic mass unit (kg).
pub const AMU: f64 = 1.660_539_066_60e-27;

/// Converts joules to electron-volts.
pub fn joule_to_ev(energy: f64) -> f64 {
    energy / E_CHARGE
}

/// A trapped ion species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    pub name: String,
    /// Mass (kg).
    pub mass: f64,
    /// Charge (C).
    pub charge: f64,
}

impl IonSpecies {
    pub fn new(name: impl Into<String>, mass: f64, charge: f64) -> Result<Self, String> {
        let species = Self { name: name.into(), mass, charge };
        species.validate()?;
        Ok(species)
    }

    /// Singly charged cadmium-111, taken as 111 u.
    pub fn cd111() -> Self {
        Self { name: "Cd-111".into(), mass: 111.0 * AMU, charge: E_CHARGE }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(format!("species {}: mass must be positive, got {}", self.name, self.mass));
        }
        if self.charge == 0.0 || !self.charge.is_finite() {
            return Err(format!("species {}: charge must be nonzero", self.name));
        }
        Ok(())
    }

    /// Charge in units of the elementary charge.
    pub fn charge_number(&self) -> f64 {
        self.charge / E_CHARGE
    }
}
