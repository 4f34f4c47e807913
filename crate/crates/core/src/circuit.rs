//! RF delivery: trap quality factor and dissipation, resonator loading,
//! breakdown limits and miniaturization scaling laws.

use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("depth scaling needs a calibration point")]
    MissingCalibration,
}

fn need(ok: bool, msg: &str) -> Result<(), CircuitError> {
    if ok {
        Ok(())
    } else {
        Err(CircuitError::InvalidInput(msg.into()))
    }
}

/// Helical resonator feeding the trap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resonator {
    pub unloaded_q: f64,
    /// Hz.
    pub f_self: f64,
    /// F; inferred from the loaded frequency when unknown.
    pub c_self: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircuitModel {
    /// Trap capacitance (F).
    pub c: f64,
    /// Series resistance (ohm).
    pub r_s: f64,
    pub tan_delta: f64,
    pub resonator: Resonator,
}

impl CircuitModel {
    /// 34 pF, 5 ohm, lossless dielectric; Q = 500 resonator at 54.9 MHz.
    pub fn baseline() -> Self {
        Self { c: 34e-12, r_s: 5.0, tan_delta: 0.0, resonator: Resonator { unloaded_q: 500.0, f_self: 54.9e6, c_self: None } }
    }

    pub fn validate(&self) -> Result<(), CircuitError> {
        need(self.c > 0.0, "capacitance must be positive")?;
        need(self.r_s >= 0.0 && self.tan_delta >= 0.0, "resistance and loss tangent must be non-negative")
    }
}

/// Q = 1 / (R_S C omega + tan delta).
pub fn quality_factor(model: &CircuitModel, omega: f64) -> Result<f64, CircuitError> {
    model.validate()?;
    need(omega > 0.0, "frequency must be positive")?;
    Ok(1.0 / (model.r_s * model.c * omega + model.tan_delta))
}

/// Dissipated power V0^2 C omega / (2 Q) (W).
pub fn dissipation(v0: f64, c: f64, omega: f64, q: f64) -> Result<f64, CircuitError> {
    need(v0 >= 0.0 && c > 0.0 && omega > 0.0 && q > 0.0, "dissipation needs V0 >= 0 and positive C, omega, Q")?;
    Ok(v0 * v0 * c * omega / (2.0 * q))
}

/// Resonant frequency of the resonator loaded by `c_trap` in a lumped LC
/// model.
pub fn loaded_frequency(f_self: f64, c_self: f64, c_trap: f64) -> Result<f64, CircuitError> {
    need(f_self > 0.0 && c_self > 0.0, "resonator frequency and capacitance must be positive")?;
    need(c_trap >= 0.0, "trap capacitance must be non-negative")?;
    Ok(f_self * (c_self / (c_self + c_trap)).sqrt())
}

/// Self-capacitance implied by a measured loaded frequency.
pub fn implied_self_capacitance(f_self: f64, f_loaded: f64, c_trap: f64) -> Result<f64, CircuitError> {
    need(f_self > 0.0, "resonator frequency must be positive")?;
    need(c_trap >= 0.0, "trap capacitance must be non-negative")?;
    need(f_loaded > 0.0 && f_loaded < f_self, "loaded frequency must lie below the self-resonance")?;
    Ok(c_trap * f_loaded * f_loaded / (f_self * f_self - f_loaded * f_loaded))
}

/// Loaded frequency and self-capacitance of `model`'s resonator: forward when
/// the self-capacitance is known, inverted from `f_loaded` otherwise.
pub fn loaded_resonance(resonator: &Resonator, c_trap: f64, f_loaded: Option<f64>) -> Result<(f64, f64), CircuitError> {
    match (resonator.c_self, f_loaded) {
        (Some(cs), _) => Ok((loaded_frequency(resonator.f_self, cs, c_trap)?, cs)),
        (None, Some(fl)) => Ok((fl, implied_self_capacitance(resonator.f_self, fl, c_trap)?)),
        (None, None) => Err(CircuitError::InvalidInput("need either the self-capacitance or the loaded frequency".into())),
    }
}

/// Reference point for the depth scaling law D = sigma(s) q e E_max h / 8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthCalibration {
    /// m.
    pub s_ref: f64,
    /// m.
    pub h_ref: f64,
    pub q_ref: f64,
    /// V/m.
    pub e_max_ref: f64,
    /// eV.
    pub depth_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingModel {
    pub sigma_exponent: f64,
    pub power_density_exponent: f64,
    /// Aspect ratios s/h over which the exponents hold (exclusive).
    pub aspect_range: (f64, f64),
    pub calibration: Option<DepthCalibration>,
}

impl Default for ScalingModel {
    fn default() -> Self {
        Self { sigma_exponent: -0.44, power_density_exponent: -2.2, aspect_range: (1.0, 20.0), calibration: None }
    }
}

/// A scaled quantity with an optional validity warning.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaled {
    pub value: f64,
    pub warning: Option<String>,
}

impl ScalingModel {
    fn aspect_warning(&self, s: f64, h: f64) -> Option<String> {
        let r = s / h;
        let (lo, hi) = self.aspect_range;
        (!(r > lo && r < hi)).then(|| format!("aspect ratio s/h = {r:.3} outside the scaling range ({lo}, {hi})"))
    }
}

/// Trap depth (eV) at tip separation `s`: the calibration depth scaled by
/// (s/s_ref)^sigma_exponent and linearly by q, E_max and h.
pub fn depth_scaling(s: f64, h: f64, q: f64, e_max: f64, scaling: &ScalingModel) -> Result<Scaled, CircuitError> {
    let cal = scaling.calibration.ok_or(CircuitError::MissingCalibration)?;
    need(s > 0.0 && h > 0.0, "s and h must be positive")?;
    need(cal.depth_ref > 0.0 && cal.s_ref > 0.0 && cal.h_ref > 0.0, "calibration must be positive")?;
    let sigma = (s / cal.s_ref).powf(scaling.sigma_exponent);
    let value = cal.depth_ref * sigma * (q / cal.q_ref) * (e_max / cal.e_max_ref) * (h / cal.h_ref);
    Ok(Scaled { value, warning: scaling.aspect_warning(s, h) })
}

/// Relative RF power per unit electrode area I0_ref (s/s_ref)^exponent.
pub fn power_density_scaling(s: f64, scaling: &ScalingModel, i0_ref: f64, s_ref: f64) -> Result<f64, CircuitError> {
    need(s > 0.0 && s_ref > 0.0, "s must be positive")?;
    Ok(i0_ref * (s / s_ref).powf(scaling.power_density_exponent))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreakdownLimits {
    /// Static breakdown (V).
    pub static_limit: f64,
    /// Static level above which effects may appear (V).
    pub static_warning: f64,
    /// RF amplitude at breakdown (V).
    pub rf_limit: f64,
    /// Frequency at which `rf_limit` was measured (Hz).
    pub rf_limit_frequency: f64,
}

impl Default for BreakdownLimits {
    fn default() -> Self {
        Self { static_limit: 70.0, static_warning: 40.0, rf_limit: 11.0, rf_limit_frequency: 14.75e6 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OperatingReport {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl OperatingReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Flags an RF amplitude at or above the breakdown limit and static
/// voltages at or above the static limit, warning above the onset level.
pub fn check_operating_point(v0: f64, omega: f64, static_voltages: &[f64], limits: &BreakdownLimits) -> Result<OperatingReport, CircuitError> {
    need(limits.static_limit > 0.0 && limits.rf_limit > 0.0 && limits.static_warning > 0.0, "limits must be positive")?;
    let mut r = OperatingReport::default();
    if v0 >= limits.rf_limit {
        r.violations.push(format!("RF amplitude {v0} V at or above the {} V breakdown limit", limits.rf_limit));
    }
    let f = omega / (2.0 * std::f64::consts::PI);
    if (f / limits.rf_limit_frequency - 1.0).abs() > 0.2 {
        r.warnings.push(format!("RF limit was measured at {:.2} MHz, drive is at {:.2} MHz", limits.rf_limit_frequency / 1e6, f / 1e6));
    }
    let worst = static_voltages.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst >= limits.static_limit {
        r.violations.push(format!("static voltage {worst} V at or above the {} V breakdown limit", limits.static_limit));
    } else if worst > limits.static_warning {
        r.warnings.push(format!("static voltage {worst} V above the {} V onset level", limits.static_warning));
    }
    Ok(r)
}

/// One row of a miniaturization sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub s: f64,
    pub aspect: f64,
    pub depth_ev: f64,
    pub i0_rel: f64,
    /// Reference dissipation times the relative power density (W), i.e.
    /// the power into an electrode area equal to the reference one.
    pub p_d: f64,
    pub q: f64,
    pub warning: Option<String>,
}

/// Sweeps `s` at fixed h, q, E_max and drive.
#[allow(clippy::too_many_arguments)]
pub fn scaling_sweep(s_values: &[f64], h: f64, q: f64, e_max: f64, scaling: &ScalingModel, model: &CircuitModel, v0: f64, omega: f64) -> Result<Vec<ScalingRow>, CircuitError> {
    let cal = scaling.calibration.ok_or(CircuitError::MissingCalibration)?;
    let q_factor = quality_factor(model, omega)?;
    let p_ref = dissipation(v0, model.c, omega, q_factor)?;
    s_values
        .iter()
        .map(|&s| {
            let d = depth_scaling(s, h, q, e_max, scaling)?;
            let i0 = power_density_scaling(s, scaling, 1.0, cal.s_ref)?;
            Ok(ScalingRow { s, aspect: s / h, depth_ev: d.value, i0_rel: i0, p_d: p_ref * i0, q: q_factor, warning: d.warning })
        })
        .collect()
}

pub fn write_scaling_csv<W: Write>(w: &mut W, rows: &[ScalingRow]) -> io::Result<()> {
    writeln!(w, "s_m,s_over_h,D_eV,I0_rel,P_D_W,Q")?;
    for r in rows {
        writeln!(w, "{:.6e},{:.6},{:.6e},{:.6e},{:.6e},{:.6}", r.s, r.aspect, r.depth_ev, r.i0_rel, r.p_d, r.q)?;
    }
    Ok(())
}
