//! Anomalous heating from electric-field noise, the motion-sensitive Raman
//! measurement used to detect it, and the dark boil-out estimate.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use thiserror::Error;

use crate::constants::{IonSpecies, E_CHARGE, HBAR, K_B};

#[derive(Debug, Error, PartialEq)]
pub enum HeatingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("insufficient early-time data: {0}")]
    InsufficientData(String),
}

/// Field-noise spectral density with a power-law distance dependence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// (V/m)^2/Hz at `d_ref`.
    pub s_e_ref: f64,
    /// m.
    pub d_ref: f64,
    pub exponent: f64,
}

impl NoiseModel {
    pub fn new(s_e_ref: f64, d_ref: f64) -> Result<Self, HeatingError> {
        let m = Self { s_e_ref, d_ref, exponent: 4.0 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), HeatingError> {
        if !(self.s_e_ref >= 0.0) || !(self.d_ref > 0.0) || !self.exponent.is_finite() {
            return Err(HeatingError::InvalidInput(format!("noise model needs S_E >= 0 and d_ref > 0, got {self:?}")));
        }
        Ok(())
    }

    /// Spectral density at distance `d`.
    pub fn s_e(&self, d: f64) -> f64 {
        self.s_e_ref * (self.d_ref / d).powf(self.exponent)
    }
}

/// Geometry of the two Raman beams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RamanConfig {
    /// m.
    pub wavelength: f64,
    /// Angle between the beams (rad).
    pub beam_angle: f64,
    /// Angle between the wavevector difference and the trap axis (rad).
    pub axis_angle: f64,
    /// Hz.
    pub detuning: f64,
    /// Hz.
    pub beatnote: f64,
    /// s.
    pub probe_time: f64,
}

impl RamanConfig {
    /// 214.5 nm beams 7 degrees apart with the wavevector difference 45
    /// degrees from the axis.
    pub fn baseline() -> Self {
        Self { wavelength: 214.5e-9, beam_angle: 7f64.to_radians(), axis_angle: 45f64.to_radians(), detuning: 70e9, beatnote: 14.53e9, probe_time: 10e-6 }
    }

    pub fn validate(&self) -> Result<(), HeatingError> {
        if !(self.wavelength > 0.0) {
            return Err(HeatingError::InvalidInput("wavelength must be positive".into()));
        }
        if !(self.beam_angle >= 0.0 && self.beam_angle < std::f64::consts::PI) {
            return Err(HeatingError::InvalidInput("beam angle must lie in [0, pi)".into()));
        }
        Ok(())
    }

    /// Projection of the wavevector difference on the trap axis (1/m).
    pub fn delta_k_axial(&self) -> f64 {
        2.0 * (2.0 * std::f64::consts::PI / self.wavelength) * (0.5 * self.beam_angle).sin() * self.axis_angle.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatingResult {
    /// quanta/s.
    pub nbar_rate: f64,
    pub eta: f64,
    /// One standard deviation of `nbar_rate` (quanta/s).
    pub fit_error: f64,
}

impl HeatingResult {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "nbar_rate_per_s,eta,fit_error_per_s")?;
        writeln!(w, "{:.6e},{:.6e},{:.6e}", self.nbar_rate, self.eta, self.fit_error)
    }
}

/// Axial Lamb-Dicke parameter.
pub fn lamb_dicke(raman: &RamanConfig, omega_axial: f64, species: &IonSpecies) -> Result<f64, HeatingError> {
    raman.validate()?;
    if !(omega_axial > 0.0) {
        return Err(HeatingError::InvalidInput("axial frequency must be positive".into()));
    }
    Ok((raman.delta_k_axial() * (HBAR / (2.0 * species.mass * omega_axial)).sqrt()).abs())
}

/// Heating rate dn/dt = q^2 S_E / (4 m hbar omega) (quanta/s).
pub fn noise_to_heating(noise: &NoiseModel, d: f64, omega: f64, species: &IonSpecies) -> Result<f64, HeatingError> {
    noise.validate()?;
    if !(d > 0.0 && omega > 0.0) {
        return Err(HeatingError::InvalidInput("distance and frequency must be positive".into()));
    }
    Ok(species.charge * species.charge * noise.s_e(d) / (4.0 * species.mass * HBAR * omega))
}

/// Same law for a force-noise density S_F (N^2/Hz) on one axis.
pub fn force_noise_heating_rate(s_f: f64, omega: f64, mass: f64) -> f64 {
    s_f / (4.0 * mass * HBAR * omega)
}

/// Field-noise density that produces `rate` quanta/s; inverse of
/// [`noise_to_heating`] at the reference distance.
pub fn heating_to_noise(rate: f64, omega: f64, species: &IonSpecies) -> f64 {
    rate * 4.0 * species.mass * HBAR * omega / (species.charge * species.charge)
}

/// Lamb-Dicke products above this make the carrier formula unreliable.
pub const LAMB_DICKE_LIMIT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarrierRate {
    pub rate: f64,
    /// eta^2 nbar exceeded [`LAMB_DICKE_LIMIT`].
    pub outside_lamb_dicke: bool,
}

/// Thermally suppressed Raman rate R0 exp(-eta^2 nbar).
pub fn carrier_rate(r0: f64, eta: f64, nbar: f64) -> CarrierRate {
    let x = eta * eta * nbar;
    CarrierRate { rate: r0 * (-x).exp(), outside_lamb_dicke: x > LAMB_DICKE_LIMIT }
}

/// Rabi flop probability sin^2(R t / 2).
pub fn transition_probability(rate: f64, t: f64) -> f64 {
    (0.5 * rate * t).sin().powi(2)
}

/// One probe point of a Raman heating measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RamanPoint {
    /// Delay after cooling (s).
    pub tau: f64,
    /// Raman probe time (s).
    pub t: f64,
    pub successes: u64,
    pub shots: u64,
}

impl RamanPoint {
    pub fn fraction(&self) -> f64 {
        self.successes as f64 / self.shots as f64
    }
}

/// Parameters of a synthetic Raman heating experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RamanExperiment {
    pub nbar0: f64,
    /// quanta/s.
    pub nbar_rate: f64,
    pub eta: f64,
    /// Unsuppressed Raman rate (rad/s).
    pub r0: f64,
    pub delays: Vec<f64>,
    pub probe_times: Vec<f64>,
    pub shots: u64,
}

impl RamanExperiment {
    fn validate(&self) -> Result<(), HeatingError> {
        let ok = self.nbar0 >= 0.0
            && self.nbar_rate >= 0.0
            && self.eta > 0.0
            && self.r0 > 0.0
            && self.shots >= 1
            && !self.delays.is_empty()
            && !self.probe_times.is_empty()
            && self.delays.iter().all(|d| *d >= 0.0)
            && self.probe_times.iter().all(|t| *t > 0.0);
        if ok {
            Ok(())
        } else {
            Err(HeatingError::InvalidInput(format!("bad Raman experiment {self:?}")))
        }
    }

    /// Rabi rate after delay `tau`.
    pub fn rate_at(&self, tau: f64) -> f64 {
        carrier_rate(self.r0, self.eta, self.nbar0 + self.nbar_rate * tau).rate
    }
}

/// Binomially sampled success counts for every (delay, probe time) pair.
pub fn simulate_raman_experiment(exp: &RamanExperiment, rng_seed: u64) -> Result<Vec<RamanPoint>, HeatingError> {
    exp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(exp.delays.len() * exp.probe_times.len());
    for &tau in &exp.delays {
        let r = exp.rate_at(tau);
        for &t in &exp.probe_times {
            let p = transition_probability(r, t);
            let successes = Binomial::new(exp.shots, p.clamp(0.0, 1.0)).map_err(|e| HeatingError::InvalidInput(e.to_string()))?.sample(&mut rng);
            out.push(RamanPoint { tau, t, successes, shots: exp.shots });
        }
    }
    Ok(out)
}

/// Shot count used for the noiseless dataset; rounding the expected counts
/// to integers then perturbs probabilities by at most 5e-13.
pub const NOISELESS_SHOTS: u64 = 1_000_000_000_000;

/// The dataset an infinite number of shots would give.
pub fn noiseless_raman_dataset(exp: &RamanExperiment) -> Result<Vec<RamanPoint>, HeatingError> {
    exp.validate()?;
    let mut out = Vec::new();
    for &tau in &exp.delays {
        let r = exp.rate_at(tau);
        for &t in &exp.probe_times {
            let p = transition_probability(r, t);
            out.push(RamanPoint { tau, t, successes: (p * NOISELESS_SHOTS as f64).round() as u64, shots: NOISELESS_SHOTS });
        }
    }
    Ok(out)
}

pub fn write_dataset_csv<W: Write>(w: &mut W, data: &[RamanPoint]) -> io::Result<()> {
    writeln!(w, "tau_s,t_s,successes,shots")?;
    for p in data {
        writeln!(w, "{:.6e},{:.6e},{},{}", p.tau, p.t, p.successes, p.shots)?;
    }
    Ok(())
}

/// Output of [`fit_heating_rate`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatingFit {
    pub result: HeatingResult,
    /// -slope / eta^2 before clamping at zero; negative when the Raman rate
    /// grows with delay.
    pub signed_rate: f64,
    /// `(tau, R, sigma_R)` per delay.
    pub rates: Vec<(f64, f64, f64)>,
    pub warnings: Vec<String>,
}

/// Extracts dn/dt from a Raman dataset.
///
/// For each delay the early-time points (P < 0.5) are fitted to
/// P = sin^2(R t / 2), which is the quadratic (R t / 2)^2 at small t. The fit
/// is linear in asin(sqrt P) = R t / 2, whose binomial variance is
/// 1 / (4 shots) independent of P. ln R is then fitted linearly in the delay
/// and the slope is -eta^2 dn/dt.
pub fn fit_heating_rate(data: &[RamanPoint], eta: f64) -> Result<HeatingFit, HeatingError> {
    if !(eta > 0.0) {
        return Err(HeatingError::InvalidInput("eta must be positive".into()));
    }
    let mut delays: Vec<f64> = data.iter().map(|p| p.tau).collect();
    delays.sort_by(f64::total_cmp);
    delays.dedup();
    if delays.len() < 2 {
        return Err(HeatingError::InsufficientData("need at least two distinct delays".into()));
    }
    let mut rates = Vec::with_capacity(delays.len());
    for &tau in &delays {
        let (mut swt, mut swtt, mut n) = (0.0, 0.0, 0);
        for p in data.iter().filter(|p| p.tau == tau && p.t > 0.0 && p.shots > 0) {
            let f = p.fraction();
            if f >= 0.5 {
                continue;
            }
            let w = 4.0 * p.shots as f64;
            swt += w * f.sqrt().asin() * p.t;
            swtt += w * p.t * p.t;
            n += 1;
        }
        if n == 0 {
            return Err(HeatingError::InsufficientData(format!("no probe with P < 0.5 at delay {tau:e} s")));
        }
        let half_rate = swt / swtt;
        if !(half_rate > 0.0) {
            return Err(HeatingError::InsufficientData(format!("no transitions observed at delay {tau:e} s")));
        }
        rates.push((tau, 2.0 * half_rate, 2.0 / swtt.sqrt()));
    }

    // Weighted linear fit of ln R against tau.
    let (mut s, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(tau, r, sr) in &rates {
        let w = (r / sr).powi(2);
        let y = r.ln();
        s += w;
        sx += w * tau;
        sy += w * y;
        sxx += w * tau * tau;
        sxy += w * tau * y;
    }
    let det = s * sxx - sx * sx;
    let slope = (s * sxy - sx * sy) / det;
    let slope_err = (s / det).sqrt();
    let signed_rate = -slope / (eta * eta);
    let mut warnings = Vec::new();
    if signed_rate <= 0.0 {
        warnings.push(format!("Raman rate does not decrease with delay (fitted {signed_rate:.3e} quanta/s); reporting zero heating"));
    }
    Ok(HeatingFit { result: HeatingResult { nbar_rate: signed_rate.max(0.0), eta, fit_error: slope_err / (eta * eta) }, signed_rate, rates, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoiloffResult {
    /// s.
    pub boil_time: f64,
    /// Dark heating power over the cold heating power.
    pub ratio_to_cold_rate: f64,
}

/// Time to boil out of a trap of `depth` eV at `dark_power` eV/s, compared
/// with a cold heating power `cold_power` eV/s.
pub fn boiloff_analysis(depth: f64, dark_power: f64, cold_power: f64) -> Result<BoiloffResult, HeatingError> {
    if !(depth > 0.0 && dark_power > 0.0 && cold_power > 0.0) {
        return Err(HeatingError::InvalidInput("depth and heating powers must be positive".into()));
    }
    Ok(BoiloffResult { boil_time: depth / dark_power, ratio_to_cold_rate: dark_power / cold_power })
}

/// Heating power (eV/s) of `rate` quanta/s at angular frequency `omega`.
pub fn quanta_rate_to_power(rate: f64, omega: f64) -> f64 {
    rate * HBAR * omega / E_CHARGE
}

/// Johnson-noise field density 4 k_B T R / d^2 ((V/m)^2/Hz).
pub fn thermal_field_noise(resistance: f64, temperature: f64, d: f64) -> Result<f64, HeatingError> {
    if !(resistance >= 0.0 && temperature >= 0.0 && d > 0.0) {
        return Err(HeatingError::InvalidInput("resistance and temperature must be non-negative and d positive".into()));
    }
    Ok(4.0 * K_B * temperature * resistance / (d * d))
}
