//! Time-domain motion of a single ion: RF-resolved (or pseudopotential)
//! velocity Verlet with optional damping, white force noise and a tickle
//! drive; tickle spectroscopy; micromotion compensation.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::analysis::{AnalysisError, Pseudopotential, SecularAnalysis};
use crate::constants::IonSpecies;
use crate::fields::interp::CubicField;
use crate::fields::{local_fit, FieldError, FitDegree};
use crate::geometry::{Aabb, VoxelMask};
use crate::grid::ScalarGrid;
use crate::trap::{DriveConfig, TrapModel};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("ion lost at t = {time:e} s near ({:e}, {:e}, {:e}) m", position.x, position.y, position.z)]
    IonLost { time: f64, position: Vector3<f64> },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("no resonance above the noise floor between {0:e} and {1:e} Hz")]
    NoPeak(f64, f64),
    #[error("compensation electrodes are degenerate (condition number {0:e})")]
    Degenerate(f64),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IonState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub time: f64,
}

impl IonState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self { position, velocity: Vector3::zeros(), time: 0.0 }
    }
}

/// Weak sinusoidal voltage on one electrode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tickle {
    pub electrode: usize,
    /// Amplitude (V).
    pub amplitude: f64,
    /// Angular frequency (rad/s).
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Time step (s).
    pub dt: f64,
    /// Velocity damping rate (1/s).
    pub gamma: f64,
    /// One-sided force-noise spectral density per axis (N^2/Hz).
    pub noise_force_psd: f64,
    pub tickle: Option<Tickle>,
    pub rng_seed: u64,
    /// Integration time (s).
    pub duration: f64,
    /// Record every `sample_stride`-th step.
    pub sample_stride: usize,
}

impl SimOptions {
    /// RF period / 200 steps, no damping, noise or tickle.
    pub fn for_drive(drive: &DriveConfig, duration: f64) -> Self {
        Self { dt: drive.rf_period() / 200.0, gamma: 0.0, noise_force_psd: 0.0, tickle: None, rng_seed: 0, duration, sample_stride: 1 }
    }

    /// Checks the options; `omega_rf` is `None` for time-independent fields.
    pub fn validate(&self, omega_rf: Option<f64>) -> Result<(), DynamicsError> {
        let bad = |m: String| Err(DynamicsError::InvalidOptions(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if let Some(w) = omega_rf {
            let limit = 2.0 * std::f64::consts::PI / (100.0 * w);
            if self.dt > limit * (1.0 + 1e-12) {
                return bad(format!("dt = {:e} s exceeds RF period / 100 = {:e} s", self.dt, limit));
            }
        }
        if !(self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        if !(self.gamma >= 0.0) || !(self.noise_force_psd >= 0.0) {
            return bad("damping and noise must be non-negative".into());
        }
        if self.sample_stride == 0 {
            return bad("sample stride must be at least 1".into());
        }
        Ok(())
    }
}

/// Time dependence of one potential term.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Constant,
    Cosine {
        omega: f64,
        phase: f64,
    },
    /// Piecewise-linear hat rising from `start` to 1 at `peak` and falling to
    /// 0 at `end`; infinite ends hold the value 1.
    Hat {
        start: f64,
        peak: f64,
        end: f64,
    },
    /// Linear interpolation of `values` sampled every `period` from `t0`,
    /// held at the end values outside the table.
    Samples {
        t0: f64,
        period: f64,
        values: Arc<[f64]>,
    },
}

impl Profile {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Profile::Constant => 1.0,
            Profile::Cosine { omega, phase } => (omega * t + phase).cos(),
            Profile::Samples { t0, period, ref values } => {
                let n = values.len();
                let u = (t - t0) / period;
                if n == 1 || t <= t0 {
                    values[0]
                } else if !(period > 0.0) || u >= (n - 1) as f64 {
                    values[n - 1]
                } else {
                    let i = u.floor() as usize;
                    let f = u - i as f64;
                    values[i] + f * (values[i + 1] - values[i])
                }
            }
            Profile::Hat { start, peak, end } => {
                if t < peak {
                    if start == f64::NEG_INFINITY {
                        1.0
                    } else if t <= start {
                        0.0
                    } else {
                        (t - start) / (peak - start)
                    }
                } else if end == f64::INFINITY {
                    1.0
                } else if t >= end {
                    0.0
                } else {
                    (end - t) / (end - peak)
                }
            }
        }
    }
}

/// `scale * profile(t) * field[channel](r)` contributes to the potential
/// energy (J). Secular terms also count toward the secular energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub channel: usize,
    pub scale: f64,
    pub profile: Profile,
    pub secular: bool,
}

/// A potential-energy landscape built from interpolated fields with
/// time-dependent weights.
#[derive(Debug, Clone)]
pub struct TimePotential {
    field: CubicField,
    terms: Vec<Term>,
    rf_omega: Option<f64>,
}

struct Eval {
    force: Vector3<f64>,
    secular_energy: f64,
}

impl TimePotential {
    pub fn new(field: CubicField, terms: Vec<Term>, rf_omega: Option<f64>) -> Self {
        Self { field, terms, rf_omega }
    }

    /// RF-resolved trap: static potential, RF potential at `cos(Omega t)` and
    /// an optional tickle, for a particle of the given charge.
    #[allow(clippy::too_many_arguments)]
    pub fn rf_from_fields(
        mask: &VoxelMask,
        rf_unit: &ScalarGrid,
        dc: &ScalarGrid,
        v0: f64,
        omega: f64,
        charge: f64,
        tickle: Option<(&ScalarGrid, f64, f64)>,
        region: Option<&Aabb>,
    ) -> Self {
        let mut fields = vec![rf_unit, dc];
        let mut terms = vec![
            Term { channel: 0, scale: charge * v0, profile: Profile::Cosine { omega, phase: 0.0 }, secular: false },
            Term { channel: 1, scale: charge, profile: Profile::Constant, secular: true },
        ];
        if let Some((basis, amplitude, w)) = tickle {
            fields.push(basis);
            terms.push(Term { channel: 2, scale: charge * amplitude, profile: Profile::Cosine { omega: w, phase: 0.0 }, secular: false });
        }
        Self::new(CubicField::new(&fields, mask, region), terms, Some(omega))
    }

    pub fn rf_trap(model: &TrapModel, drive: &DriveConfig, tickle: Option<&Tickle>, region: Option<&Aabb>) -> Result<Self, DynamicsError> {
        drive.validate(model.bases.len()).map_err(DynamicsError::InvalidOptions)?;
        let rf = model.rf_unit();
        let dc = model.dc_potential(drive);
        let tickle = match tickle {
            Some(t) => {
                let b = model.bases.get(t.electrode).ok_or(FieldError::UnknownElectrode(t.electrode))?;
                Some((&b.field, t.amplitude, t.omega))
            }
            None => None,
        };
        Ok(Self::rf_from_fields(&model.mask, &rf, &dc, drive.v0, drive.omega, drive.species.charge, tickle, region))
    }

    /// Time-averaged (pseudopotential) landscape of `pp`.
    pub fn pseudo(pp: &Pseudopotential, mask: &VoxelMask, region: Option<&Aabb>) -> Self {
        let energy = rf_pseudo_energy(pp, mask);
        let field = CubicField::new(&[&energy, &pp.dc], mask, region);
        let terms = vec![
            Term { channel: 0, scale: 1.0, profile: Profile::Constant, secular: true },
            Term { channel: 1, scale: pp.species.charge, profile: Profile::Constant, secular: true },
        ];
        Self::new(field, terms, None)
    }

    pub fn field(&self) -> &CubicField {
        &self.field
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn terms_mut(&mut self) -> &mut Vec<Term> {
        &mut self.terms
    }

    /// RF angular frequency when the potential is RF-resolved.
    pub fn rf_omega(&self) -> Option<f64> {
        self.rf_omega
    }

    fn weights(&self, t: f64, all: &mut Vec<(usize, f64)>, secular: &mut Vec<(usize, f64)>) {
        all.clear();
        secular.clear();
        for term in &self.terms {
            let w = term.scale * term.profile.at(t);
            if w == 0.0 {
                continue;
            }
            all.push((term.channel, w));
            if term.secular {
                secular.push((term.channel, w));
            }
        }
    }

    fn eval(&self, r: &Vector3<f64>, t: f64, all: &mut Vec<(usize, f64)>, sec: &mut Vec<(usize, f64)>) -> Option<Eval> {
        self.weights(t, all, sec);
        let (_, grad) = self.field.eval_mix(r, all)?;
        let (secular_energy, _) = self.field.eval_mix(r, sec)?;
        if !(grad.iter().all(|g| g.is_finite()) && secular_energy.is_finite()) {
            return None;
        }
        Some(Eval { force: -grad, secular_energy })
    }

    /// Potential energy (J) and force (N) at `r` and time `t`.
    pub fn energy_and_force(&self, r: &Vector3<f64>, t: f64) -> Option<(f64, Vector3<f64>)> {
        let mut all = Vec::new();
        let mut sec = Vec::new();
        self.weights(t, &mut all, &mut sec);
        let (e, g) = self.field.eval_mix(r, &all)?;
        Some((e, -g))
    }

    /// Hessian of the potential energy (J/m^2) at `r` and `t` by central
    /// differences of the interpolated force with step `h`.
    pub fn hessian(&self, r: &Vector3<f64>, t: f64, h: f64) -> Option<Matrix3<f64>> {
        let mut m = Matrix3::zeros();
        for a in 0..3 {
            let mut d = Vector3::zeros();
            d[a] = h;
            let (_, fp) = self.energy_and_force(&(r + d), t)?;
            let (_, fm) = self.energy_and_force(&(r - d), t)?;
            m.set_column(a, &((fm - fp) / (2.0 * h)));
        }
        Some((m + m.transpose()) * 0.5)
    }

    /// Newton search for the nearest local minimum of the potential frozen
    /// at time `t`. Returns the position, energy (J) and Hessian.
    pub fn local_minimum(&self, start: &Vector3<f64>, t: f64) -> Option<(Vector3<f64>, f64, Matrix3<f64>)> {
        let h = 0.25 * self.field.grid().spacing;
        let mut r = *start;
        for _ in 0..50 {
            let (_, f) = self.energy_and_force(&r, t)?;
            let hess = self.hessian(&r, t, h)?;
            let mut step = hess.cholesky()?.solve(&f);
            let cap = self.field.grid().spacing;
            if step.norm() > cap {
                step *= cap / step.norm();
            }
            r += step;
            if step.norm() < 1e-15 {
                break;
            }
        }
        let (e, _) = self.energy_and_force(&r, t)?;
        Some((r, e, self.hessian(&r, t, h)?))
    }

    /// Secular (non-oscillating) part of the potential energy (J).
    pub fn secular_energy(&self, r: &Vector3<f64>, t: f64) -> Option<f64> {
        let mut all = Vec::new();
        let mut sec = Vec::new();
        self.weights(t, &mut all, &mut sec);
        self.field.eval_mix(r, &sec).map(|(e, _)| e)
    }
}

/// Ponderomotive energy e^2 V0^2 |grad phi_rf|^2 / (4 m Omega^2) in joules,
/// finite everywhere inside the shell so it can be interpolated next to
/// electrodes.
pub fn rf_pseudo_energy(pp: &Pseudopotential, mask: &VoxelMask) -> ScalarGrid {
    let g = mask.grid;
    let [sx, sy, sz] = g.strides();
    let q = pp.species.charge;
    let coef = q * q * pp.v0 * pp.v0 / (4.0 * pp.species.mass * pp.omega * pp.omega) / (4.0 * g.spacing * g.spacing);
    let rf = &pp.rf_unit.values;
    let mut out = ScalarGrid::zeros(g);
    for (idx, o) in out.values.iter_mut().enumerate() {
        if g.depth_inside(g.unindex(idx)) == 0 {
            continue;
        }
        let gx = rf[idx + sx] - rf[idx - sx];
        let gy = rf[idx + sy] - rf[idx - sy];
        let gz = rf[idx + sz] - rf[idx - sz];
        *o = coef * (gx * gx + gy * gy + gz * gz);
    }
    out
}

/// Sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<IonState>,
    /// Kinetic plus secular potential energy averaged over the preceding RF
    /// period (J), one per sample.
    pub secular_energy: Vec<f64>,
}

impl Trajectory {
    /// Uniform sample interval (s).
    pub fn sample_interval(&self) -> f64 {
        if self.states.len() < 2 {
            0.0
        } else {
            self.states[1].time - self.states[0].time
        }
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "t_s,x_m,y_m,z_m,vx_m_per_s,vy_m_per_s,vz_m_per_s,secular_energy_J")?;
        for (s, e) in self.states.iter().zip(&self.secular_energy) {
            writeln!(
                w,
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.9e},{:.9e},{:.9e},{:.9e}",
                s.time, s.position.x, s.position.y, s.position.z, s.velocity.x, s.velocity.y, s.velocity.z, e
            )?;
        }
        Ok(())
    }
}

/// Integrates and hands every step's state and running secular energy to
/// `observe` (step index starting at 0 for the initial state).
pub fn integrate_with(pot: &TimePotential, mass: f64, state0: &IonState, opts: &SimOptions, mut observe: impl FnMut(usize, &IonState, f64)) -> Result<IonState, DynamicsError> {
    opts.validate(pot.rf_omega)?;
    if !(mass > 0.0) {
        return Err(DynamicsError::InvalidOptions("mass must be positive".into()));
    }
    let dt = opts.dt;
    let n_steps = (opts.duration / dt).round() as usize;
    let window = pot.rf_omega.map(|w| ((2.0 * std::f64::consts::PI / w) / dt).round().max(1.0) as usize).unwrap_or(1);
    let mut ring = vec![0.0; window];
    let mut ring_sum = 0.0;
    let mut filled = 0usize;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let kick_sigma = (opts.noise_force_psd * dt / 4.0).sqrt() / mass;
    let damp = (-opts.gamma * dt / 2.0).exp();
    let mut all = Vec::new();
    let mut sec = Vec::new();

    let mut s = *state0;
    let lost = |s: &IonState| DynamicsError::IonLost { time: s.time, position: s.position };
    let mut ev = pot.eval(&s.position, s.time, &mut all, &mut sec).ok_or_else(|| lost(&s))?;
    let push = |n: usize, s: &IonState, ev: &Eval, ring: &mut [f64], ring_sum: &mut f64, filled: &mut usize| {
        let e = 0.5 * mass * s.velocity.norm_squared() + ev.secular_energy;
        let slot = n % window;
        if *filled == window {
            *ring_sum -= ring[slot];
        } else {
            *filled += 1;
        }
        ring[slot] = e;
        *ring_sum += e;
        if slot == 0 {
            // Re-sum once per window so rounding cannot accumulate.
            *ring_sum = ring[..*filled].iter().sum();
        }
        *ring_sum / *filled as f64
    };
    let e0 = push(0, &s, &ev, &mut ring, &mut ring_sum, &mut filled);
    observe(0, &s, e0);
    let t0 = s.time;
    let noise = opts.noise_force_psd > 0.0;
    for n in 1..=n_steps {
        if noise {
            for a in 0..3 {
                let xi: f64 = StandardNormal.sample(&mut rng);
                s.velocity[a] = s.velocity[a] * damp + kick_sigma * xi;
            }
        } else {
            s.velocity *= damp;
        }
        s.velocity += ev.force * (0.5 * dt / mass);
        s.position += s.velocity * dt;
        s.time = t0 + n as f64 * dt;
        ev = pot.eval(&s.position, s.time, &mut all, &mut sec).ok_or_else(|| lost(&s))?;
        s.velocity += ev.force * (0.5 * dt / mass);
        if noise {
            for a in 0..3 {
                let xi: f64 = StandardNormal.sample(&mut rng);
                s.velocity[a] = s.velocity[a] * damp + kick_sigma * xi;
            }
        } else {
            s.velocity *= damp;
        }
        let e = push(n, &s, &ev, &mut ring, &mut ring_sum, &mut filled);
        observe(n, &s, e);
    }
    Ok(s)
}

/// Integrates m r'' = F(r, t) - m gamma r' + noise and samples every
/// `sample_stride` steps.
pub fn integrate(pot: &TimePotential, mass: f64, state0: &IonState, opts: &SimOptions) -> Result<Trajectory, DynamicsError> {
    let mut traj = Trajectory { states: Vec::new(), secular_energy: Vec::new() };
    let stride = opts.sample_stride.max(1);
    integrate_with(pot, mass, state0, opts, |n, s, e| {
        if n % stride == 0 {
            traj.states.push(*s);
            traj.secular_energy.push(e);
        }
    })?;
    Ok(traj)
}

/// One-sided amplitude spectrum (Hann window, mean removed) of a uniformly
/// sampled signal. Returns `(frequency Hz, amplitude)` pairs.
pub fn spectrum(signal: &[f64], sample_interval: f64) -> Vec<(f64, f64)> {
    let n = signal.len();
    if n < 2 {
        return Vec::new();
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
            Complex::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = 1.0 / (n as f64 * sample_interval);
    buf[..n / 2 + 1].iter().enumerate().map(|(k, c)| (k as f64 * df, c.norm() * 4.0 / n as f64)).collect()
}

/// Largest spectral peak within `[f_min, f_max]`, refined by a parabola
/// through the log amplitudes of the three bins around it.
pub fn dominant_frequency(spec: &[(f64, f64)], f_min: f64, f_max: f64) -> Option<f64> {
    let (k, _) = spec.iter().enumerate().filter(|(_, (f, _))| *f >= f_min && *f <= f_max).max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))?;
    if k == 0 || k + 1 >= spec.len() {
        return Some(spec[k].0);
    }
    let (a, b, c) = (spec[k - 1].1.ln(), spec[k].1.ln(), spec[k + 1].1.ln());
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    Some(spec[k].0 + shift.clamp(-0.5, 0.5) * (spec[1].0 - spec[0].0))
}

pub fn write_spectrum_csv<W: Write>(w: &mut W, freqs: &[f64], response: &[f64]) -> io::Result<()> {
    writeln!(w, "freq_Hz,response")?;
    for (f, r) in freqs.iter().zip(response) {
        writeln!(w, "{:.9e},{:.9e}", f, r)?;
    }
    Ok(())
}

/// Settings of a tickle scan.
#[derive(Debug, Clone, PartialEq)]
pub struct TickleOptions {
    pub electrode: usize,
    /// Tickle amplitude (V).
    pub amplitude: f64,
    /// Cooling rate (1/s); must be positive so a steady state exists.
    pub gamma: f64,
    /// Time allowed for transients to decay; default 10 / gamma.
    pub settle_time: Option<f64>,
    /// Demodulation window after settling (s), rounded up to whole drive
    /// periods.
    pub measure_time: f64,
    /// Step; default RF period / 200.
    pub dt: Option<f64>,
    /// Points of the fine scan around each coarse peak (0 disables).
    pub refine_points: usize,
    /// Peaks to report, largest first before sorting by frequency.
    pub max_peaks: usize,
    /// Half-width of the interpolation box around the trap centre (m).
    pub region_half_width: f64,
}

impl Default for TickleOptions {
    fn default() -> Self {
        Self {
            electrode: 1,
            amplitude: 1e-3,
            gamma: 2.0 * std::f64::consts::PI * 30e3,
            settle_time: None,
            measure_time: 20e-6,
            dt: None,
            refine_points: 9,
            max_peaks: 3,
            region_half_width: 20e-6,
        }
    }
}

/// Response spectrum of a tickle scan.
#[derive(Debug, Clone, PartialEq)]
pub struct TickleScan {
    /// Drive frequencies (Hz), ascending; fine-scan points are merged in.
    pub frequencies: Vec<f64>,
    /// Steady-state RMS displacement at the drive frequency (m).
    pub response: Vec<f64>,
    /// Resonance estimates (Hz), ascending.
    pub peaks: Vec<f64>,
}

fn tickle_response(pot: &TimePotential, mass: f64, r0: &Vector3<f64>, f: f64, opts: &TickleOptions, dt: f64) -> Result<f64, DynamicsError> {
    let w = 2.0 * std::f64::consts::PI * f;
    let mut pot = pot.clone();
    if let Some(t) = pot.terms.iter_mut().find(|t| t.channel == 2) {
        t.profile = Profile::Cosine { omega: w, phase: 0.0 };
    }
    let settle = opts.settle_time.unwrap_or(10.0 / opts.gamma);
    // Whole drive periods, so the demodulation does not leak.
    let measure = (opts.measure_time * f).ceil().max(1.0) / f;
    let sim = SimOptions { dt, gamma: opts.gamma, noise_force_psd: 0.0, tickle: None, rng_seed: 0, duration: settle + measure, sample_stride: 1 };
    let first = (settle / dt).round() as usize;
    let mut n = 0usize;
    let mut c = Vector3::zeros();
    let mut s = Vector3::zeros();
    integrate_with(&pot, mass, &IonState::at_rest(*r0), &sim, |i, st, _| {
        if i >= first {
            n += 1;
            let (sn, cs) = (w * st.time).sin_cos();
            c += st.position * cs;
            s += st.position * sn;
        }
    })?;
    // Lock-in amplitude at the drive frequency: micromotion and the static
    // offset do not contribute.
    let n = n.max(1) as f64;
    let (c, s) = (c * (2.0 / n), s * (2.0 / n));
    Ok(((c.norm_squared() + s.norm_squared()) / 2.0).sqrt())
}

/// Steady-state RMS displacement at each drive frequency (Hz), for a
/// prepared RF potential whose channel 2 is the tickle.
pub fn tickle_response_curve(pot: &TimePotential, mass: f64, r0: &Vector3<f64>, freqs: &[f64], opts: &TickleOptions) -> Result<Vec<f64>, DynamicsError> {
    if !(opts.gamma > 0.0) {
        return Err(DynamicsError::InvalidOptions("tickle scan needs gamma > 0".into()));
    }
    let dt = opts.dt.unwrap_or_else(|| pot.rf_omega.map_or(1e-9, |w| 2.0 * std::f64::consts::PI / w / 200.0));
    freqs.par_iter().map(|&f| tickle_response(pot, mass, r0, f, opts, dt)).collect()
}

fn local_peaks(resp: &[f64]) -> Vec<usize> {
    (1..resp.len().saturating_sub(1)).filter(|&i| resp[i] > resp[i - 1] && resp[i] >= resp[i + 1]).collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        0.0
    } else {
        s[s.len() / 2]
    }
}

/// Tickle spectroscopy: steady-state RMS displacement of the cooled ion at
/// the drive frequency, versus that frequency, with resonances refined by a fine scan and a
/// parabolic vertex.
pub fn tickle_scan(model: &TrapModel, drive: &DriveConfig, r0: &Vector3<f64>, f_range: (f64, f64), n_points: usize, opts: &TickleOptions) -> Result<TickleScan, DynamicsError> {
    if !(opts.gamma > 0.0) {
        return Err(DynamicsError::InvalidOptions("tickle scan needs gamma > 0".into()));
    }
    let hw = opts.region_half_width;
    let region = Aabb::new([r0.x - hw, r0.y - hw, r0.z - hw], [r0.x + hw, r0.y + hw, r0.z + hw]);
    let tickle = Tickle { electrode: opts.electrode, amplitude: opts.amplitude, omega: 0.0 };
    let pot = TimePotential::rf_trap(model, drive, Some(&tickle), Some(&region))?;
    tickle_scan_potential(&pot, drive.species.mass, r0, f_range, n_points, opts)
}

/// [`tickle_scan`] on a prepared RF potential whose channel 2 is the tickle.
pub fn tickle_scan_potential(pot: &TimePotential, mass: f64, r0: &Vector3<f64>, f_range: (f64, f64), n_points: usize, opts: &TickleOptions) -> Result<TickleScan, DynamicsError> {
    let (f_min, f_max) = f_range;
    if !(opts.gamma > 0.0) {
        return Err(DynamicsError::InvalidOptions("tickle scan needs gamma > 0".into()));
    }
    if n_points < 3 || !(f_max > f_min && f_min > 0.0) {
        return Err(DynamicsError::InvalidOptions("need >= 3 points over a positive range".into()));
    }
    let dt = opts.dt.unwrap_or_else(|| pot.rf_omega.map_or(1e-9, |w| 2.0 * std::f64::consts::PI / w / 200.0));
    let step = (f_max - f_min) / (n_points - 1) as f64;
    let coarse: Vec<f64> = (0..n_points).map(|i| f_min + step * i as f64).collect();
    let resp: Vec<f64> = coarse.par_iter().map(|&f| tickle_response(pot, mass, r0, f, opts, dt)).collect::<Result<_, _>>()?;
    let floor = median(&resp);
    let mut cands: Vec<usize> = local_peaks(&resp).into_iter().filter(|&i| resp[i] > 3.0 * floor).collect();
    cands.sort_by(|&a, &b| resp[b].total_cmp(&resp[a]));
    cands.truncate(opts.max_peaks);
    if cands.is_empty() {
        return Err(DynamicsError::NoPeak(f_min, f_max));
    }
    let mut freqs = coarse.clone();
    let mut all_resp = resp.clone();
    let mut peaks = Vec::new();
    for &i in &cands {
        let (fs, rs) = if opts.refine_points >= 3 {
            let m = opts.refine_points;
            let fs: Vec<f64> = (0..m).map(|j| coarse[i] - step + 2.0 * step * j as f64 / (m - 1) as f64).collect();
            let rs: Vec<f64> = fs.par_iter().map(|&f| tickle_response(pot, mass, r0, f, opts, dt)).collect::<Result<_, _>>()?;
            (fs, rs)
        } else {
            (vec![coarse[i - 1], coarse[i], coarse[i + 1]], vec![resp[i - 1], resp[i], resp[i + 1]])
        };
        let k = (0..rs.len()).max_by(|&a, &b| rs[a].total_cmp(&rs[b])).unwrap_or(0).clamp(1, rs.len() - 2);
        let (a, b, c) = (rs[k - 1], rs[k], rs[k + 1]);
        let h = fs[k + 1] - fs[k];
        let denom = a - 2.0 * b + c;
        let shift = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-1.0, 1.0) } else { 0.0 };
        peaks.push(fs[k] + shift * h);
        freqs.extend_from_slice(&fs);
        all_resp.extend_from_slice(&rs);
    }
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| freqs[a].total_cmp(&freqs[b]));
    peaks.sort_by(f64::total_cmp);
    Ok(TickleScan { frequencies: order.iter().map(|&i| freqs[i]).collect(), response: order.iter().map(|&i| all_resp[i]).collect(), peaks })
}

/// Result of a least-squares micromotion compensation.
#[derive(Debug, Clone, PartialEq)]
pub struct Compensation {
    /// `(electrode id, voltage change V)`.
    pub adjustments: Vec<(usize, f64)>,
    /// Static field left at the RF null (V/m).
    pub residual_field: Vector3<f64>,
    /// Amplitude of the excess micromotion that field drives (m).
    pub residual_micromotion: f64,
    pub condition_number: f64,
}

/// Point where the transverse RF field vanishes in the y-z plane through
/// `seed`. Along the axis the null is a line, so x is kept.
pub fn rf_null(model: &TrapModel, drive: &DriveConfig, seed: &Vector3<f64>) -> Result<Vector3<f64>, DynamicsError> {
    drive.validate(model.bases.len()).map_err(DynamicsError::InvalidOptions)?;
    let rf = model.rf_unit();
    let h = model.mask.grid.spacing;
    let mut r = *seed;
    // The fit stencil can flip between neighbouring voxels when the null sits
    // on a voxel face, so keep the iterate with the smallest predicted step.
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for _ in 0..20 {
        let fit = local_fit(&rf, &model.mask, &r, FitDegree::Cubic)?;
        let hyz = nalgebra::Matrix2::new(fit.hessian[(1, 1)], fit.hessian[(1, 2)], fit.hessian[(2, 1)], fit.hessian[(2, 2)]);
        let step = hyz.try_inverse().ok_or(DynamicsError::Degenerate(f64::INFINITY))? * nalgebra::Vector2::new(fit.gradient.y, fit.gradient.z);
        if best.is_none_or(|(b, _)| step.norm() < b) {
            best = Some((step.norm(), r));
        }
        if step.norm() < 1e-9 * h {
            break;
        }
        r.y -= step.x;
        r.z -= step.y;
        if (r - seed).norm() > 10.0 * h {
            break;
        }
    }
    match best {
        Some((b, r)) if b < 0.05 * h => Ok(r),
        _ => Err(DynamicsError::InvalidOptions("no RF null near the seed".into())),
    }
}

/// Excess micromotion amplitude (m) driven by a static field `e_field` at
/// the RF null: along each principal axis the ion is pushed by
/// qE/(m w^2) and oscillates at Omega with |q_i|/2 of that displacement.
pub fn micromotion_amplitude(sa: &SecularAnalysis, species: &IonSpecies, e_field: &Vector3<f64>) -> f64 {
    let mut xi = Vector3::zeros();
    for i in 0..3 {
        let d = species.charge * e_field.dot(&sa.axes[i]) / (species.mass * sa.omega[i] * sa.omega[i]);
        xi += sa.axes[i] * (0.5 * sa.mathieu_q[i].abs() * d);
    }
    xi.norm()
}

/// Minimum-norm DC adjustments on `electrodes` that cancel `stray_field`
/// at `r_null`. Fails when the electrodes' fields there are degenerate.
pub fn compensate_micromotion(
    model: &TrapModel,
    r_null: &Vector3<f64>,
    stray_field: &Vector3<f64>,
    electrodes: &[usize],
    sa: Option<&SecularAnalysis>,
    species: &IonSpecies,
    max_condition: f64,
) -> Result<Compensation, DynamicsError> {
    if electrodes.len() < 2 {
        return Err(DynamicsError::InvalidOptions("at least two compensation electrodes are required".into()));
    }
    let mut cols = Vec::with_capacity(electrodes.len());
    for &id in electrodes {
        let b = model.bases.get(id).ok_or(FieldError::UnknownElectrode(id))?;
        let fit = local_fit(&b.field, &model.mask, r_null, FitDegree::Quadratic)?;
        cols.push(-fit.gradient);
    }
    let comp = compensate_with_fields(&cols, stray_field, max_condition)?;
    let residual_micromotion = sa.map_or(0.0, |sa| micromotion_amplitude(sa, species, &comp.1));
    Ok(Compensation { adjustments: electrodes.iter().copied().zip(comp.0).collect(), residual_field: comp.1, residual_micromotion, condition_number: comp.2 })
}

/// Least-squares core: field columns (V/m per V) against a stray field.
/// Returns the voltages, the residual field and the condition number.
pub fn compensate_with_fields(cols: &[Vector3<f64>], stray: &Vector3<f64>, max_condition: f64) -> Result<(Vec<f64>, Vector3<f64>, f64), DynamicsError> {
    let k = cols.len();
    let mut a = DMatrix::zeros(3, k);
    for (j, c) in cols.iter().enumerate() {
        a.set_column(j, c);
    }
    let svd = a.clone().svd(true, true);
    let rank = k.min(3);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let cond = if sv[rank - 1] > 0.0 { sv[0] / sv[rank - 1] } else { f64::INFINITY };
    if !(cond <= max_condition) {
        return Err(DynamicsError::Degenerate(cond));
    }
    let b = DVector::from_column_slice(&[-stray.x, -stray.y, -stray.z]);
    let eps = sv[0] * 1e-12;
    let x = svd.solve(&b, eps).map_err(|e| DynamicsError::InvalidOptions(e.to_string()))?;
    let achieved = &a * &x;
    let residual = Vector3::new(stray.x + achieved[0], stray.y + achieved[1], stray.z + achieved[2]);
    Ok((x.iter().copied().collect(), residual, cond))
}
