//! Transport of the trapping well between zones: DC waveform synthesis,
//! on-chip RC filtering and simulated transport.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::analysis::{pseudopotential, AnalysisError};
use crate::constants::HBAR;
use crate::dynamics::{integrate_with, rf_pseudo_energy, DynamicsError, IonState, Profile, SimOptions, Term, TimePotential};
use crate::fields::interp::CubicField;
use crate::fields::{local_fit, FieldError, FitDegree, LocalFit};
use crate::geometry::{Aabb, Role};
use crate::grid::ScalarGrid;
use crate::trap::{DriveConfig, TrapModel};

#[derive(Debug, Error)]
pub enum ShuttleError {
    #[error("infeasible waveform at sample {sample} (t = {time:e} s): {reason}")]
    Infeasible { sample: usize, time: f64, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Per-electrode voltage series on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// s.
    pub sample_period: f64,
    /// Column names, one per electrode id.
    pub labels: Vec<String>,
    /// `series[electrode][sample]` (V).
    pub series: Vec<Vec<f64>>,
    /// Well centre targeted at each sample (m).
    pub path: Vec<Vector3<f64>>,
    /// Predicted well displacement from the target at each sample (m).
    pub position_error: Vec<f64>,
    /// Predicted axial frequency at each sample (rad/s).
    pub omega_z: Vec<f64>,
}

impl Waveform {
    pub fn n_samples(&self) -> usize {
        self.series.first().map_or(0, Vec::len)
    }

    pub fn duration(&self) -> f64 {
        self.n_samples().saturating_sub(1) as f64 * self.sample_period
    }

    /// Voltages of every electrode at sample `n`.
    pub fn sample(&self, n: usize) -> Vec<f64> {
        self.series.iter().map(|s| s[n]).collect()
    }

    /// Same samples played over a new total duration.
    pub fn stretched(&self, duration: f64) -> Waveform {
        let mut out = self.clone();
        out.sample_period = if self.n_samples() > 1 { duration / (self.n_samples() - 1) as f64 } else { 0.0 };
        out
    }

    /// Resamples onto a finer time grid with Catmull-Rom interpolation, as
    /// an arbitrary waveform generator would. Piecewise-linear playback of
    /// a coarse waveform kicks the ion at every sample; the kicks add up
    /// whenever the sample rate is close to a subharmonic of the secular
    /// frequency.
    pub fn resample(&self, period: f64) -> Waveform {
        let n = self.n_samples();
        if n < 2 || !(period > 0.0) || self.sample_period == 0.0 {
            return self.clone();
        }
        let m = (self.duration() / period).ceil() as usize + 1;
        let dt = self.duration() / (m - 1) as f64;
        let cr = |y: &dyn Fn(usize) -> f64, t: f64| {
            let u = (t / self.sample_period).clamp(0.0, (n - 1) as f64);
            let k = (u.floor() as usize).min(n - 2);
            let s = u - k as f64;
            let slope = |i: usize| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                (y(b) - y(a)) / (b - a) as f64
            };
            let (p0, p1, m0, m1) = (y(k), y(k + 1), slope(k), slope(k + 1));
            let (s2, s3) = (s * s, s * s * s);
            (2.0 * s3 - 3.0 * s2 + 1.0) * p0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * p1 + (s3 - s2) * m1
        };
        let times: Vec<f64> = (0..m).map(|i| i as f64 * dt).collect();
        let series = self.series.iter().map(|s| times.iter().map(|&t| cr(&|i| s[i], t)).collect()).collect();
        let path = times.iter().map(|&t| Vector3::from_fn(|a, _| cr(&|i| self.path[i][a], t))).collect();
        let lin = |v: &[f64], t: f64| {
            let u = (t / self.sample_period).clamp(0.0, (n - 1) as f64);
            let k = (u.floor() as usize).min(n - 2);
            v[k] + (u - k as f64) * (v[k + 1] - v[k])
        };
        Waveform {
            sample_period: dt,
            labels: self.labels.clone(),
            series,
            path,
            position_error: times.iter().map(|&t| lin(&self.position_error, t)).collect(),
            omega_z: times.iter().map(|&t| lin(&self.omega_z, t)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.series.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "t_s")?;
        for l in &self.labels {
            write!(w, ",{l}_V")?;
        }
        writeln!(w)?;
        for n in 0..self.n_samples() {
            write!(w, "{:.9e}", n as f64 * self.sample_period)?;
            for s in &self.series {
                write!(w, ",{:.9e}", s[n])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformOptions {
    /// Tikhonov weight on the squared voltages, relative to constraint rows
    /// expressed in volts.
    pub regularization: f64,
    /// |V| limit on every electrode (V).
    pub voltage_bound: f64,
    /// Largest allowed well displacement from the path (m).
    pub position_tolerance: f64,
    /// Largest allowed relative axial-frequency error.
    pub frequency_tolerance: f64,
    /// Weight of the soft rows that keep the static curvature transversely
    /// isotropic (0 disables them).
    pub transverse_weight: f64,
    /// Electrodes the solver may drive; default all DC electrodes.
    pub electrodes: Option<Vec<usize>>,
    /// Static voltage sets (per electrode id) trapping at the start and end
    /// zones. The regularization pulls towards their minimum-jerk blend
    /// instead of towards zero.
    pub reference: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for WaveformOptions {
    fn default() -> Self {
        Self { regularization: 1e-2, voltage_bound: 10.0, position_tolerance: 2e-6, frequency_tolerance: 0.05, transverse_weight: 0.1, electrodes: None, reference: None }
    }
}

/// Minimum-jerk profile 10u^3 - 15u^4 + 6u^5 on [0, 1].
pub fn minimum_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Gradient (J/m) and Hessian (J/m^2) of the RF pseudopotential from a
/// cubic fit of the unit RF potential.
fn pseudo_derivatives(rf: &LocalFit, coef: f64) -> (Vector3<f64>, Matrix3<f64>) {
    let g = rf.gradient;
    let h = rf.hessian;
    let mut gt = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            gt[(a, b)] = (0..3).map(|k| g[k] * rf.third[k][a][b]).sum::<f64>();
        }
    }
    // U = coef |grad phi|^2
    (h * g * (2.0 * coef), (h * h + gt) * (2.0 * coef))
}

/// Axial curvature of a Hessian: eigenvalue whose eigenvector is most
/// aligned with the trap axis.
fn axial_eigen(h: &Matrix3<f64>) -> (f64, [f64; 3]) {
    let eig = SymmetricEigen::new((h + h.transpose()) * 0.5);
    let i = (0..3).max_by(|&i, &j| eig.eigenvectors[(0, i)].abs().total_cmp(&eig.eigenvectors[(0, j)].abs())).unwrap_or(0);
    (eig.eigenvalues[i], [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]])
}

/// Synthesizes DC voltages that carry the well from `zone_a` to `zone_b`
/// along a minimum-jerk path with axial frequency `target_omega_z`.
#[allow(clippy::too_many_arguments)]
pub fn solve_waveform(
    model: &TrapModel,
    drive: &DriveConfig,
    zone_a: &Vector3<f64>,
    zone_b: &Vector3<f64>,
    duration: f64,
    target_omega_z: f64,
    n_samples: usize,
    opts: &WaveformOptions,
) -> Result<Waveform, ShuttleError> {
    drive.validate(model.bases.len()).map_err(ShuttleError::InvalidInput)?;
    if !(duration >= 0.0) || n_samples < 2 || !(target_omega_z > 0.0) {
        return Err(ShuttleError::InvalidInput("need duration >= 0, two or more samples and a positive frequency".into()));
    }
    let control = opts.electrodes.clone().unwrap_or_else(|| model.ids_with_role(Role::Dc));
    if let Some((va, vb)) = &opts.reference {
        if va.len() != model.bases.len() || vb.len() != model.bases.len() {
            return Err(ShuttleError::InvalidInput("reference voltage sets must cover every electrode".into()));
        }
    }
    if control.is_empty() || control.iter().any(|&id| id >= model.bases.len()) {
        return Err(ShuttleError::InvalidInput("bad control electrode list".into()));
    }
    let e = drive.species.charge;
    let m = drive.species.mass;
    let coef = e * e * drive.v0 * drive.v0 / (4.0 * m * drive.omega * drive.omega);
    // Row scale: constraints in volts.
    let len = model.params.s;
    let rf = model.rf_unit();
    let stray = Vector3::from(drive.stray_field);
    let k = control.len();
    let mut series = vec![Vec::with_capacity(n_samples); model.bases.len()];
    let mut path = Vec::with_capacity(n_samples);
    let mut position_error = Vec::with_capacity(n_samples);
    let mut omega_z = Vec::with_capacity(n_samples);
    let sample_period = duration / (n_samples - 1) as f64;

    for n in 0..n_samples {
        let time = n as f64 * sample_period;
        let infeasible = |reason: String| ShuttleError::Infeasible { sample: n, time, reason };
        let r = zone_a + (zone_b - zone_a) * minimum_jerk(n as f64 / (n_samples - 1) as f64);
        let rf_fit = local_fit(&rf, &model.mask, &r, FitDegree::Cubic)?;
        let (mut g_fixed, mut h_fixed) = pseudo_derivatives(&rf_fit, coef);
        g_fixed -= stray * e;
        let mut fits = Vec::with_capacity(k);
        for (id, b) in model.bases.iter().enumerate() {
            let v = drive.dc_voltages[id];
            let is_control = control.contains(&id);
            if !is_control && v == 0.0 {
                continue;
            }
            let f = local_fit(&b.field, &model.mask, &r, FitDegree::Cubic)?;
            if is_control {
                fits.push((id, f));
            } else {
                g_fixed += f.gradient * (e * v);
                h_fixed += f.hessian * (e * v);
            }
        }
        fits.sort_by_key(|(id, _)| control.iter().position(|c| c == id));
        let target_k = m * target_omega_z * target_omega_z;
        // Rows, divided by e and scaled to volts: zero gradient (3), axial
        // curvature, then two soft rows asking the static curvature to be
        // transversely isotropic (yy = zz, yz = 0) so that it cannot cancel
        // the RF confinement along one direction.
        let ws = opts.transverse_weight;
        let mut a = DMatrix::zeros(6, k);
        let mut b = DVector::zeros(6);
        for (j, (_, f)) in fits.iter().enumerate() {
            for i in 0..3 {
                a[(i, j)] = f.gradient[i] * len;
            }
            a[(3, j)] = f.hessian[(0, 0)] * len * len;
            a[(4, j)] = ws * (f.hessian[(1, 1)] - f.hessian[(2, 2)]) * len * len;
            a[(5, j)] = ws * f.hessian[(1, 2)] * len * len;
        }
        for i in 0..3 {
            b[i] = -g_fixed[i] / e * len;
        }
        b[3] = (target_k - h_fixed[(0, 0)]) / e * len * len;
        // The soft rows keep the transverse static curvature of the
        // reference blend (or zero it without a reference).
        let blend = minimum_jerk(n as f64 / (n_samples - 1) as f64);
        let v_ref: Vec<f64> = match &opts.reference {
            Some((va, vb)) => fits.iter().map(|(id, _)| va[*id] + (vb[*id] - va[*id]) * blend).collect(),
            None => vec![0.0; k],
        };
        for (j, (_, f)) in fits.iter().enumerate() {
            b[4] += ws * v_ref[j] * (f.hessian[(1, 1)] - f.hessian[(2, 2)]) * len * len;
            b[5] += ws * v_ref[j] * f.hessian[(1, 2)] * len * len;
        }
        // Equality-constrained least squares: the first four rows hold
        // exactly, the soft rows and the pull towards the reference are
        // traded off in the remaining freedom.
        let hard = a.rows(0, 4).into_owned();
        let soft = a.rows(4, 2).into_owned();
        let mut kkt = DMatrix::zeros(k + 4, k + 4);
        let q = soft.transpose() * &soft + DMatrix::identity(k, k) * opts.regularization;
        kkt.view_mut((0, 0), (k, k)).copy_from(&q);
        kkt.view_mut((0, k), (k, 4)).copy_from(&hard.transpose());
        kkt.view_mut((k, 0), (4, k)).copy_from(&hard);
        let mut rhs = DVector::zeros(k + 4);
        let c = soft.transpose() * b.rows(4, 2) + DVector::from_column_slice(&v_ref) * opts.regularization;
        rhs.rows_mut(0, k).copy_from(&c);
        rhs.rows_mut(k, 4).copy_from(&b.rows(0, 4));
        let sol = kkt.lu().solve(&rhs).ok_or_else(|| infeasible("control electrodes cannot set the well position and curvature".into()))?;
        let v = sol.rows(0, k).into_owned();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(infeasible("singular least-squares system".into()));
        }

        // Predicted well: one Newton step from the target.
        let mut g = g_fixed;
        let mut h = h_fixed;
        for (j, (_, f)) in fits.iter().enumerate() {
            g += f.gradient * (e * v[j]);
            h += f.hessian * (e * v[j]);
        }
        let (kz, eigs) = axial_eigen(&h);
        if eigs.iter().any(|&l| l <= 0.0) {
            return Err(infeasible(format!("no confining well (curvatures {eigs:?} J/m^2)")));
        }
        let shift = h.cholesky().map(|c| c.solve(&g).norm()).unwrap_or(f64::INFINITY);
        let wz = (kz / m).sqrt();
        let mut volts: Vec<f64> = drive.dc_voltages.clone();
        for (j, (id, _)) in fits.iter().enumerate() {
            volts[*id] = v[j];
        }
        let worst = volts.iter().fold(0.0f64, |mx, x| mx.max(x.abs()));
        if worst > opts.voltage_bound {
            return Err(infeasible(format!("|V| = {worst:.3} V exceeds the {} V bound", opts.voltage_bound)));
        }
        if shift > opts.position_tolerance {
            return Err(infeasible(format!("well misplaced by {:.3} um", shift * 1e6)));
        }
        if (wz / target_omega_z - 1.0).abs() > opts.frequency_tolerance {
            return Err(infeasible(format!("axial frequency {:.4} MHz vs target {:.4} MHz", wz / 2e6 / std::f64::consts::PI, target_omega_z / 2e6 / std::f64::consts::PI)));
        }
        for (s, x) in series.iter_mut().zip(&volts) {
            s.push(*x);
        }
        path.push(r);
        position_error.push(shift);
        omega_z.push(wz);
    }
    Ok(Waveform { sample_period, labels: model.labels().iter().map(|l| l.to_string()).collect(), series, path, position_error, omega_z })
}

/// First-order RC low-pass between the voltage source and an electrode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterModel {
    /// Shunt capacitance (F).
    pub capacitance: f64,
    /// Source resistance (ohm).
    pub resistance: f64,
}

impl FilterModel {
    /// 1000 pF shunt behind 10 kOhm.
    pub fn baseline() -> Self {
        Self { capacitance: 1000e-12, resistance: 10e3 }
    }

    pub fn tau(&self) -> f64 {
        self.capacitance * self.resistance
    }
}

/// Filters every series, treating the input as piecewise linear between
/// samples; the update is exact for such input and the filter starts in
/// steady state with the first sample.
pub fn apply_filter(w: &Waveform, filter: &FilterModel) -> Result<Waveform, ShuttleError> {
    if !(filter.capacitance > 0.0 && filter.resistance > 0.0) {
        return Err(ShuttleError::InvalidInput("filter capacitance and resistance must be positive".into()));
    }
    let tau = filter.tau();
    if w.sample_period > tau {
        return Err(ShuttleError::InvalidInput(format!("sample period {:e} s must be below the filter time constant {tau:e} s", w.sample_period)));
    }
    let mut out = w.clone();
    if w.sample_period == 0.0 {
        return Ok(out);
    }
    let alpha = (-w.sample_period / tau).exp();
    for (x, y) in w.series.iter().zip(out.series.iter_mut()) {
        for n in 0..x.len().saturating_sub(1) {
            let slope = (x[n + 1] - x[n]) / w.sample_period;
            y[n + 1] = x[n + 1] - slope * tau + (y[n] - x[n] + slope * tau) * alpha;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportOptions {
    /// Default: secular period / 100 at the final axial frequency.
    pub dt: Option<f64>,
    /// Extra time with the final voltages held (s).
    pub hold_time: f64,
    /// Margin of the interpolation box around the path (m).
    pub margin: f64,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self { dt: None, hold_time: 0.0, margin: 20e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportResult {
    /// Energy above the final well bottom in quanta of the final axial
    /// frequency.
    pub quanta: f64,
    /// Distance from the ion to the well the unfiltered final voltages
    /// would form (m).
    pub final_position_error: f64,
    /// Final well bottom (m).
    pub final_minimum: Vector3<f64>,
    /// rad/s.
    pub final_omega_z: f64,
}

/// Integrates the ion in the pseudopotential while the DC voltages follow
/// `waveform` (linear between samples). The ion starts at rest at the well
/// bottom of the first sample. `target` is the waveform whose last sample
/// defines the intended end point; pass the same waveform when unfiltered.
pub fn simulate_transport(model: &TrapModel, drive: &DriveConfig, waveform: &Waveform, target: &Waveform, opts: &TransportOptions) -> Result<TransportResult, ShuttleError> {
    drive.validate(model.bases.len()).map_err(ShuttleError::InvalidInput)?;
    if waveform.series.len() != model.bases.len() || waveform.n_samples() == 0 {
        return Err(ShuttleError::InvalidInput("waveform does not match the electrode count".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in waveform.path.iter().chain(&target.path) {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] - opts.margin);
            hi[a] = hi[a].max(p[a] + opts.margin);
        }
    }
    let region = Aabb::new(lo, hi);
    let pot = transport_potential(model, drive, waveform, &region)?;
    let end_pot = transport_potential(model, drive, &hold_last(target), &region)?;

    let m = drive.species.mass;
    let start = waveform.path[0];
    let (r0, _, _) = pot.local_minimum(&start, 0.0).ok_or(ShuttleError::Infeasible { sample: 0, time: 0.0, reason: "no well at the first sample".into() })?;
    let t_end = waveform.duration() + opts.hold_time;
    let (r_goal, _, h_goal) = end_pot.local_minimum(target.path.last().unwrap_or(&start), 0.0).ok_or(ShuttleError::Infeasible {
        sample: target.n_samples() - 1,
        time: target.duration(),
        reason: "no well at the final sample".into(),
    })?;
    let (kz, _) = axial_eigen(&h_goal);
    let wz = (kz.max(0.0) / m).sqrt();
    if t_end == 0.0 {
        return Ok(TransportResult { quanta: 0.0, final_position_error: (r0 - r_goal).norm(), final_minimum: r_goal, final_omega_z: wz });
    }
    let dt = opts.dt.unwrap_or(2.0 * std::f64::consts::PI / wz / 100.0);
    let steps = (t_end / dt).ceil().max(1.0);
    let sim = SimOptions { dt: t_end / steps, gamma: 0.0, noise_force_psd: 0.0, tickle: None, rng_seed: 0, duration: t_end, sample_stride: 1 };
    let last = integrate_with(&pot, m, &IonState::at_rest(r0), &sim, |_, _, _| {})?;
    // Energy above the bottom of the well present at the end.
    let (_, u_min, h_end) = pot.local_minimum(&last.position, t_end).ok_or(ShuttleError::Infeasible {
        sample: waveform.n_samples() - 1,
        time: t_end,
        reason: "no well at the end of transport".into(),
    })?;
    let (kz_end, _) = axial_eigen(&h_end);
    let wz_end = (kz_end.max(0.0) / m).sqrt();
    let (u, _) = pot.energy_and_force(&last.position, t_end).ok_or(DynamicsError::IonLost { time: t_end, position: last.position })?;
    let energy = 0.5 * m * last.velocity.norm_squared() + u - u_min;
    Ok(TransportResult { quanta: energy / (HBAR * wz_end), final_position_error: (last.position - r_goal).norm(), final_minimum: r_goal, final_omega_z: wz })
}

fn hold_last(w: &Waveform) -> Waveform {
    let mut out = w.clone();
    let n = w.n_samples();
    for s in &mut out.series {
        let v = s[n - 1];
        s.clear();
        s.push(v);
    }
    out.path = vec![*w.path.last().unwrap_or(&Vector3::zeros())];
    out
}

/// Pseudopotential landscape with DC weights following the waveform.
fn transport_potential(model: &TrapModel, drive: &DriveConfig, w: &Waveform, region: &Aabb) -> Result<TimePotential, ShuttleError> {
    let mut static_drive = drive.clone();
    let varying: Vec<usize> = (0..model.bases.len()).filter(|&id| w.series[id].iter().any(|v| *v != w.series[id][0])).collect();
    for (id, s) in w.series.iter().enumerate() {
        static_drive.dc_voltages[id] = if varying.contains(&id) { 0.0 } else { s[0] };
    }
    let pp = pseudopotential(model, &static_drive)?;
    let rf_energy = rf_pseudo_energy(&pp, &model.mask);
    let mut fields: Vec<&ScalarGrid> = vec![&rf_energy, &pp.dc];
    let e = drive.species.charge;
    let mut terms = vec![Term { channel: 0, scale: 1.0, profile: Profile::Constant, secular: true }, Term { channel: 1, scale: e, profile: Profile::Constant, secular: true }];
    for (c, &id) in varying.iter().enumerate() {
        fields.push(&model.bases[id].field);
        terms.push(Term { channel: c + 2, scale: e, profile: Profile::Samples { t0: 0.0, period: w.sample_period, values: Arc::from(w.series[id].as_slice()) }, secular: true });
    }
    Ok(TimePotential::new(CubicField::new(&fields, &model.mask, Some(region)), terms, None))
}
