use chiptrap::analysis::{mathieu_beta, secular_from_pseudo, Pseudopotential};
use chiptrap::constants::{IonSpecies, HBAR};
use chiptrap::dynamics::*;
use chiptrap::fields::interp::CubicField;
use chiptrap::geometry::VoxelMask;
use chiptrap::grid::{Grid3, ScalarGrid};
use nalgebra::Vector3;
use rayon::prelude::*;
use std::f64::consts::PI;

const OMEGA_RF: f64 = 2.0 * PI * 15.9e6;
const R0: f64 = 100e-6;

fn cube(half: f64, h: f64) -> (Grid3, VoxelMask) {
    let n = (2.0 * half / h).round() as usize + 1;
    let g = Grid3 { dims: [n; 3], origin: [-half; 3], spacing: h };
    (g, VoxelMask::empty(g))
}

/// RF amplitude that gives radial |q| for phi_rf = (y^2 - z^2) / (2 R0^2).
fn v0_for_q(q: f64, sp: &IonSpecies) -> f64 {
    q * sp.mass * OMEGA_RF * OMEGA_RF * R0 * R0 / (2.0 * sp.charge)
}

/// Linear quadrupole with a weak axial DC well of frequency `f_ax`.
struct Quad {
    mask: VoxelMask,
    rf: ScalarGrid,
    dc: ScalarGrid,
    v0: f64,
    sp: IonSpecies,
}

fn quad(q: f64, f_ax: f64, stray: Vector3<f64>) -> Quad {
    let sp = IonSpecies::cd111();
    let (g, mask) = cube(16e-6, 1e-6);
    let k = sp.mass * (2.0 * PI * f_ax).powi(2) / (2.0 * sp.charge);
    let rf = ScalarGrid::from_fn(g, |p| (p.y * p.y - p.z * p.z) / (2.0 * R0 * R0));
    let dc = ScalarGrid::from_fn(g, |p| k * (p.x * p.x - 0.5 * (p.y * p.y + p.z * p.z)) - stray.dot(&p));
    Quad { mask, rf, dc, v0: v0_for_q(q, &sp), sp }
}

impl Quad {
    fn potential(&self, tickle: Option<(&ScalarGrid, f64)>) -> TimePotential {
        TimePotential::rf_from_fields(&self.mask, &self.rf, &self.dc, self.v0, OMEGA_RF, self.sp.charge, tickle.map(|(b, a)| (b, a, 0.0)), None)
    }
}

fn zero_crossing_period(traj: &Trajectory, axis: usize) -> f64 {
    let mut crossings = Vec::new();
    for w in traj.states.windows(2) {
        let (a, b) = (w[0].position[axis], w[1].position[axis]);
        if a < 0.0 && b >= 0.0 {
            crossings.push(w[0].time + (w[1].time - w[0].time) * (-a) / (b - a));
        }
    }
    (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64
}

#[test]
fn harmonic_dc_well_has_one_microsecond_period() {
    let sp = IonSpecies::cd111();
    let (g, mask) = cube(10e-6, 1e-6);
    let w = 2.0 * PI * 1e6;
    let e = ScalarGrid::from_fn(g, |p| 0.5 * sp.mass * w * w * p.norm_squared());
    let pot = TimePotential::new(CubicField::new(&[&e], &mask, None), vec![Term { channel: 0, scale: 1.0, profile: Profile::Constant, secular: true }], None);
    let opts = SimOptions { dt: 1e-9, gamma: 0.0, noise_force_psd: 0.0, tickle: None, rng_seed: 0, duration: 20e-6, sample_stride: 1 };
    let traj = integrate(&pot, sp.mass, &IonState::at_rest(Vector3::new(1e-6, 0.5e-6, 0.0)), &opts).unwrap();
    let period = zero_crossing_period(&traj, 0);
    assert!((period - 1e-6).abs() < 1e-9, "period {period:e}");
    assert_eq!(traj.states.len(), traj.secular_energy.len());
    let dts: Vec<f64> = traj.states.windows(2).map(|w| w[1].time - w[0].time).collect();
    assert!(dts.iter().all(|d| (d - 1e-9).abs() < 1e-15));
}

fn secular_drift(dt_div: f64, periods: f64) -> (f64, f64) {
    let qd = quad(0.3, 1e6, Vector3::zeros());
    let pot = qd.potential(None);
    let t_rf = 2.0 * PI / OMEGA_RF;
    let opts = SimOptions { dt: t_rf / dt_div, gamma: 0.0, noise_force_psd: 0.0, tickle: None, rng_seed: 0, duration: periods * t_rf, sample_stride: 1 };
    let s0 = IonState::at_rest(Vector3::new(1e-6, 1e-6, 0.5e-6));
    let mut first = (0.0, 0usize);
    let mut last = (0.0, 0usize);
    let n_total = (periods * dt_div).round() as usize;
    let win = (1000.0 * dt_div) as usize;
    integrate_with(&pot, qd.sp.mass, &s0, &opts, |n, _, e| {
        if n >= dt_div as usize && n < win {
            first.0 += e;
            first.1 += 1;
        }
        if n + win > n_total {
            last.0 += e;
            last.1 += 1;
        }
    })
    .unwrap();
    (first.0 / first.1 as f64, last.0 / last.1 as f64)
}

#[test]
fn undamped_quadrupole_conserves_secular_energy() {
    // The rest energy at the RF null is zero for these fields.
    let (e0, e1) = secular_drift(200.0, 1e4);
    let drift = (e1 - e0).abs() / e0;
    eprintln!("secular energy drift over 1e4 RF periods: {drift:e}");
    assert!(drift < 0.01);
}

#[test]
fn halving_dt_cuts_integration_error_fourfold() {
    // Part of the windowed drift is physical (slow secular beating); the
    // integration error is what remains after subtracting a fine-step run.
    let drift = |d: f64| {
        let (e0, e1) = secular_drift(d, 1e4);
        (e1 - e0) / e0
    };
    let reference = drift(800.0);
    let coarse = (drift(100.0) - reference).abs();
    let fine = (drift(200.0) - reference).abs();
    let ratio = coarse / fine;
    eprintln!("error ratio for dt -> dt/2: {ratio:.3}");
    assert!((3.2..4.8).contains(&ratio), "{ratio}");
}

fn project(samples: &[(f64, f64)], omega: f64) -> f64 {
    let n = samples.len() as f64;
    let (c, s) = samples.iter().fold((0.0, 0.0), |(c, s), &(t, y)| (c + y * (omega * t).cos(), s + y * (omega * t).sin()));
    2.0 * (c * c + s * s).sqrt() / n
}

#[test]
fn stray_field_drives_excess_micromotion() {
    let q = 0.3;
    let e_y = 50.0;
    let qd = quad(q, 1e6, Vector3::new(0.0, e_y, 0.0));
    let pot = qd.potential(None);
    let t_rf = 2.0 * PI / OMEGA_RF;
    let periods = 600.0;
    let opts = SimOptions { dt: t_rf / 200.0, gamma: 2.0 * PI * 100e3, noise_force_psd: 0.0, tickle: None, rng_seed: 0, duration: periods * t_rf, sample_stride: 1 };
    let n_total = (periods * 200.0) as usize;
    let mut ys = Vec::new();
    let end = integrate_with(&pot, qd.sp.mass, &IonState::at_rest(Vector3::zeros()), &opts, |n, s, _| {
        if n + 20 * 200 >= n_total && n < n_total {
            ys.push((s.time, s.position.y));
        }
    })
    .unwrap();
    assert!(end.position.x.abs() < 1e-12);

    // Oracle: the ion sits at eE/(m w_y^2) with w_y from the exact Mathieu
    // exponent and oscillates at Omega with q/2 of that offset.
    let k = qd.sp.mass * (2.0 * PI * 1e6f64).powi(2) / (2.0 * qd.sp.charge);
    let a_y = 4.0 * qd.sp.charge * (-k) / (qd.sp.mass * OMEGA_RF * OMEGA_RF);
    let w_y = mathieu_beta(a_y, q).unwrap() * OMEGA_RF / 2.0;
    let offset = qd.sp.charge * e_y / (qd.sp.mass * w_y * w_y);
    let expected = 0.5 * q * offset;
    let measured = project(&ys, OMEGA_RF);
    eprintln!("micromotion {measured:e} m, expected {expected:e} m");
    assert!((measured / expected - 1.0).abs() < 0.10);

    // The residual motion is at the drive frequency.
    let mean_y = ys.iter().map(|p| p.1).sum::<f64>() / ys.len() as f64;
    assert!((mean_y / offset - 1.0).abs() < 0.10);
    let spec = spectrum(&ys.iter().map(|p| p.1).collect::<Vec<_>>(), t_rf / 200.0);
    let f = dominant_frequency(&spec, 1e5, 1e9).unwrap();
    assert!((f / 15.9e6 - 1.0).abs() < 0.05, "{f:e}");

    // Same relation from the static secular analysis of these fields.
    let pp = Pseudopotential::from_fields(&qd.mask, qd.rf.clone(), qd.dc.clone(), qd.v0, OMEGA_RF, qd.sp.clone());
    let sa = secular_from_pseudo(&pp, &qd.mask, &Vector3::zeros()).unwrap();
    let analytic = micromotion_amplitude(&sa, &qd.sp, &Vector3::new(0.0, e_y, 0.0));
    assert!((measured / analytic - 1.0).abs() < 0.10, "{analytic:e}");
}

#[test]
fn damped_ion_relaxes_to_rf_null() {
    let qd = quad(0.3, 1e6, Vector3::zeros());
    let pot = qd.potential(None);
    let t_rf = 2.0 * PI / OMEGA_RF;
    let opts = SimOptions { dt: t_rf / 200.0, gamma: 2.0 * PI * 200e3, noise_force_psd: 0.0, tickle: None, rng_seed: 0, duration: 50e-6, sample_stride: 1 };
    let end = integrate(&pot, qd.sp.mass, &IonState::at_rest(Vector3::new(2e-6, -1.5e-6, 1e-6)), &opts).unwrap();
    let last = end.states.last().unwrap();
    assert!(last.position.norm() < 1e-12, "{:?}", last.position);
}

#[test]
fn leaving_the_grid_reports_loss_time() {
    let qd = quad(0.3, 1e6, Vector3::zeros());
    let pot = qd.potential(None);
    let t_rf = 2.0 * PI / OMEGA_RF;
    let opts = SimOptions { dt: t_rf / 200.0, gamma: 0.0, noise_force_psd: 0.0, tickle: None, rng_seed: 0, duration: 10e-6, sample_stride: 1 };
    let s0 = IonState { position: Vector3::zeros(), velocity: Vector3::new(500.0, 0.0, 0.0), time: 0.0 };
    match integrate(&pot, qd.sp.mass, &s0, &opts) {
        Err(DynamicsError::IonLost { time, .. }) => assert!(time > 0.0 && time < 10e-6),
        other => panic!("expected a loss, got ok = {}", other.is_ok()),
    }
    let bad = SimOptions { dt: t_rf / 50.0, ..opts };
    assert!(matches!(integrate(&pot, qd.sp.mass, &s0, &bad), Err(DynamicsError::InvalidOptions(_))));
}

fn dc_well(f: f64) -> (TimePotential, IonSpecies) {
    let sp = IonSpecies::cd111();
    let (g, mask) = cube(12e-6, 1e-6);
    let w = 2.0 * PI * f;
    let e = ScalarGrid::from_fn(g, |p| 0.5 * sp.mass * w * w * p.norm_squared());
    let pot = TimePotential::new(CubicField::new(&[&e], &mask, None), vec![Term { channel: 0, scale: 1.0, profile: Profile::Constant, secular: true }], None);
    (pot, sp)
}

#[test]
fn seeded_noise_is_reproducible() {
    let (pot, sp) = dc_well(1e6);
    let opts = SimOptions { dt: 2e-9, gamma: 0.0, noise_force_psd: 1e-44, tickle: None, rng_seed: 7, duration: 5e-6, sample_stride: 10 };
    let a = integrate(&pot, sp.mass, &IonState::at_rest(Vector3::zeros()), &opts).unwrap();
    let b = integrate(&pot, sp.mass, &IonState::at_rest(Vector3::zeros()), &opts).unwrap();
    assert_eq!(a, b);
    let c = integrate(&pot, sp.mass, &IonState::at_rest(Vector3::zeros()), &SimOptions { rng_seed: 8, ..opts }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn white_force_noise_heats_at_configured_rate() {
    let (pot, sp) = dc_well(1e6);
    let s_f = 1e-44;
    let duration = 40e-6;
    let n_seeds = 400u64;
    let stride = 100;
    let runs: Vec<Trajectory> = (0..n_seeds)
        .into_par_iter()
        .map(|seed| {
            let opts = SimOptions { dt: 2e-9, gamma: 0.0, noise_force_psd: s_f, tickle: None, rng_seed: seed, duration, sample_stride: stride };
            integrate(&pot, sp.mass, &IonState::at_rest(Vector3::zeros()), &opts).unwrap()
        })
        .collect();
    let n = runs[0].secular_energy.len();
    let t: Vec<f64> = runs[0].states.iter().map(|s| s.time).collect();
    let mean: Vec<f64> = (0..n).map(|i| runs.iter().map(|r| r.secular_energy[i]).sum::<f64>() / n_seeds as f64).collect();
    // Least-squares slope through the origin.
    let slope = t.iter().zip(&mean).map(|(t, e)| t * e).sum::<f64>() / t.iter().map(|t| t * t).sum::<f64>();
    let w = 2.0 * PI * 1e6;
    let quanta_rate = slope / (3.0 * HBAR * w);
    let expected = chiptrap::heating::force_noise_heating_rate(s_f, w, sp.mass);
    eprintln!("heating {quanta_rate:e} quanta/s per axis, expected {expected:e}");
    assert!((quanta_rate / expected - 1.0).abs() < 0.20);
    // Growth is linear: the late half rises as fast as the early half.
    let half = n / 2;
    let r1 = mean[half] / t[half];
    let r2 = (mean[n - 1] - mean[half]) / (t[n - 1] - t[half]);
    assert!((r2 / r1 - 1.0).abs() < 0.3);
}

fn tickle_setup(amp: f64) -> (TimePotential, IonSpecies, f64) {
    let q = 0.3;
    let qd = quad(q, 1e6, Vector3::zeros());
    let tickle = ScalarGrid::from_fn(qd.rf.grid, |p| (p.x + p.y + p.z) / (3f64.sqrt() * R0));
    let pot = qd.potential(Some((&tickle, amp)));
    let k = qd.sp.mass * (2.0 * PI * 1e6f64).powi(2) / (2.0 * qd.sp.charge);
    let a_r = -4.0 * qd.sp.charge * k / (qd.sp.mass * OMEGA_RF * OMEGA_RF);
    let f_r = mathieu_beta(a_r, q).unwrap() * 15.9e6 / 2.0;
    (pot, qd.sp, f_r)
}

#[test]
fn tickle_scan_finds_mathieu_resonances() {
    let (pot, sp, f_r) = tickle_setup(1e-3);
    let scan = tickle_scan_potential(&pot, sp.mass, &Vector3::zeros(), (0.5e6, 4.0e6), 36, &TickleOptions::default()).unwrap();
    eprintln!("peaks {:?}, radial {f_r:e}", scan.peaks);
    assert_eq!(scan.peaks.len(), 2, "degenerate radial modes give one peak");
    assert!((scan.peaks[0] / 1e6 - 1.0).abs() < 0.01);
    assert!((scan.peaks[1] / f_r - 1.0).abs() < 0.02);
    assert!(scan.frequencies.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn off_resonant_tickle_is_flat_and_response_is_linear() {
    let (pot, sp, _) = tickle_setup(1e-3);
    let opts = TickleOptions::default();
    let freqs: Vec<f64> = (0..11).map(|i| 8e6 + 0.2e6 * i as f64).collect();
    let r = tickle_response_curve(&pot, sp.mass, &Vector3::zeros(), &freqs, &opts).unwrap();
    let mut sorted = r.clone();
    sorted.sort_by(f64::total_cmp);
    let ratio = sorted[10] / sorted[5];
    assert!(ratio < 2.0, "max/median {ratio}");
    assert!(matches!(tickle_scan_potential(&pot, sp.mass, &Vector3::zeros(), (8e6, 10e6), 11, &opts), Err(DynamicsError::NoPeak(..))));

    let (pot2, _, _) = tickle_setup(2e-3);
    let a = tickle_response_curve(&pot, sp.mass, &Vector3::zeros(), &[1e6], &opts).unwrap()[0];
    let b = tickle_response_curve(&pot2, sp.mass, &Vector3::zeros(), &[1e6], &opts).unwrap()[0];
    assert!((b / a - 2.0).abs() < 0.02, "{}", b / a);
    assert!(matches!(tickle_response_curve(&pot, sp.mass, &Vector3::zeros(), &[1e6], &TickleOptions { gamma: 0.0, ..opts }), Err(DynamicsError::InvalidOptions(_))));
}

#[test]
fn compensation_cancels_random_fields() {
    use rand::{Rng, SeedableRng};
    let cols = [Vector3::new(1200.0, 300.0, -150.0), Vector3::new(-900.0, 800.0, 200.0), Vector3::new(100.0, -200.0, 1500.0), Vector3::new(400.0, 1000.0, 900.0)];
    let mut good = 0;
    for seed in 0..100u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let e = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize() * rng.random_range(0.0..500.0);
        let (_, res, _) = compensate_with_fields(&cols, &e, 1e4).unwrap();
        if res.norm() < 0.01 * e.norm() {
            good += 1;
        }
    }
    assert!(good >= 95);
    let (v, res, _) = compensate_with_fields(&cols, &Vector3::zeros(), 1e4).unwrap();
    assert!(v.iter().all(|x| *x == 0.0) && res.norm() == 0.0);
}

#[test]
fn spectrum_locates_a_sine() {
    let dt = 1e-8;
    let sig: Vec<f64> = (0..4096).map(|i| (2.0 * PI * 1.234e6 * i as f64 * dt).sin()).collect();
    let f = dominant_frequency(&spectrum(&sig, dt), 1e5, 1e7).unwrap();
    assert!((f / 1.234e6 - 1.0).abs() < 2e-3, "{f}");
}
