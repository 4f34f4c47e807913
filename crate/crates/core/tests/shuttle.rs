mod common;

use std::f64::consts::PI;

use chiptrap::analysis::{pseudopotential, secular_from_pseudo};
use chiptrap::shuttle::*;
use chiptrap::trap::{DriveConfig, TrapModel};
use nalgebra::Vector3;
use proptest::prelude::*;

const FZ: f64 = 0.5e6;

fn baseline_opts(model: &TrapModel, from: usize, to: usize) -> WaveformOptions {
    let va = DriveConfig::baseline(model.labels(), from).dc_voltages;
    let vb = DriveConfig::baseline(model.labels(), to).dc_voltages;
    WaveformOptions { reference: Some((va, vb)), ..Default::default() }
}

fn baseline_waveform(duration: f64) -> Waveform {
    let model = common::baseline_model();
    let drive = DriveConfig::baseline(model.labels(), 1);
    let (a, b) = (model.zone_center(1), model.zone_center(2));
    solve_waveform(model, &drive, &a, &b, duration, 2.0 * PI * FZ, 101, &baseline_opts(model, 1, 2)).expect("feasible")
}

fn series_waveform(period: f64, values: Vec<f64>) -> Waveform {
    let n = values.len();
    Waveform { sample_period: period, labels: vec!["e".into()], series: vec![values], path: vec![Vector3::zeros(); n], position_error: vec![0.0; n], omega_z: vec![0.0; n] }
}

#[test]
fn minimum_jerk_profile_endpoints() {
    assert_eq!(minimum_jerk(0.0), 0.0);
    assert_eq!(minimum_jerk(1.0), 1.0);
    assert!((minimum_jerk(0.5) - 0.5).abs() < 1e-15);
    for u in [0.1, 0.3, 0.7] {
        assert!((minimum_jerk(u) + minimum_jerk(1.0 - u) - 1.0).abs() < 1e-14);
    }
}

#[test]
fn identity_transport_is_the_static_solution() {
    let model = common::baseline_model();
    let drive = DriveConfig::baseline(model.labels(), 1);
    let a = model.zone_center(1);
    let opts = baseline_opts(model, 1, 1);
    let w = solve_waveform(model, &drive, &a, &a, 1e-3, 2.0 * PI * FZ, 11, &opts).unwrap();
    let stat = solve_waveform(model, &drive, &a, &a, 0.0, 2.0 * PI * FZ, 2, &opts).unwrap();
    for (s, st) in w.series.iter().zip(&stat.series) {
        for v in s {
            assert!((v - st[0]).abs() < 1e-12, "{v} vs {}", st[0]);
        }
    }
}

#[test]
fn baseline_transport_is_feasible_within_bounds() {
    let model = common::baseline_model();
    let drive = DriveConfig::baseline(model.labels(), 1);
    let w = baseline_waveform(2.5e-3);
    assert_eq!(w.n_samples(), 101);
    assert!((w.duration() - 2.5e-3).abs() < 1e-15);
    assert!(w.max_abs() <= 10.0, "max |V| {}", w.max_abs());
    assert!(w.series.iter().all(|s| s.len() == 101));
    assert!(w.position_error.iter().all(|&e| e < 2e-6));
    assert!(w.omega_z.iter().all(|&wz| (wz / (2.0 * PI * FZ) - 1.0).abs() < 0.05));
    // Independent check through the grid analysis.
    for n in [0, 25, 50, 75, 100] {
        let mut d = drive.clone();
        d.dc_voltages = w.sample(n);
        let pp = pseudopotential(model, &d).unwrap();
        let sa = secular_from_pseudo(&pp, &model.mask, &w.path[n]).unwrap();
        let err = (sa.r0 - w.path[n]).norm();
        assert!(err < 2e-6, "sample {n}: well {:.3} um off the path", err * 1e6);
        let fz = sa.frequencies_hz()[0];
        assert!((fz / FZ - 1.0).abs() < 0.05, "sample {n}: axial {fz}");
        assert!(sa.stable);
    }
}

#[test]
fn reversed_zones_give_the_time_reversed_waveform() {
    let model = common::baseline_model();
    let fwd = baseline_waveform(2.5e-3);
    let drive = DriveConfig::baseline(model.labels(), 2);
    let (a, b) = (model.zone_center(1), model.zone_center(2));
    let rev = solve_waveform(model, &drive, &b, &a, 2.5e-3, 2.0 * PI * FZ, 101, &baseline_opts(model, 2, 1)).unwrap();
    for (f, r) in fwd.series.iter().zip(&rev.series) {
        for (x, y) in f.iter().zip(r.iter().rev()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn unreachable_frequency_names_the_failing_sample() {
    let model = common::baseline_model();
    let drive = DriveConfig::baseline(model.labels(), 1);
    let (a, b) = (model.zone_center(1), model.zone_center(2));
    let err = solve_waveform(model, &drive, &a, &b, 2.5e-3, 2.0 * PI * 5e6, 21, &baseline_opts(model, 1, 2)).unwrap_err();
    assert!(matches!(err, ShuttleError::Infeasible { .. }), "{err}");
    assert!(err.to_string().contains("sample"));
    let bad = solve_waveform(model, &drive, &a, &b, -1.0, 2.0 * PI * FZ, 21, &WaveformOptions::default());
    assert!(matches!(bad, Err(ShuttleError::InvalidInput(_))));
}

#[test]
fn waveform_csv_names_every_electrode() {
    let w = baseline_waveform(2.5e-3);
    let mut buf = Vec::new();
    w.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("t_s,"));
    assert_eq!(header.split(',').count(), 17);
    assert_eq!(text.lines().count(), 102);
}

#[test]
fn filter_keeps_constant_input() {
    let w = series_waveform(1e-7, vec![0.7; 50]);
    let f = apply_filter(&w, &FilterModel::baseline()).unwrap();
    assert!(f.series[0].iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn filter_step_reaches_one_minus_inverse_e_at_tau() {
    let filt = FilterModel::baseline();
    let tau = filt.tau();
    assert!((tau - 10e-6).abs() < 1e-18);
    let dt = tau / 1000.0;
    let mut v = vec![1.0; 3001];
    v[0] = 0.0;
    let f = apply_filter(&series_waveform(dt, v), &filt).unwrap();
    let y = f.series[0][1000];
    let want = 1.0 - (-1.0f64).exp();
    assert!((y / want - 1.0).abs() < 0.01, "{y}");
}

#[test]
fn filter_attenuates_1khz_by_first_order_response() {
    let filt = FilterModel { capacitance: 1e-6, resistance: 1e3 };
    let dt = 1e-6;
    let n = 20_001;
    let v: Vec<f64> = (0..n).map(|i| (2.0 * PI * 1000.0 * i as f64 * dt).sin()).collect();
    let f = apply_filter(&series_waveform(dt, v), &filt).unwrap();
    // Skip ten time constants of transient.
    let amp = f.series[0][10_000..].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let want = 1.0 / (1.0 + (2.0 * PI).powi(2)).sqrt();
    assert!((amp / want - 1.0).abs() < 0.01, "{amp} vs {want}");
}

#[test]
fn filter_rejects_coarse_sampling() {
    let w = series_waveform(1e-3, vec![0.0, 1.0]);
    assert!(matches!(apply_filter(&w, &FilterModel::baseline()), Err(ShuttleError::InvalidInput(_))));
    let bad = FilterModel { capacitance: 0.0, resistance: 1.0 };
    assert!(apply_filter(&series_waveform(1e-9, vec![0.0]), &bad).is_err());
}

proptest! {
    #[test]
    fn filter_never_exceeds_the_input_bound(v in prop::collection::vec(-10.0f64..10.0, 2..200), dt in 1e-8f64..1e-5) {
        let bound = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let f = apply_filter(&series_waveform(dt, v), &FilterModel::baseline()).unwrap();
        for y in &f.series[0] {
            prop_assert!(y.abs() <= bound * (1.0 + 1e-12));
        }
    }
}

#[test]
fn resampling_preserves_samples_and_endpoints() {
    let w = baseline_waveform(2.5e-3);
    let r = w.resample(w.sample_period / 4.0);
    assert_eq!(r.n_samples(), 401);
    for (s, rs) in w.series.iter().zip(&r.series) {
        for (k, v) in s.iter().enumerate() {
            assert!((rs[4 * k] - v).abs() < 1e-12);
        }
    }
    assert!((r.duration() - w.duration()).abs() < 1e-15);
    assert!(r.max_abs() <= 10.0);
}

#[test]
fn zero_length_transport_gains_nothing() {
    let model = common::baseline_model();
    let drive = DriveConfig::baseline(model.labels(), 1);
    let w = baseline_waveform(2.5e-3).stretched(0.0);
    let r = simulate_transport(model, &drive, &w, &w, &TransportOptions::default()).unwrap();
    assert_eq!(r.quanta, 0.0);
}

#[test]
fn slower_transport_heats_less() {
    let model = common::baseline_model();
    let drive = DriveConfig::baseline(model.labels(), 1);
    let w = baseline_waveform(2.5e-3);
    let b = model.zone_center(2);
    let mut gains = Vec::new();
    for dur in [2.5e-3, 25e-3, 250e-3] {
        let ws = w.stretched(dur).resample(0.5e-6);
        let r = simulate_transport(model, &drive, &ws, &ws, &TransportOptions::default()).unwrap();
        assert!((r.final_minimum - b).norm() < 2e-6);
        assert!((r.final_omega_z / (2.0 * PI * FZ) - 1.0).abs() < 0.05);
        assert!(r.final_position_error < 1e-6);
        gains.push(r.quanta);
    }
    assert!(gains[1] < 1.0, "{gains:?}");
    assert!(gains[0] >= gains[1] && gains[1] >= gains[2], "{gains:?}");
}

#[test]
fn filtered_transport_lags_more() {
    let model = common::baseline_model();
    let drive = DriveConfig::baseline(model.labels(), 1);
    let w = baseline_waveform(2.5e-3).resample(0.5e-6);
    let plain = simulate_transport(model, &drive, &w, &w, &TransportOptions::default()).unwrap();
    let f = apply_filter(&w, &FilterModel::baseline()).unwrap();
    let filtered = simulate_transport(model, &drive, &f, &w, &TransportOptions::default()).unwrap();
    assert!(filtered.final_position_error > plain.final_position_error, "{} vs {}", filtered.final_position_error, plain.final_position_error);
}
