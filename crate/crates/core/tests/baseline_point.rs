//! The baseline geometry at its operating point, on the cached 2 um bases.

mod common;

use chiptrap::analysis::*;
use chiptrap::constants::E_CHARGE;
use chiptrap::dynamics::*;
use chiptrap::fields::{local_fit, FitDegree};
use chiptrap::trap::DriveConfig;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};

fn baseline(zone: usize) -> (DriveConfig, SecularAnalysis, Pseudopotential) {
    let model = common::baseline_model();
    let drive = DriveConfig::baseline(model.labels(), zone);
    let pp = pseudopotential(model, &drive).unwrap();
    let sa = secular_from_pseudo(&pp, &model.mask, &model.zone_center(zone)).unwrap();
    (drive, sa, pp)
}

#[test]
fn operating_point_sits_at_the_zone_centre() {
    let model = common::baseline_model();
    let (_, sa, pp) = baseline(1);
    let c = model.zone_center(1);
    assert!((sa.r0 - c).norm() < 3e-6, "r0 {:?} um", sa.r0 * 1e6);
    let f = sa.frequencies_hz().map(|f| f / 1e6);
    eprintln!("f {f:?} MHz, q {}, a {:?}, tilt {}", sa.q(), sa.mathieu_a, sa.axis_tilt);
    assert!((f[0] - 1.0).abs() < 0.2);
    assert!((f[1] / 3.3 - 1.0).abs() < 0.2 && (f[2] / 4.3 - 1.0).abs() < 0.2);
    assert!((sa.q() / 0.62 - 1.0).abs() < 0.2);
    assert!(sa.stable);
    // Pseudopotential and Mathieu forms agree on the same Hessians.
    for i in 1..3 {
        let w = sa.mathieu_a[i] + sa.mathieu_q[i].powi(2) / 2.0;
        assert!((sa.omega[i] / (pp.omega / 2.0 * w.sqrt()) - 1.0).abs() < 0.02);
    }
    let d = trap_depth(&pp.total, &model.mask, &sa.r0).unwrap();
    eprintln!("depth {} eV, escape tilt {}", d.depth, d.escape_tilt_angle);
    assert!((d.depth / 0.08 - 1.0).abs() < 0.3);
    assert!((d.escape_tilt_angle - 37.0).abs() < 10.0);
    let s = pp.total.at(pp.total.grid.nearest(&d.saddle_position).unwrap());
    let m = pp.total.at(pp.total.grid.nearest(&sa.r0).unwrap());
    assert_eq!(s - m, d.depth);
}

#[test]
fn mirrored_zone_gives_the_same_trap() {
    let (_, a, _) = baseline(1);
    let (_, b, _) = baseline(2);
    for i in 0..3 {
        assert!((a.omega[i] / b.omega[i] - 1.0).abs() < 0.01);
    }
    assert!((a.r0.x + b.r0.x).abs() < 1e-6);
}

#[test]
fn static_voltages_alone_do_not_trap() {
    let model = common::baseline_model();
    let mut drive = DriveConfig::baseline(model.labels(), 1);
    drive.v0 = 0.0;
    assert!(matches!(secular_analysis(model, &drive, &model.zone_center(1)), Err(AnalysisError::Untrapped)));
}

#[test]
fn stray_field_displacement_follows_the_hessian() {
    let model = common::baseline_model();
    let (mut drive, sa, _) = baseline(1);
    drive.stray_field = [0.0, 100.0, 0.0];
    let moved = secular_analysis(model, &drive, &sa.r0).unwrap();
    let shift = moved.r0 - sa.r0;
    let expect = sa.hessian.try_inverse().unwrap() * Vector3::new(0.0, E_CHARGE * 100.0, 0.0);
    assert!((shift - expect).norm() < 0.1 * expect.norm(), "{:?} vs {:?}", shift, expect);
    assert!(expect.norm() > 0.05e-6 && expect.norm() < 0.5e-6);
}

#[test]
fn scaling_static_voltages() {
    let model = common::baseline_model();
    let (drive, sa, _) = baseline(1);
    let mut scaled = drive.clone();
    scaled.dc_voltages.iter_mut().for_each(|v| *v *= 2.25);
    let sb = secular_analysis(model, &scaled, &sa.r0).unwrap();
    assert!((sb.omega[0] / sa.omega[0] / 1.5 - 1.0).abs() < 0.03, "{}", sb.omega[0] / sa.omega[0]);
    let rf_only = |s: &SecularAnalysis| s.hessian_rf;
    assert!((rf_only(&sb) - rf_only(&sa)).norm() < 0.02 * sa.hessian_rf.norm());
}

#[test]
fn global_offset_leaves_the_trap_unchanged() {
    let model = common::baseline_model();
    let (drive, sa, pp) = baseline(1);
    let mut shifted = drive.clone();
    shifted.dc_offset = 3.0;
    let pp2 = pseudopotential(model, &shifted).unwrap();
    let sb = secular_from_pseudo(&pp2, &model.mask, &model.zone_center(1)).unwrap();
    for i in 0..3 {
        assert!((sa.omega[i] / sb.omega[i] - 1.0).abs() < 1e-6);
    }
    assert!((sa.q() - sb.q()).abs() < 1e-9);
    let da = trap_depth(&pp.total, &model.mask, &sa.r0).unwrap();
    let db = trap_depth(&pp2.total, &model.mask, &sb.r0).unwrap();
    assert!((da.depth - db.depth).abs() < 1e-9);
}

#[test]
fn tickle_peaks_match_secular_frequencies() {
    let model = common::baseline_model();
    let (drive, sa, _) = baseline(1);
    let scan = tickle_scan(model, &drive, &sa.r0, (0.5e6, 5.0e6), 46, &TickleOptions::default()).unwrap();
    // The driven ion resonates at the Mathieu tunes of the fitted Hessians;
    // at q = 0.6 these sit 7-10% above the pseudopotential values.
    let tunes = sa.beta.map(|b| b * drive.omega / (4.0 * std::f64::consts::PI));
    eprintln!("peaks {:?} vs {:?}", scan.peaks, tunes);
    assert_eq!(scan.peaks.len(), 3);
    for (p, w) in scan.peaks.iter().zip(tunes) {
        assert!((p / w - 1.0).abs() < 0.05, "{p} vs {w}");
    }
    assert!((scan.peaks[0] / sa.frequencies_hz()[0] - 1.0).abs() < 0.05);
}

#[test]
fn axial_kick_rings_at_the_axial_frequency() {
    let model = common::baseline_model();
    let (drive, sa, _) = baseline(1);
    let hw = 20e-6;
    let region = chiptrap::geometry::Aabb::new([sa.r0.x - hw, sa.r0.y - hw, sa.r0.z - hw], [sa.r0.x + hw, sa.r0.y + hw, sa.r0.z + hw]);
    let pot = TimePotential::rf_trap(model, &drive, None, Some(&region)).unwrap();
    let mut opts = SimOptions::for_drive(&drive, 20e-6);
    opts.sample_stride = 10;
    let start = IonState::at_rest(sa.r0 + Vector3::new(1e-6, 0.0, 0.0));
    let traj = integrate(&pot, drive.species.mass, &start, &opts).unwrap();
    let x: Vec<f64> = traj.states.iter().map(|s| s.position.x - sa.r0.x).collect();
    let f = dominant_frequency(&spectrum(&x, traj.sample_interval()), 0.2e6, 3e6).unwrap();
    let fz = sa.frequencies_hz()[0];
    assert!((f / 1e6 - 1.0).abs() < 0.2, "{f}");
    assert!((f / fz - 1.0).abs() < 0.05, "{f} vs {fz}");
}

#[test]
fn compensation_on_the_chip() {
    let model = common::baseline_model();
    let (drive, sa, _) = baseline(1);
    let null = rf_null(model, &drive, &sa.r0).unwrap();
    assert!((null.yz() - sa.r0.yz()).norm() < 0.2e-6 && null.x == sa.r0.x, "{:?}", null * 1e6);
    let dc = model.ids_with_role(chiptrap::geometry::Role::Dc);
    let sp = &drive.species;

    let zero = compensate_micromotion(model, &null, &Vector3::zeros(), &dc[..4], Some(&sa), sp, 1e6).unwrap();
    assert!(zero.adjustments.iter().all(|(_, v)| *v == 0.0));
    assert_eq!(zero.residual_field.norm(), 0.0);
    assert_eq!(zero.residual_micromotion, 0.0);

    // Three electrodes around the zone span the field directions.
    let trio = [dc[2], dc[3], dc[5]];
    let target = trio[1];
    let grad = local_fit(&model.bases[target].field, &model.mask, &null, FitDegree::Quadratic).unwrap().gradient;
    // The stray field is minus the field of `target` at 0.5 V.
    let stray = grad * 0.5;
    let c = compensate_micromotion(model, &null, &stray, &trio, Some(&sa), sp, 1e6).unwrap();
    for (id, v) in &c.adjustments {
        let expect = if *id == target { 0.5 } else { 0.0 };
        assert!((v - expect).abs() < 1e-6, "electrode {id}: {v}");
    }
    assert!(c.residual_field.norm() < 1e-6 * stray.norm());

    let four = [dc[2], dc[3], dc[4], dc[5]];
    let mut good = 0;
    for seed in 0..100u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let e = dir * rng.random_range(0.0..500.0);
        let c = compensate_micromotion(model, &null, &e, &four, Some(&sa), sp, 1e6).unwrap();
        if c.residual_field.norm() < 0.01 * e.norm() {
            good += 1;
        }
    }
    assert!(good >= 95, "{good}");

    let pair = [dc[0], dc[0]];
    assert!(matches!(compensate_micromotion(model, &null, &stray, &pair, None, sp, 1e6), Err(DynamicsError::Degenerate(_))));
}
