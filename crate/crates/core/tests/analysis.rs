use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use chiptrap::analysis::*;
use chiptrap::constants::{IonSpecies, E_CHARGE};
use chiptrap::geometry::{VoxelLabel, VoxelMask};
use chiptrap::grid::{Grid3, ScalarGrid};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

const OMEGA_RF: f64 = 2.0 * PI * 15.9e6;

fn cube(half: f64, h: f64) -> (Grid3, VoxelMask) {
    let n = (2.0 * half / h).round() as usize + 1;
    let g = Grid3 { dims: [n; 3], origin: [-half; 3], spacing: h };
    (g, VoxelMask::empty(g))
}

/// Linear quadrupole phi = (y^2 - z^2) / (2 r0^2) with a DC axial well of
/// curvature `k` (V/m^2) plus a uniform field `e` (V/m).
fn linear_trap(r0: f64, v0: f64, k: f64, e: Vector3<f64>) -> (VoxelMask, Pseudopotential) {
    let (g, mask) = cube(20e-6, 1e-6);
    let rf = ScalarGrid::from_fn(g, |p| (p.y * p.y - p.z * p.z) / (2.0 * r0 * r0));
    let dc = ScalarGrid::from_fn(g, |p| k * (p.x * p.x - 0.5 * (p.y * p.y + p.z * p.z)) - e.dot(&p));
    let pp = Pseudopotential::from_fields(&mask, rf, dc, v0, OMEGA_RF, IonSpecies::cd111());
    (mask, pp)
}

#[test]
fn quadrupole_pseudopotential_matches_closed_form() {
    let sp = IonSpecies::cd111();
    let (r0, v0) = (47e-6, 8.0);
    let (g, mask) = cube(40e-6, 2e-6);
    // |grad phi| = r / r0^2 in the y-z plane.
    let rf = ScalarGrid::from_fn(g, |p| (p.y * p.y - p.z * p.z) / (2.0 * r0 * r0));
    let pp = Pseudopotential::from_fields(&mask, rf, ScalarGrid::zeros(g), v0, OMEGA_RF, sp.clone());
    let r = 30e-6;
    let closed = E_CHARGE * v0 * v0 * r * r / (4.0 * sp.mass * OMEGA_RF * OMEGA_RF * r0.powi(4));
    let u = pp.total.at(g.nearest(&Vector3::new(0.0, r, 0.0)).unwrap());
    assert!((u / closed - 1.0).abs() < 1e-9, "{u} vs {closed}");
    assert!((u - 0.2571).abs() < 5e-4, "{u}");
    // Non-vacuum voxels are walls.
    assert_eq!(pp.total.at([0, 0, 0]), f64::INFINITY);
}

#[test]
fn zero_rf_leaves_the_static_energy() {
    let (_, pp) = linear_trap(47e-6, 0.0, 1e6, Vector3::new(10.0, -3.0, 7.0));
    for (i, (&u, &d)) in pp.total.values.iter().zip(&pp.dc.values).enumerate() {
        if u.is_finite() {
            assert_eq!(u, d, "voxel {i}");
        }
    }
}

#[test]
fn doubling_drive_frequency_quarters_the_rf_term() {
    let (g, mask) = cube(10e-6, 1e-6);
    let rf = ScalarGrid::from_fn(g, |p| p.x * p.y * 1e9 + p.z * 3e4);
    let zero = ScalarGrid::zeros(g);
    let a = Pseudopotential::from_fields(&mask, rf.clone(), zero.clone(), 8.0, OMEGA_RF, IonSpecies::cd111());
    let b = Pseudopotential::from_fields(&mask, rf, zero, 8.0, 2.0 * OMEGA_RF, IonSpecies::cd111());
    for (x, y) in a.total.values.iter().zip(&b.total.values) {
        if x.is_finite() {
            assert!((x - 4.0 * y).abs() <= 1e-14 * x.abs());
        }
    }
}

#[test]
fn ideal_quadrupole_reproduces_the_quoted_q() {
    let sp = IonSpecies::cd111();
    let (r0, v0) = (47.4e-6, 8.0);
    let k = sp.mass * (2.0 * PI * 1e6f64).powi(2) / (2.0 * E_CHARGE);
    let (mask, pp) = linear_trap(r0, v0, k, Vector3::zeros());
    let sa = secular_from_pseudo(&pp, &mask, &Vector3::new(1.5e-6, -0.7e-6, 0.4e-6)).unwrap();
    let q = 2.0 * E_CHARGE * v0 / (sp.mass * OMEGA_RF * OMEGA_RF * r0 * r0);
    assert!((sa.q() / q - 1.0).abs() < 1e-6, "{} vs {q}", sa.q());
    assert!((q - 0.62).abs() < 0.01, "{q}");
    // Opposite signs on the two transverse axes.
    assert!(sa.mathieu_q[1] * sa.mathieu_q[2] < 0.0);
    assert!(sa.r0.norm() < 1e-9);
    assert!((sa.frequencies_hz()[0] / 1e6 - 1.0).abs() < 1e-6);
    assert_eq!(sa.labels, [AxisLabel::Axial, AxisLabel::Transverse1, AxisLabel::Transverse2]);
    assert!(sa.stable);
    assert!(sa.omega[1] <= sa.omega[2]);
    for i in 0..3 {
        for j in 0..3 {
            let d = sa.axes[i].dot(&sa.axes[j]);
            assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }
    // Pseudopotential and Mathieu tunes on the same Hessians.
    for i in 1..3 {
        let (a, q) = (sa.mathieu_a[i], sa.mathieu_q[i]);
        let w = OMEGA_RF / 2.0 * (a + q * q / 2.0).sqrt();
        assert!((sa.omega[i] / w - 1.0).abs() < 1e-6);
        assert!((sa.beta[i] - mathieu_beta(a, q).unwrap()).abs() < 1e-15);
    }
    let mut csv = Vec::new();
    sa.write_csv(&mut csv, None).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("quantity,axis,value,unit\n"));
    assert!(text.contains("\nq,,"));
}

#[test]
fn stray_field_shifts_the_minimum_harmonically() {
    let sp = IonSpecies::cd111();
    let k = sp.mass * (2.0 * PI * 1e6f64).powi(2) / (2.0 * E_CHARGE);
    let e = Vector3::new(0.0, 100.0, 0.0);
    let (mask, pp) = linear_trap(47.4e-6, 8.0, k, e);
    let sa = secular_from_pseudo(&pp, &mask, &Vector3::zeros()).unwrap();
    let wy = sa.axes.iter().zip(&sa.omega).max_by(|a, b| a.0.y.abs().total_cmp(&b.0.y.abs())).unwrap().1;
    let expect = E_CHARGE * e.y / (sp.mass * wy * wy);
    assert!((sa.r0.y / expect - 1.0).abs() < 0.01, "{} vs {expect}", sa.r0.y);
    assert!(sa.r0.x.abs() < 1e-3 * expect && sa.r0.z.abs() < 1e-3 * expect);
}

#[test]
fn static_fields_alone_do_not_trap() {
    let (mask, pp) = linear_trap(47.4e-6, 0.0, 1e6, Vector3::zeros());
    assert!(matches!(find_minimum(&pp.total, &mask, &Vector3::zeros()), Err(AnalysisError::Untrapped)));
}

#[test]
fn scaling_static_voltages_scales_axial_frequency_by_root() {
    let sp = IonSpecies::cd111();
    let k = sp.mass * (2.0 * PI * 1e6f64).powi(2) / (2.0 * E_CHARGE);
    let (mask, a) = linear_trap(47.4e-6, 8.0, k, Vector3::zeros());
    let (_, b) = linear_trap(47.4e-6, 8.0, 2.25 * k, Vector3::zeros());
    let sa = secular_from_pseudo(&a, &mask, &Vector3::zeros()).unwrap();
    let sb = secular_from_pseudo(&b, &mask, &Vector3::zeros()).unwrap();
    assert!((sb.omega[0] / sa.omega[0] - 1.5).abs() < 1e-9);
    assert!((sb.hessian_rf - sa.hessian_rf).norm() < 1e-9 * sa.hessian_rf.norm());
}

#[test]
fn constant_offset_changes_nothing_but_the_level() {
    let sp = IonSpecies::cd111();
    let k = sp.mass * (2.0 * PI * 1e6f64).powi(2) / (2.0 * E_CHARGE);
    let (mask, a) = linear_trap(47.4e-6, 8.0, k, Vector3::new(30.0, 0.0, -20.0));
    let shifted = ScalarGrid { grid: a.dc.grid, values: a.dc.values.iter().map(|v| v + 2.5).collect() };
    let b = Pseudopotential::from_fields(&mask, a.rf_unit.clone(), shifted, a.v0, a.omega, a.species.clone());
    let sa = secular_from_pseudo(&a, &mask, &Vector3::zeros()).unwrap();
    let sb = secular_from_pseudo(&b, &mask, &Vector3::zeros()).unwrap();
    for i in 0..3 {
        assert!((sa.omega[i] / sb.omega[i] - 1.0).abs() < 1e-9);
        // The transverse modes are degenerate here, so compare magnitudes.
        assert!((sa.mathieu_q[i].abs() - sb.mathieu_q[i].abs()).abs() < 1e-9);
    }
    assert!((sa.r0 - sb.r0).norm() < 1e-12);
    let da = trap_depth(&a.total, &mask, &sa.r0).unwrap();
    let db = trap_depth(&b.total, &mask, &sb.r0).unwrap();
    assert!((da.depth - db.depth).abs() < 1e-12);
}

#[test]
fn double_well_depth_is_the_grid_barrier() {
    // Left well at x = 0, barrier at x = 1.125, right well open to the
    // x = 2 wall; y and z are stiff.
    let h = 0.05;
    let g = Grid3 { dims: [101, 21, 21], origin: [-3.0, -0.5, -0.5], spacing: h };
    let mask = VoxelMask::empty(g);
    let u = ScalarGrid::from_fn(g, |p| (p.x * p.x).min((p.x - 2.0).powi(2) + 0.5) + 40.0 * (p.y * p.y + p.z * p.z));
    let d = trap_depth(&u, &mask, &Vector3::zeros()).unwrap();
    let c = g.nearest(&Vector3::zeros()).unwrap();
    let u_min = u.at(c);
    // Along the axis the path must cross every voxel up to the one next to
    // the x = 2 wall; off-axis paths only add the stiff y, z terms.
    let expect = (c[0]..g.dims[0] - 1).map(|i| u.at([i, c[1], c[2]])).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(d.depth, expect - u_min);
    assert!((d.depth - 1.265625).abs() < 0.06);
    assert!((d.saddle_position.x - 1.125).abs() <= h);
    let s = u.at(g.nearest(&d.saddle_position).unwrap());
    assert_eq!(s - u_min, d.depth);
    assert!(d.escape_direction.x > 0.99);
    assert!(d.escape_tilt_angle < 5.0);
}

/// 3D RF trap phi = (x^2 + y^2 - 2 z^2) / (2 r0^2) with no static field.
fn rf_only(v0: f64) -> (VoxelMask, Pseudopotential) {
    let (g, mask) = cube(20e-6, 1e-6);
    let rf = ScalarGrid::from_fn(g, |p| (p.x * p.x + p.y * p.y - 2.0 * p.z * p.z) / (2.0 * 200e-6f64.powi(2)));
    let pp = Pseudopotential::from_fields(&mask, rf, ScalarGrid::zeros(g), v0, OMEGA_RF, IonSpecies::cd111());
    (mask, pp)
}

#[test]
fn pure_rf_depth_scales_as_amplitude_squared() {
    let (mask, a) = rf_only(4.0);
    let (_, b) = rf_only(8.0);
    let da = trap_depth(&a.total, &mask, &Vector3::zeros()).unwrap();
    let db = trap_depth(&b.total, &mask, &Vector3::zeros()).unwrap();
    assert!(da.depth > 0.0);
    assert!((db.depth / da.depth - 4.0).abs() < 1e-12);
    assert_eq!(da.saddle_position, db.saddle_position);
    let mut last = 0.0;
    for v0 in [0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0] {
        let (_, p) = rf_only(v0);
        let d = trap_depth(&p.total, &mask, &Vector3::zeros()).unwrap().depth;
        assert!(d >= last, "depth fell to {d} at V0 = {v0}");
        last = d;
    }
}

#[test]
fn sealed_basin_is_untrapped() {
    let (g, mut mask) = cube(4.0, 1.0);
    // Enclose the centre voxel in an electrode shell.
    for i in 2..7 {
        for j in 2..7 {
            for k in 2..7 {
                if i == 2 || i == 6 || j == 2 || j == 6 || k == 2 || k == 6 {
                    mask.labels[g.index(i, j, k)] = VoxelLabel::Electrode(0).code();
                }
            }
        }
    }
    let u = ScalarGrid::from_fn(g, |p| p.norm_squared());
    assert!(matches!(trap_depth(&u, &mask, &Vector3::zeros()), Err(AnalysisError::Untrapped)));
}

/// Minimax path value from `start` to any vacuum voxel next to the shell.
fn bottleneck(u: &ScalarGrid, mask: &VoxelMask, start: usize) -> Option<f64> {
    let mut best = vec![f64::INFINITY; u.values.len()];
    let key = |v: f64| Reverse(v.to_bits());
    best[start] = u.values[start];
    let mut heap = BinaryHeap::from([(key(u.values[start]), start)]);
    while let Some((Reverse(bits), i)) = heap.pop() {
        let v = f64::from_bits(bits);
        if v > best[i] {
            continue;
        }
        if mask.touches_boundary(i) {
            return Some(v);
        }
        for n in u.grid.face_neighbors(i) {
            if mask.is_vacuum(n) {
                let w = v.max(u.values[n]);
                if w < best[n] {
                    best[n] = w;
                    heap.push((key(w), n));
                }
            }
        }
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn flood_fill_matches_graph_search(seed in any::<u64>(), walls in 0.0f64..0.3) {
        let g = Grid3 { dims: [32; 3], origin: [0.0; 3], spacing: 1.0 };
        let mut mask = VoxelMask::empty(g);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = Vector3::new(15.5, 15.5, 15.5);
        // Positive values, rising on average away from the centre.
        let mut u = ScalarGrid::from_fn(g, |p| (p - c).norm() * 0.1);
        for v in u.values.iter_mut() {
            *v += rng.random_range(0.0..2.0);
        }
        for l in mask.labels.iter_mut() {
            if *l == VoxelLabel::VACUUM_CODE && rng.random_bool(walls) {
                *l = VoxelLabel::Electrode(0).code();
            }
        }
        let start = g.index(16, 16, 16);
        mask.labels[start] = VoxelLabel::VACUUM_CODE;
        let r0 = g.position([16, 16, 16]);
        match (trap_depth(&u, &mask, &r0), bottleneck(&u, &mask, start)) {
            (Ok(d), Some(level)) => {
                prop_assert_eq!(d.depth, level - u.values[start]);
                let s = u.at(g.nearest(&d.saddle_position).unwrap());
                prop_assert_eq!(s, level);
            }
            (Err(AnalysisError::Untrapped), None) => {}
            (a, b) => prop_assert!(false, "flood {:?} vs search {:?}", a.map(|d| d.depth), b),
        }
    }
}
