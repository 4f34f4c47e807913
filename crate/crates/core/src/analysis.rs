//! Pseudopotential, trap minimum, secular frequencies, Mathieu parameters and
//! trap depth.

use std::collections::VecDeque;
use std::io::{self, Write};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{IonSpecies, E_CHARGE};
use crate::fields::{local_fit, FieldError, FitDegree};
use crate::geometry::VoxelMask;
use crate::grid::ScalarGrid;
use crate::trap::{DriveConfig, TrapModel};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid drive: {0}")]
    InvalidDrive(String),
    #[error("untrapped: the potential minimum sits against an electrode or the domain boundary")]
    Untrapped,
    #[error("saddle, not minimum: Hessian eigenvalues {0:?}")]
    Saddle([f64; 3]),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Total pseudopotential (eV; `INFINITY` on non-vacuum voxels) together with
/// the fields it was built from.
#[derive(Debug, Clone)]
pub struct Pseudopotential {
    pub total: ScalarGrid,
    /// Potential of the RF electrodes at 1 V.
    pub rf_unit: ScalarGrid,
    /// Static potential (V).
    pub dc: ScalarGrid,
    pub v0: f64,
    pub omega: f64,
    pub species: IonSpecies,
}

impl Pseudopotential {
    /// Builds U = Z^2 e V0^2 |grad phi_rf|^2 / (4 m Omega^2) + Z phi_dc (eV)
    /// from arbitrary fields on the mask's grid. Gradients are central
    /// differences.
    pub fn from_fields(mask: &VoxelMask, rf_unit: ScalarGrid, dc: ScalarGrid, v0: f64, omega: f64, species: IonSpecies) -> Self {
        let g = mask.grid;
        let [sx, sy, sz] = g.strides();
        let z = species.charge_number();
        let coef = z * z * E_CHARGE * v0 * v0 / (4.0 * species.mass * omega * omega) / (4.0 * g.spacing * g.spacing);
        let rf = &rf_unit.values;
        let mut total = ScalarGrid::zeros(g);
        for (idx, out) in total.values.iter_mut().enumerate() {
            if !mask.is_vacuum(idx) {
                *out = f64::INFINITY;
                continue;
            }
            // Vacuum voxels never sit on the outer layer, which is the shell.
            let gx = rf[idx + sx] - rf[idx - sx];
            let gy = rf[idx + sy] - rf[idx - sy];
            let gz = rf[idx + sz] - rf[idx - sz];
            *out = coef * (gx * gx + gy * gy + gz * gz) + z * dc.values[idx];
        }
        Self { total, rf_unit, dc, v0, omega, species }
    }
}

/// Pseudopotential of a solved trap under `drive`.
pub fn pseudopotential(model: &TrapModel, drive: &DriveConfig) -> Result<Pseudopotential, AnalysisError> {
    drive.validate(model.bases.len()).map_err(AnalysisError::InvalidDrive)?;
    Ok(Pseudopotential::from_fields(&model.mask, model.rf_unit(), model.dc_potential(drive), drive.v0, drive.omega, drive.species.clone()))
}

/// Refined location of a pseudopotential minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub position: Vector3<f64>,
    /// Grid voxel the descent ended on.
    pub voxel: [usize; 3],
    /// U at the refined position (eV).
    pub value: f64,
    /// |grad U| at the refined position (eV/m), from the local fit.
    pub gradient_norm: f64,
}

fn neighbours26(grid: &crate::grid::Grid3, ijk: [usize; 3]) -> impl Iterator<Item = [usize; 3]> + '_ {
    (0..27).filter(|&n| n != 13).filter_map(move |n| {
        let d = [n / 9, (n / 3) % 3, n % 3];
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = ijk[a] as isize + d[a] as isize - 1;
            if v < 0 || v >= grid.dims[a] as isize {
                return None;
            }
            out[a] = v as usize;
        }
        Some(out)
    })
}

/// Steepest descent over the 26-neighbourhood from the voxel nearest `seed`,
/// then Newton steps on a local cubic fit. The global grid argmin is not used because
/// the static potential can dip lower next to negatively biased electrodes.
pub fn find_minimum(u: &ScalarGrid, mask: &VoxelMask, seed: &Vector3<f64>) -> Result<Minimum, AnalysisError> {
    let g = u.grid;
    let mut cur = g.nearest(seed).ok_or(FieldError::OutsideDomain)?;
    if !mask.is_vacuum(g.index(cur[0], cur[1], cur[2])) {
        return Err(FieldError::NotVacuum.into());
    }
    loop {
        let here = u.at(cur);
        let best = neighbours26(&g, cur).map(|n| (u.at(n), n)).filter(|(v, _)| *v < here).min_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((_, n)) => cur = n,
            None => break,
        }
    }
    if neighbours26(&g, cur).any(|n| !mask.is_vacuum(g.index(n[0], n[1], n[2]))) {
        return Err(AnalysisError::Untrapped);
    }
    let p = g.position(cur);
    let mut r = p;
    let mut fit = local_fit(u, mask, &r, FitDegree::Cubic)?;
    for _ in 0..3 {
        let Some(inv) = fit.hessian.try_inverse() else { break };
        let step = -(inv * fit.gradient);
        let next = r + step;
        if (next - p).amax() > g.spacing || !fit.hessian.symmetric_eigenvalues().iter().all(|&l| l > 0.0) {
            break;
        }
        r = next;
        fit = local_fit(u, mask, &r, FitDegree::Cubic)?;
        if step.norm() < 1e-6 * g.spacing {
            break;
        }
    }
    Ok(Minimum { position: r, voxel: cur, value: fit.value, gradient_norm: fit.gradient.norm() })
}

/// Which principal axis is which.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisLabel {
    Axial,
    Transverse1,
    Transverse2,
}

/// Harmonic analysis at the trap minimum. Index 0 is the axial mode, 1 and 2
/// the lower and higher transverse modes.
#[derive(Debug, Clone, PartialEq)]
pub struct SecularAnalysis {
    pub r0: Vector3<f64>,
    /// Secular angular frequencies (rad/s).
    pub omega: [f64; 3],
    pub labels: [AxisLabel; 3],
    /// Unit principal directions, matching `omega`.
    pub axes: [Vector3<f64>; 3],
    /// Tilt of the transverse principal pair out of the chip plane (deg).
    pub axis_tilt: f64,
    /// Elevation of each principal axis above the chip plane (deg).
    pub elevations: [f64; 3],
    pub mathieu_q: [f64; 3],
    pub mathieu_a: [f64; 3],
    /// Fractional tunes; `NAN` where the axis is unstable.
    pub beta: [f64; 3],
    pub stable: bool,
    /// Hessian of U at r0 (J/m^2).
    pub hessian: Matrix3<f64>,
    pub hessian_rf: Matrix3<f64>,
    pub hessian_dc: Matrix3<f64>,
    /// |grad U| at r0 (eV/m).
    pub gradient_norm: f64,
}

impl SecularAnalysis {
    /// The single reported q: the larger transverse magnitude.
    pub fn q(&self) -> f64 {
        self.mathieu_q[1].abs().max(self.mathieu_q[2].abs())
    }

    /// Secular frequencies in Hz.
    pub fn frequencies_hz(&self) -> [f64; 3] {
        self.omega.map(|w| w / (2.0 * std::f64::consts::PI))
    }

    pub fn write_csv<W: Write>(&self, w: &mut W, depth: Option<&DepthResult>) -> io::Result<()> {
        writeln!(w, "quantity,axis,value,unit")?;
        let names = ["axial", "transverse1", "transverse2"];
        for (i, n) in names.iter().enumerate() {
            writeln!(w, "frequency,{n},{:.9e},Hz", self.omega[i] / (2.0 * std::f64::consts::PI))?;
            writeln!(w, "mathieu_q,{n},{:.9e},", self.mathieu_q[i])?;
            writeln!(w, "mathieu_a,{n},{:.9e},", self.mathieu_a[i])?;
            writeln!(w, "beta,{n},{:.9e},", self.beta[i])?;
            for (c, comp) in ["x", "y", "z"].iter().enumerate() {
                writeln!(w, "direction_cosine_{comp},{n},{:.9e},", self.axes[i][c])?;
            }
            writeln!(w, "elevation,{n},{:.6},deg", self.elevations[i])?;
        }
        writeln!(w, "q,,{:.9e},", self.q())?;
        writeln!(w, "axis_tilt,,{:.6},deg", self.axis_tilt)?;
        writeln!(w, "stable,,{},", self.stable as u8)?;
        for (c, comp) in ["x", "y", "z"].iter().enumerate() {
            writeln!(w, "r0_{comp},,{:.9e},m", self.r0[c])?;
        }
        if let Some(d) = depth {
            writeln!(w, "depth,,{:.9e},eV", d.depth)?;
            for (c, comp) in ["x", "y", "z"].iter().enumerate() {
                writeln!(w, "saddle_{comp},,{:.9e},m", d.saddle_position[c])?;
            }
            writeln!(w, "escape_tilt,,{:.6},deg", d.escape_tilt_angle)?;
        }
        Ok(())
    }
}

fn elevation_deg(v: &Vector3<f64>) -> f64 {
    v.z.abs().min(1.0).asin().to_degrees()
}

/// Secular analysis from already-built pseudopotential fields around `seed`.
pub fn secular_from_pseudo(pp: &Pseudopotential, mask: &VoxelMask, seed: &Vector3<f64>) -> Result<SecularAnalysis, AnalysisError> {
    let min = find_minimum(&pp.total, mask, seed)?;
    let (r0, grad) = refine_minimum(pp, mask, &min.position)?;
    secular_at(pp, mask, &r0, grad)
}

/// Gradient, Hessian, RF-fit Hessian and static-fit Hessian.
type Derivatives = (Vector3<f64>, Matrix3<f64>, Matrix3<f64>, Matrix3<f64>);

/// Gradient (J/m) and Hessian (J/m^2) of U at `r` from local cubic fits of
/// the RF and static potentials, together with the two fits' Hessians.
fn pseudo_derivatives(pp: &Pseudopotential, mask: &VoxelMask, r: &Vector3<f64>) -> Result<Derivatives, AnalysisError> {
    let e = pp.species.charge;
    let c = e * e * pp.v0 * pp.v0 / (2.0 * pp.species.mass * pp.omega * pp.omega);
    let rf = local_fit(&pp.rf_unit, mask, r, FitDegree::Cubic)?;
    let dc = local_fit(&pp.dc, mask, r, FitDegree::Cubic)?;
    let (h_rf, g) = (rf.hessian, rf.gradient);
    let mut gt = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            gt[(a, b)] = (0..3).map(|k| g[k] * rf.third[k][a][b]).sum::<f64>();
        }
    }
    // U = c |grad phi|^2 / 2 + e phi_dc.
    let grad = h_rf * g * c + dc.gradient * e;
    let hess = (h_rf * h_rf + gt) * c + dc.hessian * e;
    Ok((grad, (hess + hess.transpose()) * 0.5, h_rf, dc.hessian))
}

/// Newton steps on the fitted fields from a grid minimum. The gridded U
/// carries central-difference error in |grad phi|^2, which shifts its own
/// fitted minimum by a fair fraction of a voxel. Returns the point and
/// |grad U| there (eV/m).
pub fn refine_minimum(pp: &Pseudopotential, mask: &VoxelMask, start: &Vector3<f64>) -> Result<(Vector3<f64>, f64), AnalysisError> {
    let h = mask.grid.spacing;
    let mut r = *start;
    let (mut grad, mut hess, _, _) = pseudo_derivatives(pp, mask, &r)?;
    // Stencil flips near voxel faces can make the iteration cycle; keep the
    // point with the smallest gradient.
    let mut best = (grad.norm(), r);
    for _ in 0..20 {
        if !hess.symmetric_eigenvalues().iter().all(|&l| l > 0.0) {
            break;
        }
        let Some(inv) = hess.try_inverse() else { break };
        let step = -(inv * grad);
        let next = r + step;
        if (next - start).amax() > h {
            break;
        }
        r = next;
        (grad, hess, _, _) = pseudo_derivatives(pp, mask, &r)?;
        if grad.norm() < best.0 {
            best = (grad.norm(), r);
        }
        if step.norm() < 1e-9 * h {
            break;
        }
    }
    Ok((best.1, best.0 / pp.species.charge))
}

/// Harmonic analysis of `pp` at a given point.
pub fn secular_at(pp: &Pseudopotential, mask: &VoxelMask, r0: &Vector3<f64>, gradient_norm: f64) -> Result<SecularAnalysis, AnalysisError> {
    let m = pp.species.mass;
    let e = pp.species.charge;
    let om2 = pp.omega * pp.omega;
    let (_, hess, h_rf, h_dc) = pseudo_derivatives(pp, mask, r0)?;
    let eig = SymmetricEigen::new(hess);
    let lambdas = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    if lambdas.iter().any(|&l| l <= 0.0) {
        return Err(AnalysisError::Saddle(lambdas));
    }
    let vecs: Vec<Vector3<f64>> = (0..3).map(|i| eig.eigenvectors.column(i).into_owned()).collect();
    let axial = (0..3).max_by(|&i, &j| vecs[i].x.abs().total_cmp(&vecs[j].x.abs())).unwrap_or(0);
    let mut trans: Vec<usize> = (0..3).filter(|&i| i != axial).collect();
    trans.sort_by(|&i, &j| lambdas[i].total_cmp(&lambdas[j]));
    let order = [axial, trans[0], trans[1]];

    let mut omega = [0.0; 3];
    let mut axes = [Vector3::zeros(); 3];
    let mut q = [0.0; 3];
    let mut a = [0.0; 3];
    let mut beta = [0.0; 3];
    let mut stable = true;
    for (slot, &i) in order.iter().enumerate() {
        let mut u = vecs[i].normalize();
        // Deterministic sign: largest component positive.
        if u[u.iamax()] < 0.0 {
            u = -u;
        }
        axes[slot] = u;
        omega[slot] = (lambdas[i] / m).sqrt();
        let hu = h_rf * u;
        let sign = if u.dot(&hu) < 0.0 { -1.0 } else { 1.0 };
        q[slot] = sign * 2.0 * e * pp.v0 * hu.norm() / (m * om2);
        a[slot] = 4.0 * e * u.dot(&(h_dc * u)) / (m * om2);
        match mathieu_beta(a[slot], q[slot]) {
            Some(b) => beta[slot] = b,
            None => {
                beta[slot] = f64::NAN;
                stable = false;
            }
        }
    }
    let elevations = [elevation_deg(&axes[0]), elevation_deg(&axes[1]), elevation_deg(&axes[2])];
    // The transverse pair is perpendicular: one axis sits at theta, the other
    // near 90 - theta. The rotation of the pair is the smaller angle.
    let axis_tilt = elevations[1].min(elevations[2]);
    Ok(SecularAnalysis {
        r0: *r0,
        omega,
        labels: [AxisLabel::Axial, AxisLabel::Transverse1, AxisLabel::Transverse2],
        axes,
        axis_tilt,
        elevations,
        mathieu_q: q,
        mathieu_a: a,
        beta,
        stable,
        hessian: hess,
        hessian_rf: h_rf,
        hessian_dc: h_dc,
        gradient_norm,
    })
}

/// Secular analysis of a solved trap, searching for the minimum from `seed`.
pub fn secular_analysis(model: &TrapModel, drive: &DriveConfig, seed: &Vector3<f64>) -> Result<SecularAnalysis, AnalysisError> {
    let pp = pseudopotential(model, drive)?;
    secular_from_pseudo(&pp, &model.mask, seed)
}

fn continued_fraction(beta: f64, a: f64, q2: f64, sign: f64) -> f64 {
    let mut t = 0.0;
    for n in (1..=40).rev() {
        let b = beta + sign * 2.0 * n as f64;
        t = 1.0 / (b * b - a - q2 * t);
    }
    t
}

/// Fractional tune of the Mathieu equation x'' + (a - 2q cos 2t) x = 0 with
/// characteristic exponent in (0, 1), or `None` outside the first stability
/// region. Solved from the standard continued fraction to ~1e-14.
pub fn mathieu_beta(a: f64, q: f64) -> Option<f64> {
    if !(a.is_finite() && q.is_finite()) {
        return None;
    }
    let q2 = q * q;
    let f = |b: f64| b * b - a - q2 * (continued_fraction(b, a, q2, 1.0) + continued_fraction(b, a, q2, -1.0));
    let mut lo = 0.0;
    let mut hi = 1.0;
    let f_lo = f(lo);
    if f_lo == 0.0 {
        return Some(0.0);
    }
    if f_lo > 0.0 || f(hi) <= 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let b = 0.5 * (lo + hi);
    (b > 0.0 && b < 1.0).then_some(b)
}

/// Escape barrier of a trap.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthResult {
    /// Barrier height above the minimum (eV).
    pub depth: f64,
    pub saddle_position: Vector3<f64>,
    pub escape_direction: Vector3<f64>,
    /// Elevation of the escape direction above the chip plane (deg).
    pub escape_tilt_angle: f64,
}

/// Flood fill over vacuum voxels with U <= level (or < level when `strict`),
/// starting at `start`. Returns whether a voxel touching the outer shell was
/// reached, plus the visited flags.
fn flood(u: &ScalarGrid, mask: &VoxelMask, start: usize, level: f64, strict: bool, visited: &mut Vec<bool>) -> bool {
    visited.clear();
    visited.resize(u.values.len(), false);
    let below = |v: f64| if strict { v < level } else { v <= level };
    if !below(u.values[start]) {
        return false;
    }
    let mut queue = VecDeque::from([start]);
    visited[start] = true;
    let mut escaped = false;
    while let Some(i) = queue.pop_front() {
        if mask.touches_boundary(i) {
            escaped = true;
            if !strict {
                return true;
            }
        }
        for n in u.grid.face_neighbors(i) {
            if !visited[n] && mask.is_vacuum(n) && below(u.values[n]) {
                visited[n] = true;
                queue.push_back(n);
            }
        }
    }
    escaped
}

/// Lowest level at which the minimum's basin spills to the domain boundary,
/// found by bisection over the sorted distinct values of U, so the answer is
/// exact on the grid. Electrode voxels are impassable.
pub fn trap_depth(u: &ScalarGrid, mask: &VoxelMask, r0: &Vector3<f64>) -> Result<DepthResult, AnalysisError> {
    let g = u.grid;
    let c = g.nearest(r0).ok_or(FieldError::OutsideDomain)?;
    let start = g.index(c[0], c[1], c[2]);
    if !mask.is_vacuum(start) {
        return Err(FieldError::NotVacuum.into());
    }
    let u_min = u.values[start];
    let mut levels: Vec<f64> = u.values.iter().enumerate().filter(|&(i, v)| mask.is_vacuum(i) && v.is_finite() && *v >= u_min).map(|(_, &v)| v).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut visited = Vec::new();
    let (mut lo, mut hi) = (0usize, levels.len() - 1);
    if !flood(u, mask, start, levels[hi], false, &mut visited) {
        // Sealed basin: nothing reaches the boundary through vacuum.
        return Err(AnalysisError::Untrapped);
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if flood(u, mask, start, levels[mid], false, &mut visited) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let level = levels[lo];
    let saddle_voxel = if level == u_min {
        start
    } else {
        // The basin strictly below the barrier, and its lowest-index
        // neighbour sitting exactly at the barrier level.
        flood(u, mask, start, level, true, &mut visited);
        let mut best = None;
        for i in 0..visited.len() {
            if visited[i] {
                for n in g.face_neighbors(i) {
                    if !visited[n] && u.values[n] == level && best.is_none_or(|b| n < b) {
                        best = Some(n);
                    }
                }
            }
        }
        best.unwrap_or(start)
    };
    let saddle = g.position(g.unindex(saddle_voxel));
    let d = saddle - r0;
    let dir = if d.norm() > 0.0 { d.normalize() } else { Vector3::zeros() };
    Ok(DepthResult { depth: (level - u_min).max(0.0), saddle_position: saddle, escape_direction: dir, escape_tilt_angle: elevation_deg(&dir) })
}
