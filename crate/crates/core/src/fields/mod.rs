//! Unit-voltage basis potentials and their sampling.
//!
//! Each electrode gets one basis field: the Laplace solution with that
//! electrode at 1 V and every other conductor (and the outer shell) at 0 V.
//! Any static configuration is then a weighted sum of bases.

mod fit;
pub mod interp;
pub mod solver;

use std::io::{self, Write};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

pub use fit::{local_fit, FitDegree, LocalFit};
pub use solver::{residual_max_norm, SolveOptions, SolverMethod};

use crate::geometry::{ElectrodeLabel, VoxelLabel, VoxelMask};
use crate::grid::ScalarGrid;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("electrode {0} does not exist in the mask")]
    UnknownElectrode(usize),
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("solver did not converge after {} residual checks (last residual {:e})", history.len(), history.last().copied().unwrap_or(f64::NAN))]
    NotConverged { history: Vec<f64> },
    #[error("expected {expected} voltages, got {got}")]
    VoltageCount { expected: usize, got: usize },
    #[error("basis fields live on different grids")]
    GridMismatch,
    #[error("point lies outside the grid")]
    OutsideDomain,
    #[error("point is within two voxels of the domain boundary")]
    NearBoundary,
    #[error("point is inside an electrode or the boundary shell")]
    NotVacuum,
    #[error("only {have} vacuum voxels available for a fit needing {need}")]
    TooFewPoints { have: usize, need: usize },
}

/// Solved potential of one electrode at 1 V, all others grounded.
#[derive(Debug, Clone)]
pub struct PotentialBasis {
    pub electrode: usize,
    pub label: ElectrodeLabel,
    pub field: ScalarGrid,
    /// Max-norm relative Laplacian residual of the stored field.
    pub residual: f64,
    pub iterations: usize,
}

impl PotentialBasis {
    pub fn value_range(&self) -> (f64, f64) {
        self.field.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

fn check_tol(opts: &SolveOptions) -> Result<(), FieldError> {
    if opts.tol > 0.0 && opts.tol.is_finite() {
        Ok(())
    } else {
        Err(FieldError::BadTolerance)
    }
}

pub fn solve_basis(mask: &VoxelMask, electrode: usize, opts: &SolveOptions) -> Result<PotentialBasis, FieldError> {
    let label = *mask.electrodes.get(electrode).ok_or(FieldError::UnknownElectrode(electrode))?;
    check_tol(opts)?;
    let sol = solver::solve_dirichlet_field(mask, |l| if l == VoxelLabel::Electrode(electrode) { 1.0 } else { 0.0 }, opts)
        .map_err(|e| FieldError::NotConverged { history: e.history })?;
    Ok(PotentialBasis { electrode, label, field: ScalarGrid { grid: mask.grid, values: sol.values }, residual: sol.residual, iterations: sol.iterations })
}

/// Solves every electrode's basis; independent solves run on the rayon pool.
pub fn solve_all(mask: &VoxelMask, opts: &SolveOptions) -> Result<Vec<PotentialBasis>, FieldError> {
    (0..mask.electrodes.len()).into_par_iter().map(|id| solve_basis(mask, id, opts)).collect()
}

/// One Dirichlet solve with the given voltage on every electrode.
pub fn solve_with_voltages(mask: &VoxelMask, voltages: &[f64], opts: &SolveOptions) -> Result<ScalarGrid, FieldError> {
    if voltages.len() != mask.electrodes.len() {
        return Err(FieldError::VoltageCount { expected: mask.electrodes.len(), got: voltages.len() });
    }
    check_tol(opts)?;
    let sol = solver::solve_dirichlet_field(
        mask,
        |l| match l {
            VoxelLabel::Electrode(id) => voltages[id],
            _ => 0.0,
        },
        opts,
    )
    .map_err(|e| FieldError::NotConverged { history: e.history })?;
    Ok(ScalarGrid { grid: mask.grid, values: sol.values })
}

/// `sum_i V_i phi_i` over the given bases.
pub fn superpose(bases: &[PotentialBasis], voltages: &[f64]) -> Result<ScalarGrid, FieldError> {
    if bases.len() != voltages.len() {
        return Err(FieldError::VoltageCount { expected: bases.len(), got: voltages.len() });
    }
    let first = bases.first().ok_or(FieldError::VoltageCount { expected: 1, got: 0 })?;
    if bases.iter().any(|b| b.field.grid != first.field.grid) {
        return Err(FieldError::GridMismatch);
    }
    let mut out = ScalarGrid::zeros(first.field.grid);
    for (b, &v) in bases.iter().zip(voltages) {
        if v == 0.0 {
            continue;
        }
        for (o, x) in out.values.iter_mut().zip(&b.field.values) {
            *o += v * x;
        }
    }
    Ok(out)
}

/// Potential with its first and second derivatives at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub position: Vector3<f64>,
    pub value: f64,
    pub gradient: Vector3<f64>,
    pub hessian: Matrix3<f64>,
}

/// Value, gradient and Hessian from a weighted quadratic fit over the 5^3
/// neighbourhood of `r`.
pub fn sample(field: &ScalarGrid, mask: &VoxelMask, r: &Vector3<f64>) -> Result<FieldSample, FieldError> {
    let fit = local_fit(field, mask, r, FitDegree::Quadratic)?;
    Ok(FieldSample { position: *r, value: fit.value, gradient: fit.gradient, hessian: fit.hessian })
}

/// Trilinear interpolation weights of `r` on the 8 surrounding voxel centres.
pub fn trilinear_weights(field: &ScalarGrid, r: &Vector3<f64>) -> Result<Vec<(usize, f64)>, FieldError> {
    let g = field.grid;
    let f = g.fractional_index(r);
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let fl = f[a].floor();
        if fl < 0.0 || fl as usize + 1 >= g.dims[a] {
            return Err(FieldError::OutsideDomain);
        }
        base[a] = fl as usize;
        frac[a] = f[a] - fl;
    }
    let mut out = Vec::with_capacity(8);
    for di in 0..2 {
        for dj in 0..2 {
            for dk in 0..2 {
                let w = (if di == 0 { 1.0 - frac[0] } else { frac[0] }) * (if dj == 0 { 1.0 - frac[1] } else { frac[1] }) * (if dk == 0 { 1.0 - frac[2] } else { frac[2] });
                out.push((g.index(base[0] + di, base[1] + dj, base[2] + dk), w));
            }
        }
    }
    Ok(out)
}

pub fn trilinear(field: &ScalarGrid, r: &Vector3<f64>) -> Result<f64, FieldError> {
    Ok(trilinear_weights(field, r)?.into_iter().map(|(i, w)| w * field.values[i]).sum())
}

/// Trilinearly interpolated value of every basis at `r`, from a single
/// adjoint solve: by symmetry of the discrete operator,
/// `phi_i(r) = sum_n G(n) b_i(n)` where `G` solves the system with the
/// interpolation weights as source and `b_i(n)` counts the neighbours of `n`
/// belonging to electrode `i`.
pub fn point_values_by_reciprocity(mask: &VoxelMask, r: &Vector3<f64>, opts: &SolveOptions) -> Result<Vec<f64>, FieldError> {
    check_tol(opts)?;
    let g = mask.grid;
    let probe = ScalarGrid::zeros(g);
    let weights = trilinear_weights(&probe, r)?;
    let mut source = vec![0.0; g.len()];
    for (idx, w) in weights {
        if !mask.is_vacuum(idx) {
            return Err(FieldError::NotVacuum);
        }
        source[idx] = w;
    }
    let green = solver::solve_source(mask, source, opts).map_err(|e| FieldError::NotConverged { history: e.history })?;
    let mut out = vec![0.0; mask.electrodes.len()];
    for idx in 0..g.len() {
        if !mask.is_vacuum(idx) || green.values[idx] == 0.0 {
            continue;
        }
        for n in g.face_neighbors(idx) {
            if let VoxelLabel::Electrode(id) = mask.label(n) {
                out[id] += green.values[idx];
            }
        }
    }
    Ok(out)
}

/// Writes `position_m,value` rows for points along a segment.
pub fn write_line_scan<W: Write>(w: &mut W, field: &ScalarGrid, start: Vector3<f64>, end: Vector3<f64>, n: usize) -> io::Result<()> {
    writeln!(w, "x_m,y_m,z_m,value")?;
    for i in 0..n {
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let p = start + (end - start) * t;
        let v = trilinear(field, &p).unwrap_or(f64::NAN);
        writeln!(w, "{:e},{:e},{:e},{:e}", p.x, p.y, p.z, v)?;
    }
    Ok(())
}
