//! Local weighted least-squares polynomial fits on a 5x5x5 voxel neighbourhood.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::FieldError;
use crate::geometry::VoxelMask;
use crate::grid::ScalarGrid;

const HALF_WIDTH: isize = 2;
const WEIGHT_SIGMA: f64 = 1.5;

/// Polynomial degree of a local fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitDegree {
    Quadratic,
    Cubic,
}

impl FitDegree {
    fn terms(self) -> usize {
        match self {
            FitDegree::Quadratic => 10,
            FitDegree::Cubic => 20,
        }
    }
}

/// Taylor coefficients at the fit centre, in SI units of the field.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub value: f64,
    pub gradient: Vector3<f64>,
    pub hessian: Matrix3<f64>,
    /// `third[a][b][c] = d^3 f / dx_a dx_b dx_c`; zero for quadratic fits.
    pub third: [[[f64; 3]; 3]; 3],
    pub points_used: usize,
}

fn monomials(d: [f64; 3], degree: FitDegree, out: &mut [f64]) {
    let [x, y, z] = d;
    out[..10].copy_from_slice(&[1.0, x, y, z, x * x, y * y, z * z, x * y, x * z, y * z]);
    if degree == FitDegree::Cubic {
        out[10..20].copy_from_slice(&[x * x * x, y * y * y, z * z * z, x * x * y, x * x * z, y * y * x, y * y * z, z * z * x, z * z * y, x * y * z]);
    }
}

/// Fits `field` around `r` using the vacuum voxels of the 5^3 block centred on
/// the voxel nearest `r`. Exact for polynomials up to the chosen degree.
pub fn local_fit(field: &ScalarGrid, mask: &VoxelMask, r: &Vector3<f64>, degree: FitDegree) -> Result<LocalFit, FieldError> {
    let g = field.grid;
    let c = g.nearest(r).ok_or(FieldError::OutsideDomain)?;
    if g.depth_inside(c) < HALF_WIDTH as usize {
        return Err(FieldError::NearBoundary);
    }
    let cidx = g.index(c[0], c[1], c[2]);
    if !mask.is_vacuum(cidx) {
        return Err(FieldError::NotVacuum);
    }
    let h = g.spacing;
    let m = degree.terms();
    let mut rows: Vec<f64> = Vec::with_capacity(125 * m);
    let mut rhs: Vec<f64> = Vec::with_capacity(125);
    let mut mono = [0.0; 20];
    for di in -HALF_WIDTH..=HALF_WIDTH {
        for dj in -HALF_WIDTH..=HALF_WIDTH {
            for dk in -HALF_WIDTH..=HALF_WIDTH {
                let ijk = [(c[0] as isize + di) as usize, (c[1] as isize + dj) as usize, (c[2] as isize + dk) as usize];
                let idx = g.index(ijk[0], ijk[1], ijk[2]);
                if !mask.is_vacuum(idx) {
                    continue;
                }
                let p = g.position(ijk);
                let d = [(p.x - r.x) / h, (p.y - r.y) / h, (p.z - r.z) / h];
                let w = (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (2.0 * WEIGHT_SIGMA * WEIGHT_SIGMA)).exp().sqrt();
                monomials(d, degree, &mut mono);
                rows.extend(mono[..m].iter().map(|v| v * w));
                rhs.push(field.values[idx] * w);
            }
        }
    }
    let n = rhs.len();
    if n < m + m / 2 {
        return Err(FieldError::TooFewPoints { have: n, need: m + m / 2 });
    }
    let a = DMatrix::from_row_slice(n, m, &rows);
    let b = DVector::from_vec(rhs);
    let coef = a.svd(true, true).solve(&b, 1e-12).map_err(|_| FieldError::TooFewPoints { have: n, need: m })?;

    let h2 = h * h;
    let gradient = Vector3::new(coef[1], coef[2], coef[3]) / h;
    let hessian = Matrix3::new(2.0 * coef[4], coef[7], coef[8], coef[7], 2.0 * coef[5], coef[9], coef[8], coef[9], 2.0 * coef[6]) / h2;
    let mut third = [[[0.0; 3]; 3]; 3];
    if degree == FitDegree::Cubic {
        let h3 = h2 * h;
        let mut set = |a: usize, b: usize, c: usize, v: f64| {
            let v = v / h3;
            for (p, q, r) in [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
                third[p][q][r] = v;
            }
        };
        set(0, 0, 0, 6.0 * coef[10]);
        set(1, 1, 1, 6.0 * coef[11]);
        set(2, 2, 2, 6.0 * coef[12]);
        set(0, 0, 1, 2.0 * coef[13]);
        set(0, 0, 2, 2.0 * coef[14]);
        set(1, 1, 0, 2.0 * coef[15]);
        set(1, 1, 2, 2.0 * coef[16]);
        set(2, 2, 0, 2.0 * coef[17]);
        set(2, 2, 1, 2.0 * coef[18]);
        set(0, 1, 2, coef[19]);
    }
    Ok(LocalFit { value: coef[0], gradient, hessian, third, points_used: n })
}
