//! Tricubic (Catmull-Rom) interpolation of several fields at once.
//!
//! The interpolant is C1, so forces taken as its exact gradient come from a
//! single continuous potential; the integrators rely on that for energy
//! conservation.

use nalgebra::Vector3;

use crate::geometry::{Aabb, VoxelMask};
use crate::grid::{Grid3, ScalarGrid};

/// Several scalar fields on a common (possibly cropped) grid, stored
/// interleaved per voxel.
#[derive(Debug, Clone)]
pub struct CubicField {
    grid: Grid3,
    channels: usize,
    data: Vec<f64>,
    vacuum: Vec<bool>,
}

#[inline]
fn catmull_rom(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        [0.5 * (-t3 + 2.0 * t2 - t), 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0), 0.5 * (-3.0 * t3 + 4.0 * t2 + t), 0.5 * (t3 - t2)],
        [0.5 * (-3.0 * t2 + 4.0 * t - 1.0), 0.5 * (9.0 * t2 - 10.0 * t), 0.5 * (-9.0 * t2 + 8.0 * t + 1.0), 0.5 * (3.0 * t2 - 2.0 * t)],
    )
}

impl CubicField {
    /// Packs `fields` (all on the mask's grid), optionally cropped to the voxels
    /// covering `region` plus a two-voxel margin.
    pub fn new(fields: &[&ScalarGrid], mask: &VoxelMask, region: Option<&Aabb>) -> Self {
        let full = mask.grid;
        let (lo, hi) = match region {
            None => ([0usize; 3], [full.dims[0] - 1, full.dims[1] - 1, full.dims[2] - 1]),
            Some(b) => {
                let mut lo = [0usize; 3];
                let mut hi = [0usize; 3];
                for a in 0..3 {
                    let f0 = ((b.min[a] - full.origin[a]) / full.spacing).floor() - 2.0;
                    let f1 = ((b.max[a] - full.origin[a]) / full.spacing).ceil() + 2.0;
                    lo[a] = f0.max(0.0) as usize;
                    hi[a] = (f1.max(0.0) as usize).min(full.dims[a] - 1);
                }
                (lo, hi)
            }
        };
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let origin = [full.origin[0] + lo[0] as f64 * full.spacing, full.origin[1] + lo[1] as f64 * full.spacing, full.origin[2] + lo[2] as f64 * full.spacing];
        let grid = Grid3 { dims, origin, spacing: full.spacing };
        let channels = fields.len();
        let mut data = Vec::with_capacity(grid.len() * channels);
        let mut vacuum = Vec::with_capacity(grid.len());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let src = full.index(lo[0] + i, lo[1] + j, lo[2] + k);
                    vacuum.push(mask.is_vacuum(src));
                    for f in fields {
                        data.push(f.values[src]);
                    }
                }
            }
        }
        Self { grid, channels, data, vacuum }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    /// True when the voxel nearest `r` is vacuum and the interpolation stencil
    /// fits inside the stored grid.
    pub fn is_inside(&self, r: &Vector3<f64>) -> bool {
        self.stencil_base(r).is_some()
    }

    fn stencil_base(&self, r: &Vector3<f64>) -> Option<([usize; 3], [f64; 3])> {
        let f = self.grid.fractional_index(r);
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let fl = f[a].floor();
            if !(fl >= 1.0 && fl + 2.0 < self.grid.dims[a] as f64) {
                return None;
            }
            base[a] = fl as usize - 1;
            t[a] = f[a] - fl;
        }
        let near = [base[0] + 1 + (t[0] >= 0.5) as usize, base[1] + 1 + (t[1] >= 0.5) as usize, base[2] + 1 + (t[2] >= 0.5) as usize];
        if !self.vacuum[self.grid.index(near[0], near[1], near[2])] {
            return None;
        }
        Some((base, t))
    }

    /// Interpolated values and gradients of every channel at `r`. Returns
    /// `false` (leaving the outputs untouched) when `r` is not in vacuum or the
    /// stencil leaves the stored region.
    pub fn eval(&self, r: &Vector3<f64>, values: &mut [f64], grads: &mut [Vector3<f64>]) -> bool {
        let Some((base, t)) = self.stencil_base(r) else {
            return false;
        };
        let (wx, dx) = catmull_rom(t[0]);
        let (wy, dy) = catmull_rom(t[1]);
        let (wz, dz) = catmull_rom(t[2]);
        let c = self.channels;
        values[..c].iter_mut().for_each(|v| *v = 0.0);
        grads[..c].iter_mut().for_each(|g| *g = Vector3::zeros());
        let inv_h = 1.0 / self.grid.spacing;
        let [sx, sy, _] = self.grid.strides();
        for a in 0..4 {
            for b in 0..4 {
                let row = (base[0] + a) * sx + (base[1] + b) * sy + base[2];
                let wab = wx[a] * wy[b];
                let dab_x = dx[a] * wy[b];
                let dab_y = wx[a] * dy[b];
                for cc in 0..4 {
                    let w = wab * wz[cc];
                    let gx = dab_x * wz[cc];
                    let gy = dab_y * wz[cc];
                    let gz = wab * dz[cc];
                    let off = (row + cc) * c;
                    for ch in 0..c {
                        let v = self.data[off + ch];
                        values[ch] += w * v;
                        grads[ch].x += gx * v;
                        grads[ch].y += gy * v;
                        grads[ch].z += gz * v;
                    }
                }
            }
        }
        for g in grads[..c].iter_mut() {
            *g *= inv_h;
        }
        true
    }

    /// Value and gradient of the weighted channel sum `sum_k w_k f_{c_k}`.
    /// Zero weights are skipped.
    pub fn eval_mix(&self, r: &Vector3<f64>, weights: &[(usize, f64)]) -> Option<(f64, Vector3<f64>)> {
        let (base, t) = self.stencil_base(r)?;
        let (wx, dx) = catmull_rom(t[0]);
        let (wy, dy) = catmull_rom(t[1]);
        let (wz, dz) = catmull_rom(t[2]);
        let c = self.channels;
        let [sx, sy, _] = self.grid.strides();
        let mut value = 0.0;
        let mut grad = Vector3::zeros();
        for a in 0..4 {
            for b in 0..4 {
                let row = (base[0] + a) * sx + (base[1] + b) * sy + base[2];
                for cc in 0..4 {
                    let off = (row + cc) * c;
                    let mut v = 0.0;
                    for &(ch, w) in weights {
                        if w != 0.0 {
                            v += w * self.data[off + ch];
                        }
                    }
                    value += wx[a] * wy[b] * wz[cc] * v;
                    grad.x += dx[a] * wy[b] * wz[cc] * v;
                    grad.y += wx[a] * dy[b] * wz[cc] * v;
                    grad.z += wx[a] * wy[b] * dz[cc] * v;
                }
            }
        }
        Some((value, grad / self.grid.spacing))
    }
}
