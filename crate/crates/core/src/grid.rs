//! Regular cell-centred 3D grids, scalar fields on them, and the little-endian
//! binary grid format shared by voxel masks and solved potentials.
//!
//! Layout of a grid file:
//!
//! ```text
//! u32 nx, u32 ny, u32 nz          (little endian)
//! f64 origin_x, origin_y, origin_z  centre of voxel (0, 0, 0), metres
//! f64 spacing                       metres
//! payload, row-major (x slowest, z fastest):
//!     u16 labels (voxel masks) or f64 values (fields)
//! ```

use std::io::{self, Read, Write};

use nalgebra::Vector3;

/// Geometry of a regular grid: voxel `(i, j, k)` is centred at
/// `origin + spacing * (i, j, k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: f64,
}

impl Grid3 {
    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn unindex(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [self.dims[1] * self.dims[2], self.dims[2], 1]
    }

    pub fn position(&self, ijk: [usize; 3]) -> Vector3<f64> {
        Vector3::new(self.origin[0] + ijk[0] as f64 * self.spacing, self.origin[1] + ijk[1] as f64 * self.spacing, self.origin[2] + ijk[2] as f64 * self.spacing)
    }

    /// Continuous index coordinates of a point.
    pub fn fractional_index(&self, r: &Vector3<f64>) -> [f64; 3] {
        [(r.x - self.origin[0]) / self.spacing, (r.y - self.origin[1]) / self.spacing, (r.z - self.origin[2]) / self.spacing]
    }

    /// Nearest voxel, or `None` outside the grid.
    pub fn nearest(&self, r: &Vector3<f64>) -> Option<[usize; 3]> {
        let f = self.fractional_index(r);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let n = f[a].round();
            if !(n >= 0.0 && n < self.dims[a] as f64) {
                return None;
            }
            out[a] = n as usize;
        }
        Some(out)
    }

    /// Distance in voxels from `ijk` to the nearest grid face.
    pub fn depth_inside(&self, ijk: [usize; 3]) -> usize {
        (0..3).map(|a| ijk[a].min(self.dims[a] - 1 - ijk[a])).min().unwrap_or(0)
    }

    /// Indices of the 6 face neighbours that exist.
    pub fn face_neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let [i, j, k] = self.unindex(idx);
        let s = self.strides();
        let d = self.dims;
        let cand = [
            (i > 0).then(|| idx - s[0]),
            (i + 1 < d[0]).then(|| idx + s[0]),
            (j > 0).then(|| idx - s[1]),
            (j + 1 < d[1]).then(|| idx + s[1]),
            (k > 0).then(|| idx - s[2]),
            (k + 1 < d[2]).then(|| idx + s[2]),
        ];
        cand.into_iter().flatten()
    }

    fn write_header<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for d in self.dims {
            let d = u32::try_from(d).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "grid dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for o in self.origin {
            w.write_all(&o.to_le_bytes())?;
        }
        w.write_all(&self.spacing.to_le_bytes())
    }

    fn read_header<R: Read>(r: &mut R) -> io::Result<Self> {
        let mut dims = [0usize; 3];
        let mut b4 = [0u8; 4];
        for d in dims.iter_mut() {
            r.read_exact(&mut b4)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let mut b8 = [0u8; 8];
        let mut origin = [0.0; 3];
        for o in origin.iter_mut() {
            r.read_exact(&mut b8)?;
            *o = f64::from_le_bytes(b8);
        }
        r.read_exact(&mut b8)?;
        let spacing = f64::from_le_bytes(b8);
        if !(spacing > 0.0) {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "non-positive grid spacing"));
        }
        Ok(Self { dims, origin, spacing })
    }
}

/// A scalar field sampled at the voxel centres of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub grid: Grid3,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn zeros(grid: Grid3) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: Grid3, f: impl Fn(Vector3<f64>) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.dims[0] {
            for j in 0..grid.dims[1] {
                for k in 0..grid.dims[2] {
                    values.push(f(grid.position([i, j, k])));
                }
            }
        }
        Self { grid, values }
    }

    #[inline]
    pub fn at(&self, ijk: [usize; 3]) -> f64 {
        self.values[self.grid.index(ijk[0], ijk[1], ijk[2])]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        self.grid.write_header(w)?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Self> {
        let grid = Grid3::read_header(r)?;
        let mut buf = vec![0u8; grid.len() * 8];
        r.read_exact(&mut buf)?;
        let values = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Ok(Self { grid, values })
    }
}

/// Reads the header and `u16` payload of a mask file.
pub(crate) fn read_label_grid<R: Read>(r: &mut R) -> io::Result<(Grid3, Vec<u16>)> {
    let grid = Grid3::read_header(r)?;
    let mut buf = vec![0u8; grid.len() * 2];
    r.read_exact(&mut buf)?;
    let labels = buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok((grid, labels))
}

pub(crate) fn write_label_grid<W: Write>(w: &mut W, grid: &Grid3, labels: &[u16]) -> io::Result<()> {
    grid.write_header(w)?;
    let mut buf = Vec::with_capacity(labels.len() * 2);
    for l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf)
}
