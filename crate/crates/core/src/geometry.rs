//! Parametric two-layer segmented cantilever trap and its voxelization.
//!
//! Coordinates: `x` runs along the trap axis, `y` across the gap in the chip
//! plane (north is `+y`), `z` is normal to the chip (top layer is `+z`). The
//! trap axis is the line `y = z = 0`.

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{read_label_grid, write_label_grid, Grid3};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid geometry parameter: {0}")]
    InvalidParam(String),
    #[error("electrodes {a} and {b} overlap")]
    Overlap { a: String, b: String },
    #[error("electrode {0} lies outside the domain or within the required clearance of its wall")]
    OutsideDomain(String),
    #[error("grid spacing {spacing:e} m exceeds the thinnest electrode dimension {thinnest:e} m")]
    SpacingTooCoarse { spacing: f64, thinnest: f64 },
    #[error("domain extent {extent:e} m along axis {axis} is not a whole number of {spacing:e} m voxels")]
    IncommensurateDomain { axis: usize, extent: f64, spacing: f64 },
    #[error("electrode {0} captured no voxels")]
    EmptyElectrode(String),
}

/// Axis-aligned box, metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    /// Closed containment with a small absolute slack.
    pub fn contains(&self, p: [f64; 3], slack: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - slack && p[a] <= self.max[a] + slack)
    }

    /// Volume of the intersection (0 when the boxes only touch).
    pub fn overlap_volume(&self, other: &Aabb) -> f64 {
        (0..3).map(|a| (self.max[a].min(other.max[a]) - self.min[a].max(other.min[a])).max(0.0)).product()
    }

    /// True when the boxes intersect by more than `tol` along every axis,
    /// so rounding in abutting faces does not count.
    pub fn overlaps(&self, other: &Aabb, tol: f64) -> bool {
        (0..3).all(|a| self.max[a].min(other.max[a]) - self.min[a].max(other.min[a]) > tol)
    }

    pub fn thinnest(&self) -> f64 {
        (0..3).map(|a| self.extent(a)).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    #[default]
    GroundedBox,
}

/// Dimensions of the trap, SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    /// Tip-to-tip in-plane gap.
    pub s: f64,
    /// Vertical separation between the two conducting layers.
    pub h: f64,
    /// Conducting layer thickness.
    pub t: f64,
    /// Axial width of one segment.
    pub w: f64,
    /// Axial gap between segments.
    pub g: f64,
    pub n_segments: usize,
    /// Insulator recess behind the tips. Kept as metadata; the recess is vacuum.
    pub undercut: f64,
    /// In-plane cantilever length from tip toward the substrate.
    pub cantilever_length: f64,
    pub domain: Aabb,
    #[serde(default)]
    pub boundary_condition: BoundaryCondition,
}

impl GeometryParams {
    /// Four-segment GaAs trap: s = 60 um, h = 4 um, t = 2.3 um, w = 130 um,
    /// g = 25 um, 15 um undercut, 120 um cantilevers, in a
    /// 720 x 420 x 200 um grounded box centred on the trap.
    pub fn baseline() -> Self {
        Self {
            s: 60e-6,
            h: 4e-6,
            t: 2.3e-6,
            w: 130e-6,
            g: 25e-6,
            n_segments: 4,
            undercut: 15e-6,
            cantilever_length: 120e-6,
            domain: Aabb::new([-360e-6, -210e-6, -100e-6], [360e-6, 210e-6, 100e-6]),
            boundary_condition: BoundaryCondition::GroundedBox,
        }
    }

    /// Axial pitch between segment centres.
    pub fn pitch(&self) -> f64 {
        self.w + self.g
    }

    /// Axial coordinate of the centre of segment `k`.
    pub fn segment_center(&self, k: usize) -> f64 {
        (k as f64 - (self.n_segments as f64 - 1.0) / 2.0) * self.pitch()
    }

    /// Total axial extent of the electrode stack.
    pub fn axial_extent(&self) -> f64 {
        self.n_segments as f64 * self.w + (self.n_segments.saturating_sub(1)) as f64 * self.g
    }

    pub fn electrode_count(&self) -> usize {
        4 * self.n_segments
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let positive = [("s", self.s), ("h", self.h), ("t", self.t), ("w", self.w), ("cantilever_length", self.cantilever_length)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GeometryError::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(GeometryError::InvalidParam(format!("g must be non-negative, got {}", self.g)));
        }
        if !(self.undercut >= 0.0 && self.undercut < self.cantilever_length) {
            return Err(GeometryError::InvalidParam(format!("undercut must lie in [0, cantilever_length), got {}", self.undercut)));
        }
        if self.n_segments == 0 {
            return Err(GeometryError::InvalidParam("n_segments must be at least 1".into()));
        }
        if (0..3).any(|a| !(self.domain.extent(a) > 0.0)) {
            return Err(GeometryError::InvalidParam("domain must have positive extent".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    North,
    South,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Rf,
    Dc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElectrodeLabel {
    pub segment_index: usize,
    pub layer: Layer,
    pub side: Side,
    pub role: Role,
}

impl ElectrodeLabel {
    /// RF goes to every top electrode on the north side and every bottom
    /// electrode on the south side.
    pub fn for_position(segment_index: usize, layer: Layer, side: Side) -> Self {
        let role = match (layer, side) {
            (Layer::Top, Side::North) | (Layer::Bottom, Side::South) => Role::Rf,
            _ => Role::Dc,
        };
        Self { segment_index, layer, side, role }
    }

    /// The electrode reached by the inversion `(y, z) -> (-y, -z)`.
    pub fn mirrored(&self) -> Self {
        let layer = match self.layer {
            Layer::Top => Layer::Bottom,
            Layer::Bottom => Layer::Top,
        };
        let side = match self.side {
            Side::North => Side::South,
            Side::South => Side::North,
        };
        Self { layer, side, ..*self }
    }
}

impl fmt::Display for ElectrodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layer = match self.layer {
            Layer::Top => "top",
            Layer::Bottom => "bottom",
        };
        let side = match self.side {
            Side::North => "north",
            Side::South => "south",
        };
        let role = match self.role {
            Role::Rf => "rf",
            Role::Dc => "dc",
        };
        write!(f, "seg{}_{}_{}_{}", self.segment_index, layer, side, role)
    }
}

/// One conductor: its label and the box it occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    pub label: ElectrodeLabel,
    pub solid: Aabb,
}

/// Electrode id of `(segment, layer, side)` in the order produced by [`build_trap`].
pub fn electrode_id(segment: usize, layer: Layer, side: Side) -> usize {
    let j = match (layer, side) {
        (Layer::Top, Side::North) => 0,
        (Layer::Top, Side::South) => 1,
        (Layer::Bottom, Side::North) => 2,
        (Layer::Bottom, Side::South) => 3,
    };
    4 * segment + j
}

/// Builds the `4 * n_segments` cantilever electrodes, ordered by segment and
/// then (top north, top south, bottom north, bottom south).
pub fn build_trap(params: &GeometryParams) -> Result<Vec<Electrode>, GeometryError> {
    params.validate()?;
    let mut out = Vec::with_capacity(params.electrode_count());
    for k in 0..params.n_segments {
        let xc = params.segment_center(k);
        let (x0, x1) = (xc - params.w / 2.0, xc + params.w / 2.0);
        for (layer, side) in [(Layer::Top, Side::North), (Layer::Top, Side::South), (Layer::Bottom, Side::North), (Layer::Bottom, Side::South)] {
            let (y0, y1) = match side {
                Side::North => (params.s / 2.0, params.s / 2.0 + params.cantilever_length),
                Side::South => (-params.s / 2.0 - params.cantilever_length, -params.s / 2.0),
            };
            let (z0, z1) = match layer {
                Layer::Top => (params.h / 2.0, params.h / 2.0 + params.t),
                Layer::Bottom => (-params.h / 2.0 - params.t, -params.h / 2.0),
            };
            out.push(Electrode { label: ElectrodeLabel::for_position(k, layer, side), solid: Aabb::new([x0, y0, z0], [x1, y1, z1]) });
        }
    }

    for (a, ea) in out.iter().enumerate() {
        for eb in &out[a + 1..] {
            if ea.solid.overlaps(&eb.solid, 1e-12) {
                return Err(GeometryError::Overlap { a: ea.label.to_string(), b: eb.label.to_string() });
            }
        }
    }

    // The baseline box sits exactly at the limit; allow for rounding.
    let clearance = params.s * (1.0 - 1e-9);
    for e in &out {
        for a in 0..3 {
            if e.solid.min[a] - params.domain.min[a] < clearance || params.domain.max[a] - e.solid.max[a] < clearance {
                return Err(GeometryError::OutsideDomain(e.label.to_string()));
            }
        }
    }
    Ok(out)
}

/// Voxel size and the box it tiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub domain: Aabb,
    pub spacing: f64,
}

impl GridSpec {
    /// Cell-centred grid tiling the domain exactly.
    pub fn grid(&self) -> Result<Grid3, GeometryError> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(GeometryError::InvalidParam(format!("spacing must be positive, got {}", self.spacing)));
        }
        let mut dims = [0usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let extent = self.domain.extent(a);
            let n = (extent / self.spacing).round();
            if n < 3.0 || (n * self.spacing - extent).abs() > 1e-6 * self.spacing {
                return Err(GeometryError::IncommensurateDomain { axis: a, extent, spacing: self.spacing });
            }
            dims[a] = n as usize;
            origin[a] = self.domain.min[a] + 0.5 * self.spacing;
        }
        Ok(Grid3 { dims, origin, spacing: self.spacing })
    }
}

/// Classification of one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelLabel {
    Vacuum,
    Boundary,
    Electrode(usize),
}

impl VoxelLabel {
    pub const VACUUM_CODE: u16 = 0;
    pub const BOUNDARY_CODE: u16 = 1;

    #[inline]
    pub fn from_code(code: u16) -> Self {
        match code {
            0 => VoxelLabel::Vacuum,
            1 => VoxelLabel::Boundary,
            c => VoxelLabel::Electrode(c as usize - 2),
        }
    }

    #[inline]
    pub fn code(self) -> u16 {
        match self {
            VoxelLabel::Vacuum => 0,
            VoxelLabel::Boundary => 1,
            VoxelLabel::Electrode(id) => id as u16 + 2,
        }
    }
}

/// Labelled voxel grid: outer shell grounded, electrode voxels Dirichlet, the
/// rest vacuum.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    pub grid: Grid3,
    pub labels: Vec<u16>,
    pub electrodes: Vec<ElectrodeLabel>,
}

impl VoxelMask {
    /// A mask with no electrodes: vacuum inside a grounded outer shell.
    pub fn empty(grid: Grid3) -> Self {
        let mut labels = vec![VoxelLabel::VACUUM_CODE; grid.len()];
        for (idx, l) in labels.iter_mut().enumerate() {
            if grid.depth_inside(grid.unindex(idx)) == 0 {
                *l = VoxelLabel::BOUNDARY_CODE;
            }
        }
        Self { grid, labels, electrodes: Vec::new() }
    }

    #[inline]
    pub fn label(&self, idx: usize) -> VoxelLabel {
        VoxelLabel::from_code(self.labels[idx])
    }

    #[inline]
    pub fn is_vacuum(&self, idx: usize) -> bool {
        self.labels[idx] == VoxelLabel::VACUUM_CODE
    }

    pub fn electrode_voxel_count(&self, id: usize) -> usize {
        let code = VoxelLabel::Electrode(id).code();
        self.labels.iter().filter(|&&l| l == code).count()
    }

    /// True when the voxel is vacuum and touches a Dirichlet voxel.
    pub fn touches_dirichlet(&self, idx: usize) -> bool {
        self.grid.face_neighbors(idx).any(|n| !self.is_vacuum(n))
    }

    /// True when the voxel is vacuum and face-adjacent to the outer shell.
    pub fn touches_boundary(&self, idx: usize) -> bool {
        self.grid.face_neighbors(idx).any(|n| self.labels[n] == VoxelLabel::BOUNDARY_CODE)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write_label_grid(w, &self.grid, &self.labels)
    }

    /// Reads a mask file; electrode labels are not stored in the file and must
    /// be supplied in id order.
    pub fn read_from<R: Read>(r: &mut R, electrodes: Vec<ElectrodeLabel>) -> io::Result<Self> {
        let (grid, labels) = read_label_grid(r)?;
        Ok(Self { grid, labels, electrodes })
    }
}

/// Labels every voxel whose centre lies strictly inside a solid. A centre
/// exactly on a face is vacuum unless the face is shared by two solids, in
/// which case it goes to the lower id. Strict containment keeps the mask
/// mirror symmetric when faces land on voxel centres.
pub fn voxelize(solids: &[Electrode], spec: &GridSpec) -> Result<VoxelMask, GeometryError> {
    let grid = spec.grid()?;
    let thinnest = solids.iter().map(|e| e.solid.thinnest()).fold(f64::INFINITY, f64::min);
    if spec.spacing > thinnest * (1.0 + 1e-9) {
        return Err(GeometryError::SpacingTooCoarse { spacing: spec.spacing, thinnest });
    }
    let mut labels = vec![VoxelLabel::VACUUM_CODE; grid.len()];
    let slack = 1e-9 * spec.spacing;
    for (id, e) in solids.iter().enumerate() {
        let code = VoxelLabel::Electrode(id).code();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let f0 = ((e.solid.min[a] - grid.origin[a]) / spec.spacing).floor().max(0.0) as usize;
            let f1 = (((e.solid.max[a] - grid.origin[a]) / spec.spacing).ceil().max(0.0) as usize).min(grid.dims[a] - 1);
            lo[a] = f0;
            hi[a] = f1;
        }
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let p = grid.position([i, j, k]);
                    let p = [p.x, p.y, p.z];
                    let idx = grid.index(i, j, k);
                    if labels[idx] != VoxelLabel::VACUUM_CODE || !e.solid.contains(p, slack) {
                        continue;
                    }
                    let shared = || solids.iter().enumerate().any(|(o, f)| o != id && f.solid.contains(p, slack));
                    if e.solid.contains(p, -slack) || shared() {
                        labels[idx] = code;
                    }
                }
            }
        }
    }
    let d = grid.dims;
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                if i == 0 || j == 0 || k == 0 || i == d[0] - 1 || j == d[1] - 1 || k == d[2] - 1 {
                    labels[grid.index(i, j, k)] = VoxelLabel::BOUNDARY_CODE;
                }
            }
        }
    }
    let mask = VoxelMask { grid, labels, electrodes: solids.iter().map(|e| e.label).collect() };
    for (id, e) in solids.iter().enumerate() {
        if mask.electrode_voxel_count(id) == 0 {
            return Err(GeometryError::EmptyElectrode(e.label.to_string()));
        }
    }
    Ok(mask)
}
