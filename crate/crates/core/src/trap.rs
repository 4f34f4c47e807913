//! A voxelized trap with its solved bases, plus the drive configuration that
//! turns bases into physical potentials.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constants::IonSpecies;
use crate::fields::{PotentialBasis, SolveOptions, SolverMethod};
use crate::geometry::{build_trap, voxelize, ElectrodeLabel, GeometryError, GeometryParams, GridSpec, Role, VoxelMask};
use crate::grid::ScalarGrid;

/// RF amplitude and frequency, static voltages, and the trapped species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveConfig {
    /// RF amplitude, zero to peak (V).
    pub v0: f64,
    /// RF angular frequency (rad/s).
    pub omega: f64,
    /// Static voltage on every electrode, indexed by electrode id (V). RF
    /// electrodes may carry a static offset too.
    pub dc_voltages: Vec<f64>,
    /// Uniform potential added to every conductor and the enclosure (V).
    #[serde(default)]
    pub dc_offset: f64,
    /// Uniform stray field added to the static potential (V/m).
    #[serde(default)]
    pub stray_field: [f64; 3],
    pub species: IonSpecies,
}

impl DriveConfig {
    /// 8.0 V at 15.9 MHz; the DC electrodes of `zone_segment` at -0.33 V and
    /// every other DC electrode at 1.00 V; Cd-111.
    pub fn baseline(electrodes: &[ElectrodeLabel], zone_segment: usize) -> Self {
        let dc_voltages = electrodes
            .iter()
            .map(|l| match l.role {
                Role::Rf => 0.0,
                Role::Dc if l.segment_index == zone_segment => -0.33,
                Role::Dc => 1.00,
            })
            .collect();
        Self { v0: 8.0, omega: 2.0 * std::f64::consts::PI * 15.9e6, dc_voltages, dc_offset: 0.0, stray_field: [0.0; 3], species: IonSpecies::cd111() }
    }

    pub fn validate(&self, n_electrodes: usize) -> Result<(), String> {
        if !(self.v0 >= 0.0 && self.v0.is_finite()) {
            return Err(format!("V0 must be non-negative, got {}", self.v0));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(format!("Omega must be positive, got {}", self.omega));
        }
        if self.dc_voltages.len() != n_electrodes {
            return Err(format!("expected {} static voltages, got {}", n_electrodes, self.dc_voltages.len()));
        }
        self.species.validate()
    }

    /// RF period (s).
    pub fn rf_period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.omega
    }
}

/// Mask plus one solved basis per electrode.
#[derive(Debug, Clone)]
pub struct TrapModel {
    pub params: GeometryParams,
    pub mask: VoxelMask,
    pub bases: Vec<PotentialBasis>,
}

impl TrapModel {
    pub fn voxelize(params: &GeometryParams, spacing: f64) -> Result<VoxelMask, GeometryError> {
        let electrodes = build_trap(params)?;
        voxelize(&electrodes, &GridSpec { domain: params.domain, spacing })
    }

    pub fn solve(params: &GeometryParams, spacing: f64, opts: &SolveOptions) -> Result<Self, crate::Error> {
        let mask = Self::voxelize(params, spacing)?;
        let bases = crate::fields::solve_all(&mask, opts)?;
        Ok(Self { params: params.clone(), mask, bases })
    }

    pub fn labels(&self) -> &[ElectrodeLabel] {
        &self.mask.electrodes
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<usize> {
        self.labels().iter().enumerate().filter(|(_, l)| l.role == role).map(|(i, _)| i).collect()
    }

    /// Potential of all RF electrodes at 1 V together.
    pub fn rf_unit(&self) -> ScalarGrid {
        let mut out = ScalarGrid::zeros(self.mask.grid);
        for id in self.ids_with_role(Role::Rf) {
            for (o, v) in out.values.iter_mut().zip(&self.bases[id].field.values) {
                *o += v;
            }
        }
        out
    }

    /// Static potential of the drive's DC voltages (V).
    pub fn dc_potential(&self, drive: &DriveConfig) -> ScalarGrid {
        let mut out = ScalarGrid::zeros(self.mask.grid);
        for (b, &v) in self.bases.iter().zip(&drive.dc_voltages) {
            if v == 0.0 {
                continue;
            }
            for (o, x) in out.values.iter_mut().zip(&b.field.values) {
                *o += v * x;
            }
        }
        let e = Vector3::from(drive.stray_field);
        if drive.dc_offset != 0.0 || e != Vector3::zeros() {
            let g = out.grid;
            for (idx, o) in out.values.iter_mut().enumerate() {
                *o += drive.dc_offset - e.dot(&g.position(g.unindex(idx)));
            }
        }
        out
    }

    /// Centre of the gap at segment `k` (on the trap axis).
    pub fn zone_center(&self, k: usize) -> Vector3<f64> {
        Vector3::new(self.params.segment_center(k), 0.0, 0.0)
    }

    /// Writes the mask and one `basis_XX.bin` per electrode into `dir`.
    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        self.mask.write_to(&mut BufWriter::new(File::create(dir.join("mask.bin"))?))?;
        for b in &self.bases {
            let path = dir.join(format!("basis_{:02}.bin", b.electrode));
            b.field.write_to(&mut BufWriter::new(File::create(path)?))?;
        }
        let mut log = String::from("electrode,iterations,residual\n");
        for b in &self.bases {
            log += &format!("{},{},{:e}\n", b.electrode, b.iterations, b.residual);
        }
        fs::write(dir.join("solve_log.csv"), log)
    }

    /// Iterations and residual per electrode as logged by [`TrapModel::save`].
    fn read_log(dir: &Path) -> Option<Vec<(usize, f64)>> {
        let text = fs::read_to_string(dir.join("solve_log.csv")).ok()?;
        text.lines()
            .skip(1)
            .map(|l| {
                let mut f = l.split(',').skip(1);
                Some((f.next()?.parse().ok()?, f.next()?.parse().ok()?))
            })
            .collect()
    }

    /// Loads what [`TrapModel::save`] wrote. Without a solve log the residuals
    /// are recomputed and the iteration counts read as zero.
    pub fn load(params: &GeometryParams, dir: &Path) -> io::Result<Self> {
        let labels: Vec<ElectrodeLabel> = build_trap(params).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?.into_iter().map(|e| e.label).collect();
        let mask = VoxelMask::read_from(&mut BufReader::new(File::open(dir.join("mask.bin"))?), labels.clone())?;
        let log = Self::read_log(dir).filter(|l| l.len() == labels.len());
        let mut bases = Vec::with_capacity(labels.len());
        for (id, label) in labels.iter().enumerate() {
            let path = dir.join(format!("basis_{id:02}.bin"));
            let field = ScalarGrid::read_from(&mut BufReader::new(File::open(path)?))?;
            if field.grid != mask.grid {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "basis grid does not match mask"));
            }
            let (iterations, residual) = match &log {
                Some(l) => l[id],
                None => (0, crate::fields::residual_max_norm(&mask, &field.values, 1.0)),
            };
            bases.push(PotentialBasis { electrode: id, label: *label, field, residual, iterations });
        }
        Ok(Self { params: params.clone(), mask, bases })
    }

    /// Content hash of a mask and solver settings; bases solved from equal
    /// keys are interchangeable.
    pub fn cache_key(mask: &VoxelMask, opts: &SolveOptions) -> String {
        let mut h = Sha256::new();
        h.update(b"chiptrap-bases-v2");
        let mut header = Vec::new();
        mask.write_to(&mut header).expect("in-memory write");
        h.update(&header);
        h.update(opts.tol.to_le_bytes());
        h.update((opts.max_iterations as u64).to_le_bytes());
        match opts.method {
            SolverMethod::Multigrid => h.update(b"mg"),
            SolverMethod::Sor { omega } => {
                h.update(b"sor");
                h.update(omega.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    /// Solves the bases, or loads them from `cache_root/<key>` when an earlier
    /// run stored them. Returns the model and whether the cache was hit.
    pub fn solve_cached(params: &GeometryParams, spacing: f64, opts: &SolveOptions, cache_root: &Path) -> Result<(Self, bool), crate::Error> {
        let mask = Self::voxelize(params, spacing)?;
        let dir = cache_root.join(Self::cache_key(&mask, opts));
        if dir.join("complete").exists() {
            if let Ok(model) = Self::load(params, &dir) {
                if model.mask == mask {
                    return Ok((model, true));
                }
            }
        }
        let bases = crate::fields::solve_all(&mask, opts)?;
        let model = Self { params: params.clone(), mask, bases };
        let tmp = cache_root.join(format!(".partial-{}", std::process::id()));
        let _ = fs::remove_dir_all(&tmp);
        model.save(&tmp)?;
        fs::write(tmp.join("complete"), b"")?;
        let _ = fs::remove_dir_all(&dir);
        fs::rename(&tmp, &dir)?;
        Ok((model, false))
    }
}
