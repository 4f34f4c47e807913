//! Run configuration. Every key carries its SI unit as a suffix; every
//! section defaults to the baseline preset, so `{}` is the baseline run.

use std::f64::consts::PI;

use chiptrap::circuit::{BreakdownLimits, CircuitModel, DepthCalibration, Resonator, ScalingModel};
use chiptrap::constants::IonSpecies;
use chiptrap::fields::{SolveOptions, SolverMethod};
use chiptrap::geometry::{Aabb, BoundaryCondition, GeometryParams, Role};
use chiptrap::heating::{NoiseModel, RamanConfig, RamanExperiment};
use chiptrap::shuttle::{FilterModel, WaveformOptions};
use chiptrap::trap::DriveConfig;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub grid: GridConfig,
    pub drive: DriveSection,
    pub analysis: AnalysisConfig,
    pub tickle: TickleConfig,
    pub shuttle: ShuttleConfig,
    pub heat: HeatConfig,
    pub circuit: CircuitConfig,
    pub scaling: ScalingConfig,
    pub rng_seed: u64,
    pub output_dir: String,
    /// Basis cache shared between runs; `<output_dir>/bases` when absent.
    pub cache_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            grid: GridConfig::default(),
            drive: DriveSection::default(),
            analysis: AnalysisConfig::default(),
            tickle: TickleConfig::default(),
            shuttle: ShuttleConfig::default(),
            heat: HeatConfig::default(),
            circuit: CircuitConfig::default(),
            scaling: ScalingConfig::default(),
            rng_seed: 0,
            output_dir: "out".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub s_m: f64,
    pub h_m: f64,
    pub t_m: f64,
    pub w_m: f64,
    pub g_m: f64,
    pub n_segments: usize,
    pub undercut_m: f64,
    pub cantilever_length_m: f64,
    pub domain_min_m: [f64; 3],
    pub domain_max_m: [f64; 3],
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let p = GeometryParams::baseline();
        Self {
            s_m: p.s,
            h_m: p.h,
            t_m: p.t,
            w_m: p.w,
            g_m: p.g,
            n_segments: p.n_segments,
            undercut_m: p.undercut,
            cantilever_length_m: p.cantilever_length,
            domain_min_m: p.domain.min,
            domain_max_m: p.domain.max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Multigrid,
    Sor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub spacing_m: f64,
    /// Spacing used with `--grid high`.
    pub high_spacing_m: f64,
    /// Relative max-norm residual.
    pub tol: f64,
    pub max_iterations: usize,
    pub method: Method,
    pub sor_omega: f64,
    /// Refuse to allocate bases beyond this many bytes.
    pub max_basis_memory_bytes: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { spacing_m: 2e-6, high_spacing_m: 1e-6, tol: 1e-6, max_iterations: 400, method: Method::Multigrid, sor_omega: 1.9, max_basis_memory_bytes: 4 << 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SpeciesConfig {
    pub name: String,
    pub mass_kg: f64,
    #[serde(rename = "charge_C")]
    pub charge_c: f64,
}

impl Default for SpeciesConfig {
    fn default() -> Self {
        let s = IonSpecies::cd111();
        Self { name: s.name, mass_kg: s.mass, charge_c: s.charge }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DriveSection {
    #[serde(rename = "V0_V")]
    pub v0_v: f64,
    #[serde(rename = "Omega_rad_per_s")]
    pub omega_rad_per_s: f64,
    /// Segment whose DC electrodes form the well.
    pub zone_segment: usize,
    #[serde(rename = "endcap_V")]
    pub endcap_v: f64,
    #[serde(rename = "center_V")]
    pub center_v: f64,
    /// Explicit static voltage per electrode id; overrides the endcap and
    /// centre levels.
    #[serde(rename = "dc_voltages_V")]
    pub dc_voltages_v: Option<Vec<f64>>,
    #[serde(rename = "dc_offset_V")]
    pub dc_offset_v: f64,
    #[serde(rename = "stray_field_V_per_m")]
    pub stray_field_v_per_m: [f64; 3],
    pub species: SpeciesConfig,
}

impl Default for DriveSection {
    fn default() -> Self {
        Self {
            v0_v: 8.0,
            omega_rad_per_s: 2.0 * PI * 15.9e6,
            zone_segment: 1,
            endcap_v: 1.0,
            center_v: -0.33,
            dc_voltages_v: None,
            dc_offset_v: 0.0,
            stray_field_v_per_m: [0.0; 3],
            species: SpeciesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub depth: bool,
    pub baseline_comparison: bool,
    /// Start of the minimum search; the zone centre when absent.
    pub seed_position_m: Option<[f64; 3]>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { depth: true, baseline_comparison: true, seed_position_m: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TickleConfig {
    #[serde(rename = "f_min_Hz")]
    pub f_min_hz: f64,
    #[serde(rename = "f_max_Hz")]
    pub f_max_hz: f64,
    pub n_points: usize,
    pub electrode: usize,
    #[serde(rename = "amplitude_V")]
    pub amplitude_v: f64,
    pub gamma_per_s: f64,
    pub measure_time_s: f64,
    pub refine_points: usize,
    pub max_peaks: usize,
    pub region_half_width_m: f64,
}

impl Default for TickleConfig {
    fn default() -> Self {
        let d = chiptrap::dynamics::TickleOptions::default();
        Self {
            f_min_hz: 0.5e6,
            f_max_hz: 5.0e6,
            n_points: 46,
            electrode: d.electrode,
            amplitude_v: d.amplitude,
            gamma_per_s: d.gamma,
            measure_time_s: d.measure_time,
            refine_points: d.refine_points,
            max_peaks: d.max_peaks,
            region_half_width_m: d.region_half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    pub resistance_ohm: f64,
    #[serde(rename = "capacitance_F")]
    pub capacitance_f: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let f = FilterModel::baseline();
        Self { enabled: false, resistance_ohm: f.resistance, capacitance_f: f.capacitance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ShuttleConfig {
    pub from_segment: usize,
    pub to_segment: usize,
    pub omega_z_rad_per_s: f64,
    /// The waveform is solved for the first duration and stretched to the
    /// others.
    pub durations_s: Vec<f64>,
    pub n_samples: usize,
    pub playback_period_s: f64,
    #[serde(rename = "voltage_bound_V")]
    pub voltage_bound_v: f64,
    pub regularization: f64,
    pub transverse_weight: f64,
    pub filter: FilterConfig,
}

impl Default for ShuttleConfig {
    fn default() -> Self {
        let w = WaveformOptions::default();
        Self {
            from_segment: 1,
            to_segment: 2,
            omega_z_rad_per_s: 2.0 * PI * 0.5e6,
            durations_s: vec![2.5e-3, 25e-3, 250e-3],
            n_samples: 101,
            playback_period_s: 0.5e-6,
            voltage_bound_v: w.voltage_bound,
            regularization: w.regularization,
            transverse_weight: w.transverse_weight,
            filter: FilterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RamanSection {
    pub wavelength_m: f64,
    pub beam_angle_rad: f64,
    pub axis_angle_rad: f64,
    #[serde(rename = "detuning_Hz")]
    pub detuning_hz: f64,
    #[serde(rename = "beatnote_Hz")]
    pub beatnote_hz: f64,
    pub probe_time_s: f64,
}

impl Default for RamanSection {
    fn default() -> Self {
        let r = RamanConfig::baseline();
        Self {
            wavelength_m: r.wavelength,
            beam_angle_rad: r.beam_angle,
            axis_angle_rad: r.axis_angle,
            detuning_hz: r.detuning,
            beatnote_hz: r.beatnote,
            probe_time_s: r.probe_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub nbar0: f64,
    pub nbar_rate_per_s: f64,
    pub r0_rad_per_s: f64,
    pub delays_s: Vec<f64>,
    pub probe_times_s: Vec<f64>,
    pub shots: u64,
    /// Seeded repetitions for the ensemble mean.
    pub repetitions: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            nbar0: 10.0,
            nbar_rate_per_s: 1e6,
            r0_rad_per_s: 1e5,
            delays_s: vec![0.0, 0.5e-3, 1.0e-3],
            probe_times_s: vec![2e-6, 4e-6, 6e-6, 8e-6, 10e-6],
            shots: 200,
            repetitions: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct HeatConfig {
    #[serde(rename = "S_E_V2_per_m2_per_Hz")]
    pub s_e: f64,
    pub ion_distance_m: f64,
    pub noise_exponent: f64,
    pub omega_axial_rad_per_s: f64,
    pub raman: RamanSection,
    pub experiment: ExperimentConfig,
    #[serde(rename = "boiloff_depth_eV")]
    pub boiloff_depth_ev: f64,
    pub boiloff_time_s: f64,
    pub johnson_resistance_ohm: f64,
    #[serde(rename = "johnson_temperature_K")]
    pub johnson_temperature_k: f64,
}

impl Default for HeatConfig {
    fn default() -> Self {
        Self {
            s_e: 2.0e-8,
            ion_distance_m: 30e-6,
            noise_exponent: 4.0,
            omega_axial_rad_per_s: 2.0 * PI * 0.9e6,
            raman: RamanSection::default(),
            experiment: ExperimentConfig::default(),
            boiloff_depth_ev: 0.08,
            boiloff_time_s: 0.1,
            johnson_resistance_ohm: 5.0,
            johnson_temperature_k: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CircuitConfig {
    #[serde(rename = "capacitance_F")]
    pub capacitance_f: f64,
    pub series_resistance_ohm: f64,
    pub tan_delta: f64,
    pub resonator_unloaded_q: f64,
    #[serde(rename = "resonator_f_self_Hz")]
    pub resonator_f_self_hz: f64,
    #[serde(rename = "resonator_c_self_F")]
    pub resonator_c_self_f: Option<f64>,
    /// Quality factor used for the dissipation; the model value when absent.
    pub measured_q: Option<f64>,
    #[serde(rename = "loaded_f_Hz")]
    pub loaded_f_hz: Option<f64>,
    #[serde(rename = "static_limit_V")]
    pub static_limit_v: f64,
    #[serde(rename = "static_warning_V")]
    pub static_warning_v: f64,
    #[serde(rename = "rf_limit_V")]
    pub rf_limit_v: f64,
    #[serde(rename = "rf_limit_f_Hz")]
    pub rf_limit_f_hz: f64,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        let c = CircuitModel::baseline();
        let l = BreakdownLimits::default();
        Self {
            capacitance_f: c.c,
            series_resistance_ohm: c.r_s,
            tan_delta: c.tan_delta,
            resonator_unloaded_q: c.resonator.unloaded_q,
            resonator_f_self_hz: c.resonator.f_self,
            resonator_c_self_f: None,
            measured_q: Some(55.0),
            loaded_f_hz: Some(15.9e6),
            static_limit_v: l.static_limit,
            static_warning_v: l.static_warning,
            rf_limit_v: l.rf_limit,
            rf_limit_f_hz: l.rf_limit_frequency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub s_values_m: Vec<f64>,
    pub h_m: f64,
    pub q: f64,
    #[serde(rename = "E_max_V_per_m")]
    pub e_max_v_per_m: f64,
    pub sigma_exponent: f64,
    pub power_density_exponent: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub s_ref_m: f64,
    pub h_ref_m: f64,
    pub q_ref: f64,
    #[serde(rename = "E_max_ref_V_per_m")]
    pub e_max_ref_v_per_m: f64,
    #[serde(rename = "depth_ref_eV")]
    pub depth_ref_ev: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        let m = ScalingModel::default();
        Self {
            s_values_m: (10..=80).step_by(5).map(|u| u as f64 / 1e6).collect(),
            h_m: 4e-6,
            q: 0.62,
            e_max_v_per_m: 1e7,
            sigma_exponent: m.sigma_exponent,
            power_density_exponent: m.power_density_exponent,
            aspect_min: m.aspect_range.0,
            aspect_max: m.aspect_range.1,
            s_ref_m: 60e-6,
            h_ref_m: 4e-6,
            q_ref: 0.62,
            e_max_ref_v_per_m: 1e7,
            depth_ref_ev: 0.08,
        }
    }
}

/// Which grid spacing a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum GridChoice {
    #[default]
    Default,
    High,
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys and wrong types with a message
    /// that names the offending key.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if inner.is_syntax() || inner.is_eof() {
                format!("invalid JSON: {inner}")
            } else {
                format!("schema error at `{path}`: {inner}")
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the canonical serialization (first 16 hex digits of SHA-256).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    pub fn geometry_params(&self) -> GeometryParams {
        let g = &self.geometry;
        GeometryParams {
            s: g.s_m,
            h: g.h_m,
            t: g.t_m,
            w: g.w_m,
            g: g.g_m,
            n_segments: g.n_segments,
            undercut: g.undercut_m,
            cantilever_length: g.cantilever_length_m,
            domain: Aabb::new(g.domain_min_m, g.domain_max_m),
            boundary_condition: BoundaryCondition::GroundedBox,
        }
    }

    pub fn spacing(&self, grid: GridChoice) -> f64 {
        match grid {
            GridChoice::Default => self.grid.spacing_m,
            GridChoice::High => self.grid.high_spacing_m,
        }
    }

    pub fn solve_options(&self) -> SolveOptions {
        let method = match self.grid.method {
            Method::Multigrid => SolverMethod::Multigrid,
            Method::Sor => SolverMethod::Sor { omega: self.grid.sor_omega },
        };
        SolveOptions { tol: self.grid.tol, max_iterations: self.grid.max_iterations, method }
    }

    pub fn species(&self) -> IonSpecies {
        let s = &self.drive.species;
        IonSpecies { name: s.name.clone(), mass: s.mass_kg, charge: s.charge_c }
    }

    /// Drive for the configured zone (or `zone` when given).
    pub fn drive_config(&self, zone: Option<usize>) -> DriveConfig {
        let d = &self.drive;
        let zone = zone.unwrap_or(d.zone_segment);
        let labels: Vec<_> = chiptrap::geometry::build_trap(&self.geometry_params()).map(|es| es.into_iter().map(|e| e.label).collect()).unwrap_or_default();
        let dc_voltages = match &d.dc_voltages_v {
            Some(v) => v.clone(),
            None => labels
                .iter()
                .map(|l| match l.role {
                    Role::Rf => 0.0,
                    Role::Dc if l.segment_index == zone => d.center_v,
                    Role::Dc => d.endcap_v,
                })
                .collect(),
        };
        DriveConfig { v0: d.v0_v, omega: d.omega_rad_per_s, dc_voltages, dc_offset: d.dc_offset_v, stray_field: d.stray_field_v_per_m, species: self.species() }
    }

    pub fn waveform_options(&self, reference: Option<(Vec<f64>, Vec<f64>)>) -> WaveformOptions {
        let s = &self.shuttle;
        WaveformOptions { regularization: s.regularization, voltage_bound: s.voltage_bound_v, transverse_weight: s.transverse_weight, reference, ..WaveformOptions::default() }
    }

    pub fn filter(&self) -> FilterModel {
        FilterModel { capacitance: self.shuttle.filter.capacitance_f, resistance: self.shuttle.filter.resistance_ohm }
    }

    pub fn raman(&self) -> RamanConfig {
        let r = &self.heat.raman;
        RamanConfig {
            wavelength: r.wavelength_m,
            beam_angle: r.beam_angle_rad,
            axis_angle: r.axis_angle_rad,
            detuning: r.detuning_hz,
            beatnote: r.beatnote_hz,
            probe_time: r.probe_time_s,
        }
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel { s_e_ref: self.heat.s_e, d_ref: self.heat.ion_distance_m, exponent: self.heat.noise_exponent }
    }

    pub fn experiment(&self, eta: f64) -> RamanExperiment {
        let e = &self.heat.experiment;
        RamanExperiment { nbar0: e.nbar0, nbar_rate: e.nbar_rate_per_s, eta, r0: e.r0_rad_per_s, delays: e.delays_s.clone(), probe_times: e.probe_times_s.clone(), shots: e.shots }
    }

    pub fn circuit_model(&self) -> CircuitModel {
        let c = &self.circuit;
        CircuitModel {
            c: c.capacitance_f,
            r_s: c.series_resistance_ohm,
            tan_delta: c.tan_delta,
            resonator: Resonator { unloaded_q: c.resonator_unloaded_q, f_self: c.resonator_f_self_hz, c_self: c.resonator_c_self_f },
        }
    }

    pub fn breakdown(&self) -> BreakdownLimits {
        let c = &self.circuit;
        BreakdownLimits { static_limit: c.static_limit_v, static_warning: c.static_warning_v, rf_limit: c.rf_limit_v, rf_limit_frequency: c.rf_limit_f_hz }
    }

    pub fn scaling_model(&self) -> ScalingModel {
        let s = &self.scaling;
        ScalingModel {
            sigma_exponent: s.sigma_exponent,
            power_density_exponent: s.power_density_exponent,
            aspect_range: (s.aspect_min, s.aspect_max),
            calibration: Some(DepthCalibration { s_ref: s.s_ref_m, h_ref: s.h_ref_m, q_ref: s.q_ref, e_max_ref: s.e_max_ref_v_per_m, depth_ref: s.depth_ref_ev }),
        }
    }

    /// Range checks that the schema cannot express.
    pub fn validate(&self) -> Result<(), String> {
        self.geometry_params().validate().map_err(|e| format!("geometry: {e}"))?;
        let g = &self.grid;
        if !(g.spacing_m > 0.0 && g.high_spacing_m > 0.0) {
            return Err("grid: spacing_m and high_spacing_m must be positive".into());
        }
        if !(g.tol > 0.0 && g.tol < 1.0) || g.max_iterations == 0 {
            return Err("grid: tol must lie in (0, 1) and max_iterations be positive".into());
        }
        if g.method == Method::Sor && !(g.sor_omega > 0.0 && g.sor_omega < 2.0) {
            return Err("grid: sor_omega must lie in (0, 2)".into());
        }
        let n = self.geometry.n_segments;
        if self.drive.zone_segment >= n {
            return Err(format!("drive: zone_segment {} outside 0..{n}", self.drive.zone_segment));
        }
        self.drive_config(None).validate(4 * n).map_err(|e| format!("drive: {e}"))?;
        if self.shuttle.from_segment >= n || self.shuttle.to_segment >= n {
            return Err("shuttle: segments out of range".into());
        }
        if self.shuttle.durations_s.is_empty() || self.shuttle.durations_s.iter().any(|d| !(*d >= 0.0)) {
            return Err("shuttle: durations_s must be non-empty and non-negative".into());
        }
        if self.shuttle.n_samples < 2 || !(self.shuttle.playback_period_s > 0.0) {
            return Err("shuttle: need n_samples >= 2 and a positive playback period".into());
        }
        if self.tickle.electrode >= 4 * n {
            return Err(format!("tickle: electrode {} outside 0..{}", self.tickle.electrode, 4 * n));
        }
        if self.scaling.s_values_m.iter().any(|s| !(*s > 0.0)) {
            return Err("scaling: s_values_m must be positive".into());
        }
        if self.heat.experiment.repetitions == 0 {
            return Err("heat: experiment.repetitions must be positive".into());
        }
        Ok(())
    }
}

/// The published JSON schema of [`RunConfig`].
pub fn schema_value() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}
