//! One function per subcommand. Each writes its CSVs through a [`Sink`] and
//! returns a short human summary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chiptrap::analysis::{pseudopotential, secular_from_pseudo, trap_depth, AnalysisError, DepthResult, SecularAnalysis};
use chiptrap::circuit::{check_operating_point, dissipation, loaded_resonance, quality_factor, scaling_sweep, write_scaling_csv};
use chiptrap::dynamics::{tickle_scan, write_spectrum_csv, TickleOptions};
use chiptrap::geometry::Role;
use chiptrap::heating::{
    boiloff_analysis, fit_heating_rate, lamb_dicke, noise_to_heating, noiseless_raman_dataset, quanta_rate_to_power, simulate_raman_experiment, thermal_field_noise,
    write_dataset_csv,
};
use chiptrap::shuttle::{apply_filter, simulate_transport, solve_waveform, TransportOptions};
use chiptrap::trap::{DriveConfig, TrapModel};
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::config::{GridChoice, RunConfig};
use crate::output::{Header, Sink};
use crate::CliError;

/// Bytes per f64 basis value.
const VALUE_BYTES: u64 = 8;

/// Everything a subcommand needs besides its own config block.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub grid: GridChoice,
    pub sink: Sink,
    pub cache: PathBuf,
}

impl Context {
    /// `out` and `seed` override the config's own values.
    pub fn new(cfg: RunConfig, out: Option<&Path>, seed: Option<u64>, grid: GridChoice) -> Result<Self, CliError> {
        let seed = seed.unwrap_or(cfg.rng_seed);
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        let cache = cfg.cache_dir.as_ref().map(PathBuf::from).unwrap_or_else(|| dir.join("bases"));
        let header = Header {
            config_hash: cfg.hash(),
            seed,
            grid: match grid {
                GridChoice::Default => "default",
                GridChoice::High => "high",
            },
        };
        let sink = Sink::new(&dir, header)?;
        Ok(Self { cfg, seed, grid, sink, cache })
    }

    pub fn spacing(&self) -> f64 {
        self.cfg.spacing(self.grid)
    }

    /// Solved (or cached) bases, with whether the cache was hit and the
    /// wall time spent.
    pub fn model(&self) -> Result<(TrapModel, bool, f64), CliError> {
        let params = self.cfg.geometry_params();
        let mask = TrapModel::voxelize(&params, self.spacing()).map_err(chiptrap::Error::from)?;
        let need = mask.grid.len() as u64 * VALUE_BYTES * mask.electrodes.len() as u64;
        if need > self.cfg.grid.max_basis_memory_bytes {
            return Err(CliError::Compute(format!(
                "{} bases on a {:?} grid need {:.1} GB, above grid.max_basis_memory_bytes ({:.1} GB)",
                mask.electrodes.len(),
                mask.grid.dims,
                need as f64 / 1e9,
                self.cfg.grid.max_basis_memory_bytes as f64 / 1e9
            )));
        }
        std::fs::create_dir_all(&self.cache)?;
        let t = Instant::now();
        let (model, hit) = TrapModel::solve_cached(&params, self.spacing(), &self.cfg.solve_options(), &self.cache)?;
        Ok((model, hit, t.elapsed().as_secs_f64()))
    }

    pub fn drive(&self) -> DriveConfig {
        self.cfg.drive_config(None)
    }

    pub fn seed_position(&self, model: &TrapModel) -> Vector3<f64> {
        match self.cfg.analysis.seed_position_m {
            Some(p) => Vector3::from(p),
            None => model.zone_center(self.cfg.drive.zone_segment),
        }
    }
}

fn label_name(model: &TrapModel, id: usize) -> String {
    let l = model.labels()[id];
    format!("seg{}_{:?}_{:?}", l.segment_index, l.layer, l.side).to_lowercase()
}

pub fn solve(ctx: &Context) -> Result<String, CliError> {
    let (model, hit, secs) = ctx.model()?;
    let key = TrapModel::cache_key(&model.mask, &ctx.cfg.solve_options());
    ctx.sink.csv("solve_report.csv", |w| {
        writeln!(w, "electrode,label,role,iterations,residual")?;
        for b in &model.bases {
            let role = match b.label.role {
                Role::Rf => "rf",
                Role::Dc => "dc",
            };
            writeln!(w, "{},{},{},{},{:.6e}", b.electrode, label_name(&model, b.electrode), role, b.iterations, b.residual)?;
        }
        Ok(())
    })?;
    let how = if hit { "cache hit" } else { "solved" };
    Ok(format!("{} bases {how} in {secs:.1} s: {}", model.bases.len(), ctx.cache.join(key).display()))
}

/// Analysis of the configured operating point.
pub struct Analysis {
    pub model: TrapModel,
    pub drive: DriveConfig,
    pub secular: SecularAnalysis,
    pub depth: Option<DepthResult>,
}

pub fn analysis(ctx: &Context) -> Result<Analysis, CliError> {
    let (model, _, _) = ctx.model()?;
    let drive = ctx.drive();
    let pp = pseudopotential(&model, &drive).map_err(chiptrap::Error::from)?;
    let secular = secular_from_pseudo(&pp, &model.mask, &ctx.seed_position(&model)).map_err(untrapped)?;
    let depth = if ctx.cfg.analysis.depth { Some(trap_depth(&pp.total, &model.mask, &secular.r0).map_err(untrapped)?) } else { None };
    Ok(Analysis { model, drive, secular, depth })
}

fn untrapped(e: AnalysisError) -> CliError {
    match e {
        AnalysisError::Untrapped => CliError::Compute("untrapped: no confining minimum for this configuration".into()),
        e => CliError::Compute(e.to_string()),
    }
}

/// (quantity, computed, target, relative or absolute tolerance, unit).
pub fn comparison_rows(s: &SecularAnalysis, d: Option<&DepthResult>) -> Vec<(&'static str, f64, f64, f64, bool)> {
    let f = s.frequencies_hz();
    let mut rows = vec![
        ("axial_frequency_Hz", f[0], 1.0e6, 0.2, true),
        ("transverse1_frequency_Hz", f[1], 3.3e6, 0.2, true),
        ("transverse2_frequency_Hz", f[2], 4.3e6, 0.2, true),
        ("q", s.q(), 0.62, 0.2, true),
        ("axis_tilt_deg", s.axis_tilt, 40.0, 10.0, false),
    ];
    if let Some(d) = d {
        rows.push(("depth_eV", d.depth, 0.08, 0.3, true));
        rows.push(("escape_tilt_deg", d.escape_tilt_angle, 37.0, 10.0, false));
    }
    rows
}

pub fn within(value: f64, target: f64, tol: f64, relative: bool) -> bool {
    if relative {
        (value / target - 1.0).abs() <= tol
    } else {
        (value - target).abs() <= tol
    }
}

pub fn analyze(ctx: &Context) -> Result<String, CliError> {
    let a = analysis(ctx)?;
    ctx.sink.csv("analysis.csv", |w| a.secular.write_csv(w, a.depth.as_ref()))?;
    let mut summary = format!(
        "f = {:.3}/{:.3}/{:.3} MHz, q = {:.3}",
        a.secular.frequencies_hz()[0] / 1e6,
        a.secular.frequencies_hz()[1] / 1e6,
        a.secular.frequencies_hz()[2] / 1e6,
        a.secular.q()
    );
    if let Some(d) = &a.depth {
        summary += &format!(", depth = {:.4} eV", d.depth);
    }
    if !a.secular.stable {
        summary += "\nunstable: Mathieu parameters outside the first stability region";
    }
    if ctx.cfg.analysis.baseline_comparison {
        ctx.sink.csv("comparison.csv", |w| {
            writeln!(w, "quantity,computed,target,tolerance,tolerance_kind,pass")?;
            for (name, v, t, tol, rel) in comparison_rows(&a.secular, a.depth.as_ref()) {
                let kind = if rel { "relative" } else { "absolute" };
                writeln!(w, "{name},{v:.6e},{t:.6e},{tol},{kind},{}", within(v, t, tol, rel))?;
            }
            Ok(())
        })?;
    }
    Ok(summary)
}

pub fn tickle_options(cfg: &RunConfig) -> TickleOptions {
    let t = &cfg.tickle;
    TickleOptions {
        electrode: t.electrode,
        amplitude: t.amplitude_v,
        gamma: t.gamma_per_s,
        measure_time: t.measure_time_s,
        refine_points: t.refine_points,
        max_peaks: t.max_peaks,
        region_half_width: t.region_half_width_m,
        ..TickleOptions::default()
    }
}

pub fn tickle(ctx: &Context) -> Result<String, CliError> {
    let a = analysis(ctx)?;
    let t = &ctx.cfg.tickle;
    let scan = tickle_scan(&a.model, &a.drive, &a.secular.r0, (t.f_min_hz, t.f_max_hz), t.n_points, &tickle_options(&ctx.cfg)).map_err(chiptrap::Error::from)?;
    ctx.sink.csv("tickle_spectrum.csv", |w| write_spectrum_csv(w, &scan.frequencies, &scan.response))?;
    let tunes = a.secular.beta.map(|b| b * a.drive.omega / (4.0 * std::f64::consts::PI));
    ctx.sink.csv("tickle_peaks.csv", |w| {
        writeln!(w, "peak_Hz")?;
        for p in &scan.peaks {
            writeln!(w, "{p:.6e}")?;
        }
        writeln!(w, "# beta_Omega_over_2_Hz,{:.6e},{:.6e},{:.6e}", tunes[0], tunes[1], tunes[2])
    })?;
    let peaks: Vec<String> = scan.peaks.iter().map(|p| format!("{:.3}", p / 1e6)).collect();
    Ok(format!("tickle peaks at {} MHz", peaks.join(", ")))
}

/// Transport energy for each configured duration.
pub struct ShuttleRun {
    pub max_abs_v: f64,
    /// (duration, quanta, final position error) per duration.
    pub transports: Vec<(f64, f64, f64)>,
    pub constant: bool,
}

pub fn shuttle_run(ctx: &Context) -> Result<ShuttleRun, CliError> {
    let (model, _, _) = ctx.model()?;
    let s = &ctx.cfg.shuttle;
    let drive = ctx.cfg.drive_config(Some(s.from_segment));
    let reference = Some((ctx.cfg.drive_config(Some(s.from_segment)).dc_voltages, ctx.cfg.drive_config(Some(s.to_segment)).dc_voltages));
    let (a, b) = (model.zone_center(s.from_segment), model.zone_center(s.to_segment));
    let base = solve_waveform(&model, &drive, &a, &b, s.durations_s[0], s.omega_z_rad_per_s, s.n_samples, &ctx.cfg.waveform_options(reference)).map_err(chiptrap::Error::from)?;
    let constant = base.series.iter().all(|v| v.iter().all(|x| *x == v[0]));
    ctx.sink.csv("waveform.csv", |w| base.write_csv(w))?;
    let runs: Vec<Result<(f64, f64, f64), CliError>> = s
        .durations_s
        .par_iter()
        .map(|&dur| {
            let ws = base.stretched(dur).resample(s.playback_period_s);
            let played = if s.filter.enabled { apply_filter(&ws, &ctx.cfg.filter()).map_err(chiptrap::Error::from)? } else { ws.clone() };
            let r = simulate_transport(&model, &drive, &played, &ws, &TransportOptions::default()).map_err(chiptrap::Error::from)?;
            Ok((dur, r.quanta, r.final_position_error))
        })
        .collect();
    let transports = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    ctx.sink.csv("transport.csv", |w| {
        writeln!(w, "duration_s,quanta,final_position_error_m,filtered")?;
        for (d, q, e) in &transports {
            writeln!(w, "{d:.6e},{q:.6e},{e:.6e},{}", s.filter.enabled)?;
        }
        Ok(())
    })?;
    Ok(ShuttleRun { max_abs_v: base.max_abs(), transports, constant })
}

pub fn shuttle(ctx: &Context) -> Result<String, CliError> {
    let r = shuttle_run(ctx)?;
    let gains: Vec<String> = r.transports.iter().map(|(d, q, _)| format!("{:.3e} quanta at {:.1} ms", q, d * 1e3)).collect();
    Ok(format!("max |V| {:.3} V; {}", r.max_abs_v, gains.join(", ")))
}

/// Heating summary quantities.
pub struct HeatRun {
    pub eta: f64,
    pub closed_form_rate: f64,
    pub fitted_rate: f64,
    pub ensemble_mean: f64,
    pub noiseless_rate: f64,
    pub boiloff_ratio: f64,
    pub johnson_ratio: f64,
}

pub fn heat_run(ctx: &Context) -> Result<HeatRun, CliError> {
    let h = &ctx.cfg.heat;
    let sp = ctx.cfg.species();
    let err = |e: chiptrap::HeatingError| CliError::from(chiptrap::Error::from(e));
    let eta = lamb_dicke(&ctx.cfg.raman(), h.omega_axial_rad_per_s, &sp).map_err(err)?;
    let closed_form_rate = noise_to_heating(&ctx.cfg.noise(), h.ion_distance_m, h.omega_axial_rad_per_s, &sp).map_err(err)?;
    let exp = ctx.cfg.experiment(eta);
    let data = simulate_raman_experiment(&exp, ctx.seed).map_err(err)?;
    let fit = fit_heating_rate(&data, eta).map_err(err)?;
    ctx.sink.csv("heat_dataset.csv", |w| write_dataset_csv(w, &data))?;
    ctx.sink.csv("heat_result.csv", |w| fit.result.write_csv(w))?;

    let reps = h.experiment.repetitions as u64;
    let fits: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|i| simulate_raman_experiment(&exp, ctx.seed.wrapping_mul(1_000_003).wrapping_add(i)).and_then(|d| fit_heating_rate(&d, eta)).map(|f| f.signed_rate))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let ensemble_mean = fits.iter().sum::<f64>() / fits.len() as f64;
    let noiseless_rate = fit_heating_rate(&noiseless_raman_dataset(&exp).map_err(err)?, eta).map_err(err)?.result.nbar_rate;

    let dark = h.boiloff_depth_ev / h.boiloff_time_s;
    let cold = quanta_rate_to_power(h.experiment.nbar_rate_per_s, h.omega_axial_rad_per_s);
    let boiloff_ratio = boiloff_analysis(h.boiloff_depth_ev, dark, cold).map_err(err)?.ratio_to_cold_rate;
    let johnson = thermal_field_noise(h.johnson_resistance_ohm, h.johnson_temperature_k, h.ion_distance_m).map_err(err)?;
    let johnson_ratio = ctx.cfg.noise().s_e(h.ion_distance_m) / johnson;

    let run = HeatRun { eta, closed_form_rate, fitted_rate: fit.result.nbar_rate, ensemble_mean, noiseless_rate, boiloff_ratio, johnson_ratio };
    ctx.sink.csv("heat_summary.csv", |w| {
        writeln!(w, "quantity,value,unit")?;
        writeln!(w, "lamb_dicke_eta,{:.6e},", run.eta)?;
        writeln!(w, "noise_heating_rate,{:.6e},1/s", run.closed_form_rate)?;
        writeln!(w, "fitted_rate,{:.6e},1/s", run.fitted_rate)?;
        writeln!(w, "ensemble_mean_rate,{:.6e},1/s", run.ensemble_mean)?;
        writeln!(w, "ensemble_size,{reps},")?;
        writeln!(w, "noiseless_rate,{:.6e},1/s", run.noiseless_rate)?;
        writeln!(w, "boiloff_dark_to_cold_ratio,{:.6e},", run.boiloff_ratio)?;
        writeln!(w, "johnson_S_E,{johnson:.6e},V2/m2/Hz")?;
        writeln!(w, "anomalous_to_johnson_ratio,{:.6e},", run.johnson_ratio)?;
        for warn in &fit.warnings {
            writeln!(w, "# warning: {warn}")?;
        }
        Ok(())
    })?;
    Ok(run)
}

pub fn heat(ctx: &Context) -> Result<String, CliError> {
    let r = heat_run(ctx)?;
    Ok(format!("eta = {:.4}, fitted rate {:.3e} /s (ensemble mean {:.3e} /s), noise model {:.3e} /s", r.eta, r.fitted_rate, r.ensemble_mean, r.closed_form_rate))
}

/// Circuit quantities at the configured drive.
pub struct CircuitRun {
    pub q_model: f64,
    pub dissipation_w: f64,
    pub q_used: f64,
    pub loaded_f_hz: f64,
    pub c_self_f: f64,
    pub violations: Vec<String>,
}

pub fn circuit_run(ctx: &Context) -> Result<CircuitRun, CliError> {
    let c = &ctx.cfg.circuit;
    let m = ctx.cfg.circuit_model();
    let d = &ctx.cfg.drive;
    let err = |e: chiptrap::CircuitError| CliError::from(chiptrap::Error::from(e));
    let q_model = quality_factor(&m, d.omega_rad_per_s).map_err(err)?;
    let q_used = c.measured_q.unwrap_or(q_model);
    let dissipation_w = dissipation(d.v0_v, m.c, d.omega_rad_per_s, q_used).map_err(err)?;
    let (loaded_f_hz, c_self_f) = loaded_resonance(&m.resonator, m.c, c.loaded_f_hz).map_err(err)?;
    let drive = ctx.drive();
    let statics: Vec<f64> = drive.dc_voltages.iter().map(|v| v + drive.dc_offset).collect();
    let report = check_operating_point(d.v0_v, d.omega_rad_per_s, &statics, &ctx.cfg.breakdown()).map_err(err)?;
    ctx.sink.csv("circuit.csv", |w| {
        writeln!(w, "quantity,value,unit")?;
        writeln!(w, "Q_model,{q_model:.6e},")?;
        writeln!(w, "Q_used,{q_used:.6e},")?;
        writeln!(w, "P_D,{dissipation_w:.6e},W")?;
        writeln!(w, "loaded_frequency,{loaded_f_hz:.6e},Hz")?;
        writeln!(w, "resonator_self_capacitance,{c_self_f:.6e},F")?;
        writeln!(w, "breakdown_ok,{},", report.ok())?;
        for v in &report.violations {
            writeln!(w, "# violation: {v}")?;
        }
        for v in &report.warnings {
            writeln!(w, "# warning: {v}")?;
        }
        Ok(())
    })?;
    Ok(CircuitRun { q_model, dissipation_w, q_used, loaded_f_hz, c_self_f, violations: report.violations })
}

pub fn circuit(ctx: &Context) -> Result<String, CliError> {
    let r = circuit_run(ctx)?;
    let mut s = format!(
        "Q = {:.2} (model), P_D = {:.3} mW at Q = {:.1}, C_self = {:.3} pF, loaded {:.3} MHz",
        r.q_model,
        r.dissipation_w * 1e3,
        r.q_used,
        r.c_self_f * 1e12,
        r.loaded_f_hz / 1e6
    );
    for v in &r.violations {
        s += &format!("\nbreakdown: {v}");
    }
    Ok(s)
}

pub fn scaling(ctx: &Context) -> Result<String, CliError> {
    let s = &ctx.cfg.scaling;
    let d = &ctx.cfg.drive;
    let rows =
        scaling_sweep(&s.s_values_m, s.h_m, s.q, s.e_max_v_per_m, &ctx.cfg.scaling_model(), &ctx.cfg.circuit_model(), d.v0_v, d.omega_rad_per_s).map_err(chiptrap::Error::from)?;
    let path = ctx.sink.csv("scaling.csv", |w| {
        write_scaling_csv(w, &rows)?;
        for r in &rows {
            if let Some(warn) = &r.warning {
                writeln!(w, "# warning at s = {:.3e} m: {warn}", r.s)?;
            }
        }
        Ok(())
    })?;
    Ok(format!("{} scaling rows written to {}", rows.len(), path.display()))
}
