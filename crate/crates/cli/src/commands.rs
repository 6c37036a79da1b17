//! Subcommand execution: build states and evolutions from the config,
//! run the requested computation, and write deterministic CSV artifacts
//! plus a manifest.
//!
//! All numeric output uses 17 significant digits; orderings are fixed
//! (trajectory index, then time), so identical (config, seed, version)
//! yields identical digests regardless of the thread budget.

use num_complex::Complex64;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use qflux_core::bohm::{
    self, estimate_crossing_measures, exit_statistics, run_ensemble, truncated_current,
    IntegratorOptions,
};
use qflux_core::evolve::{Evolution, EvolveMethod, Potential};
use qflux_core::exec;
use qflux_core::flux::{
    check_cpc, exit_time_density, flux_series, uniform_times, verify_fast, FastConfig,
    FluxSeries, PatchGroups, Region, SolidAngle, SurfaceMesh,
};
use qflux_core::state::{
    discretize, make_gaussian, read_checkpoint, sample_positions, write_checkpoint, GaussianSum,
    GridSpec, WaveState,
};

use crate::config::RawConfig;
use crate::manifest::RunManifest;
use crate::{CliError, Ctx};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitMethod {
    Flux,
    Ensemble,
    Both,
}

#[derive(Debug, Clone)]
pub enum Command {
    Evolve,
    Flux,
    ExitStats { method: ExitMethod },
    CpcCheck,
    VerifyFast { radii: Option<Vec<f64>> },
    Sample,
    Trajectories,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Evolve => "evolve",
            Command::Flux => "flux",
            Command::ExitStats { .. } => "exit-stats",
            Command::CpcCheck => "cpc-check",
            Command::VerifyFast { .. } => "verify-fast",
            Command::Sample => "sample",
            Command::Trajectories => "trajectories",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// 0 keeps the default thread pool; performance only, never results.
    pub threads: usize,
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

// ---------------------------------------------------------------------------
// builders

fn build_state(cfg: &RawConfig) -> Result<WaveState, CliError> {
    let st = cfg.require_section("state")?;
    let kind = st.text_or("kind", "gaussian")?;
    match kind {
        "gaussian" => {
            let dim = st.integer_or("dim", 3)?;
            let sigma = st.positive("sigma")?;
            let mass = st.positive("mass")?;
            let center = st.point_or("center", dim, [0.0; 3])?;
            let momentum = st.point_or("momentum", dim, [0.0; 3])?;
            Ok(WaveState::Gaussian(
                make_gaussian(dim, center, momentum, sigma, mass).ctx("state.gaussian")?,
            ))
        }
        "gaussian-sum" => {
            let dim = st.integer_or("dim", 1)?;
            let mass = st.positive("mass")?;
            let sigma_default = st.positive_or("sigma", 1.0)?;
            let count = st.integer_or("count", 2)?;
            if count == 0 || count > 4 {
                return Err(CliError::Config {
                    line: 0,
                    message: "gaussian-sum count must be in 1..=4".into(),
                });
            }
            let mut parts = Vec::with_capacity(count);
            for i in 1..=count {
                let coeff = st
                    .entry(&format!("coeff_{i}"))
                    .map(|_| st.tuple(&format!("coeff_{i}")))
                    .transpose()?
                    .unwrap_or_else(|| vec![1.0, 0.0]);
                let c = Complex64::new(coeff[0], *coeff.get(1).unwrap_or(&0.0));
                let center = st.point_or(&format!("center_{i}"), dim, [0.0; 3])?;
                let momentum = st.point_or(&format!("momentum_{i}"), dim, [0.0; 3])?;
                let sigma = st.positive_or(&format!("sigma_{i}"), sigma_default)?;
                parts.push((
                    c,
                    make_gaussian(dim, center, momentum, sigma, mass).ctx("state.gaussian-sum")?,
                ));
            }
            Ok(WaveState::Sum(GaussianSum::new(parts).ctx("state.gaussian-sum")?))
        }
        "checkpoint" => {
            let path = st.text("path")?;
            Ok(WaveState::Grid(
                read_checkpoint(Path::new(path)).ctx("state.checkpoint")?,
            ))
        }
        other => Err(CliError::Config {
            line: 0,
            message: format!("unknown state kind `{other}`"),
        }),
    }
}

fn build_grid_spec(cfg: &RawConfig, dim: usize) -> Result<GridSpec, CliError> {
    let g = cfg.require_section("grid")?;
    let n = g.tuple("n")?;
    let length = g.tuple("length")?;
    let broadcast = |v: &[f64]| -> Vec<f64> {
        if v.len() == 1 {
            vec![v[0]; dim]
        } else {
            v.to_vec()
        }
    };
    let n = broadcast(&n);
    let length = broadcast(&length);
    if n.len() != dim || length.len() != dim {
        return Err(CliError::Config {
            line: 0,
            message: format!("[grid] n and length must have {dim} component(s)"),
        });
    }
    let spec = if dim == 1 {
        GridSpec::new_1d(n[0] as usize, length[0])
    } else {
        GridSpec::new_3d(
            [n[0] as usize, n[1] as usize, n[2] as usize],
            [length[0], length[1], length[2]],
        )
    };
    spec.ctx("grid")
}

/// Initial state as a grid state, discretizing analytic states when a
/// [grid] section is present.
fn as_grid_state(cfg: &RawConfig, state: &WaveState) -> Result<WaveState, CliError> {
    match state {
        WaveState::Grid(_) => Ok(state.clone()),
        _ => {
            let spec = build_grid_spec(cfg, state.dim())?;
            let report = discretize(state, &spec).ctx("discretize")?;
            Ok(WaveState::Grid(report.state))
        }
    }
}

fn build_evolution(cfg: &RawConfig, state: &WaveState) -> Result<Evolution, CliError> {
    let ev = cfg.require_section("evolution")?;
    let t_end = ev.positive("t_end")?;
    let default_method = if state.is_analytic() {
        "analytic-free"
    } else {
        "spectral-free"
    };
    let method = ev.text_or("method", default_method)?;
    match method {
        "analytic-free" => Evolution::build(state.clone(), EvolveMethod::AnalyticFree, t_end)
            .ctx("evolution.analytic-free"),
        "spectral-free" => {
            let dt_frame = ev.positive("dt_frame")?;
            let grid = as_grid_state(cfg, state)?;
            Evolution::build(grid, EvolveMethod::SpectralFree { dt_frame }, t_end)
                .ctx("evolution.spectral-free")
        }
        "split-step" => {
            let dt = ev.positive("dt")?;
            let frame_every = ev.integer_or("frame_every", 10)?.max(1);
            let potential = build_potential(cfg)?;
            let grid = as_grid_state(cfg, state)?;
            Evolution::build(
                grid,
                EvolveMethod::SplitStep {
                    potential,
                    dt,
                    frame_every,
                },
                t_end,
            )
            .ctx("evolution.split-step")
        }
        other => Err(CliError::Config {
            line: 0,
            message: format!("unknown evolution method `{other}`"),
        }),
    }
}

fn build_potential(cfg: &RawConfig) -> Result<Potential, CliError> {
    let ev = cfg.require_section("evolution")?;
    match ev.text_or("potential", "zero")? {
        "zero" => Ok(Potential::Zero),
        "gaussian-bump" => Ok(Potential::GaussianBump {
            v0: ev.number("v0")?,
            a: ev.positive("a")?,
        }),
        "square-barrier" => Ok(Potential::SquareBarrier {
            v0: ev.number("v0")?,
            a: ev.positive("a")?,
        }),
        other => Err(CliError::Config {
            line: 0,
            message: format!("unknown potential `{other}`"),
        }),
    }
}

fn build_region(cfg: &RawConfig, dim: usize) -> Result<Region, CliError> {
    let rg = cfg.require_section("region")?;
    let default_kind = if dim == 1 { "interval" } else { "ball" };
    match rg.text_or("kind", default_kind)? {
        "ball" => Region::ball(
            rg.point_or("center", 3, [0.0; 3])?,
            rg.positive("radius")?,
        )
        .ctx("region.ball"),
        "interval" => {
            Region::interval(rg.number("a")?, rg.number("b")?).ctx("region.interval")
        }
        other => Err(CliError::Config {
            line: 0,
            message: format!("unknown region kind `{other}`"),
        }),
    }
}

fn build_mesh(cfg: &RawConfig, region: &Region) -> Result<SurfaceMesh, CliError> {
    let s = cfg.section("surface");
    let n_theta = s.integer_or("n_theta", 32)?;
    let n_phi = s.integer_or("n_phi", 64)?;
    Ok(region.surface_mesh(n_theta, n_phi))
}

fn build_solid(cfg: &RawConfig, dim: usize) -> Result<SolidAngle, CliError> {
    let f = cfg.require_section("fast")?;
    let default = if dim == 1 { "right" } else { "full" };
    match f.text_or("sigma", default)? {
        "full" => Ok(SolidAngle::Full),
        "right" => Ok(SolidAngle::Right),
        "left" => Ok(SolidAngle::Left),
        "cap" => {
            let axis = f.point_or("cap_axis", 3, [1.0, 0.0, 0.0])?;
            let half_angle = f.positive("cap_angle_deg")?.to_radians();
            SolidAngle::cap(axis, half_angle).ctx("fast.cap")
        }
        other => Err(CliError::Config {
            line: 0,
            message: format!("unknown sigma subset `{other}`"),
        }),
    }
}

fn integrator_options(cfg: &RawConfig) -> Result<IntegratorOptions, CliError> {
    let en = cfg.section("ensemble");
    Ok(IntegratorOptions {
        rtol: en.positive_or("rtol", 1e-8)?,
        atol: en.positive_or("atol", 1e-10)?,
        eps_node: en.positive_or("eps_node", 1e-12)?,
        ..IntegratorOptions::default()
    })
}

// ---------------------------------------------------------------------------
// entry point

/// Execute a subcommand: write artifacts plus `manifest.txt` into
/// `out_dir`, returning the manifest.
pub fn run(
    command: &Command,
    cfg: &RawConfig,
    out_dir: &Path,
    overrides: &Overrides,
) -> Result<RunManifest, CliError> {
    fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new(command.name(), &cfg.text);
    if let Some(seed) = overrides.seed {
        manifest.overrides.push(format!("override seed = {seed}"));
    }
    if overrides.threads > 0 {
        manifest
            .overrides
            .push(format!("override threads = {}", overrides.threads));
    }
    let started = Instant::now();
    let result = exec::with_thread_budget(overrides.threads, || {
        dispatch(command, cfg, out_dir, overrides, &mut manifest)
    });
    result?;
    manifest.add_timing("total", started.elapsed().as_secs_f64());
    manifest.write(out_dir)?;
    Ok(manifest)
}

fn dispatch(
    command: &Command,
    cfg: &RawConfig,
    out: &Path,
    overrides: &Overrides,
    manifest: &mut RunManifest,
) -> Result<(), CliError> {
    match command {
        Command::Evolve => cmd_evolve(cfg, out, manifest),
        Command::Flux => cmd_flux(cfg, out, manifest),
        Command::ExitStats { method } => cmd_exit_stats(cfg, out, overrides, *method, manifest),
        Command::CpcCheck => cmd_cpc(cfg, out, manifest),
        Command::VerifyFast { radii } => cmd_verify_fast(cfg, out, radii.as_deref(), manifest),
        Command::Sample => cmd_sample(cfg, out, overrides, manifest),
        Command::Trajectories => cmd_trajectories(cfg, out, overrides, manifest),
    }
}

fn seed_of(cfg: &RawConfig, overrides: &Overrides) -> Result<u64, CliError> {
    if let Some(seed) = overrides.seed {
        return Ok(seed);
    }
    Ok(cfg.section("ensemble").integer_or("seed", 0)? as u64)
}

// ---------------------------------------------------------------------------
// commands

fn cmd_evolve(cfg: &RawConfig, out: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    let state = build_state(cfg)?;
    let evolution = build_evolution(cfg, &state)?;
    if evolution.frames().is_empty() {
        return Err(CliError::Usage(
            "evolve writes grid frames; use a spectral-free or split-step method".into(),
        ));
    }
    let mut index_file = String::new();
    for (i, frame) in evolution.frames().iter().enumerate() {
        let name = format!("frame_{i:06}.qfx");
        write_checkpoint(&frame.state, &out.join(&name)).ctx("write frame")?;
        index_file.push_str(&format!("{i} {} {name}\n", fmt(frame.time)));
        manifest.record_file(out, &name)?;
    }
    fs::write(out.join("frames.txt"), index_file)?;
    manifest.record_file(out, "frames.txt")?;
    Ok(())
}

fn flux_times(cfg: &RawConfig, evolution: &Evolution) -> Result<Vec<f64>, CliError> {
    let fx = cfg.require_section("flux")?;
    let (t0, t1) = evolution.time_range();
    let horizon = fx.positive_or("horizon", t1)?;
    let steps = fx.integer_or("time_steps", 400)?.max(2);
    Ok(uniform_times(t0, horizon, steps))
}

fn write_flux_csv(out: &Path, name: &str, series: &FluxSeries) -> Result<(), CliError> {
    let mut f = fs::File::create(out.join(name))?;
    writeln!(f, "t,patch_id,flux,total,cumulative")?;
    for (ti, row) in series.per_patch.iter().enumerate() {
        for (p, v) in row.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{}",
                fmt(series.times[ti]),
                p,
                fmt(*v),
                fmt(series.totals[ti]),
                fmt(series.cumulative[ti]),
            )?;
        }
    }
    Ok(())
}

fn cmd_flux(cfg: &RawConfig, out: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    let state = build_state(cfg)?;
    let evolution = build_evolution(cfg, &state)?;
    let region = build_region(cfg, evolution.dim())?;
    let mesh = build_mesh(cfg, &region)?;
    let times = flux_times(cfg, &evolution)?;
    let series = flux_series(&evolution, &mesh, &times).ctx("flux series")?;
    write_flux_csv(out, "flux.csv", &series)?;
    manifest.record_file(out, "flux.csv")?;
    Ok(())
}

fn cmd_cpc(cfg: &RawConfig, out: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    let state = build_state(cfg)?;
    let evolution = build_evolution(cfg, &state)?;
    let region = build_region(cfg, evolution.dim())?;
    let mesh = build_mesh(cfg, &region)?;
    let times = flux_times(cfg, &evolution)?;
    let tol = cfg.section("flux").positive_or("cpc_tol", 1e-9)?;
    let report = check_cpc(&evolution, &mesh, &times, tol).ctx("cpc check")?;
    let mut f = fs::File::create(out.join("cpc.csv"))?;
    writeln!(f, "t,patch_id,value")?;
    for v in &report.violations {
        writeln!(f, "{},{},{}", fmt(v.time), v.patch, fmt(v.value))?;
    }
    drop(f);
    manifest.record_file(out, "cpc.csv")?;
    let summary = format!(
        "holds {}\nviolations {}\nmax_flux_density {}\n",
        report.holds,
        report.violations.len(),
        fmt(report.max_flux_density),
    );
    fs::write(out.join("cpc_summary.txt"), summary)?;
    manifest.record_file(out, "cpc_summary.txt")?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_exit_stats(
    cfg: &RawConfig,
    out: &Path,
    overrides: &Overrides,
    method: ExitMethod,
    manifest: &mut RunManifest,
) -> Result<(), CliError> {
    let state = build_state(cfg)?;
    let evolution = build_evolution(cfg, &state)?;
    let region = build_region(cfg, evolution.dim())?;
    let mesh = build_mesh(cfg, &region)?;
    let en = cfg.require_section("ensemble")?;
    let outside_tol = en.positive_or("outside_tol", 1e-6)?;

    let flux_part = matches!(method, ExitMethod::Flux | ExitMethod::Both);
    let ensemble_part = matches!(method, ExitMethod::Ensemble | ExitMethod::Both);

    let mut series = None;
    if flux_part {
        let started = Instant::now();
        let times = flux_times(cfg, &evolution)?;
        let s = exit_time_density(&evolution, &region, &mesh, &times, outside_tol)
            .ctx("exit-time density")?;
        write_flux_csv(out, "flux.csv", &s)?;
        manifest.record_file(out, "flux.csv")?;
        manifest.add_timing("flux", started.elapsed().as_secs_f64());
        series = Some(s);
    }

    if ensemble_part {
        let started = Instant::now();
        let count = en.integer_or("count", 1000)?.max(1);
        let seed = seed_of(cfg, overrides)?;
        let horizon = en.positive("horizon")?;
        let opts = integrator_options(cfg)?;
        let snapshot_times = en
            .entry("snapshot_times")
            .map(|_| en.tuple("snapshot_times"))
            .transpose()?
            .unwrap_or_default();
        let ensemble = run_ensemble(
            &evolution,
            &region,
            &mesh,
            count,
            seed,
            horizon,
            &opts,
            &snapshot_times,
        )
        .ctx("ensemble")?;
        manifest.add_timing("ensemble", started.elapsed().as_secs_f64());

        // exits.csv: one row per trajectory, empty fields when no exit
        let mut f = fs::File::create(out.join("exits.csv"))?;
        writeln!(f, "traj_id,t_e,x,y,z,patch_id")?;
        for (i, rec) in ensemble.trajectories.iter().enumerate() {
            match &rec.exit {
                Some(e) => writeln!(
                    f,
                    "{i},{},{},{},{},{}",
                    fmt(e.time),
                    fmt(e.position[0]),
                    fmt(e.position[1]),
                    fmt(e.position[2]),
                    e.patch
                )?,
                None => writeln!(f, "{i},,,,,")?,
            }
        }
        drop(f);
        manifest.record_file(out, "exits.csv")?;

        let mut f = fs::File::create(out.join("crossings.csv"))?;
        writeln!(f, "traj_id,time,sign,patch_id")?;
        for (i, rec) in ensemble.trajectories.iter().enumerate() {
            for c in &rec.crossings {
                writeln!(f, "{i},{},{},{}", fmt(c.time), c.sign, c.patch)?;
            }
        }
        drop(f);
        manifest.record_file(out, "crossings.csv")?;

        if !snapshot_times.is_empty() {
            let mut f = fs::File::create(out.join("snapshots.csv"))?;
            writeln!(f, "traj_id,t,x,y,z")?;
            for (i, rec) in ensemble.trajectories.iter().enumerate() {
                for (si, &ts) in ensemble.snapshot_times.iter().enumerate() {
                    let p = rec.snapshots[si];
                    writeln!(f, "{i},{},{},{},{}", fmt(ts), fmt(p[0]), fmt(p[1]), fmt(p[2]))?;
                }
            }
            drop(f);
            manifest.record_file(out, "snapshots.csv")?;
        }

        // comparison report against the flux prediction
        if let Some(series) = &series {
            let cm = cfg.section("compare");
            let bins = cm.integer_or("time_bins", 64)?.max(1);
            let t_max = cm.positive_or("t_max", horizon)?;
            let bands = cm.integer_or("patch_bands", 8)?.max(1);
            let axis = cm.point_or("band_axis", 3, [0.0, 0.0, 1.0])?;
            let groups = PatchGroups::polar_bands(&mesh, bands, axis).ctx("patch bands")?;
            let edges = uniform_times(0.0, t_max, bins);
            let stats = exit_statistics(&ensemble, &edges, &groups);
            let predicted = series.bin_totals(&edges);
            let mut f = fs::File::create(out.join("report.csv"))?;
            writeln!(f, "bin_lo,bin_hi,empirical,stderr,predicted,z_score")?;
            let emp = &stats.time_marginal;
            let se = emp.stderr.as_ref().expect("marginal carries errors");
            for b in 0..bins {
                let z = if se[b] > 0.0 {
                    (emp.masses[b] - predicted[b]) / se[b]
                } else {
                    0.0
                };
                writeln!(
                    f,
                    "{},{},{},{},{},{}",
                    fmt(edges[b]),
                    fmt(edges[b + 1]),
                    fmt(emp.masses[b]),
                    fmt(se[b]),
                    fmt(predicted[b]),
                    fmt(z),
                )?;
            }
            drop(f);
            manifest.record_file(out, "report.csv")?;

            // per-cell truncated-current and signed-crossing estimates
            let trunc = truncated_current(&ensemble, &edges, &groups);
            let measures = estimate_crossing_measures(&ensemble, &edges, &groups);
            let mut f = fs::File::create(out.join("cells.csv"))?;
            writeln!(
                f,
                "group,bin_lo,bin_hi,exit_rate,exit_rate_stderr,n_mean,n_signed_mean"
            )?;
            for g in 0..groups.count {
                for b in 0..bins {
                    writeln!(
                        f,
                        "{g},{},{},{},{},{},{}",
                        fmt(edges[b]),
                        fmt(edges[b + 1]),
                        fmt(trunc.mean[g][b]),
                        fmt(trunc.stderr[g][b]),
                        fmt(measures.unsigned.mean[g][b]),
                        fmt(measures.signed.mean[g][b]),
                    )?;
                }
            }
            drop(f);
            manifest.record_file(out, "cells.csv")?;
        }
    }
    Ok(())
}

fn cmd_verify_fast(
    cfg: &RawConfig,
    out: &Path,
    radii_override: Option<&[f64]>,
    manifest: &mut RunManifest,
) -> Result<(), CliError> {
    let state = build_state(cfg)?;
    let fast = cfg.require_section("fast")?;
    let solid = build_solid(cfg, state.dim())?;
    let radii: Vec<f64> = match radii_override {
        Some(r) => r.to_vec(),
        None => fast.tuple("radii")?,
    };
    let surface = cfg.section("surface");
    let momentum_grid = if fast.entry("momentum_n").is_some() {
        let n = fast.tuple("momentum_n")?;
        let length = fast.tuple("momentum_length")?;
        Some(if state.dim() == 1 {
            GridSpec::new_1d(n[0] as usize, length[0]).ctx("fast momentum grid")?
        } else {
            GridSpec::new_3d(
                [n[0] as usize, n[1] as usize, n[2] as usize],
                [length[0], length[1], length[2]],
            )
            .ctx("fast momentum grid")?
        })
    } else {
        None
    };
    let interaction = {
        let potential = build_potential(cfg)?;
        if potential.is_zero() {
            None
        } else {
            let ev = cfg.require_section("evolution")?;
            Some(qflux_core::flux::FastInteraction {
                potential,
                wave_t: fast.positive("wave_t")?,
                dt: ev.positive("dt")?,
                frame_every: ev.integer_or("frame_every", 10)?.max(1),
            })
        }
    };
    let fast_cfg = FastConfig {
        horizon: fast.positive("horizon")?,
        time_steps: fast.integer_or("time_steps", 600)?.max(2),
        n_theta: surface.integer_or("n_theta", 32)?,
        n_phi: surface.integer_or("n_phi", 64)?,
        momentum_grid,
        interaction,
    };
    let psi0 = match &state {
        WaveState::Grid(_) => state.clone(),
        _ if fast_cfg.interaction.is_some() => as_grid_state(cfg, &state)?,
        _ => state.clone(),
    };
    let rows = verify_fast(&psi0, &solid, &radii, &fast_cfg).ctx("verify fast")?;
    let mut f = fs::File::create(out.join("fast.csv"))?;
    writeln!(f, "R,lhs,rhs,abs_err,remainder")?;
    for r in &rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            fmt(r.radius),
            fmt(r.lhs),
            fmt(r.rhs),
            fmt(r.abs_err),
            fmt(r.remainder),
        )?;
    }
    drop(f);
    manifest.record_file(out, "fast.csv")?;
    Ok(())
}

fn cmd_sample(
    cfg: &RawConfig,
    out: &Path,
    overrides: &Overrides,
    manifest: &mut RunManifest,
) -> Result<(), CliError> {
    let state = build_state(cfg)?;
    let en = cfg.require_section("ensemble")?;
    let count = en.integer_or("count", 1000)?.max(1);
    let seed = seed_of(cfg, overrides)?;
    let points = sample_positions(&state, count, seed).ctx("sampling")?;
    let mut f = fs::File::create(out.join("samples.csv"))?;
    writeln!(f, "index,x,y,z")?;
    for (i, p) in points.iter().enumerate() {
        writeln!(f, "{i},{},{},{}", fmt(p[0]), fmt(p[1]), fmt(p[2]))?;
    }
    drop(f);
    manifest.record_file(out, "samples.csv")?;
    Ok(())
}

fn cmd_trajectories(
    cfg: &RawConfig,
    out: &Path,
    overrides: &Overrides,
    manifest: &mut RunManifest,
) -> Result<(), CliError> {
    let state = build_state(cfg)?;
    let evolution = build_evolution(cfg, &state)?;
    let region = build_region(cfg, evolution.dim())?;
    let en = cfg.require_section("ensemble")?;
    let horizon = en.positive("horizon")?;
    let seed = seed_of(cfg, overrides)?;
    let count = cfg.section("output").integer_or("trajectory_count", 32)?.max(1);
    let decimate = cfg.section("output").integer_or("decimate", 10)?.max(1);
    let opts = integrator_options(cfg)?;
    let (t0, _) = evolution.time_range();
    let starts =
        sample_positions(&evolution.state_at(t0).ctx("initial state")?, count, seed)
            .ctx("sampling")?;
    let mut f = fs::File::create(out.join("trajectories.csv"))?;
    writeln!(f, "traj_id,t,x,y,z")?;
    for (i, &x0) in starts.iter().enumerate() {
        let tr = bohm::integrate_trajectory(x0, &evolution, Some(&region), horizon, &opts)
            .ctx("trajectory")?;
        for (k, (t, x)) in tr.samples().enumerate() {
            if k % decimate == 0 {
                writeln!(f, "{i},{},{},{},{}", fmt(t), fmt(x[0]), fmt(x[1]), fmt(x[2]))?;
            }
        }
    }
    drop(f);
    manifest.record_file(out, "trajectories.csv")?;
    Ok(())
}
