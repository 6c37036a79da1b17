//! Bohmian trajectories in the velocity field `v = j / |psi|^2`.
//!
//! Trajectories are integrated with an embedded Dormand-Prince 5(4) pair
//! plus cubic Hermite dense output; the step size is additionally capped
//! near the region boundary so crossings cannot be skipped. Ensembles draw
//! initial positions from quantum equilibrium, run embarrassingly parallel
//! with per-trajectory RNG streams, and aggregate in index order so results
//! are bitwise independent of the worker count.

use crate::compare::BinnedDensity;
use crate::error::{CoreError, Result};
use crate::evolve::Evolution;
use crate::exec;
use crate::flux::{PatchGroups, Region, SurfaceMesh};
use crate::state::{sample_positions, WaveState};
use crate::{add, norm, scale, Point};

/// Tolerances and guards of the trajectory integrator.
#[derive(Debug, Clone)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    /// node guard relative to the peak density
    pub eps_node: f64,
    /// consecutive node-rejections before a trajectory is abandoned
    pub node_stall_limit: usize,
    /// cap factor for steps near the boundary
    pub boundary_factor: f64,
    /// terminate once this far outside the region (None: run to horizon)
    pub escape_distance: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rtol: 1e-8,
            atol: 1e-10,
            eps_node: 1e-12,
            node_stall_limit: 1000,
            boundary_factor: 0.5,
            escape_distance: None,
            max_steps: 2_000_000,
        }
    }
}

/// Why a trajectory stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Horizon,
    ExitedAndFar,
    NodeStall,
    DomainExit,
}

/// One accepted integrator step; positions interpolate by cubic Hermite.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub t0: f64,
    pub h: f64,
    pub y0: Point,
    pub f0: Point,
    pub y1: Point,
    pub f1: Point,
}

impl StepRecord {
    pub fn position_at(&self, t: f64) -> Point {
        let s = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        let mut x = [0.0; 3];
        for k in 0..3 {
            x[k] = h00 * self.y0[k]
                + h10 * self.h * self.f0[k]
                + h01 * self.y1[k]
                + h11 * self.h * self.f1[k];
        }
        x
    }
}

/// A Bohmian path with adaptive-step metadata.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x0: Point,
    pub t0: f64,
    pub steps: Vec<StepRecord>,
    pub termination: Termination,
    pub end_time: f64,
}

impl Trajectory {
    pub fn end_position(&self) -> Point {
        self.steps.last().map(|s| s.y1).unwrap_or(self.x0)
    }

    /// Dense-output position (clamped to the integrated range).
    pub fn position_at(&self, t: f64) -> Point {
        if self.steps.is_empty() || t <= self.t0 {
            return self.x0;
        }
        if t >= self.end_time {
            return self.end_position();
        }
        // steps are time-ordered; binary search for the covering one
        let idx = self
            .steps
            .partition_point(|s| s.t0 + s.h < t)
            .min(self.steps.len() - 1);
        self.steps[idx].position_at(t)
    }

    /// Sampled path points `(t_i, x_i)` at the accepted step ends.
    pub fn samples(&self) -> impl Iterator<Item = (f64, Point)> + '_ {
        std::iter::once((self.t0, self.x0))
            .chain(self.steps.iter().map(|s| (s.t0 + s.h, s.y1)))
    }
}

/// A signed boundary crossing.
#[derive(Debug, Clone, Copy)]
pub struct Crossing {
    pub patch: usize,
    pub time: f64,
    /// +1 outward, -1 inward
    pub sign: i8,
    pub position: Point,
}

/// First exit time and position, when one happened within the horizon.
#[derive(Debug, Clone, Copy)]
pub struct ExitEvent {
    pub time: f64,
    pub position: Point,
    pub patch: usize,
}

/// Bohmian velocity at a point of a single state (exact for analytic
/// states; spectral gradients plus multilinear interpolation for grids).
pub fn velocity_at(state: &WaveState, x: Point, eps_node: f64) -> Result<Point> {
    match state {
        WaveState::Gaussian(g) => {
            let d = g.dim as f64;
            let s = g.width();
            let peak = (2.0 * std::f64::consts::PI * s * s).powf(-d / 2.0);
            let rho = g.density(x);
            if rho < eps_node * peak {
                return Err(CoreError::NodeProximity {
                    density: rho,
                    guard: eps_node * peak,
                });
            }
            Ok(g.velocity(x))
        }
        WaveState::Sum(s) => {
            let rho = s.density(x);
            let guard = eps_node * s.density_bound();
            if rho < guard {
                return Err(CoreError::NodeProximity {
                    density: rho,
                    guard,
                });
            }
            let psi = s.amplitude(x);
            let grad = s.gradient(x);
            let m = s.mass();
            let mut v = [0.0; 3];
            for k in 0..s.dim() {
                v[k] = (grad[k] / psi).im / m;
            }
            Ok(v)
        }
        WaveState::Grid(g) => {
            if !g.spec.contains(x) {
                return Err(CoreError::OutOfDomain(format!("{x:?} outside grid")));
            }
            let grads = g.gradient_grids();
            let psi = g.evaluate(x)?;
            let rho = psi.norm_sqr();
            let guard = eps_node * g.max_density();
            if rho < guard {
                return Err(CoreError::NodeProximity {
                    density: rho,
                    guard,
                });
            }
            let mut v = [0.0; 3];
            for (k, grad) in grads.iter().enumerate() {
                let gs = GridStateView {
                    spec: &g.spec,
                    amps: grad,
                };
                v[k] = (gs.evaluate(x) / psi).im / g.mass;
            }
            Ok(v)
        }
    }
}

// multilinear interpolation over a borrowed amplitude field
struct GridStateView<'a> {
    spec: &'a crate::state::GridSpec,
    amps: &'a [num_complex::Complex64],
}

impl GridStateView<'_> {
    fn evaluate(&self, x: Point) -> num_complex::Complex64 {
        let dim = self.spec.dim();
        let mut i0 = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..dim {
            let h = self.spec.spacing(k);
            let t = (x[k] + 0.5 * self.spec.axis_length(k)) / h;
            let i = t.floor() as usize;
            i0[k] = i.min(self.spec.axis_points(k) - 1);
            frac[k] = t - i0[k] as f64;
        }
        let mut acc = num_complex::Complex64::new(0.0, 0.0);
        for corner in 0..(1usize << dim) {
            let mut idx = [0usize; 3];
            let mut weight = 1.0;
            for k in 0..dim {
                let up = (corner >> k) & 1;
                let n = self.spec.axis_points(k);
                idx[k] = (i0[k] + up) % n;
                weight *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            acc += weight * self.amps[self.spec.flat_index(idx)];
        }
        acc
    }
}

// Dormand-Prince 5(4) coefficients
const DP_C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 5]; 5] = [
    [0.2, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
];
const DP_B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

enum StepOutcome {
    Accepted(StepRecord),
    Rejected(f64),
    Node,
    Domain,
}

struct Engine<'a> {
    evolution: &'a Evolution,
    region: Option<&'a Region>,
    opts: &'a IntegratorOptions,
    dim: usize,
}

impl Engine<'_> {
    fn velocity(&self, x: Point, t: f64) -> Result<Point> {
        self.evolution.velocity_at(x, t, self.opts.eps_node)
    }

    fn try_step(&self, t: f64, y: Point, f0: Point, h: f64) -> Result<StepOutcome> {
        let mut k = [[0.0f64; 3]; 7];
        k[0] = f0;
        for stage in 0..5 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(stage + 1) {
                ys = add(ys, scale(*kj, h * DP_A[stage][j]));
            }
            match self.velocity(ys, t + h * DP_C[stage]) {
                Ok(v) => k[stage + 1] = v,
                Err(CoreError::NodeProximity { .. }) => return Ok(StepOutcome::Node),
                Err(CoreError::DomainExit { .. }) | Err(CoreError::OutOfDomain(_)) => {
                    return Ok(StepOutcome::Domain)
                }
                Err(e) => return Err(e),
            }
        }
        let mut y1 = y;
        for (j, b) in DP_B.iter().enumerate() {
            y1 = add(y1, scale(k[j], h * b));
        }
        // FSAL stage
        match self.velocity(y1, t + h) {
            Ok(v) => k[6] = v,
            Err(CoreError::NodeProximity { .. }) => return Ok(StepOutcome::Node),
            Err(CoreError::DomainExit { .. }) | Err(CoreError::OutOfDomain(_)) => {
                return Ok(StepOutcome::Domain)
            }
            Err(e) => return Err(e),
        }
        let mut err: f64 = 0.0;
        for axis in 0..self.dim {
            let mut e = 0.0;
            for (j, c) in DP_E.iter().enumerate() {
                e += c * k[j][axis];
            }
            e *= h;
            let tol = self.opts.atol + self.opts.rtol * y[axis].abs().max(y1[axis].abs());
            err = err.max((e / tol).abs());
        }
        if err <= 1.0 {
            Ok(StepOutcome::Accepted(StepRecord {
                t0: t,
                h,
                y0: y,
                f0,
                y1,
                f1: k[6],
            }))
        } else {
            Ok(StepOutcome::Rejected(err))
        }
    }

    fn run<F: FnMut(&StepRecord)>(
        &self,
        x0: Point,
        horizon: f64,
        mut on_step: F,
    ) -> Result<(Termination, f64, Point)> {
        let (t0, _) = self.evolution.time_range();
        let mut t = t0;
        let mut y = x0;
        let mut f = match self.velocity(y, t) {
            Ok(v) => v,
            Err(CoreError::NodeProximity { .. }) => {
                return Ok((Termination::NodeStall, t, y));
            }
            Err(CoreError::DomainExit { .. }) | Err(CoreError::OutOfDomain(_)) => {
                return Ok((Termination::DomainExit, t, y));
            }
            Err(e) => return Err(e),
        };
        let mut h = (horizon - t0) * 1e-3;
        let mut node_rejections = 0usize;
        let band = self.boundary_band();
        for _ in 0..self.opts.max_steps {
            if t >= horizon - 1e-12 * horizon.abs().max(1.0) {
                return Ok((Termination::Horizon, t, y));
            }
            let mut h_try = h.min(horizon - t);
            if let Some(region) = self.region {
                let dist = region.signed_distance(y).abs().max(band);
                let speed = norm(f);
                if speed > 0.0 {
                    h_try = h_try.min(self.opts.boundary_factor * dist / speed);
                }
            }
            h_try = h_try.max(1e-14 * horizon.abs().max(1.0));
            match self.try_step(t, y, f, h_try)? {
                StepOutcome::Accepted(step) => {
                    node_rejections = 0;
                    on_step(&step);
                    t = step.t0 + step.h;
                    y = step.y1;
                    f = step.f1;
                    // PI-free controller: classic step growth
                    let err_est = 1.0; // accepted; regrow geometrically
                    let _ = err_est;
                    h = (h_try * 2.0).min((horizon - t0) * 0.1).max(1e-14);
                    if let Some(region) = self.region {
                        if let Some(esc) = self.opts.escape_distance {
                            if region.signed_distance(y) > esc {
                                return Ok((Termination::ExitedAndFar, t, y));
                            }
                        }
                    }
                }
                StepOutcome::Rejected(err) => {
                    let shrink = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                    h = h_try * shrink;
                }
                StepOutcome::Node => {
                    node_rejections += 1;
                    if node_rejections > self.opts.node_stall_limit {
                        return Ok((Termination::NodeStall, t, y));
                    }
                    h = h_try * 0.5;
                }
                StepOutcome::Domain => {
                    return Ok((Termination::DomainExit, t, y));
                }
            }
        }
        Err(CoreError::Resolution(format!(
            "step budget exhausted at t = {t}"
        )))
    }

    fn boundary_band(&self) -> f64 {
        match self.region {
            Some(Region::Ball { radius, .. }) => 1e-6 * radius,
            Some(Region::Interval { a, b }) => 1e-6 * (b - a),
            None => 0.0,
        }
    }
}

/// Integrate one trajectory from `x0` up to the horizon, keeping the dense
/// step records. The region (when given) caps steps near its boundary.
pub fn integrate_trajectory(
    x0: Point,
    evolution: &Evolution,
    region: Option<&Region>,
    horizon: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let engine = Engine {
        evolution,
        region,
        opts,
        dim: evolution.dim(),
    };
    let mut steps = Vec::new();
    let (termination, end_time, _) = engine.run(x0, horizon, |s| steps.push(*s))?;
    Ok(Trajectory {
        x0,
        t0: evolution.time_range().0,
        steps,
        termination,
        end_time,
    })
}

/// Scan a trajectory for boundary crossings: dense-output sign changes of
/// the signed distance, refined by bisection to time tolerance 1e-10, with
/// the sign taken from the motion's normal component. Exact tangencies
/// (|v.n| <= 1e-14) do not count.
pub fn detect_crossings(
    trajectory: &Trajectory,
    region: &Region,
    mesh: &SurfaceMesh,
) -> Vec<Crossing> {
    let mut crossings = Vec::new();
    let scan_per_step = 8;
    for step in &trajectory.steps {
        let mut prev_t = step.t0;
        let mut prev_d = region.signed_distance(step.position_at(prev_t));
        for i in 1..=scan_per_step {
            let t = step.t0 + step.h * i as f64 / scan_per_step as f64;
            let d = region.signed_distance(step.position_at(t));
            if d.signum() != prev_d.signum() && (d != 0.0 || prev_d != 0.0) {
                if let Some(c) = refine_crossing(step, region, mesh, prev_t, t) {
                    crossings.push(c);
                }
            }
            prev_t = t;
            prev_d = d;
        }
    }
    crossings
}

fn refine_crossing(
    step: &StepRecord,
    region: &Region,
    mesh: &SurfaceMesh,
    mut lo: f64,
    mut hi: f64,
) -> Option<Crossing> {
    let d_lo = region.signed_distance(step.position_at(lo));
    if d_lo == 0.0 {
        // boundary grazed exactly at the sample; treat the sample as the event
        hi = lo;
    }
    let tol = 1e-10;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let d = region.signed_distance(step.position_at(mid));
        if d.signum() == d_lo.signum() && d != 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t_c = 0.5 * (lo + hi);
    let x_c = step.position_at(t_c);
    // normal velocity from the dense output
    let eps = (step.h * 1e-6).max(1e-12);
    let d_before = region.signed_distance(step.position_at(t_c - eps));
    let d_after = region.signed_distance(step.position_at(t_c + eps));
    let v_n = (d_after - d_before) / (2.0 * eps);
    if v_n.abs() <= 1e-14 {
        return None;
    }
    Some(Crossing {
        patch: mesh.nearest_patch(x_c),
        time: t_c,
        sign: if v_n > 0.0 { 1 } else { -1 },
        position: x_c,
    })
}

/// Earliest crossing as the first-exit event (none if the trajectory never
/// crossed within the horizon).
pub fn first_exit(crossings: &[Crossing]) -> Option<ExitEvent> {
    crossings
        .iter()
        .min_by(|a, b| a.time.partial_cmp(&b.time).unwrap())
        .map(|c| ExitEvent {
            time: c.time,
            position: c.position,
            patch: c.patch,
        })
}

/// Everything recorded about one ensemble trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub x0: Point,
    pub crossings: Vec<Crossing>,
    pub exit: Option<ExitEvent>,
    pub termination: Termination,
    /// positions at the requested snapshot times
    pub snapshots: Vec<Point>,
    /// initial position sampled outside the region (excluded from exits)
    pub started_outside: bool,
}

/// Quantum-equilibrium trajectory ensemble, deterministic in `(seed, n)`.
#[derive(Debug)]
pub struct EnsembleResult {
    pub count: usize,
    pub seed: u64,
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
    pub trajectories: Vec<TrajectoryRecord>,
    pub node_stalls: usize,
    pub domain_exits: usize,
    pub started_outside: usize,
}

impl EnsembleResult {
    pub fn exits(&self) -> impl Iterator<Item = (usize, &ExitEvent)> {
        self.trajectories
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.exit.as_ref().map(|e| (i, e)))
    }

    pub fn inward_crossings(&self) -> usize {
        self.trajectories
            .iter()
            .flat_map(|t| &t.crossings)
            .filter(|c| c.sign < 0)
            .count()
    }
}

/// Run `count` trajectories from `|psi_0|^2`-distributed starts, detect
/// crossings against the region boundary, and aggregate in index order.
///
/// Per-trajectory failures (node stalls, grid exits before the region
/// boundary) are recorded, not fatal, up to 1% of the ensemble.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    evolution: &Evolution,
    region: &Region,
    mesh: &SurfaceMesh,
    count: usize,
    seed: u64,
    horizon: f64,
    opts: &IntegratorOptions,
    snapshot_times: &[f64],
) -> Result<EnsembleResult> {
    if count == 0 {
        return Err(CoreError::InvalidParameter("count must be >= 1".into()));
    }
    let (t0, t1) = evolution.time_range();
    if horizon > t1 + 1e-9 {
        return Err(CoreError::OutOfDomain(
            "horizon exceeds the evolution range".into(),
        ));
    }
    let psi0 = evolution.state_at(t0)?;
    let starts = sample_positions(&psi0, count, seed)?;
    let engine = Engine {
        evolution,
        region: Some(region),
        opts,
        dim: evolution.dim(),
    };
    let records: Vec<Result<TrajectoryRecord>> = exec::map_indexed(count, |i| {
        let x0 = starts[i];
        if !region.contains(x0) {
            return Ok(TrajectoryRecord {
                x0,
                crossings: Vec::new(),
                exit: None,
                termination: Termination::Horizon,
                snapshots: snapshot_times.iter().map(|_| x0).collect(),
                started_outside: true,
            });
        }
        let mut crossings: Vec<Crossing> = Vec::new();
        let mut snapshots = vec![[f64::NAN; 3]; snapshot_times.len()];
        for (si, &ts) in snapshot_times.iter().enumerate() {
            if ts <= t0 {
                snapshots[si] = x0;
            }
        }
        let scan_per_step = 8;
        let (termination, end_time, end_pos) = engine.run(x0, horizon, |step| {
            // crossing scan, same procedure as detect_crossings
            let mut prev_t = step.t0;
            let mut prev_d = region.signed_distance(step.position_at(prev_t));
            for k in 1..=scan_per_step {
                let t = step.t0 + step.h * k as f64 / scan_per_step as f64;
                let d = region.signed_distance(step.position_at(t));
                if d.signum() != prev_d.signum() && (d != 0.0 || prev_d != 0.0) {
                    if let Some(c) = refine_crossing(step, region, mesh, prev_t, t) {
                        crossings.push(c);
                    }
                }
                prev_t = t;
                prev_d = d;
            }
            for (si, &ts) in snapshot_times.iter().enumerate() {
                if ts > step.t0 && ts <= step.t0 + step.h {
                    snapshots[si] = step.position_at(ts);
                }
            }
        })?;
        // snapshots after early termination hold the last position
        for (si, &ts) in snapshot_times.iter().enumerate() {
            if ts >= end_time && snapshots[si][0].is_nan() {
                snapshots[si] = end_pos;
            }
        }
        let exit = first_exit(&crossings);
        Ok(TrajectoryRecord {
            x0,
            crossings,
            exit,
            termination,
            snapshots,
            started_outside: false,
        })
    });
    let mut trajectories = Vec::with_capacity(count);
    let mut node_stalls = 0;
    let mut domain_exits = 0;
    let mut started_outside = 0;
    for r in records {
        let rec = r?;
        match rec.termination {
            Termination::NodeStall => node_stalls += 1,
            Termination::DomainExit if rec.exit.is_none() => domain_exits += 1,
            _ => {}
        }
        if rec.started_outside {
            started_outside += 1;
        }
        trajectories.push(rec);
    }
    let failed = node_stalls + domain_exits;
    if failed as f64 > 0.01 * count as f64 {
        return Err(CoreError::Ensemble(format!(
            "{failed} of {count} trajectories failed (node stalls {node_stalls}, grid exits {domain_exits})"
        )));
    }
    Ok(EnsembleResult {
        count,
        seed,
        horizon,
        snapshot_times: snapshot_times.to_vec(),
        trajectories,
        node_stalls,
        domain_exits,
        started_outside,
    })
}

/// Per-(group, time-bin) estimates over an ensemble.
#[derive(Debug, Clone)]
pub struct CellEstimates {
    pub time_edges: Vec<f64>,
    pub groups: usize,
    /// `[group][bin]`
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
}

impl CellEstimates {
    /// Flatten to a 1-d binned density over synthetic cell indices, for the
    /// coverage machinery.
    pub fn flatten(&self) -> BinnedDensity {
        let cells = self.groups * (self.time_edges.len() - 1);
        let edges: Vec<f64> = (0..=cells).map(|i| i as f64).collect();
        let mut masses = Vec::with_capacity(cells);
        let mut errs = Vec::with_capacity(cells);
        for g in 0..self.groups {
            for b in 0..self.time_edges.len() - 1 {
                masses.push(self.mean[g][b]);
                errs.push(self.stderr[g][b]);
            }
        }
        BinnedDensity::new(edges, masses)
            .and_then(|d| d.with_stderr(errs))
            .expect("flattened cells are well formed")
    }
}

fn bin_of(edges: &[f64], t: f64) -> Option<usize> {
    if t < edges[0] || t >= edges[edges.len() - 1] {
        return None;
    }
    let nb = edges.len() - 1;
    let w = (edges[nb] - edges[0]) / nb as f64;
    let idx = (((t - edges[0]) / w) as usize).min(nb - 1);
    Some(idx)
}

/// Empirical per-cell expectations of the crossing counts: `E(N)` (all
/// crossings) and `E(N_s)` (outward minus inward), with standard errors
/// over trajectories.
pub struct CrossingMeasures {
    pub unsigned: CellEstimates,
    pub signed: CellEstimates,
}

pub fn estimate_crossing_measures(
    ensemble: &EnsembleResult,
    time_edges: &[f64],
    groups: &PatchGroups,
) -> CrossingMeasures {
    let nb = time_edges.len() - 1;
    let ng = groups.count;
    let n = ensemble.count as f64;
    let mut sum_u = vec![vec![0.0; nb]; ng];
    let mut sum_u2 = vec![vec![0.0; nb]; ng];
    let mut sum_s = vec![vec![0.0; nb]; ng];
    let mut sum_s2 = vec![vec![0.0; nb]; ng];
    let mut local: std::collections::HashMap<(usize, usize), (f64, f64)> = Default::default();
    for rec in &ensemble.trajectories {
        local.clear();
        for c in &rec.crossings {
            if let Some(b) = bin_of(time_edges, c.time) {
                let cell = local.entry((groups.group_of(c.patch), b)).or_insert((0.0, 0.0));
                cell.0 += 1.0;
                cell.1 += c.sign as f64;
            }
        }
        for (&(g, b), &(u, s)) in &local {
            sum_u[g][b] += u;
            sum_u2[g][b] += u * u;
            sum_s[g][b] += s;
            sum_s2[g][b] += s * s;
        }
    }
    let build = |sum: Vec<Vec<f64>>, sum2: Vec<Vec<f64>>| {
        let mut mean = vec![vec![0.0; nb]; ng];
        let mut stderr = vec![vec![0.0; nb]; ng];
        for g in 0..ng {
            for b in 0..nb {
                let m = sum[g][b] / n;
                mean[g][b] = m;
                let var = (sum2[g][b] / n - m * m).max(0.0) * n / (n - 1.0).max(1.0);
                // Poisson floor of one count, as for the histograms: empty
                // cells otherwise report zero error and infinite z-scores
                stderr[g][b] = (var / n).sqrt().max(1.0 / n);
            }
        }
        CellEstimates {
            time_edges: time_edges.to_vec(),
            groups: ng,
            mean,
            stderr,
        }
    };
    CrossingMeasures {
        unsigned: build(sum_u, sum_u2),
        signed: build(sum_s, sum_s2),
    }
}

/// Empirical truncated current: the rate of FIRST exits per unit time and
/// unit boundary area in each (group, bin) cell.
pub fn truncated_current(
    ensemble: &EnsembleResult,
    time_edges: &[f64],
    groups: &PatchGroups,
) -> CellEstimates {
    let nb = time_edges.len() - 1;
    let ng = groups.count;
    let n = ensemble.count as f64;
    let mut counts = vec![vec![0.0; nb]; ng];
    for (_, exit) in ensemble.exits() {
        if let Some(b) = bin_of(time_edges, exit.time) {
            counts[groups.group_of(exit.patch)][b] += 1.0;
        }
    }
    let dt = (time_edges[nb] - time_edges[0]) / nb as f64;
    let mut mean = vec![vec![0.0; nb]; ng];
    let mut stderr = vec![vec![0.0; nb]; ng];
    for g in 0..ng {
        let area = groups.areas[g].max(1e-300);
        for b in 0..nb {
            let c = counts[g][b];
            mean[g][b] = c / (n * dt * area);
            stderr[g][b] = c.max(1.0).sqrt() / (n * dt * area);
        }
    }
    CellEstimates {
        time_edges: time_edges.to_vec(),
        groups: ng,
        mean,
        stderr,
    }
}

/// Joint first-exit histogram `P(x_e in group, t_e in bin)` with Poisson
/// standard errors, plus its marginals.
pub struct ExitStatistics {
    pub joint: CellEstimates,
    pub time_marginal: BinnedDensity,
    pub group_marginal: Vec<f64>,
    /// fraction of the ensemble that exited within the horizon
    pub exited_fraction: f64,
}

pub fn exit_statistics(
    ensemble: &EnsembleResult,
    time_edges: &[f64],
    groups: &PatchGroups,
) -> ExitStatistics {
    let nb = time_edges.len() - 1;
    let ng = groups.count;
    let n = ensemble.count as f64;
    let mut counts = vec![vec![0.0; nb]; ng];
    let mut exited = 0usize;
    for (_, exit) in ensemble.exits() {
        exited += 1;
        if let Some(b) = bin_of(time_edges, exit.time) {
            counts[groups.group_of(exit.patch)][b] += 1.0;
        }
    }
    let mut mean = vec![vec![0.0; nb]; ng];
    let mut stderr = vec![vec![0.0; nb]; ng];
    let mut time_marginal = vec![0.0; nb];
    let mut time_err = vec![0.0; nb];
    let mut group_marginal = vec![0.0; ng];
    for g in 0..ng {
        for b in 0..nb {
            let c = counts[g][b];
            mean[g][b] = c / n;
            stderr[g][b] = c.max(1.0).sqrt() / n;
            time_marginal[b] += c / n;
            group_marginal[g] += c / n;
        }
    }
    for b in 0..nb {
        time_err[b] = (time_marginal[b] * n).max(1.0).sqrt() / n;
    }
    ExitStatistics {
        joint: CellEstimates {
            time_edges: time_edges.to_vec(),
            groups: ng,
            mean,
            stderr,
        },
        time_marginal: BinnedDensity::new(time_edges.to_vec(), time_marginal)
            .and_then(|d| d.with_stderr(time_err))
            .expect("well-formed marginal"),
        group_marginal,
        exited_fraction: exited as f64 / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::{EvolveMethod, Evolution};
    use crate::flux::{PatchGroups, Region, SurfaceMesh};
    use crate::state::{make_gaussian, GaussianState, GaussianSum};
    use num_complex::Complex64;

    fn centered3(sigma: f64, mass: f64) -> GaussianState {
        make_gaussian(3, [0.0; 3], [0.0; 3], sigma, mass).unwrap()
    }

    fn width(t: f64) -> f64 {
        (1.0 + (t / 2.0).powi(2)).sqrt()
    }

    #[test]
    fn velocity_matches_phase_derivative() {
        // oracle: differentiate the analytic amplitude numerically
        let g = centered3(1.0, 1.0).advanced(1.5);
        let x = [0.7, -0.3, 0.4];
        let v = velocity_at(&WaveState::Gaussian(g.clone()), x, 1e-12).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let grad = (g.amplitude(xp) - g.amplitude(xm)) / (2.0 * h);
            let oracle = (grad / g.amplitude(x)).im / g.mass;
            assert!((v[k] - oracle).abs() <= 1e-8, "axis {k}: {} vs {oracle}", v[k]);
        }
        // at t = 0 the centered packet is at rest
        let v0 = velocity_at(&WaveState::Gaussian(centered3(1.0, 1.0)), x, 1e-12).unwrap();
        assert!(norm(v0) <= 1e-14);
        // boosted packet at t = 0 drifts uniformly
        let gb = make_gaussian(3, [0.0; 3], [2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let vb = velocity_at(&WaveState::Gaussian(gb), [0.3, 0.8, -0.2], 1e-12).unwrap();
        assert!((vb[0] - 2.0).abs() <= 1e-10 && vb[1].abs() <= 1e-10);
    }

    #[test]
    fn velocity_node_guard_trips() {
        let g = centered3(1.0, 1.0);
        let far = [9.0, 0.0, 0.0]; // density ~ exp(-40.5) of peak
        assert!(matches!(
            velocity_at(&WaveState::Gaussian(g), far, 1e-12),
            Err(CoreError::NodeProximity { .. })
        ));
    }

    #[test]
    fn free_gaussian_trajectories_obey_scaling_law() {
        let g = centered3(1.0, 1.0);
        let e = Evolution::build(WaveState::Gaussian(g), EvolveMethod::AnalyticFree, 40.0).unwrap();
        let opts = IntegratorOptions::default();
        for &x0 in &[[0.5, 0.0, 0.0], [1.0, -2.0, 0.5], [-0.3, 0.2, 2.0]] {
            let tr = integrate_trajectory(x0, &e, None, 40.0, &opts).unwrap();
            assert_eq!(tr.termination, Termination::Horizon);
            let mut worst: f64 = 0.0;
            for (t, x) in tr.samples() {
                let expect = scale(x0, width(t));
                let denom = norm(expect).max(1e-12);
                worst = worst.max(norm([x[0] - expect[0], x[1] - expect[1], x[2] - expect[2]]) / denom);
            }
            assert!(worst <= 1e-6, "scaling-law deviation {worst}");
            // dense output between nodes stays on the law as well
            let t = 7.3;
            let x = tr.position_at(t);
            let expect = scale(x0, width(t));
            let rel = norm(crate::sub(x, expect)) / norm(expect);
            assert!(rel <= 1e-6, "dense deviation {rel}");
        }
        // the packet center is a fixed point
        let tr = integrate_trajectory([0.0; 3], &e, None, 10.0, &opts).unwrap();
        assert!(norm(tr.end_position()) <= 1e-12);
    }

    #[test]
    fn one_dimensional_trajectories_never_cross() {
        let g1 = make_gaussian(1, [0.0; 3], [1.0, 0.0, 0.0], 1.0, 2.0).unwrap();
        let g2 = make_gaussian(1, [-6.0, 0.0, 0.0], [3.0, 0.0, 0.0], 1.0, 2.0).unwrap();
        let sum = GaussianSum::new(vec![
            (Complex64::new(1.0, 0.0), g1),
            (Complex64::new(0.6, 0.0), g2),
        ])
        .unwrap();
        let e = Evolution::build(WaveState::Sum(sum), EvolveMethod::AnalyticFree, 8.0).unwrap();
        let opts = IntegratorOptions::default();
        let starts = [-2.0, -1.0, -0.3, 0.4, 1.1, 2.0];
        let trajectories: Vec<Trajectory> = starts
            .iter()
            .map(|&x| integrate_trajectory([x, 0.0, 0.0], &e, None, 8.0, &opts).unwrap())
            .collect();
        for t in (0..=80).map(|i| 0.1 * i as f64) {
            let xs: Vec<f64> = trajectories.iter().map(|tr| tr.position_at(t)[0]).collect();
            for pair in xs.windows(2) {
                assert!(pair[0] < pair[1], "order violated at t={t}: {xs:?}");
            }
        }
    }

    #[test]
    fn crossing_detection_and_first_exit() {
        let g = centered3(1.0, 1.0);
        let e = Evolution::build(WaveState::Gaussian(g), EvolveMethod::AnalyticFree, 40.0).unwrap();
        let region = Region::ball([0.0; 3], 4.0).unwrap();
        let mesh = region.surface_mesh(8, 16);
        let opts = IntegratorOptions::default();
        // fully inside within a short horizon: no crossings
        let tr = integrate_trajectory([0.5, 0.0, 0.0], &e, Some(&region), 2.0, &opts).unwrap();
        assert!(detect_crossings(&tr, &region, &mesh).is_empty());
        assert!(first_exit(&[]).is_none());
        // outward radial trajectory: exactly one +1 crossing at the
        // root of the scaling law
        let x0 = [1.2, -0.8, 0.5];
        let tr = integrate_trajectory(x0, &e, Some(&region), 40.0, &opts).unwrap();
        let crossings = detect_crossings(&tr, &region, &mesh);
        assert_eq!(crossings.len(), 1);
        assert_eq!(crossings[0].sign, 1);
        let exit = first_exit(&crossings).unwrap();
        let r0 = norm(x0);
        let t_exact = 2.0 * ((4.0 / r0).powi(2) - 1.0).sqrt();
        assert!(
            (exit.time - t_exact).abs() <= 1e-6 * t_exact,
            "exit {} vs {t_exact}",
            exit.time
        );
        // exit position sits on the boundary
        assert!((norm(exit.position) - 4.0).abs() <= 1e-8 * 4.0);
        // and on the ray through x0
        let along = crate::dot(exit.position, x0) / (norm(exit.position) * r0);
        assert!((along - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn backflow_trajectory_reenters() {
        // two-packet interference pushes some trajectories back across the
        // right endpoint: signs (+1, -1, +1)
        let m = 4.0;
        let g1 = make_gaussian(1, [0.0; 3], [4.0, 0.0, 0.0], 1.0, m).unwrap();
        let g2 = make_gaussian(1, [-12.0, 0.0, 0.0], [12.0, 0.0, 0.0], 1.0, m).unwrap();
        let sum = GaussianSum::new(vec![
            (Complex64::new(1.0, 0.0), g1),
            (Complex64::new(0.65, 0.0), g2),
        ])
        .unwrap();
        let e = Evolution::build(WaveState::Sum(sum), EvolveMethod::AnalyticFree, 12.0).unwrap();
        let region = Region::interval(-20.0, 6.0).unwrap();
        let mesh = region.surface_mesh(0, 0);
        let opts = IntegratorOptions::default();
        // locate a re-entering start from a small equilibrium ensemble,
        // then re-integrate it for the dense comparison
        let probe = run_ensemble(&e, &region, &mesh, 400, 23, 12.0, &opts, &[]).unwrap();
        let witness_x0 = probe
            .trajectories
            .iter()
            .find(|t| {
                let signs: Vec<i8> = t.crossings.iter().map(|c| c.sign).collect();
                signs.len() >= 3 && signs[0] == 1 && signs[1] == -1 && signs[2] == 1
            })
            .expect("no re-entering trajectory found")
            .x0;
        let tr = integrate_trajectory(witness_x0, &e, Some(&region), 12.0, &opts).unwrap();
        let crossings = detect_crossings(&tr, &region, &mesh);
        // oracle: dense sign scan at 10x the detector resolution
        let mut scan_signs = Vec::new();
        let mut prev = region.signed_distance(tr.position_at(0.0));
        let steps = 12_000;
        for i in 1..=steps {
            let t = 12.0 * i as f64 / steps as f64;
            let d = region.signed_distance(tr.position_at(t));
            if d.signum() != prev.signum() {
                scan_signs.push(if d > prev { 1i8 } else { -1i8 });
            }
            prev = d;
        }
        let detected: Vec<i8> = crossings.iter().map(|c| c.sign).collect();
        assert_eq!(detected, scan_signs, "detector vs dense scan");
    }

    #[test]
    fn ensemble_is_deterministic_and_matches_escape_fraction() {
        let g = centered3(1.0, 1.0);
        let e = Evolution::build(WaveState::Gaussian(g), EvolveMethod::AnalyticFree, 60.0).unwrap();
        let region = Region::ball([0.0; 3], 4.0).unwrap();
        let mesh = region.surface_mesh(8, 16);
        let opts = IntegratorOptions::default();
        let n = 500;
        let r1 = run_ensemble(&e, &region, &mesh, n, 11, 60.0, &opts, &[]).unwrap();
        let r2 = run_ensemble(&e, &region, &mesh, n, 11, 60.0, &opts, &[]).unwrap();
        for (a, b) in r1.trajectories.iter().zip(&r2.trajectories) {
            assert_eq!(a.x0, b.x0);
            assert_eq!(a.exit.map(|e| e.time), b.exit.map(|e| e.time));
            assert_eq!(a.crossings.len(), b.crossings.len());
        }
        // oracle: exit fraction from the radial equilibrium distribution
        let u = width(60.0);
        let expected = crate::numeric::chi3_cdf(4.0) - crate::numeric::chi3_cdf(4.0 / u);
        let exited = r1.exits().count() as f64 / n as f64;
        let bound = 4.0 / (n as f64).sqrt();
        assert!(
            (exited - expected).abs() <= bound,
            "exited {exited} vs {expected}"
        );
        // CPC case: no inward crossings at all
        assert_eq!(r1.inward_crossings(), 0);
        // every exit leaves exactly one crossing
        for rec in &r1.trajectories {
            assert!(rec.crossings.len() <= 1);
        }
    }

    #[test]
    fn ensemble_snapshots_track_equivariance() {
        let g = centered3(1.0, 1.0);
        let e = Evolution::build(WaveState::Gaussian(g), EvolveMethod::AnalyticFree, 5.0).unwrap();
        let region = Region::ball([0.0; 3], 25.0).unwrap();
        let mesh = region.surface_mesh(8, 16);
        let opts = IntegratorOptions::default();
        let n = 2000;
        let r = run_ensemble(&e, &region, &mesh, n, 5, 5.0, &opts, &[2.0]).unwrap();
        let mut xs: Vec<f64> = r.trajectories.iter().map(|t| t.snapshots[0][0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s = width(2.0);
        let d = crate::compare::ks_statistic_sorted(&xs, |x| {
            crate::numeric::normal_cdf(x / s)
        });
        let bound = 1.63 / (n as f64).sqrt();
        assert!(d <= bound, "KS {d} > {bound}");
    }

    #[test]
    fn crossing_measures_cpc_case() {
        let g = centered3(1.0, 1.0);
        let e = Evolution::build(WaveState::Gaussian(g), EvolveMethod::AnalyticFree, 40.0).unwrap();
        let region = Region::ball([0.0; 3], 4.0).unwrap();
        let mesh = region.surface_mesh(8, 16);
        let groups = PatchGroups::polar_bands(&mesh, 4, [0.0, 0.0, 1.0]).unwrap();
        let r = run_ensemble(
            &e,
            &region,
            &mesh,
            400,
            3,
            40.0,
            &IntegratorOptions::default(),
            &[],
        )
        .unwrap();
        let edges: Vec<f64> = (0..=16).map(|i| 2.5 * i as f64).collect();
        let measures = estimate_crossing_measures(&r, &edges, &groups);
        // no inward crossings: E(N) and E(N_s) agree identically
        for g in 0..groups.count {
            for b in 0..16 {
                assert_eq!(measures.unsigned.mean[g][b], measures.signed.mean[g][b]);
            }
        }
        // totals equal the exit count
        let total: f64 = measures
            .unsigned
            .mean
            .iter()
            .flatten()
            .sum::<f64>();
        let exits_in_range = r
            .exits()
            .filter(|(_, e)| e.time < 40.0)
            .count() as f64;
        assert!((total * 400.0 - exits_in_range).abs() <= 1e-9);
        // exit statistics marginals are consistent
        let stats = exit_statistics(&r, &edges, &groups);
        let marg_sum: f64 = stats.time_marginal.masses.iter().sum();
        assert!((marg_sum - stats.exited_fraction).abs() <= 1e-12);
        let joint_sum: f64 = stats.joint.mean.iter().flatten().sum();
        assert!((joint_sum - marg_sum).abs() <= 1e-12);
    }

    #[test]
    fn backflow_ensemble_separates_truncated_current() {
        let m = 4.0;
        let g1 = make_gaussian(1, [0.0; 3], [4.0, 0.0, 0.0], 1.0, m).unwrap();
        let g2 = make_gaussian(1, [-12.0, 0.0, 0.0], [12.0, 0.0, 0.0], 1.0, m).unwrap();
        let sum = GaussianSum::new(vec![
            (Complex64::new(1.0, 0.0), g1),
            (Complex64::new(0.65, 0.0), g2),
        ])
        .unwrap();
        let e = Evolution::build(WaveState::Sum(sum), EvolveMethod::AnalyticFree, 12.0).unwrap();
        let region = Region::interval(-20.0, 6.0).unwrap();
        let mesh = region.surface_mesh(0, 0);
        let groups = PatchGroups::polar_bands(&mesh, 2, [1.0, 0.0, 0.0]).unwrap();
        let r = run_ensemble(
            &e,
            &region,
            &mesh,
            800,
            17,
            12.0,
            &IntegratorOptions::default(),
            &[],
        )
        .unwrap();
        assert!(r.inward_crossings() > 0, "no backflow events sampled");
        let edges: Vec<f64> = (0..=32).map(|i| 12.0 * i as f64 / 32.0).collect();
        let measures = estimate_crossing_measures(&r, &edges, &groups);
        // some bin counts more crossings than signed crossings
        let mut separated = false;
        for g in 0..groups.count {
            for b in 0..32 {
                if measures.unsigned.mean[g][b] > measures.signed.mean[g][b] + 1e-12 {
                    separated = true;
                }
            }
        }
        assert!(separated, "E(N) never exceeded E(N_s)");
        // first exits are fewer than all outward crossings
        let outward: usize = r
            .trajectories
            .iter()
            .flat_map(|t| &t.crossings)
            .filter(|c| c.sign > 0)
            .count();
        let exits = r.exits().count();
        assert!(exits < outward);
        // truncated current integrates to the exited fraction
        let trunc = truncated_current(&r, &edges, &groups);
        let dt = 12.0 / 32.0;
        let mut integral = 0.0;
        for g in 0..groups.count {
            for b in 0..32 {
                integral += trunc.mean[g][b] * dt * groups.areas[g];
            }
        }
        let exited_fraction = exits as f64 / 800.0;
        assert!(
            (integral - exited_fraction).abs() <= 1e-9,
            "{integral} vs {exited_fraction}"
        );
        assert!(integral <= 1.0 + 1e-12);
    }
}

#[cfg(test)]
mod backward_crossing_tests {
    use super::*;
    use crate::evolve::{EvolveMethod, Evolution};
    use crate::flux::Region;
    use crate::state::make_gaussian;

    // expected inward crossings of growing spheres are nonincreasing for a
    // boosted free packet (they vanish in the large-radius limit)
    #[test]
    fn inward_crossings_decay_with_radius() {
        let g = make_gaussian(3, [0.0; 3], [2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let e = Evolution::build(WaveState::Gaussian(g), EvolveMethod::AnalyticFree, 60.0).unwrap();
        let opts = IntegratorOptions::default();
        let mut counts = Vec::new();
        for &radius in &[10.0, 20.0, 40.0] {
            let region = Region::ball([0.0; 3], radius).unwrap();
            let mesh = region.surface_mesh(8, 16);
            let r = run_ensemble(&e, &region, &mesh, 1000, 31, 60.0, &opts, &[]).unwrap();
            counts.push(r.inward_crossings());
        }
        assert!(
            counts[0] >= counts[1] && counts[1] >= counts[2],
            "inward counts {counts:?} not nonincreasing"
        );
    }
}
