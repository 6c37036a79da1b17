//! Time evolution of wavefunctions.
//!
//! Free Gaussians and their superpositions evolve in closed form; grid
//! states evolve by exact spectral free steps or by Strang split-step with
//! one of the built-in short-range potentials. [`Evolution`] wraps an
//! initial state plus a method and, for grid methods, a store of frames at
//! uniform times with lazily built velocity grids for trajectory
//! integration.

use num_complex::Complex64;
use std::sync::OnceLock;

use crate::error::{CoreError, Result};
use crate::exec;
use crate::state::{fftops, GaussianState, GridSpec, GridState, MomentumState, WaveState};
use crate::{dot, Point};

/// Built-in real, bounded, short-range potentials.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    Zero,
    /// `V0 exp(-|x|^2 / (2 a^2))`, centered at the origin.
    GaussianBump { v0: f64, a: f64 },
    /// `V0` for `|x| <= a`, zero outside (well for negative `V0`).
    SquareBarrier { v0: f64, a: f64 },
}

impl Potential {
    pub fn eval(&self, x: Point) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::GaussianBump { v0, a } => {
                let r2 = dot(x, x);
                v0 * (-r2 / (2.0 * a * a)).exp()
            }
            Potential::SquareBarrier { v0, a } => {
                if dot(x, x) <= a * a {
                    *v0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Potential::Zero => true,
            Potential::GaussianBump { v0, .. } | Potential::SquareBarrier { v0, .. } => *v0 == 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Potential::Zero => true,
            Potential::GaussianBump { v0, a } | Potential::SquareBarrier { v0, a } => {
                v0.is_finite() && a.is_finite() && *a > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidParameter(
                "potential parameters must be finite with a > 0".into(),
            ))
        }
    }
}

/// Exact free evolution of a Gaussian packet by `t`.
///
/// The center moves classically, the width grows as
/// `s_t = sigma sqrt(1 + (t / 2 m sigma^2)^2)`, and the norm stays 1.
pub fn evolve_gaussian(g: &GaussianState, t: f64) -> GaussianState {
    g.advanced(t)
}

/// One exact spectral free step: multiply momentum amplitudes by
/// `exp(-i p^2 dt / 2m)`. Negative `dt` evolves backward.
pub fn free_step_spectral(s: &GridState, dt: f64) -> GridState {
    let mut amps = s.amplitudes.clone();
    fftops::forward(&s.spec, &mut amps);
    let half = dt / (2.0 * s.mass);
    fftops::multiply_momentum(&s.spec, &mut amps, |p| {
        Complex64::from_polar(1.0, -dot(p, p) * half)
    });
    fftops::inverse_normalized(&s.spec, &mut amps);
    GridState {
        spec: s.spec.clone(),
        amplitudes: amps,
        time: s.time + dt,
        mass: s.mass,
    }
}

/// Potential samples on the grid nodes.
pub fn potential_grid(spec: &GridSpec, v: &Potential) -> Vec<f64> {
    exec::map_indexed(spec.total_points(), |flat| v.eval(spec.position(flat)))
}

/// Total energy `<psi|H|psi> / <psi|psi>` of a grid state.
pub fn total_energy(s: &GridState, v: &Potential) -> f64 {
    let mut hat = s.amplitudes.clone();
    fftops::forward(&s.spec, &mut hat);
    let factor = s.spec.cell_volume() / s.spec.total_points() as f64;
    let mut kinetic = 0.0;
    match s.spec.dim() {
        1 => {
            for (j, c) in hat.iter().enumerate() {
                let p = s.spec.momentum(0, j);
                kinetic += p * p / (2.0 * s.mass) * c.norm_sqr();
            }
        }
        _ => {
            let (ny, nz) = (s.spec.axis_points(1), s.spec.axis_points(2));
            for (flat, c) in hat.iter().enumerate() {
                let jz = flat % nz;
                let rest = flat / nz;
                let px = s.spec.momentum(0, rest / ny);
                let py = s.spec.momentum(1, rest % ny);
                let pz = s.spec.momentum(2, jz);
                kinetic += (px * px + py * py + pz * pz) / (2.0 * s.mass) * c.norm_sqr();
            }
        }
    }
    kinetic *= factor;
    let cell = s.spec.cell_volume();
    let potential: f64 = s
        .amplitudes
        .iter()
        .enumerate()
        .map(|(flat, a)| v.eval(s.spec.position(flat)) * a.norm_sqr() * cell)
        .sum();
    (kinetic + potential) / s.norm_sq()
}

/// Fraction of the density in the outer 10% margin of the grid (per axis).
pub fn margin_mass_fraction(s: &GridState) -> f64 {
    let spec = &s.spec;
    let mut margin = 0.0;
    let mut total = 0.0;
    for (flat, a) in s.amplitudes.iter().enumerate() {
        let x = spec.position(flat);
        let rho = a.norm_sqr();
        total += rho;
        for k in 0..spec.dim() {
            if x[k].abs() > 0.45 * spec.axis_length(k) {
                margin += rho;
                break;
            }
        }
    }
    margin / total
}

fn check_escape_guard(s: &GridState) -> Result<()> {
    let frac = margin_mass_fraction(s);
    if frac > 1e-6 {
        return Err(CoreError::Resolution(format!(
            "grid escape: {frac:.3e} of the mass is in the outer 10% margin"
        )));
    }
    Ok(())
}

/// Strang split-step `exp(-i V dt/2) exp(-i H0 dt) exp(-i V dt/2)`,
/// applied `steps` times.
///
/// Norm drift above 1e-9, relative energy drift above 1e-4, or mass hitting
/// the outer grid margin is reported as a resolution error.
pub fn split_step(s: &GridState, v: &Potential, dt: f64, steps: usize) -> Result<GridState> {
    if !(dt > 0.0) {
        return Err(CoreError::InvalidParameter("dt must be positive".into()));
    }
    let mut driver = SplitStepDriver::new(s.clone(), v.clone(), dt)?;
    driver.advance(steps);
    driver.finish()
}

/// Incremental split-step propagator, reused by [`Evolution::build`].
pub struct SplitStepDriver {
    state: GridState,
    potential: Potential,
    dt: f64,
    half_phase: Vec<Complex64>,
    // kinetic phase in raw momentum order, inverse-FFT 1/N folded in
    kinetic_phase: Vec<Complex64>,
    initial_norm: f64,
    initial_energy: f64,
}

impl SplitStepDriver {
    pub fn new(state: GridState, potential: Potential, dt: f64) -> Result<Self> {
        potential.validate()?;
        let spec = state.spec.clone();
        let vgrid = potential_grid(&spec, &potential);
        let half_phase: Vec<Complex64> = vgrid
            .iter()
            .map(|&vi| Complex64::from_polar(1.0, -0.5 * vi * dt))
            .collect();
        let inv_n = 1.0 / spec.total_points() as f64;
        let half = dt / (2.0 * state.mass);
        let mut kinetic_phase = vec![Complex64::new(1.0, 0.0); spec.total_points()];
        fftops::multiply_momentum(&spec, &mut kinetic_phase, |p| {
            Complex64::from_polar(inv_n, -dot(p, p) * half)
        });
        let initial_norm = state.norm_sq();
        let initial_energy = total_energy(&state, &potential);
        Ok(SplitStepDriver {
            state,
            potential,
            dt,
            half_phase,
            kinetic_phase,
            initial_norm,
            initial_energy,
        })
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    pub fn advance(&mut self, steps: usize) {
        for _ in 0..steps {
            self.one_step();
        }
    }

    fn one_step(&mut self) {
        let spec = self.state.spec.clone();
        let amps = &mut self.state.amplitudes;
        multiply_elementwise(amps, &self.half_phase);
        fftops::forward(&spec, amps);
        multiply_elementwise(amps, &self.kinetic_phase);
        fftops::inverse(&spec, amps);
        multiply_elementwise(amps, &self.half_phase);
        self.state.time += self.dt;
    }

    /// Resolution checks that are cheap enough to run per frame.
    pub fn check(&self) -> Result<()> {
        let norm = self.state.norm_sq();
        if (norm - self.initial_norm).abs() > 1e-9 {
            return Err(CoreError::Resolution(format!(
                "norm drift {:.3e}",
                (norm - self.initial_norm).abs()
            )));
        }
        check_escape_guard(&self.state)
    }

    pub fn finish(self) -> Result<GridState> {
        self.check()?;
        let energy = total_energy(&self.state, &self.potential);
        let scale = self.initial_energy.abs().max(1e-12);
        if ((energy - self.initial_energy) / scale).abs() > 1e-4 {
            return Err(CoreError::Resolution(format!(
                "relative energy drift {:.3e}",
                ((energy - self.initial_energy) / scale).abs()
            )));
        }
        Ok(self.state)
    }
}

fn multiply_elementwise(amps: &mut [Complex64], phases: &[Complex64]) {
    let chunk = 4096.min(amps.len()).max(1);
    exec::for_each_chunk_mut(amps, chunk, |i, c| {
        let base = i * chunk;
        for (k, v) in c.iter_mut().enumerate() {
            *v *= phases[base + k];
        }
    });
}

/// Long-time asymptotic form of the free evolution,
/// `psi_t(x) ~ (m / (i t))^{d/2} exp(i m x^2 / 2t) psihat(m x / t)`,
/// evaluated on `spec`. The input state must be at time 0.
pub fn asymptotic_state(psi0: &WaveState, t: f64, spec: &GridSpec) -> Result<GridState> {
    if !(t > 0.0) {
        return Err(CoreError::InvalidParameter(
            "asymptotic form needs t > 0".into(),
        ));
    }
    if psi0.time() != 0.0 {
        return Err(CoreError::InvalidParameter(
            "asymptotic form expects the initial state at time 0".into(),
        ));
    }
    if psi0.dim() != spec.dim() {
        return Err(CoreError::InvalidParameter(
            "state and grid dimensions differ".into(),
        ));
    }
    let d = spec.dim() as f64;
    let m = psi0.mass();
    // (m/(i t))^{d/2} = (m/t)^{d/2} e^{-i pi d/4}
    let prefactor =
        Complex64::from_polar((m / t).powf(d / 2.0), -std::f64::consts::FRAC_PI_4 * d);
    // transform lookup: closed form for analytic input, interpolation of
    // the discrete transform for grid input
    let grid_hat: Option<GridState> = match psi0 {
        WaveState::Grid(g) => {
            let MomentumState {
                spec: mspec,
                amplitudes,
                time,
                mass,
            } = crate::state::to_momentum(g);
            Some(GridState::new(mspec, amplitudes, time, mass)?)
        }
        _ => None,
    };
    let amplitudes = exec::map_indexed(spec.total_points(), |flat| {
        let x = spec.position(flat);
        let p = crate::scale(x, m / t);
        let hat_val = match (&grid_hat, psi0) {
            (Some(ms), _) => ms.evaluate(p).unwrap_or_else(|_| Complex64::new(0.0, 0.0)),
            (None, WaveState::Gaussian(g)) => g.momentum_amplitude(p),
            (None, WaveState::Sum(s)) => s.momentum_amplitude(p),
            (None, WaveState::Grid(_)) => unreachable!(),
        };
        let phase = Complex64::from_polar(1.0, m * dot(x, x) / (2.0 * t));
        prefactor * phase * hat_val
    });
    GridState::new(spec.clone(), amplitudes, t, m)
}

/// Finite-time wave-operator approximation: interacting evolution to
/// `t_max`, then free evolution back by the same span. The result is the
/// approximate out-state whose momentum density feeds the general flux
/// identity.
pub fn wave_operator_out(psi: &GridState, v: &Potential, t_max: f64, dt: f64) -> Result<GridState> {
    if !(t_max > 0.0) || !(dt > 0.0) {
        return Err(CoreError::InvalidParameter(
            "wave operator needs positive horizon and dt".into(),
        ));
    }
    let steps = (t_max / dt).round().max(1.0) as usize;
    let span = steps as f64 * dt;
    let forward = split_step(psi, v, dt, steps)?;
    Ok(free_step_spectral(&forward, -span))
}

/// Propagation method for [`Evolution`].
#[derive(Debug, Clone)]
pub enum EvolveMethod {
    /// Closed-form free evolution; the initial state must be analytic.
    AnalyticFree,
    /// Exact spectral free evolution with frames every `dt_frame`.
    SpectralFree { dt_frame: f64 },
    /// Strang split-step with inner step `dt`, frames every `frame_every` steps.
    SplitStep {
        potential: Potential,
        dt: f64,
        frame_every: usize,
    },
}

/// A stored grid frame with lazily built velocity/density grids.
pub struct Frame {
    pub time: f64,
    pub state: GridState,
    velocity: OnceLock<VelocityGrids>,
}

struct VelocityGrids {
    velocity: Vec<[f64; 3]>,
    density: Vec<f64>,
    max_density: f64,
}

impl Frame {
    fn new(state: GridState) -> Self {
        Frame {
            time: state.time,
            state,
            velocity: OnceLock::new(),
        }
    }

    fn velocity_grids(&self) -> &VelocityGrids {
        self.velocity.get_or_init(|| {
            let grads = self.state.gradient_grids();
            let m = self.state.mass;
            let n = self.state.amplitudes.len();
            let mut velocity = vec![[0.0; 3]; n];
            let mut density = vec![0.0; n];
            let mut max_density = 0.0f64;
            for i in 0..n {
                let psi = self.state.amplitudes[i];
                let rho = psi.norm_sqr();
                density[i] = rho;
                max_density = max_density.max(rho);
                if rho > 0.0 {
                    for (k, g) in grads.iter().enumerate() {
                        velocity[i][k] = (g[i] / psi).im / m;
                    }
                }
            }
            VelocityGrids {
                velocity,
                density,
                max_density,
            }
        })
    }
}

/// An initial state plus a propagation method; grid methods are realized as
/// a store of frames at uniform times. Immutable once built, so any number
/// of concurrent readers (frame lookup, interpolation) is safe.
pub struct Evolution {
    initial: WaveState,
    method: EvolveMethod,
    t_end: f64,
    frames: Vec<Frame>,
}

impl Evolution {
    /// Propagate (for grid methods) and store frames covering `[t0, t_end]`.
    pub fn build(initial: WaveState, method: EvolveMethod, t_end: f64) -> Result<Evolution> {
        let t0 = initial.time();
        if t_end < t0 {
            return Err(CoreError::InvalidParameter(
                "t_end precedes the initial time".into(),
            ));
        }
        let frames = match &method {
            EvolveMethod::AnalyticFree => {
                if !initial.is_analytic() {
                    return Err(CoreError::InvalidParameter(
                        "analytic evolution needs an analytic initial state".into(),
                    ));
                }
                Vec::new()
            }
            EvolveMethod::SpectralFree { dt_frame } => {
                let g = match &initial {
                    WaveState::Grid(g) => g,
                    _ => {
                        return Err(CoreError::InvalidParameter(
                            "spectral evolution needs a grid initial state".into(),
                        ))
                    }
                };
                if !(*dt_frame > 0.0) {
                    return Err(CoreError::InvalidParameter(
                        "dt_frame must be positive".into(),
                    ));
                }
                let count = ((t_end - t0) / dt_frame).ceil() as usize + 1;
                let mut frames = Vec::with_capacity(count);
                for j in 0..count {
                    let state = if j == 0 {
                        g.clone()
                    } else {
                        free_step_spectral(g, j as f64 * dt_frame)
                    };
                    validate_frame(&state)?;
                    frames.push(Frame::new(state));
                }
                frames
            }
            EvolveMethod::SplitStep {
                potential,
                dt,
                frame_every,
            } => {
                let g = match &initial {
                    WaveState::Grid(g) => g,
                    _ => {
                        return Err(CoreError::InvalidParameter(
                            "split-step evolution needs a grid initial state".into(),
                        ))
                    }
                };
                if *frame_every == 0 {
                    return Err(CoreError::InvalidParameter(
                        "frame_every must be >= 1".into(),
                    ));
                }
                let dt_frame = dt * *frame_every as f64;
                let count = ((t_end - t0) / dt_frame).ceil() as usize + 1;
                let mut driver = SplitStepDriver::new(g.clone(), potential.clone(), *dt)?;
                let mut frames = Vec::with_capacity(count);
                validate_frame(driver.state())?;
                frames.push(Frame::new(driver.state().clone()));
                for _ in 1..count {
                    driver.advance(*frame_every);
                    driver.check()?;
                    validate_frame(driver.state())?;
                    frames.push(Frame::new(driver.state().clone()));
                }
                driver.finish()?;
                frames
            }
        };
        Ok(Evolution {
            initial,
            method,
            t_end,
            frames,
        })
    }

    pub fn initial_state(&self) -> &WaveState {
        &self.initial
    }

    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    pub fn mass(&self) -> f64 {
        self.initial.mass()
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.method, EvolveMethod::AnalyticFree)
    }

    pub fn time_range(&self) -> (f64, f64) {
        (self.initial.time(), self.t_end)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame_times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if self.is_analytic() {
            // free analytic states evolve exactly for any time, backward
            // included
            return Ok(());
        }
        let (t0, t1) = self.time_range();
        if t < t0 - 1e-9 || t > t1 + 1e-9 {
            return Err(CoreError::OutOfDomain(format!(
                "time {t} outside evolution range [{t0}, {t1}]"
            )));
        }
        Ok(())
    }

    /// The state at time `t`: exact for analytic evolutions, the stored
    /// frame at frame times, linear interpolation of amplitudes otherwise.
    pub fn state_at(&self, t: f64) -> Result<WaveState> {
        self.check_time(t)?;
        match &self.method {
            EvolveMethod::AnalyticFree => Ok(match &self.initial {
                WaveState::Gaussian(g) => WaveState::Gaussian(g.advanced(t - g.time)),
                WaveState::Sum(s) => WaveState::Sum(s.advanced(t - s.time())),
                WaveState::Grid(_) => unreachable!(),
            }),
            _ => {
                let (lo, hi, w) = self.bracket(t)?;
                if w == 0.0 || lo == hi {
                    return Ok(WaveState::Grid(self.frames[lo].state.clone()));
                }
                let a = &self.frames[lo].state;
                let b = &self.frames[hi].state;
                let amps: Vec<Complex64> = a
                    .amplitudes
                    .iter()
                    .zip(&b.amplitudes)
                    .map(|(x, y)| x * (1.0 - w) + y * w)
                    .collect();
                Ok(WaveState::Grid(GridState {
                    spec: a.spec.clone(),
                    amplitudes: amps,
                    time: t,
                    mass: a.mass,
                }))
            }
        }
    }

    fn bracket(&self, t: f64) -> Result<(usize, usize, f64)> {
        if self.frames.is_empty() {
            return Err(CoreError::InvalidState("no frames stored".into()));
        }
        if self.frames.len() == 1 {
            return Ok((0, 0, 0.0));
        }
        let t0 = self.frames[0].time;
        let dt = self.frames[1].time - t0;
        let raw = (t - t0) / dt;
        let lo = raw.floor().clamp(0.0, (self.frames.len() - 1) as f64) as usize;
        let hi = (lo + 1).min(self.frames.len() - 1);
        let w = (raw - lo as f64).clamp(0.0, 1.0);
        if w < 1e-9 {
            Ok((lo, lo, 0.0))
        } else if w > 1.0 - 1e-9 {
            Ok((hi, hi, 0.0))
        } else {
            Ok((lo, hi, w))
        }
    }

    /// Bohmian velocity at `(x, t)`: exact for analytic evolutions,
    /// trilinear in space and linear in time between frames for grid
    /// evolutions. `eps_node` is the node guard relative to the peak
    /// density.
    pub fn velocity_at(&self, x: Point, t: f64, eps_node: f64) -> Result<Point> {
        self.check_time(t)?;
        match &self.method {
            EvolveMethod::AnalyticFree => match &self.initial {
                WaveState::Gaussian(g) => Ok(g.advanced(t - g.time).velocity(x)),
                WaveState::Sum(s) => {
                    let st = s.advanced(t - s.time());
                    let rho = st.density(x);
                    let guard = eps_node * st.density_bound();
                    if rho < guard {
                        return Err(CoreError::NodeProximity {
                            density: rho,
                            guard,
                        });
                    }
                    let psi = st.amplitude(x);
                    let grad = st.gradient(x);
                    let m = st.mass();
                    let mut v = [0.0; 3];
                    for k in 0..st.dim() {
                        v[k] = (grad[k] / psi).im / m;
                    }
                    Ok(v)
                }
                WaveState::Grid(_) => unreachable!(),
            },
            _ => {
                let (lo, hi, w) = self.bracket(t)?;
                let va = frame_velocity(&self.frames[lo], x, eps_node)?;
                if w == 0.0 || lo == hi {
                    return Ok(va);
                }
                let vb = frame_velocity(&self.frames[hi], x, eps_node)?;
                Ok([
                    va[0] * (1.0 - w) + vb[0] * w,
                    va[1] * (1.0 - w) + vb[1] * w,
                    va[2] * (1.0 - w) + vb[2] * w,
                ])
            }
        }
    }

    /// Peak density over the evolution, the reference for node guards.
    pub fn peak_density(&self) -> f64 {
        match &self.method {
            EvolveMethod::AnalyticFree => match &self.initial {
                WaveState::Gaussian(g) => {
                    // width is minimal at t = 0
                    let d = g.dim as f64;
                    (2.0 * std::f64::consts::PI * g.sigma * g.sigma).powf(-d / 2.0)
                }
                WaveState::Sum(s) => s.density_bound(),
                WaveState::Grid(_) => unreachable!(),
            },
            _ => self
                .frames
                .iter()
                .map(|f| f.state.max_density())
                .fold(0.0, f64::max),
        }
    }
}

fn validate_frame(state: &GridState) -> Result<()> {
    let defect = (state.norm_sq() - 1.0).abs();
    if defect > 1e-9 {
        return Err(CoreError::Resolution(format!(
            "frame norm defect {defect:.3e} at t = {}",
            state.time
        )));
    }
    check_escape_guard(state)
}

fn frame_velocity(frame: &Frame, x: Point, eps_node: f64) -> Result<Point> {
    let spec = &frame.state.spec;
    if !spec.contains(x) {
        return Err(CoreError::DomainExit { time: frame.time });
    }
    let grids = frame.velocity_grids();
    let dim = spec.dim();
    let mut i0 = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for k in 0..dim {
        let h = spec.spacing(k);
        let tt = (x[k] + 0.5 * spec.axis_length(k)) / h;
        let i = tt.floor() as usize;
        i0[k] = i.min(spec.axis_points(k) - 1);
        frac[k] = tt - i0[k] as f64;
    }
    let corners = 1usize << dim;
    let mut v = [0.0; 3];
    let mut rho = 0.0;
    for corner in 0..corners {
        let mut idx = [0usize; 3];
        let mut weight = 1.0;
        for k in 0..dim {
            let up = (corner >> k) & 1;
            let n = spec.axis_points(k);
            idx[k] = (i0[k] + up) % n;
            weight *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
        }
        let flat = spec.flat_index(idx);
        rho += weight * grids.density[flat];
        for k in 0..dim {
            v[k] += weight * grids.velocity[flat][k];
        }
    }
    let guard = eps_node * grids.max_density;
    if rho < guard {
        return Err(CoreError::NodeProximity {
            density: rho,
            guard,
        });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{discretize, make_gaussian};

    fn grid_1d(g: &GaussianState, n: usize, l: f64) -> GridState {
        let spec = GridSpec::new_1d(n, l).unwrap();
        discretize(&WaveState::Gaussian(g.clone()), &spec)
            .unwrap()
            .state
    }

    fn max_abs_diff(a: &GridState, b: &GridState) -> f64 {
        a.amplitudes
            .iter()
            .zip(&b.amplitudes)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    fn l2_diff(a: &GridState, b: &GridState) -> f64 {
        let cell = a.spec.cell_volume();
        (a.amplitudes
            .iter()
            .zip(&b.amplitudes)
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            * cell)
            .sqrt()
    }

    #[test]
    fn gaussian_evolution_identity_and_width() {
        let g = make_gaussian(1, [0.0; 3], [0.0; 3], 1.0, 1.0).unwrap();
        let same = evolve_gaussian(&g, 0.0);
        assert_eq!(g.amplitude([0.3, 0.0, 0.0]), same.amplitude([0.3, 0.0, 0.0]));
        // width oracle: spectral propagation of the sampled packet, then
        // second moment of the density
        let g2 = evolve_gaussian(&g, 2.0);
        assert!((g2.width() - 2.0f64.sqrt()).abs() < 1e-14);
        let gs = grid_1d(&g, 512, 64.0);
        let evolved = free_step_spectral(&gs, 2.0);
        let cell = evolved.spec.cell_volume();
        let mut second = 0.0;
        for (i, a) in evolved.amplitudes.iter().enumerate() {
            let x = evolved.spec.coord(0, i);
            second += x * x * a.norm_sqr() * cell;
        }
        assert!((second - 2.0).abs() < 1e-8, "second moment {second}");
    }

    #[test]
    fn gaussian_center_moves_classically() {
        let g = make_gaussian(1, [0.0; 3], [2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let g5 = evolve_gaussian(&g, 5.0);
        assert!((g5.packet_center()[0] - 10.0).abs() < 1e-14);
        let gs = grid_1d(&g, 512, 64.0);
        let evolved = free_step_spectral(&gs, 5.0);
        let (best, _) = evolved
            .amplitudes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm_sqr().partial_cmp(&b.1.norm_sqr()).unwrap())
            .unwrap();
        let h = evolved.spec.spacing(0);
        assert!((evolved.spec.coord(0, best) - 10.0).abs() <= h);
    }

    #[test]
    fn free_step_matches_analytic_and_reverses() {
        let g = make_gaussian(1, [0.0; 3], [1.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let gs = grid_1d(&g, 512, 64.0);
        // dt = 0 identity
        let id = free_step_spectral(&gs, 0.0);
        assert!(max_abs_diff(&gs, &id) <= 1e-14);
        // oracle: analytic evolution, then sampling
        let spectral = free_step_spectral(&gs, 1.0);
        let analytic = grid_1d(&evolve_gaussian(&g, 1.0), 512, 64.0);
        assert!(
            max_abs_diff(&spectral, &analytic) <= 1e-8,
            "err {}",
            max_abs_diff(&spectral, &analytic)
        );
        // reversibility
        let back = free_step_spectral(&free_step_spectral(&gs, 0.7), -0.7);
        assert!(max_abs_diff(&gs, &back) <= 1e-12);
    }

    #[test]
    fn free_step_matches_analytic_3d() {
        let g = make_gaussian(3, [0.0; 3], [1.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let spec = GridSpec::new_3d([64; 3], [24.0; 3]).unwrap();
        let gs = discretize(&WaveState::Gaussian(g.clone()), &spec)
            .unwrap()
            .state;
        let spectral = free_step_spectral(&gs, 1.0);
        let analytic = discretize(&WaveState::Gaussian(evolve_gaussian(&g, 1.0)), &spec)
            .unwrap()
            .state;
        assert!(
            max_abs_diff(&spectral, &analytic) <= 1e-8,
            "err {}",
            max_abs_diff(&spectral, &analytic)
        );
    }

    #[test]
    fn split_step_with_zero_potential_is_free() {
        let g = make_gaussian(1, [0.0; 3], [1.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let gs = grid_1d(&g, 512, 64.0);
        let split = split_step(&gs, &Potential::Zero, 0.05, 20).unwrap();
        let free = free_step_spectral(&gs, 1.0);
        assert!(max_abs_diff(&split, &free) <= 1e-12);
    }

    #[test]
    fn split_step_is_second_order() {
        // Richardson self-convergence: halving dt divides the error by ~4
        let g = make_gaussian(1, [-3.0, 0.0, 0.0], [1.5, 0.0, 0.0], 1.0, 1.0).unwrap();
        let gs = grid_1d(&g, 512, 64.0);
        let v = Potential::GaussianBump { v0: 1.0, a: 1.0 };
        let reference = split_step(&gs, &v, 0.00125, 800).unwrap();
        let coarse = split_step(&gs, &v, 0.02, 50).unwrap();
        let fine = split_step(&gs, &v, 0.01, 100).unwrap();
        let e1 = l2_diff(&coarse, &reference);
        let e2 = l2_diff(&fine, &reference);
        let ratio = e1 / e2;
        assert!(
            (3.2..=4.8).contains(&ratio),
            "convergence ratio {ratio} (e1={e1:.3e}, e2={e2:.3e})"
        );
    }

    #[test]
    fn split_step_barrier_preserves_norm_and_splits_packet() {
        let g = make_gaussian(1, [-6.0, 0.0, 0.0], [2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let gs = grid_1d(&g, 1024, 48.0);
        let v = Potential::SquareBarrier { v0: 3.0, a: 0.5 };
        let out = split_step(&gs, &v, 0.002, 2000).unwrap();
        assert!((out.norm_sq() - 1.0).abs() <= 1e-9);
        let cell = out.spec.cell_volume();
        let mut left = 0.0;
        let mut right = 0.0;
        for (i, a) in out.amplitudes.iter().enumerate() {
            let x = out.spec.coord(0, i);
            if x < -0.5 {
                left += a.norm_sqr() * cell;
            } else if x > 0.5 {
                right += a.norm_sqr() * cell;
            }
        }
        assert!(left > 0.05, "reflected mass {left}");
        assert!(right > 0.05, "transmitted mass {right}");
    }

    #[test]
    fn asymptotic_state_properties() {
        let g = make_gaussian(1, [0.0; 3], [0.0; 3], 1.0, 1.0).unwrap();
        assert!(asymptotic_state(&WaveState::Gaussian(g.clone()), -1.0, &GridSpec::new_1d(8, 1.0).unwrap()).is_err());
        let mut errors = Vec::new();
        for &t in &[10.0, 30.0, 100.0] {
            let s_t = evolve_gaussian(&g, t).width();
            let l = (16.0 * s_t).max(64.0);
            let n = 4096;
            let spec = GridSpec::new_1d(n, l).unwrap();
            let asym = asymptotic_state(&WaveState::Gaussian(g.clone()), t, &spec).unwrap();
            let exact = discretize(&WaveState::Gaussian(evolve_gaussian(&g, t)), &spec)
                .unwrap()
                .state;
            let rel = l2_diff(&asym, &exact); // exact state has unit norm
            errors.push(rel);
            // |psi_asym|^2 equals the rescaled momentum density
            let m = 1.0;
            let i = n / 2 + n / 8;
            let x = spec.coord(0, i);
            let expected = (m / t) * g.momentum_density([m * x / t, 0.0, 0.0]);
            let got = asym.amplitudes[i].norm_sqr();
            assert!(
                (got - expected).abs() <= 1e-12 * (m / t).max(1.0) + 1e-15,
                "modulus identity off by {}",
                (got - expected).abs()
            );
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
        assert!(errors[2] <= 0.05, "relative error at t=100: {}", errors[2]);
    }

    #[test]
    fn wave_operator_identity_and_perturbative_smallness() {
        let g = make_gaussian(1, [-4.0, 0.0, 0.0], [2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let gs = grid_1d(&g, 512, 64.0);
        let free = wave_operator_out(&gs, &Potential::Zero, 2.0, 0.01).unwrap();
        assert!(max_abs_diff(&free, &gs) <= 1e-10);
        assert!((free.norm_sq() - 1.0).abs() <= 1e-9);
        // weak potential: output distance from input scales ~linearly in V0
        let d1 = l2_diff(
            &wave_operator_out(&gs, &Potential::GaussianBump { v0: 0.08, a: 1.0 }, 2.0, 0.005)
                .unwrap(),
            &gs,
        );
        let d2 = l2_diff(
            &wave_operator_out(&gs, &Potential::GaussianBump { v0: 0.04, a: 1.0 }, 2.0, 0.005)
                .unwrap(),
            &gs,
        );
        let ratio = d1 / d2;
        assert!((1.4..=2.6).contains(&ratio), "V0 scaling ratio {ratio}");
    }

    #[test]
    fn evolution_frames_and_interpolation() {
        let g = make_gaussian(1, [0.0; 3], [1.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let gs = grid_1d(&g, 512, 64.0);
        let ev = Evolution::build(
            WaveState::Grid(gs),
            EvolveMethod::SpectralFree { dt_frame: 0.25 },
            2.0,
        )
        .unwrap();
        assert_eq!(ev.frames().len(), 9);
        // frame times strictly increasing, shared spec, unit norms
        for pair in ev.frames().windows(2) {
            assert!(pair[1].time > pair[0].time);
            assert_eq!(pair[0].state.spec, pair[1].state.spec);
        }
        // state_at at a frame time returns that frame
        let s = ev.state_at(0.5).unwrap();
        if let WaveState::Grid(st) = s {
            assert!(max_abs_diff(&st, &ev.frames()[2].state) == 0.0);
        } else {
            panic!("expected grid state")
        }
        // interpolated state sits between neighbours
        let mid = ev.state_at(0.625).unwrap();
        if let WaveState::Grid(st) = mid {
            let lo = &ev.frames()[2].state;
            let hi = &ev.frames()[3].state;
            for i in [100usize, 256, 400] {
                let expect = lo.amplitudes[i] * 0.5 + hi.amplitudes[i] * 0.5;
                assert!((st.amplitudes[i] - expect).norm() <= 1e-14);
            }
        } else {
            panic!("expected grid state")
        }
    }

    #[test]
    fn grid_velocity_matches_analytic_field() {
        let g = make_gaussian(1, [0.0; 3], [1.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let gs = grid_1d(&g, 1024, 64.0);
        let ev = Evolution::build(
            WaveState::Grid(gs),
            EvolveMethod::SpectralFree { dt_frame: 0.05 },
            1.0,
        )
        .unwrap();
        let reference = Evolution::build(
            WaveState::Gaussian(g),
            EvolveMethod::AnalyticFree,
            1.0,
        )
        .unwrap();
        for &(x, t) in &[(0.3, 0.4), (-1.2, 0.75), (2.0, 0.525)] {
            let v_grid = ev.velocity_at([x, 0.0, 0.0], t, 1e-12).unwrap();
            let v_exact = reference.velocity_at([x, 0.0, 0.0], t, 1e-12).unwrap();
            assert!(
                (v_grid[0] - v_exact[0]).abs() <= 2e-3,
                "velocity mismatch at ({x}, {t}): {} vs {}",
                v_grid[0],
                v_exact[0]
            );
        }
    }

    #[test]
    fn escape_guard_trips_when_packet_reaches_margin() {
        let g = make_gaussian(1, [0.0; 3], [2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let gs = grid_1d(&g, 256, 24.0);
        // by t = 5 the packet center is at x = 10, inside the outer margin
        let result = Evolution::build(
            WaveState::Grid(gs),
            EvolveMethod::SpectralFree { dt_frame: 0.5 },
            5.0,
        );
        assert!(matches!(result, Err(CoreError::Resolution(_))));
    }
}
