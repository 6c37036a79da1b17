//! Wavefunction representations and the quantum-equilibrium sampler.
//!
//! States are either analytic (free Gaussian packets and superpositions of
//! them, exact at any time) or gridded complex amplitudes on a regular
//! Cartesian grid. Units are hbar = 1 throughout; the particle mass is
//! explicit everywhere.
//!
//! Fourier convention: `psihat(p) = (2 pi)^(-d/2) Integral e^(-i p x) psi(x) dx`,
//! so `|psihat|^2` integrates to 1 for a normalized state and momentum-space
//! probabilities need no extra factors.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::exec;
use crate::{add, dot, scale, sub, Point};

pub(crate) mod fftops;

const CHECKPOINT_MAGIC: &[u8; 4] = b"QFX1";

/// Regular Cartesian grid over `[-L_k/2, L_k/2)` per axis, last axis fastest.
///
/// Point counts are powers of two (>= 8) on active axes; the conjugate
/// momentum grid has spacing `2 pi / L_k` and range `[-pi n_k/L_k, pi n_k/L_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    dim: usize,
    n: [usize; 3],
    length: [f64; 3],
}

impl GridSpec {
    pub fn new_1d(n: usize, length: f64) -> Result<Self> {
        Self::new(1, [n, 1, 1], [length, 1.0, 1.0])
    }

    pub fn new_3d(n: [usize; 3], length: [f64; 3]) -> Result<Self> {
        Self::new(3, n, length)
    }

    fn new(dim: usize, n: [usize; 3], length: [f64; 3]) -> Result<Self> {
        if dim != 1 && dim != 3 {
            return Err(CoreError::InvalidParameter(format!(
                "dimension must be 1 or 3, got {dim}"
            )));
        }
        for k in 0..dim {
            if !n[k].is_power_of_two() || n[k] < 8 {
                return Err(CoreError::InvalidParameter(format!(
                    "grid points per axis must be a power of two >= 8, got {}",
                    n[k]
                )));
            }
            if !(length[k] > 0.0) || !length[k].is_finite() {
                return Err(CoreError::InvalidParameter(format!(
                    "grid extent must be positive, got {}",
                    length[k]
                )));
            }
        }
        Ok(GridSpec { dim, n, length })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn axis_points(&self, axis: usize) -> usize {
        self.n[axis]
    }

    pub fn axis_length(&self, axis: usize) -> f64 {
        self.length[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.length[axis] / self.n[axis] as f64
    }

    pub fn total_points(&self) -> usize {
        self.n[..self.dim].iter().product()
    }

    /// Volume of one grid cell (product of active spacings).
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|k| self.spacing(k)).product()
    }

    /// Coordinate of node `i` along `axis`: `-L/2 + i h`.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -0.5 * self.length[axis] + i as f64 * self.spacing(axis)
    }

    /// Momentum of raw-order frequency index `j` along `axis` (signed).
    pub fn momentum(&self, axis: usize, j: usize) -> f64 {
        let n = self.n[axis];
        let signed = if j < n / 2 {
            j as isize
        } else {
            j as isize - n as isize
        };
        2.0 * PI * signed as f64 / self.length[axis]
    }

    pub fn momentum_spacing(&self, axis: usize) -> f64 {
        2.0 * PI / self.length[axis]
    }

    /// Largest representable momentum magnitude along `axis`.
    pub fn momentum_max(&self, axis: usize) -> f64 {
        PI * self.n[axis] as f64 / self.length[axis]
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        match self.dim {
            1 => idx[0],
            _ => (idx[0] * self.n[1] + idx[1]) * self.n[2] + idx[2],
        }
    }

    pub fn unflatten(&self, flat: usize) -> [usize; 3] {
        match self.dim {
            1 => [flat, 0, 0],
            _ => {
                let iz = flat % self.n[2];
                let rest = flat / self.n[2];
                [rest / self.n[1], rest % self.n[1], iz]
            }
        }
    }

    pub fn position(&self, flat: usize) -> Point {
        let idx = self.unflatten(flat);
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = self.coord(k, idx[k]);
        }
        x
    }

    /// The conjugate momentum grid as a `GridSpec` in its own right:
    /// spacing `2 pi / L_k`, extent `2 pi n_k / L_k`, same point counts.
    pub fn conjugate(&self) -> GridSpec {
        let mut length = [1.0; 3];
        for k in 0..self.dim {
            length[k] = 2.0 * PI * self.n[k] as f64 / self.length[k];
        }
        GridSpec {
            dim: self.dim,
            n: self.n,
            length,
        }
    }

    /// True if `x` lies within the grid domain on every active axis.
    pub fn contains(&self, x: Point) -> bool {
        (0..self.dim).all(|k| x[k] >= -0.5 * self.length[k] && x[k] < 0.5 * self.length[k])
    }
}

/// Free Gaussian packet with position-density standard deviation `sigma`
/// at `time = 0`; evolves exactly under the free Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub dim: usize,
    pub center: Point,
    pub momentum: Point,
    pub sigma: f64,
    pub mass: f64,
    pub time: f64,
}

/// Construct a normalized Gaussian packet at t = 0.
pub fn make_gaussian(
    dim: usize,
    center: Point,
    momentum: Point,
    sigma: f64,
    mass: f64,
) -> Result<GaussianState> {
    if dim != 1 && dim != 3 {
        return Err(CoreError::InvalidParameter(format!(
            "dimension must be 1 or 3, got {dim}"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "mass must be positive, got {mass}"
        )));
    }
    for k in dim..3 {
        if center[k] != 0.0 || momentum[k] != 0.0 {
            return Err(CoreError::InvalidParameter(
                "inactive components of center/momentum must be zero".into(),
            ));
        }
    }
    Ok(GaussianState {
        dim,
        center,
        momentum,
        sigma,
        mass,
        time: 0.0,
    })
}

impl GaussianState {
    /// Dimensionless spreading parameter `tau = t / (2 m sigma^2)`.
    pub fn tau(&self) -> f64 {
        self.time / (2.0 * self.mass * self.sigma * self.sigma)
    }

    /// Density width `s_t = sigma sqrt(1 + tau^2)`.
    pub fn width(&self) -> f64 {
        self.sigma * (1.0 + self.tau() * self.tau()).sqrt()
    }

    /// Classical packet center `x0 + p0 t / m`.
    pub fn packet_center(&self) -> Point {
        add(self.center, scale(self.momentum, self.time / self.mass))
    }

    pub fn amplitude(&self, x: Point) -> Complex64 {
        let d = self.dim as f64;
        let tau = self.tau();
        let w = Complex64::new(1.0, tau);
        let xc = self.packet_center();
        let dx = sub(x, xc);
        let q2 = dot(dx, dx);
        let phase = dot(self.momentum, sub(x, self.center))
            - dot(self.momentum, self.momentum) * self.time / (2.0 * self.mass);
        let norm = (2.0 * PI * self.sigma * self.sigma).powf(-d / 4.0);
        let pref = w.powf(-d / 2.0);
        let expo = -q2 / (4.0 * self.sigma * self.sigma * w) + Complex64::new(0.0, phase);
        norm * pref * expo.exp()
    }

    pub fn gradient(&self, x: Point) -> [Complex64; 3] {
        let psi = self.amplitude(x);
        let tau = self.tau();
        let w = Complex64::new(1.0, tau);
        let xc = self.packet_center();
        let mut g = [Complex64::new(0.0, 0.0); 3];
        for k in 0..self.dim {
            let log_grad = -(x[k] - xc[k]) / (2.0 * self.sigma * self.sigma * w)
                + Complex64::new(0.0, self.momentum[k]);
            g[k] = psi * log_grad;
        }
        g
    }

    pub fn density(&self, x: Point) -> f64 {
        let s = self.width();
        let xc = self.packet_center();
        let dx = sub(x, xc);
        let d = self.dim as f64;
        (2.0 * PI * s * s).powf(-d / 2.0) * (-dot(dx, dx) / (2.0 * s * s)).exp()
    }

    /// Bohmian velocity field of the packet, exact:
    /// `v = (p0 + (x - xc) tau / (2 sigma^2 (1 + tau^2))) / m`.
    pub fn velocity(&self, x: Point) -> Point {
        let tau = self.tau();
        let xc = self.packet_center();
        let factor = tau / (2.0 * self.sigma * self.sigma * (1.0 + tau * tau));
        let mut v = [0.0; 3];
        for k in 0..self.dim {
            v[k] = (self.momentum[k] + (x[k] - xc[k]) * factor) / self.mass;
        }
        v
    }

    pub fn momentum_amplitude(&self, p: Point) -> Complex64 {
        let d = self.dim as f64;
        let dp = sub(p, self.momentum);
        let mag = (2.0 * self.sigma * self.sigma / PI).powf(d / 4.0)
            * (-self.sigma * self.sigma * dot(dp, dp)).exp();
        let phase = -dot(p, self.center) - dot(p, p) * self.time / (2.0 * self.mass);
        mag * Complex64::new(0.0, phase).exp()
    }

    pub fn momentum_density(&self, p: Point) -> f64 {
        let d = self.dim as f64;
        let dp = sub(p, self.momentum);
        (2.0 * self.sigma * self.sigma / PI).powf(d / 2.0)
            * (-2.0 * self.sigma * self.sigma * dot(dp, dp)).exp()
    }

    /// The same packet at `time + dt` (free evolution is exact).
    pub fn advanced(&self, dt: f64) -> GaussianState {
        let mut g = self.clone();
        g.time += dt;
        g
    }
}

/// L2 overlap `<g1, g2>` of two Gaussian packets at equal times.
pub fn gaussian_overlap(g1: &GaussianState, g2: &GaussianState) -> Result<Complex64> {
    if g1.dim != g2.dim {
        return Err(CoreError::InvalidParameter(
            "overlap requires equal dimensions".into(),
        ));
    }
    if (g1.time - g2.time).abs() > 1e-12 {
        return Err(CoreError::InvalidParameter(
            "overlap requires equal times".into(),
        ));
    }
    // conj(psi1) psi2 is a Gaussian with complex quadratic coefficients;
    // per-axis integrals factorize. Exponents written as
    //   -a (x - c)^2 + i q (x - x0) with a complex, plus constant phases.
    let d = g1.dim as f64;
    let w1 = Complex64::new(1.0, g1.tau());
    let w2 = Complex64::new(1.0, g2.tau());
    let a1 = (4.0 * g1.sigma * g1.sigma * w1).finv().conj();
    let a2 = (4.0 * g2.sigma * g2.sigma * w2).finv();
    let alpha = a1 + a2;
    let c1 = g1.packet_center();
    let c2 = g2.packet_center();
    let n1 = (2.0 * PI * g1.sigma * g1.sigma).powf(-d / 4.0) * w1.powf(-d / 2.0).conj();
    let n2 = (2.0 * PI * g2.sigma * g2.sigma).powf(-d / 4.0) * w2.powf(-d / 2.0);
    let phase1 = dot(g1.momentum, g1.momentum) * g1.time / (2.0 * g1.mass)
        - dot(g2.momentum, g2.momentum) * g2.time / (2.0 * g2.mass);
    let mut result = n1 * n2 * Complex64::new(0.0, phase1).exp();
    for k in 0..g1.dim {
        // integrand exp(-a1(x-c1)^2 - a2(x-c2)^2 + i(q2(x-x02) - q1(x-x01)))
        let q = Complex64::new(0.0, g2.momentum[k] - g1.momentum[k]);
        let beta = 2.0 * a1 * c1[k] + 2.0 * a2 * c2[k] + q;
        let gamma = -a1 * c1[k] * c1[k] - a2 * c2[k] * c2[k]
            + Complex64::new(0.0, g1.momentum[k] * g1.center[k] - g2.momentum[k] * g2.center[k]);
        result *= (PI / alpha).sqrt() * (beta * beta / (4.0 * alpha) + gamma).exp();
    }
    Ok(result)
}

/// Normalized superposition of free Gaussian packets with a common mass.
///
/// Evolves exactly (componentwise) under the free Hamiltonian; used for
/// interference states such as the two-packet backflow configuration.
#[derive(Debug, Clone)]
pub struct GaussianSum {
    components: Vec<(Complex64, GaussianState)>,
}

impl GaussianSum {
    pub fn new(components: Vec<(Complex64, GaussianState)>) -> Result<Self> {
        if components.is_empty() {
            return Err(CoreError::InvalidParameter(
                "superposition needs at least one component".into(),
            ));
        }
        let dim = components[0].1.dim;
        let mass = components[0].1.mass;
        let time = components[0].1.time;
        for (_, g) in &components {
            if g.dim != dim || (g.mass - mass).abs() > 1e-14 || (g.time - time).abs() > 1e-12 {
                return Err(CoreError::InvalidParameter(
                    "superposition components must share dim, mass and time".into(),
                ));
            }
        }
        let mut sum = Self { components };
        let n2 = sum.norm_sq()?;
        if n2 <= 0.0 {
            return Err(CoreError::DegenerateInput(
                "superposition has zero norm".into(),
            ));
        }
        let inv = 1.0 / n2.sqrt();
        for (c, _) in &mut sum.components {
            *c *= inv;
        }
        Ok(sum)
    }

    fn norm_sq(&self) -> Result<f64> {
        let mut total = Complex64::new(0.0, 0.0);
        for (ci, gi) in &self.components {
            for (cj, gj) in &self.components {
                total += ci.conj() * cj * gaussian_overlap(gi, gj)?;
            }
        }
        Ok(total.re)
    }

    pub fn components(&self) -> &[(Complex64, GaussianState)] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim
    }

    pub fn mass(&self) -> f64 {
        self.components[0].1.mass
    }

    pub fn time(&self) -> f64 {
        self.components[0].1.time
    }

    pub fn amplitude(&self, x: Point) -> Complex64 {
        self.components
            .iter()
            .map(|(c, g)| c * g.amplitude(x))
            .sum()
    }

    pub fn gradient(&self, x: Point) -> [Complex64; 3] {
        let mut out = [Complex64::new(0.0, 0.0); 3];
        for (c, g) in &self.components {
            let gg = g.gradient(x);
            for k in 0..3 {
                out[k] += c * gg[k];
            }
        }
        out
    }

    pub fn density(&self, x: Point) -> f64 {
        self.amplitude(x).norm_sqr()
    }

    pub fn momentum_amplitude(&self, p: Point) -> Complex64 {
        self.components
            .iter()
            .map(|(c, g)| c * g.momentum_amplitude(p))
            .sum()
    }

    pub fn advanced(&self, dt: f64) -> GaussianSum {
        GaussianSum {
            components: self
                .components
                .iter()
                .map(|(c, g)| (*c, g.advanced(dt)))
                .collect(),
        }
    }

    /// Bound on the peak density, used for node guards:
    /// `(sum |c_i| |psi_i|_max)^2`.
    pub fn density_bound(&self) -> f64 {
        let d = self.dim() as f64;
        self.components
            .iter()
            .map(|(c, g)| {
                let s = g.width();
                c.norm() * (2.0 * PI * s * s).powf(-d / 4.0)
            })
            .sum::<f64>()
            .powi(2)
    }
}

/// Complex amplitudes sampled on a regular grid, axis order (x, y, z) with
/// the last axis fastest.
#[derive(Debug, Clone)]
pub struct GridState {
    pub spec: GridSpec,
    pub amplitudes: Vec<Complex64>,
    pub time: f64,
    pub mass: f64,
}

impl GridState {
    pub fn new(spec: GridSpec, amplitudes: Vec<Complex64>, time: f64, mass: f64) -> Result<Self> {
        if amplitudes.len() != spec.total_points() {
            return Err(CoreError::InvalidParameter(format!(
                "amplitude count {} does not match grid ({} points)",
                amplitudes.len(),
                spec.total_points()
            )));
        }
        Ok(GridState {
            spec,
            amplitudes,
            time,
            mass,
        })
    }

    /// Discrete L2 norm squared: `sum |psi|^2 prod(h_k)`.
    pub fn norm_sq(&self) -> f64 {
        let cell = self.spec.cell_volume();
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>() * cell
    }

    pub fn max_density(&self) -> f64 {
        self.amplitudes
            .iter()
            .map(|a| a.norm_sqr())
            .fold(0.0, f64::max)
    }

    /// Multilinear interpolation of the amplitudes; the grid is treated as
    /// periodic so the last cell interpolates against the wrapped node.
    pub fn evaluate(&self, x: Point) -> Result<Complex64> {
        if !self.spec.contains(x) {
            return Err(CoreError::OutOfDomain(format!(
                "point {x:?} outside grid domain"
            )));
        }
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
        let corners = 1usize << dim;
        let mut acc = Complex64::new(0.0, 0.0);
        for corner in 0..corners {
            let mut idx = [0usize; 3];
            let mut weight = 1.0;
            for k in 0..dim {
                let up = (corner >> k) & 1;
                let n = self.spec.axis_points(k);
                idx[k] = (i0[k] + up) % n;
                weight *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            acc += weight * self.amplitudes[self.spec.flat_index(idx)];
        }
        Ok(acc)
    }

    /// Spectral gradient grids: `d psi / d x_k` on the nodes, one field per
    /// active axis, computed by `i p_k` multiplication in momentum space.
    pub fn gradient_grids(&self) -> Vec<Vec<Complex64>> {
        let mut hat = self.amplitudes.clone();
        fftops::forward(&self.spec, &mut hat);
        (0..self.spec.dim())
            .map(|axis| {
                let mut g = hat.clone();
                fftops::multiply_momentum(&self.spec, &mut g, |p| Complex64::new(0.0, p[axis]));
                fftops::inverse_normalized(&self.spec, &mut g);
                g
            })
            .collect()
    }
}

/// Wavefunction on the conjugate momentum grid, stored in monotonic
/// momentum order along each axis.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub spec: GridSpec,
    pub amplitudes: Vec<Complex64>,
    pub time: f64,
    pub mass: f64,
}

impl MomentumState {
    pub fn norm_sq(&self) -> f64 {
        let cell = self.spec.cell_volume();
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>() * cell
    }

    /// Momentum vector of a flat index.
    pub fn momentum_of(&self, flat: usize) -> Point {
        self.spec.position(flat)
    }
}

/// A wavefunction at a time: analytic (exact free dynamics) or gridded.
#[derive(Debug, Clone)]
pub enum WaveState {
    Gaussian(GaussianState),
    Sum(GaussianSum),
    Grid(GridState),
}

impl WaveState {
    pub fn dim(&self) -> usize {
        match self {
            WaveState::Gaussian(g) => g.dim,
            WaveState::Sum(s) => s.dim(),
            WaveState::Grid(g) => g.spec.dim(),
        }
    }

    pub fn mass(&self) -> f64 {
        match self {
            WaveState::Gaussian(g) => g.mass,
            WaveState::Sum(s) => s.mass(),
            WaveState::Grid(g) => g.mass,
        }
    }

    pub fn time(&self) -> f64 {
        match self {
            WaveState::Gaussian(g) => g.time,
            WaveState::Sum(s) => s.time(),
            WaveState::Grid(g) => g.time,
        }
    }

    pub fn is_analytic(&self) -> bool {
        !matches!(self, WaveState::Grid(_))
    }
}

/// Evaluate the wavefunction at a point: closed form for analytic states,
/// multilinear interpolation for grid states.
pub fn evaluate(state: &WaveState, x: Point) -> Result<Complex64> {
    match state {
        WaveState::Gaussian(g) => Ok(g.amplitude(x)),
        WaveState::Sum(s) => Ok(s.amplitude(x)),
        WaveState::Grid(g) => g.evaluate(x),
    }
}

/// Result of sampling an analytic state onto a grid.
pub struct DiscretizeReport {
    pub state: GridState,
    /// `|norm^2 - 1|` of the raw sampled amplitudes before renormalization.
    pub norm_defect: f64,
    /// Factor the amplitudes were multiplied by to restore unit norm.
    pub renorm_factor: f64,
    /// False when the 8-sigma position / `|p0| + 8/sigma` momentum coverage
    /// precondition is not met (the defect decides whether that is fatal).
    pub coverage_ok: bool,
}

/// Sample an analytic state onto `spec`, renormalizing and reporting the
/// truncation defect. A defect above 1e-6 is an error.
pub fn discretize(state: &WaveState, spec: &GridSpec) -> Result<DiscretizeReport> {
    let packets: Vec<&GaussianState> = match state {
        WaveState::Gaussian(g) => vec![g],
        WaveState::Sum(s) => s.components().iter().map(|(_, g)| g).collect(),
        WaveState::Grid(_) => {
            return Err(CoreError::InvalidParameter(
                "discretize expects an analytic state".into(),
            ))
        }
    };
    if packets[0].dim != spec.dim() {
        return Err(CoreError::InvalidParameter(
            "state and grid dimensions differ".into(),
        ));
    }
    let mut coverage_ok = true;
    for g in &packets {
        let xc = g.packet_center();
        let s = g.width();
        for k in 0..spec.dim() {
            let lo = -0.5 * spec.axis_length(k);
            let hi = 0.5 * spec.axis_length(k);
            if xc[k] - 4.0 * s < lo || xc[k] + 4.0 * s > hi {
                coverage_ok = false;
            }
            // eight momentum widths around p0 (sigma_p = 1/(2 sigma))
            if spec.momentum_max(k) < g.momentum[k].abs() + 4.0 / g.sigma {
                coverage_ok = false;
            }
        }
    }
    let n = spec.total_points();
    let amplitude_at = |flat: usize| -> Complex64 {
        let x = spec.position(flat);
        match state {
            WaveState::Gaussian(g) => g.amplitude(x),
            WaveState::Sum(s) => s.amplitude(x),
            WaveState::Grid(_) => unreachable!(),
        }
    };
    let amplitudes = exec::map_indexed(n, amplitude_at);
    let mut grid = GridState::new(spec.clone(), amplitudes, state.time(), state.mass())?;
    let norm_sq = grid.norm_sq();
    let norm_defect = (norm_sq - 1.0).abs();
    if norm_defect > 1e-6 {
        return Err(CoreError::Truncation {
            defect: norm_defect,
        });
    }
    let renorm_factor = 1.0 / norm_sq.sqrt();
    for a in &mut grid.amplitudes {
        *a *= renorm_factor;
    }
    Ok(DiscretizeReport {
        state: grid,
        norm_defect,
        renorm_factor,
        coverage_ok,
    })
}

/// Unitary transform to the momentum representation (monotonic p order).
pub fn to_momentum(s: &GridState) -> MomentumState {
    let spec = &s.spec;
    let dim = spec.dim();
    let mut raw = s.amplitudes.clone();
    fftops::forward(spec, &mut raw);
    let cell = spec.cell_volume();
    let scale = cell * (2.0 * PI).powf(-(dim as f64) / 2.0);
    let mut shifted = vec![Complex64::new(0.0, 0.0); raw.len()];
    let conj_spec = spec.conjugate();
    for (flat, value) in raw.iter().enumerate() {
        let idx = spec.unflatten(flat);
        let mut parity = 0usize;
        let mut out_idx = [0usize; 3];
        for k in 0..dim {
            parity += idx[k];
            let n = spec.axis_points(k);
            out_idx[k] = (idx[k] + n / 2) % n;
        }
        let sign = if parity % 2 == 0 { 1.0 } else { -1.0 };
        shifted[spec.flat_index(out_idx)] = value * sign * scale;
    }
    MomentumState {
        spec: conj_spec,
        amplitudes: shifted,
        time: s.time,
        mass: s.mass,
    }
}

/// Inverse of [`to_momentum`].
pub fn from_momentum(ms: &MomentumState, position_spec: &GridSpec) -> Result<GridState> {
    if &position_spec.conjugate() != &ms.spec {
        return Err(CoreError::InvalidParameter(
            "momentum grid is not conjugate to the requested position grid".into(),
        ));
    }
    let spec = position_spec;
    let dim = spec.dim();
    let mut raw = vec![Complex64::new(0.0, 0.0); ms.amplitudes.len()];
    for (flat, value) in ms.amplitudes.iter().enumerate() {
        // undo the fftshift and the alternating phase
        let idx = spec.unflatten(flat);
        let mut parity = 0usize;
        let mut raw_idx = [0usize; 3];
        for k in 0..dim {
            let n = spec.axis_points(k);
            raw_idx[k] = (idx[k] + n - n / 2) % n;
            parity += raw_idx[k];
        }
        let sign = if parity % 2 == 0 { 1.0 } else { -1.0 };
        raw[spec.flat_index(raw_idx)] = value * sign;
    }
    fftops::inverse(spec, &mut raw);
    let length_prod: f64 = (0..dim).map(|k| spec.axis_length(k)).product();
    let scale = (2.0 * PI).powf(dim as f64 / 2.0) / length_prod;
    for a in &mut raw {
        *a *= scale;
    }
    GridState::new(spec.clone(), raw, ms.time, ms.mass)
}

/// Deterministic per-index RNG stream: SplitMix64 expansion of
/// `(master_seed, index)` into a ChaCha8 key, so parallel callers get
/// identical streams regardless of worker count.
pub fn stream_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut s = master_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Draw `count` i.i.d. positions from the quantum equilibrium density
/// `|psi|^2`. Exact normal sampling for Gaussians, rejection from a
/// Gaussian-mixture envelope for superpositions, and cell-mass categorical
/// sampling with uniform in-cell jitter for grid states.
pub fn sample_positions(state: &WaveState, count: usize, seed: u64) -> Result<Vec<Point>> {
    if count == 0 {
        return Err(CoreError::InvalidParameter("count must be >= 1".into()));
    }
    match state {
        WaveState::Gaussian(g) => {
            let s = g.width();
            let xc = g.packet_center();
            let dim = g.dim;
            Ok(exec::map_indexed(count, |i| {
                let mut rng = stream_rng(seed, i as u64);
                let mut x = [0.0; 3];
                for (k, xk) in x.iter_mut().enumerate().take(dim) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xk = xc[k] + s * z;
                }
                x
            }))
        }
        WaveState::Sum(sum) => {
            // rejection from the mixture q ~ sum |c_i|^2 rho_i with bound
            // rho(x) <= k * sum |c_i|^2 rho_i(x) (Cauchy-Schwarz)
            let comps = sum.components();
            let k = comps.len() as f64;
            let weights: Vec<f64> = comps.iter().map(|(c, _)| c.norm_sqr()).collect();
            let wtot: f64 = weights.iter().sum();
            let dim = sum.dim();
            Ok(exec::map_indexed(count, |i| {
                let mut rng = stream_rng(seed, i as u64);
                loop {
                    let pick = rng.gen_range(0.0..wtot);
                    let mut acc = 0.0;
                    let mut which = 0;
                    for (idx, w) in weights.iter().enumerate() {
                        acc += w;
                        if pick < acc {
                            which = idx;
                            break;
                        }
                    }
                    let g = &comps[which].1;
                    let s = g.width();
                    let xc = g.packet_center();
                    let mut x = [0.0; 3];
                    for (kk, xk) in x.iter_mut().enumerate().take(dim) {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *xk = xc[kk] + s * z;
                    }
                    let envelope: f64 = comps
                        .iter()
                        .zip(&weights)
                        .map(|((_, g), w)| w * g.density(x))
                        .sum::<f64>()
                        * k;
                    let u: f64 = rng.gen_range(0.0..1.0);
                    if u * envelope <= sum.density(x) {
                        return x;
                    }
                }
            }))
        }
        WaveState::Grid(g) => {
            let norm = g.norm_sq();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(CoreError::InvalidState(format!(
                    "grid state not normalized (norm^2 = {norm})"
                )));
            }
            let cell = g.spec.cell_volume();
            let mut cum = Vec::with_capacity(g.amplitudes.len() + 1);
            cum.push(0.0);
            let mut acc = 0.0;
            for a in &g.amplitudes {
                acc += a.norm_sqr() * cell;
                cum.push(acc);
            }
            let total = acc;
            let dim = g.spec.dim();
            let spec = g.spec.clone();
            Ok(exec::map_indexed(count, |i| {
                let mut rng = stream_rng(seed, i as u64);
                let target = rng.gen_range(0.0..total);
                let cell_idx = match cum.binary_search_by(|v| v.partial_cmp(&target).unwrap()) {
                    Ok(j) => j,
                    Err(j) => j - 1,
                };
                let cell_idx = cell_idx.min(spec.total_points() - 1);
                let mut x = spec.position(cell_idx);
                for (k, xk) in x.iter_mut().enumerate().take(dim) {
                    let h = spec.spacing(k);
                    let u: f64 = rng.gen_range(0.0..1.0);
                    *xk += (u - 0.5) * h;
                }
                x
            }))
        }
    }
}

/// Write a grid state as a QFX1 binary checkpoint.
///
/// Layout, little-endian, no padding: magic `QFX1`, `u32` dim, then per
/// axis `u64 n_k` and `f64 L_k`, then `f64` time, `f64` mass, then the
/// amplitudes as `(f64 re, f64 im)` pairs with the last axis fastest.
pub fn write_checkpoint(state: &GridState, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + state.amplitudes.len() * 16);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(state.spec.dim() as u32).to_le_bytes());
    for k in 0..state.spec.dim() {
        buf.extend_from_slice(&(state.spec.axis_points(k) as u64).to_le_bytes());
        buf.extend_from_slice(&state.spec.axis_length(k).to_le_bytes());
    }
    buf.extend_from_slice(&state.time.to_le_bytes());
    buf.extend_from_slice(&state.mass.to_le_bytes());
    for a in &state.amplitudes {
        buf.extend_from_slice(&a.re.to_le_bytes());
        buf.extend_from_slice(&a.im.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a QFX1 checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<GridState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(CoreError::Format("checkpoint truncated".into()));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(CoreError::Format("bad checkpoint magic".into()));
    }
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if dim != 1 && dim != 3 {
        return Err(CoreError::Format(format!("bad dimension {dim}")));
    }
    let mut n = [1usize; 3];
    let mut length = [1.0f64; 3];
    for k in 0..dim {
        n[k] = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        length[k] = f64::from_le_bytes(take(8)?.try_into().unwrap());
    }
    let time = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let mass = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let spec = GridSpec::new(dim, n, length)?;
    let count = spec.total_points();
    let mut amplitudes = Vec::with_capacity(count);
    for _ in 0..count {
        let re = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let im = f64::from_le_bytes(take(8)?.try_into().unwrap());
        amplitudes.push(Complex64::new(re, im));
    }
    if at != bytes.len() {
        return Err(CoreError::Format("trailing bytes in checkpoint".into()));
    }
    GridState::new(spec, amplitudes, time, mass)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_gaussian_3d() -> GaussianState {
        make_gaussian(3, [0.0; 3], [0.0; 3], 1.0, 1.0).unwrap()
    }

    #[test]
    fn make_gaussian_validates_parameters() {
        assert!(matches!(
            make_gaussian(3, [0.0; 3], [0.0; 3], 0.0, 1.0),
            Err(CoreError::InvalidParameter(_))
        ));
        assert!(matches!(
            make_gaussian(3, [0.0; 3], [0.0; 3], 1.0, -2.0),
            Err(CoreError::InvalidParameter(_))
        ));
        assert!(make_gaussian(2, [0.0; 3], [0.0; 3], 1.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_peak_and_norm() {
        let g = centered_gaussian_3d();
        let peak = g.amplitude([0.0; 3]);
        let expected = (2.0 * PI).powf(-0.75);
        assert!((peak.re - expected).abs() < 1e-14);
        assert!(peak.im.abs() < 1e-16);
        // density maximal at the center
        assert!(g.density([0.0; 3]) > g.density([0.3, 0.0, 0.1]));
        // norm via direct quadrature
        let spec = GridSpec::new_3d([64; 3], [32.0; 3]).unwrap();
        let rep = discretize(&WaveState::Gaussian(g), &spec).unwrap();
        assert!(rep.norm_defect <= 1e-8, "defect {}", rep.norm_defect);
        assert!(rep.coverage_ok);
    }

    #[test]
    fn momentum_density_peaks_at_p0() {
        // oracle: discretize + momentum transform, locate argmax
        let g = make_gaussian(3, [0.0; 3], [2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let spec = GridSpec::new_3d([64; 3], [32.0; 3]).unwrap();
        let rep = discretize(&WaveState::Gaussian(g), &spec).unwrap();
        let ms = to_momentum(&rep.state);
        let (best, _) = ms
            .amplitudes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm_sqr().partial_cmp(&b.1.norm_sqr()).unwrap())
            .unwrap();
        let p = ms.momentum_of(best);
        let dp = spec.momentum_spacing(0);
        assert!((p[0] - 2.0).abs() <= 0.5 * dp, "peak at {p:?}");
        assert!(p[1].abs() <= 0.5 * dp && p[2].abs() <= 0.5 * dp);
    }

    #[test]
    fn discretize_coverage_and_truncation() {
        let g = centered_gaussian_3d();
        let narrow = GridSpec::new_3d([8; 3], [4.0; 3]).unwrap();
        assert!(matches!(
            discretize(&WaveState::Gaussian(g.clone()), &narrow),
            Err(CoreError::Truncation { .. })
        ));
        let g1 = make_gaussian(1, [0.0; 3], [0.0; 3], 1.0, 1.0).unwrap();
        let spec1 = GridSpec::new_1d(256, 64.0).unwrap();
        let rep = discretize(&WaveState::Gaussian(g1), &spec1).unwrap();
        assert!(rep.norm_defect <= 1e-12, "defect {}", rep.norm_defect);
    }

    #[test]
    fn to_momentum_matches_closed_form() {
        // oracle: closed-form Fourier transform of the Gaussian
        let g = make_gaussian(3, [0.0; 3], [2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let spec = GridSpec::new_3d([64; 3], [32.0; 3]).unwrap();
        let rep = discretize(&WaveState::Gaussian(g.clone()), &spec).unwrap();
        let ms = to_momentum(&rep.state);
        let mut max_density_err: f64 = 0.0;
        let mut max_amp_err: f64 = 0.0;
        for (flat, a) in ms.amplitudes.iter().enumerate() {
            let p = ms.momentum_of(flat);
            max_density_err = max_density_err.max((a.norm_sqr() - g.momentum_density(p)).abs());
            max_amp_err = max_amp_err.max((a - g.momentum_amplitude(p)).norm());
        }
        assert!(max_density_err <= 1e-8, "density err {max_density_err}");
        assert!(max_amp_err <= 1e-8, "amplitude err {max_amp_err}");
    }

    #[test]
    fn real_even_transforms_to_real_even() {
        let spec = GridSpec::new_1d(256, 64.0).unwrap();
        let amps: Vec<Complex64> = (0..256)
            .map(|i| {
                let x = spec.coord(0, i);
                Complex64::new((-0.5 * x * x).exp(), 0.0)
            })
            .collect();
        let gs = GridState::new(spec, amps, 0.0, 1.0).unwrap();
        let ms = to_momentum(&gs);
        let max_im = ms.amplitudes.iter().map(|a| a.im.abs()).fold(0.0, f64::max);
        assert!(max_im <= 1e-12, "max Im {max_im}");
    }

    #[test]
    fn shift_theorem() {
        let spec = GridSpec::new_1d(256, 64.0).unwrap();
        let g0 = make_gaussian(1, [0.0; 3], [0.0; 3], 1.0, 1.0).unwrap();
        let g1 = make_gaussian(1, [1.0, 0.0, 0.0], [0.0; 3], 1.0, 1.0).unwrap();
        let m0 = to_momentum(&discretize(&WaveState::Gaussian(g0), &spec).unwrap().state);
        let m1 = to_momentum(&discretize(&WaveState::Gaussian(g1), &spec).unwrap().state);
        let mut max_mod_err: f64 = 0.0;
        let mut max_phase_err: f64 = 0.0;
        for (flat, (a0, a1)) in m0.amplitudes.iter().zip(&m1.amplitudes).enumerate() {
            let p = m0.momentum_of(flat);
            max_mod_err = max_mod_err.max((a0.norm() - a1.norm()).abs());
            let expected = a0 * Complex64::new(0.0, -p[0]).exp();
            max_phase_err = max_phase_err.max((expected - a1).norm());
        }
        assert!(max_mod_err <= 1e-12, "modulus changed by {max_mod_err}");
        assert!(max_phase_err <= 1e-12, "phase law violated by {max_phase_err}");
    }

    #[test]
    fn plancherel_and_round_trip() {
        let g = make_gaussian(3, [1.0, -0.5, 0.0], [1.0, 0.5, -0.25], 1.2, 2.0).unwrap();
        let spec = GridSpec::new_3d([32; 3], [32.0; 3]).unwrap();
        let gs = discretize(&WaveState::Gaussian(g), &spec).unwrap().state;
        let ms = to_momentum(&gs);
        assert!((ms.norm_sq() - gs.norm_sq()).abs() <= 1e-10);
        let back = from_momentum(&ms, &spec).unwrap();
        let max_err = gs
            .amplitudes
            .iter()
            .zip(&back.amplitudes)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-12, "round trip err {max_err}");
    }

    #[test]
    fn evaluate_nodes_and_midpoints() {
        let g = make_gaussian(1, [0.0; 3], [1.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let spec = GridSpec::new_1d(256, 64.0).unwrap();
        let gs = discretize(&WaveState::Gaussian(g.clone()), &spec).unwrap().state;
        // node: stored amplitude exactly
        let i = 100;
        let x = spec.coord(0, i);
        let v = gs.evaluate([x, 0.0, 0.0]).unwrap();
        assert!((v - gs.amplitudes[i]).norm() <= 1e-15);
        // midpoint vs fine-grid reference
        let fine = GridSpec::new_1d(2048, 64.0).unwrap();
        let fs = discretize(&WaveState::Gaussian(g), &fine).unwrap().state;
        let xm = x + 0.5 * spec.spacing(0);
        let coarse_val = gs.evaluate([xm, 0.0, 0.0]).unwrap();
        let fine_val = fs.evaluate([xm, 0.0, 0.0]).unwrap();
        assert!(
            (coarse_val - fine_val).norm() <= 5e-3,
            "interpolation error {}",
            (coarse_val - fine_val).norm()
        );
        // out of domain
        assert!(gs.evaluate([40.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn sampling_moments_and_determinism() {
        let g = centered_gaussian_3d();
        let n = 100_000;
        let pts = sample_positions(&WaveState::Gaussian(g.clone()), n, 42).unwrap();
        let bound = 4.0 / (n as f64).sqrt();
        for k in 0..3 {
            let mean: f64 = pts.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            assert!(mean.abs() <= bound, "axis {k} mean {mean}");
            let var: f64 = pts.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() <= 0.05, "axis {k} var {var}");
        }
        let again = sample_positions(&WaveState::Gaussian(g), n, 42).unwrap();
        assert_eq!(pts, again);
    }

    #[test]
    fn grid_sampling_matches_density() {
        let g = make_gaussian(1, [2.0, 0.0, 0.0], [0.0; 3], 1.5, 1.0).unwrap();
        let spec = GridSpec::new_1d(512, 64.0).unwrap();
        let gs = discretize(&WaveState::Gaussian(g), &spec).unwrap().state;
        let n = 50_000;
        let pts = sample_positions(&WaveState::Grid(gs.clone()), n, 7).unwrap();
        let mean: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() <= 4.0 * 1.5 / (n as f64).sqrt());
        let var: f64 = pts.iter().map(|p| (p[0] - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var / 2.25 - 1.0).abs() <= 0.05, "var {var}");
        // unnormalized -> invalid-state
        let mut bad = gs;
        for a in &mut bad.amplitudes {
            *a *= 2.0;
        }
        assert!(matches!(
            sample_positions(&WaveState::Grid(bad), 10, 0),
            Err(CoreError::InvalidState(_))
        ));
    }

    #[test]
    fn overlap_matches_quadrature_and_is_time_invariant() {
        let g1 = make_gaussian(1, [0.5, 0.0, 0.0], [1.0, 0.0, 0.0], 1.0, 2.0).unwrap();
        let g2 = make_gaussian(1, [-0.7, 0.0, 0.0], [2.5, 0.0, 0.0], 1.3, 2.0).unwrap();
        let closed = gaussian_overlap(&g1, &g2).unwrap();
        // oracle: direct grid quadrature
        let spec = GridSpec::new_1d(4096, 128.0).unwrap();
        let mut quad = Complex64::new(0.0, 0.0);
        for i in 0..4096 {
            let x = [spec.coord(0, i), 0.0, 0.0];
            quad += g1.amplitude(x).conj() * g2.amplitude(x);
        }
        quad *= spec.spacing(0);
        assert!((closed - quad).norm() <= 1e-10, "overlap err {}", (closed - quad).norm());
        // unitarity of the free evolution
        let later = gaussian_overlap(&g1.advanced(2.0), &g2.advanced(2.0)).unwrap();
        assert!((closed - later).norm() <= 1e-10);
    }

    #[test]
    fn superposition_is_normalized() {
        let g1 = make_gaussian(1, [0.0; 3], [1.0, 0.0, 0.0], 1.0, 4.0).unwrap();
        let g2 = make_gaussian(1, [-3.0, 0.0, 0.0], [3.0, 0.0, 0.0], 1.0, 4.0).unwrap();
        let sum = GaussianSum::new(vec![
            (Complex64::new(1.0, 0.0), g1),
            (Complex64::new(0.6, 0.0), g2),
        ])
        .unwrap();
        let spec = GridSpec::new_1d(1024, 64.0).unwrap();
        let gs = discretize(&WaveState::Sum(sum.clone()), &spec).unwrap().state;
        assert!((gs.norm_sq() - 1.0).abs() <= 1e-9);
        // sampling from the superposition is deterministic
        let a = sample_positions(&WaveState::Sum(sum.clone()), 500, 3).unwrap();
        let b = sample_positions(&WaveState::Sum(sum), 500, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let g = make_gaussian(1, [0.2, 0.0, 0.0], [1.5, 0.0, 0.0], 0.9, 1.7).unwrap();
        let spec = GridSpec::new_1d(64, 24.0).unwrap();
        let gs = discretize(&WaveState::Gaussian(g), &spec).unwrap().state;
        let dir = std::env::temp_dir().join("qflux_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.qfx");
        write_checkpoint(&gs, &path).unwrap();
        let rt = read_checkpoint(&path).unwrap();
        assert_eq!(gs.spec, rt.spec);
        assert_eq!(gs.time, rt.time);
        assert_eq!(gs.mass, rt.mass);
        assert_eq!(gs.amplitudes, rt.amplitudes);
        std::fs::remove_dir_all(&dir).ok();
    }
}
