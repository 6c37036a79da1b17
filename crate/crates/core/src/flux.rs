//! Probability current, boundary flux, exit-time densities, and the
//! flux/cone scattering probabilities.
//!
//! Everything here is quadrature over immutable states: surface meshes are
//! Gauss-Legendre-by-azimuth product rules, time integration is composite
//! Simpson on the stored frame grid, and grid-state evaluation off the
//! nodes goes through the exact trigonometric interpolant (never local
//! interpolation, whose error in a Gaussian tail would swamp the flux).

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{CoreError, Result};
use crate::evolve::Evolution;
use crate::exec;
use crate::numeric::{
    chi3_cdf, cumulative_trapezoid, gauss_legendre, gauss_legendre_on, simpson_uniform,
};
use crate::state::{fftops, GridSpec, GridState, MomentumState, WaveState};
use crate::{add, dot, norm, scale, sub, Point};

/// Region whose boundary the flux is computed through.
#[derive(Debug, Clone)]
pub enum Region {
    /// 3-d ball.
    Ball { center: Point, radius: f64 },
    /// 1-d interval (a, b).
    Interval { a: f64, b: f64 },
}

impl Region {
    pub fn ball(center: Point, radius: f64) -> Result<Region> {
        if !(radius > 0.0) {
            return Err(CoreError::InvalidParameter("radius must be > 0".into()));
        }
        Ok(Region::Ball { center, radius })
    }

    pub fn interval(a: f64, b: f64) -> Result<Region> {
        if !(a < b) {
            return Err(CoreError::InvalidParameter("need a < b".into()));
        }
        Ok(Region::Interval { a, b })
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Ball { .. } => 3,
            Region::Interval { .. } => 1,
        }
    }

    /// Signed distance to the boundary, negative inside.
    pub fn signed_distance(&self, x: Point) -> f64 {
        match self {
            Region::Ball { center, radius } => norm(sub(x, *center)) - radius,
            Region::Interval { a, b } => (a - x[0]).max(x[0] - b),
        }
    }

    pub fn contains(&self, x: Point) -> bool {
        self.signed_distance(x) < 0.0
    }

    /// Discretized boundary with outward normals and quadrature weights.
    pub fn surface_mesh(&self, n_theta: usize, n_phi: usize) -> SurfaceMesh {
        match self {
            Region::Ball { center, radius } => {
                SurfaceMesh::sphere(*center, *radius, n_theta, n_phi)
            }
            Region::Interval { a, b } => SurfaceMesh::interval(*a, *b),
        }
    }
}

/// One surface patch: centroid, outward unit normal, quadrature weight.
#[derive(Debug, Clone, Copy)]
pub struct Patch {
    pub centroid: Point,
    pub normal: Point,
    pub weight: f64,
}

#[derive(Debug, Clone)]
enum MeshKind {
    Sphere {
        center: Point,
        radius: f64,
        n_theta: usize,
        n_phi: usize,
    },
    Interval,
}

/// Discretized region boundary.
///
/// Spheres use Gauss-Legendre nodes in cos(theta) times uniform azimuth
/// (the azimuth offset by half a cell so cap boundaries fall between
/// patches); intervals are the two endpoint patches with unit weight.
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    pub patches: Vec<Patch>,
    kind: MeshKind,
}

impl SurfaceMesh {
    pub fn sphere(center: Point, radius: f64, n_theta: usize, n_phi: usize) -> SurfaceMesh {
        let (mu, w) = gauss_legendre(n_theta);
        let mut patches = Vec::with_capacity(n_theta * n_phi);
        for i in 0..n_theta {
            let cos_t = mu[i];
            let sin_t = (1.0 - cos_t * cos_t).sqrt();
            let ring_weight = radius * radius * w[i] * (2.0 * PI / n_phi as f64);
            for k in 0..n_phi {
                let phi = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
                let normal = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
                patches.push(Patch {
                    centroid: add(center, scale(normal, radius)),
                    normal,
                    weight: ring_weight,
                });
            }
        }
        SurfaceMesh {
            patches,
            kind: MeshKind::Sphere {
                center,
                radius,
                n_theta,
                n_phi,
            },
        }
    }

    pub fn interval(a: f64, b: f64) -> SurfaceMesh {
        SurfaceMesh {
            patches: vec![
                Patch {
                    centroid: [a, 0.0, 0.0],
                    normal: [-1.0, 0.0, 0.0],
                    weight: 1.0,
                },
                Patch {
                    centroid: [b, 0.0, 0.0],
                    normal: [1.0, 0.0, 0.0],
                    weight: 1.0,
                },
            ],
            kind: MeshKind::Interval,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.patches.iter().map(|p| p.weight).sum()
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            MeshKind::Sphere { .. } => 3,
            MeshKind::Interval => 1,
        }
    }

    /// Sphere radius, if this mesh discretizes a sphere.
    pub fn sphere_radius(&self) -> Option<f64> {
        match &self.kind {
            MeshKind::Sphere { radius, .. } => Some(*radius),
            MeshKind::Interval => None,
        }
    }

    /// Index of the patch whose direction is closest to the crossing point.
    pub fn nearest_patch(&self, x: Point) -> usize {
        match &self.kind {
            MeshKind::Interval => {
                let a = self.patches[0].centroid[0];
                let b = self.patches[1].centroid[0];
                if (x[0] - a).abs() <= (x[0] - b).abs() {
                    0
                } else {
                    1
                }
            }
            MeshKind::Sphere {
                center,
                n_theta,
                n_phi,
                ..
            } => {
                let d = sub(x, *center);
                let r = norm(d).max(1e-300);
                let cos_t = (d[2] / r).clamp(-1.0, 1.0);
                let phi = d[1].atan2(d[0]).rem_euclid(2.0 * PI);
                // nearest ring by cos(theta), then nearest azimuth cell
                let mut best_ring = 0;
                let mut best = f64::INFINITY;
                for i in 0..*n_theta {
                    let c = self.patches[i * n_phi].normal[2];
                    let dist = (c - cos_t).abs();
                    if dist < best {
                        best = dist;
                        best_ring = i;
                    }
                }
                let cell = (phi / (2.0 * PI) * *n_phi as f64 - 0.5).rem_euclid(*n_phi as f64);
                let k = (cell.round() as usize) % n_phi;
                best_ring * n_phi + k
            }
        }
    }
}

/// Subset of the unit sphere (or of {-1, +1} in one dimension).
///
/// Membership of a direction carries a weight in {0, 1/2, 1}: points on the
/// subset boundary count half, which keeps complements exactly additive and
/// grid sums across symmetric boundaries unbiased.
#[derive(Debug, Clone)]
pub enum SolidAngle {
    Full,
    /// Spherical cap of the given angular radius around `axis`.
    Cap { axis: Point, half_angle: f64 },
    /// Explicit patch-index subset of a particular mesh.
    PatchSet(Vec<usize>),
    Complement(Box<SolidAngle>),
    /// 1-d: the left / right endpoint direction.
    Left,
    Right,
}

impl SolidAngle {
    pub fn cap(axis: Point, half_angle: f64) -> Result<SolidAngle> {
        let n = norm(axis);
        if !(n > 0.0) || !(half_angle > 0.0) || half_angle > PI {
            return Err(CoreError::InvalidParameter(
                "cap needs a nonzero axis and half-angle in (0, pi]".into(),
            ));
        }
        Ok(SolidAngle::Cap {
            axis: scale(axis, 1.0 / n),
            half_angle,
        })
    }

    pub fn complement(self) -> SolidAngle {
        SolidAngle::Complement(Box::new(self))
    }

    /// Membership weight of a direction (not necessarily normalized).
    pub fn weight(&self, dir: Point) -> f64 {
        match self {
            SolidAngle::Full => 1.0,
            SolidAngle::Cap { axis, half_angle } => {
                let r = norm(dir);
                if r == 0.0 {
                    return 0.5;
                }
                let cos_angle = dot(dir, *axis) / r;
                let edge = half_angle.cos();
                if (cos_angle - edge).abs() <= 1e-12 {
                    0.5
                } else if cos_angle > edge {
                    1.0
                } else {
                    0.0
                }
            }
            SolidAngle::PatchSet(_) => 0.0,
            SolidAngle::Complement(inner) => 1.0 - inner.weight(dir),
            SolidAngle::Left => match dir[0].partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Less) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            },
            SolidAngle::Right => match dir[0].partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            },
        }
    }

    /// Membership weight of a mesh patch (patch sets resolve by index,
    /// everything else by the patch direction).
    pub fn patch_weight(&self, patch_id: usize, dir: Point) -> f64 {
        match self {
            SolidAngle::PatchSet(ids) => {
                if ids.contains(&patch_id) {
                    1.0
                } else {
                    0.0
                }
            }
            SolidAngle::Complement(inner) => 1.0 - inner.patch_weight(patch_id, dir),
            _ => self.weight(dir),
        }
    }
}

// ---------------------------------------------------------------------------
// exact evaluation of grid states off the nodes

/// Evaluator of the trigonometric interpolant of a grid state (and its
/// gradient) at scattered points.
///
/// Points sharing a last-axis coordinate (mesh rings, radial shells) share
/// the dominant contraction, which makes surface evaluation O(n^3) per ring
/// plus O(n^2) per point.
pub(crate) struct TrigEvaluator {
    spec: GridSpec,
    /// coefficients of `psi(x) = sum_j c_j exp(i p_j . x)` in raw FFT order
    coef: Vec<Complex64>,
}

type ValueGrad = (Complex64, [Complex64; 3]);

impl TrigEvaluator {
    pub fn new(gs: &GridState) -> TrigEvaluator {
        let mut coef = gs.amplitudes.clone();
        fftops::interpolant_coefficients(&gs.spec, &mut coef);
        TrigEvaluator {
            spec: gs.spec.clone(),
            coef,
        }
    }

    pub fn eval_many(&self, points: &[Point], with_grad: bool) -> Vec<ValueGrad> {
        match self.spec.dim() {
            1 => exec::map_indexed(points.len(), |i| self.eval_1d(points[i], with_grad)),
            _ => self.eval_many_3d(points, with_grad),
        }
    }

    fn eval_1d(&self, x: Point, with_grad: bool) -> ValueGrad {
        let n = self.spec.axis_points(0);
        let mut psi = Complex64::new(0.0, 0.0);
        let mut grad = Complex64::new(0.0, 0.0);
        for j in 0..n {
            let p = self.spec.momentum(0, j);
            let phase = Complex64::from_polar(1.0, p * x[0]);
            let term = self.coef[j] * phase;
            psi += term;
            if with_grad {
                grad += term * Complex64::new(0.0, p);
            }
        }
        (psi, [grad, Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)])
    }

    fn eval_many_3d(&self, points: &[Point], with_grad: bool) -> Vec<ValueGrad> {
        let (nx, ny, nz) = (
            self.spec.axis_points(0),
            self.spec.axis_points(1),
            self.spec.axis_points(2),
        );
        // group points by identical z so the j3 contraction is shared
        let mut groups: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
        for (i, p) in points.iter().enumerate() {
            groups.entry(p[2].to_bits()).or_default().push(i);
        }
        let groups: Vec<(f64, Vec<usize>)> = groups
            .into_iter()
            .map(|(bits, idx)| (f64::from_bits(bits), idx))
            .collect();
        let px: Vec<f64> = (0..nx).map(|j| self.spec.momentum(0, j)).collect();
        let py: Vec<f64> = (0..ny).map(|j| self.spec.momentum(1, j)).collect();
        let pz: Vec<f64> = (0..nz).map(|j| self.spec.momentum(2, j)).collect();
        let results: Vec<Vec<(usize, ValueGrad)>> = exec::map_indexed(groups.len(), |gi| {
            let (z, ref idx) = groups[gi];
            let phase_z: Vec<Complex64> =
                pz.iter().map(|&p| Complex64::from_polar(1.0, p * z)).collect();
            // contract the fastest axis once per ring
            let zero = Complex64::new(0.0, 0.0);
            let mut b = vec![zero; nx * ny];
            let mut bz = vec![zero; if with_grad { nx * ny } else { 0 }];
            for jxy in 0..nx * ny {
                let row = &self.coef[jxy * nz..(jxy + 1) * nz];
                let mut acc = zero;
                let mut accz = zero;
                if with_grad {
                    for j3 in 0..nz {
                        let t = row[j3] * phase_z[j3];
                        acc += t;
                        accz += t * Complex64::new(0.0, pz[j3]);
                    }
                    bz[jxy] = accz;
                } else {
                    for (j3, c) in row.iter().enumerate() {
                        acc += c * phase_z[j3];
                    }
                }
                b[jxy] = acc;
            }
            idx.iter()
                .map(|&pt_idx| {
                    let p = points[pt_idx];
                    let phase_y: Vec<Complex64> = py
                        .iter()
                        .map(|&q| Complex64::from_polar(1.0, q * p[1]))
                        .collect();
                    let mut c = vec![zero; nx];
                    let mut cy = vec![zero; if with_grad { nx } else { 0 }];
                    let mut cz = vec![zero; if with_grad { nx } else { 0 }];
                    for j1 in 0..nx {
                        let row = &b[j1 * ny..(j1 + 1) * ny];
                        let mut acc = zero;
                        let mut accy = zero;
                        for (j2, v) in row.iter().enumerate() {
                            let t = v * phase_y[j2];
                            acc += t;
                            if with_grad {
                                accy += t * Complex64::new(0.0, py[j2]);
                            }
                        }
                        c[j1] = acc;
                        if with_grad {
                            cy[j1] = accy;
                            let rowz = &bz[j1 * ny..(j1 + 1) * ny];
                            let mut accz = zero;
                            for (j2, v) in rowz.iter().enumerate() {
                                accz += v * phase_y[j2];
                            }
                            cz[j1] = accz;
                        }
                    }
                    let mut psi = zero;
                    let mut gx = zero;
                    let mut gy = zero;
                    let mut gz = zero;
                    for j1 in 0..nx {
                        let phase_x = Complex64::from_polar(1.0, px[j1] * p[0]);
                        psi += c[j1] * phase_x;
                        if with_grad {
                            gx += c[j1] * Complex64::new(0.0, px[j1]) * phase_x;
                            gy += cy[j1] * phase_x;
                            gz += cz[j1] * phase_x;
                        }
                    }
                    (pt_idx, (psi, [gx, gy, gz]))
                })
                .collect()
        });
        let zero = Complex64::new(0.0, 0.0);
        let mut out = vec![(zero, [zero; 3]); points.len()];
        for group in results {
            for (idx, vg) in group {
                out[idx] = vg;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// region mass

/// Quadrature resolution for analytic-state region masses.
#[derive(Debug, Clone)]
pub struct QuadratureSpec {
    pub radial: usize,
    pub n_theta: usize,
    pub n_phi: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            radial: 48,
            n_theta: 16,
            n_phi: 32,
        }
    }
}

/// Unit-sphere direction set with weights summing to 4 pi.
pub fn unit_sphere_directions(n_theta: usize, n_phi: usize) -> Vec<(Point, f64)> {
    SurfaceMesh::sphere([0.0; 3], 1.0, n_theta, n_phi)
        .patches
        .into_iter()
        .map(|p| (p.normal, p.weight))
        .collect()
}

fn analytic_density(state: &WaveState, x: Point) -> f64 {
    match state {
        WaveState::Gaussian(g) => g.density(x),
        WaveState::Sum(s) => s.density(x),
        WaveState::Grid(_) => unreachable!("analytic_density on grid state"),
    }
}

/// `Integral_G |psi|^2`: spherical/interval Gauss-Legendre quadrature for
/// analytic states, exact band-limited Fourier integrals for grid states.
pub fn mass_inside(state: &WaveState, region: &Region, quad: &QuadratureSpec) -> Result<f64> {
    if state.dim() != region.dim() {
        return Err(CoreError::InvalidParameter(
            "state and region dimensions differ".into(),
        ));
    }
    match state {
        WaveState::Grid(g) => band_limited_region_mass(g, region),
        _ => match region {
            Region::Ball { center, radius } => {
                let (r, wr) = gauss_legendre_on(quad.radial, 0.0, *radius);
                let dirs = unit_sphere_directions(quad.n_theta, quad.n_phi);
                let shells = exec::map_indexed(r.len(), |qi| {
                    let rq = r[qi];
                    let mut acc = 0.0;
                    for (dir, wd) in &dirs {
                        acc += wd * analytic_density(state, add(*center, scale(*dir, rq)));
                    }
                    wr[qi] * rq * rq * acc
                });
                Ok(shells.iter().sum())
            }
            Region::Interval { a, b } => {
                let (x, w) = gauss_legendre_on(quad.radial.max(64), *a, *b);
                Ok(x
                    .iter()
                    .zip(&w)
                    .map(|(xi, wi)| wi * analytic_density(state, [*xi, 0.0, 0.0]))
                    .sum())
            }
        },
    }
}

/// Region mass of a grid state through the Fourier interpolant of the
/// density: `Integral_G rho = sum_k rho_hat_k Integral_G exp(i p_k x)`,
/// with the region integrals in closed form. Exact for band-limited
/// density, independent of how the region cuts the cells.
fn band_limited_region_mass(gs: &GridState, region: &Region) -> Result<f64> {
    let spec = &gs.spec;
    let mut rho: Vec<Complex64> = gs
        .amplitudes
        .iter()
        .map(|a| Complex64::new(a.norm_sqr(), 0.0))
        .collect();
    fftops::interpolant_coefficients(spec, &mut rho);
    match region {
        Region::Ball { center, radius } => {
            let (ny, nz) = (spec.axis_points(1), spec.axis_points(2));
            let r = *radius;
            let terms = exec::map_indexed(rho.len(), |flat| {
                let jz = flat % nz;
                let rest = flat / nz;
                let p = [
                    spec.momentum(0, rest / ny),
                    spec.momentum(1, rest % ny),
                    spec.momentum(2, jz),
                ];
                let q = norm(p);
                let w = if q * r < 1e-8 {
                    4.0 / 3.0 * PI * r * r * r
                } else {
                    4.0 * PI * ((q * r).sin() - q * r * (q * r).cos()) / (q * q * q)
                };
                let phase = Complex64::from_polar(1.0, dot(p, *center));
                (rho[flat] * phase).re * w
            });
            Ok(terms.iter().sum::<f64>())
        }
        Region::Interval { a, b } => {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, c) in rho.iter().enumerate() {
                let p = spec.momentum(0, j);
                let w = if p.abs() < 1e-12 {
                    Complex64::new(b - a, 0.0)
                } else {
                    (Complex64::from_polar(1.0, p * b) - Complex64::from_polar(1.0, p * a))
                        / Complex64::new(0.0, p)
                };
                acc += c * w;
            }
            Ok(acc.re)
        }
    }
}

// ---------------------------------------------------------------------------
// current and flux

/// Probability current `j = Im(psi* grad psi) / m` at a point.
///
/// Exact for analytic states; grid states evaluate the spectral
/// interpolant, which costs O(n^d) per isolated point.
pub fn current_at(state: &WaveState, x: Point) -> Result<Point> {
    match state {
        WaveState::Gaussian(g) => Ok(scale(g.velocity(x), g.density(x))),
        WaveState::Sum(s) => {
            let psi = s.amplitude(x);
            let grad = s.gradient(x);
            let m = s.mass();
            let mut j = [0.0; 3];
            for k in 0..s.dim() {
                j[k] = (psi.conj() * grad[k]).im / m;
            }
            Ok(j)
        }
        WaveState::Grid(g) => {
            if !g.spec.contains(x) {
                return Err(CoreError::OutOfDomain(format!("{x:?} outside grid")));
            }
            let ev = TrigEvaluator::new(g);
            let (psi, grad) = ev.eval_many(&[x], true)[0];
            let mut j = [0.0; 3];
            for k in 0..g.spec.dim() {
                j[k] = (psi.conj() * grad[k]).im / g.mass;
            }
            Ok(j)
        }
    }
}

/// Per-patch flux `j . n w` through a mesh, plus the total.
#[derive(Debug, Clone)]
pub struct FluxThrough {
    pub per_patch: Vec<f64>,
    pub total: f64,
}

pub fn flux_through(state: &WaveState, mesh: &SurfaceMesh) -> Result<FluxThrough> {
    if state.dim() != mesh.dim() {
        return Err(CoreError::InvalidParameter(
            "state and mesh dimensions differ".into(),
        ));
    }
    let per_patch: Vec<f64> = match state {
        WaveState::Grid(g) => {
            for p in &mesh.patches {
                if !g.spec.contains(p.centroid) {
                    return Err(CoreError::OutOfDomain(
                        "mesh extends outside the grid domain".into(),
                    ));
                }
            }
            let ev = TrigEvaluator::new(g);
            let pts: Vec<Point> = mesh.patches.iter().map(|p| p.centroid).collect();
            let vals = ev.eval_many(&pts, true);
            mesh.patches
                .iter()
                .zip(vals)
                .map(|(patch, (psi, grad))| {
                    let mut jn = 0.0;
                    for k in 0..g.spec.dim() {
                        jn += (psi.conj() * grad[k]).im / g.mass * patch.normal[k];
                    }
                    jn * patch.weight
                })
                .collect()
        }
        _ => exec::map_indexed(mesh.patches.len(), |i| {
            let patch = &mesh.patches[i];
            let j = current_at(state, patch.centroid).expect("analytic current");
            dot(j, patch.normal) * patch.weight
        }),
    };
    let total = per_patch.iter().sum();
    Ok(FluxThrough { per_patch, total })
}

// ---------------------------------------------------------------------------
// flux series in time

/// Per-patch, per-time boundary flux with totals and the cumulative
/// (trapezoid) integral.
#[derive(Debug, Clone)]
pub struct FluxSeries {
    pub times: Vec<f64>,
    /// `[time][patch]` values of `j . n dA` (already weighted).
    pub per_patch: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl FluxSeries {
    pub fn time_step(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// Integrate the totals over `[edges[k], edges[k+1]]` bins by exact
    /// integration of the piecewise-linear interpolant of the series.
    pub fn bin_totals(&self, edges: &[f64]) -> Vec<f64> {
        self.bin_weighted(edges, |row| row.iter().sum())
    }

    /// Same as [`Self::bin_totals`] for an arbitrary per-time functional of
    /// the patch row (e.g. a patch-group restriction).
    pub fn bin_weighted<F: Fn(&[f64]) -> f64>(&self, edges: &[f64], f: F) -> Vec<f64> {
        let series: Vec<f64> = self.per_patch.iter().map(|row| f(row)).collect();
        let mut out = Vec::with_capacity(edges.len() - 1);
        for pair in edges.windows(2) {
            out.push(integrate_linear_segment(&self.times, &series, pair[0], pair[1]));
        }
        out
    }
}

// integral of the piecewise-linear interpolant of (times, values) over [a, b]
fn integrate_linear_segment(times: &[f64], values: &[f64], a: f64, b: f64) -> f64 {
    let t0 = times[0];
    let tn = times[times.len() - 1];
    let a = a.max(t0);
    let b = b.min(tn);
    if b <= a {
        return 0.0;
    }
    let dt = times[1] - times[0];
    let interp = |t: f64| -> f64 {
        let raw = ((t - t0) / dt).clamp(0.0, (values.len() - 1) as f64);
        let i = (raw.floor() as usize).min(values.len() - 2);
        let w = raw - i as f64;
        values[i] * (1.0 - w) + values[i + 1] * w
    };
    let first = (((a - t0) / dt).floor() as usize).min(values.len() - 2);
    let last = (((b - t0) / dt).ceil() as usize).clamp(1, values.len() - 1);
    let mut acc = 0.0;
    for i in first..last {
        let lo = (t0 + dt * i as f64).max(a);
        let hi = (t0 + dt * (i + 1) as f64).min(b);
        if hi > lo {
            acc += 0.5 * (interp(lo) + interp(hi)) * (hi - lo);
        }
    }
    acc
}

fn validate_uniform_times(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(CoreError::InvalidParameter(
            "need at least two sample times".into(),
        ));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(CoreError::InvalidParameter(
            "times must be increasing".into(),
        ));
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(CoreError::InvalidParameter(
                "time grid must be uniform".into(),
            ));
        }
    }
    Ok(dt)
}

/// Boundary flux sampled on a uniform time grid.
pub fn flux_series(e: &Evolution, mesh: &SurfaceMesh, times: &[f64]) -> Result<FluxSeries> {
    let dt = validate_uniform_times(times)?;
    let per_patch: Vec<Vec<f64>> = if e.is_analytic() {
        let rows = exec::map_indexed(times.len(), |i| {
            let s = e.state_at(times[i]).expect("time in range");
            flux_through(&s, mesh).expect("analytic flux")
        });
        rows.into_iter().map(|f| f.per_patch).collect()
    } else {
        let mut rows = Vec::with_capacity(times.len());
        for &t in times {
            let s = e.state_at(t)?;
            rows.push(flux_through(&s, mesh)?.per_patch);
        }
        rows
    };
    let totals: Vec<f64> = per_patch.iter().map(|row| row.iter().sum()).collect();
    let cumulative = cumulative_trapezoid(&totals, dt);
    Ok(FluxSeries {
        times: times.to_vec(),
        per_patch,
        totals,
        cumulative,
    })
}

/// Uniform time grid helper.
pub fn uniform_times(t0: f64, t1: f64, steps: usize) -> Vec<f64> {
    let dt = (t1 - t0) / steps as f64;
    (0..=steps).map(|i| t0 + dt * i as f64).collect()
}

// ---------------------------------------------------------------------------
// continuity

/// `|d/dt Integral_G |psi|^2 + Flux(boundary G)|` at time `t`.
///
/// The mass derivative uses a centered difference: two-point with a small
/// step for analytic evolutions, a five-point fourth-order stencil on the
/// frame grid for grid evolutions.
pub fn continuity_residual(
    e: &Evolution,
    region: &Region,
    mesh: &SurfaceMesh,
    t: f64,
    quad: &QuadratureSpec,
) -> Result<f64> {
    let flux_now = flux_through(&e.state_at(t)?, mesh)?.total;
    let dmdt = if e.is_analytic() {
        let delta = 3e-4;
        let m_plus = mass_inside(&e.state_at(t + delta)?, region, quad)?;
        let m_minus = mass_inside(&e.state_at(t - delta)?, region, quad)?;
        (m_plus - m_minus) / (2.0 * delta)
    } else {
        let frames = e.frames();
        if frames.len() < 5 {
            return Err(CoreError::InvalidSetup(
                "continuity stencil needs at least five frames".into(),
            ));
        }
        let dt = frames[1].time - frames[0].time;
        let j = ((t - frames[0].time) / dt).round() as isize;
        if j < 2 || j as usize > frames.len() - 3 {
            return Err(CoreError::OutOfDomain(
                "time too close to the evolution ends for the stencil".into(),
            ));
        }
        let j = j as usize;
        if (frames[j].time - t).abs() > 1e-9 {
            return Err(CoreError::InvalidParameter(
                "grid continuity requires a frame time".into(),
            ));
        }
        let m = |idx: usize| -> Result<f64> {
            mass_inside(&WaveState::Grid(frames[idx].state.clone()), region, quad)
        };
        (-m(j + 2)? + 8.0 * m(j + 1)? - 8.0 * m(j - 1)? + m(j - 2)?) / (12.0 * dt)
    };
    Ok((dmdt + flux_now).abs())
}

// ---------------------------------------------------------------------------
// exit-time density

/// Exit-time density `rho(t) = Flux(boundary G)` as a flux series.
///
/// `outside_tol` bounds the initial mass outside `G` (the spec default is
/// 1e-6); above it the setup is rejected.
pub fn exit_time_density(
    e: &Evolution,
    region: &Region,
    mesh: &SurfaceMesh,
    times: &[f64],
    outside_tol: f64,
) -> Result<FluxSeries> {
    let (t0, _) = e.time_range();
    let initial_inside = mass_inside(&e.state_at(t0)?, region, &QuadratureSpec::default())?;
    let outside = 1.0 - initial_inside;
    if outside > outside_tol {
        return Err(CoreError::InvalidSetup(format!(
            "initial mass outside the region is {outside:.3e} > {outside_tol:.1e}"
        )));
    }
    let series = flux_series(e, mesh, times)?;
    let max_cumulative = series.cumulative.iter().copied().fold(f64::MIN, f64::max);
    if max_cumulative > 1.0 + 1e-6 {
        return Err(CoreError::Resolution(format!(
            "cumulative exit probability reached {max_cumulative}"
        )));
    }
    Ok(series)
}

/// Analytic exit-time density of a centered Gaussian leaving a ball of
/// radius `R`, free evolution:
/// `rho(t) = C R^3 t u^-5 exp(-R^2 / (2 sigma^2 u^2))`,
/// `u = sqrt(1 + (t / 2 m sigma^2)^2)`, normalized to unit integral.
///
/// The closed-form CDF comes from pushing the radial equilibrium
/// distribution through the trajectory scaling law.
#[derive(Debug, Clone)]
pub struct GaussianExitDensity {
    pub mass: f64,
    pub sigma: f64,
    pub radius: f64,
    norm: f64,
}

impl GaussianExitDensity {
    pub fn new(mass: f64, sigma: f64, radius: f64) -> Result<Self> {
        if !(mass > 0.0 && sigma > 0.0 && radius > 0.0) {
            return Err(CoreError::InvalidParameter(
                "mass, sigma and radius must be positive".into(),
            ));
        }
        let mut d = GaussianExitDensity {
            mass,
            sigma,
            radius,
            norm: 1.0,
        };
        // numeric normalization on geometrically growing segments
        let t1 = 2.0 * mass * sigma * sigma;
        let mut total = 0.0;
        let mut lo = 0.0;
        let mut hi = t1;
        for _ in 0..200 {
            let (x, w) = gauss_legendre_on(32, lo, hi);
            let seg: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * d.raw(*xi)).sum();
            total += seg;
            if seg < 1e-14 * total && lo > t1 {
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        d.norm = total;
        Ok(d)
    }

    fn spreading(&self, t: f64) -> f64 {
        let tau = t / (2.0 * self.mass * self.sigma * self.sigma);
        (1.0 + tau * tau).sqrt()
    }

    /// The proportional form `R^3 t u^-5 exp(-R^2/(2 sigma^2 u^2))` before
    /// normalization.
    pub fn unnormalized(&self, t: f64) -> f64 {
        self.raw(t)
    }

    fn raw(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let u = self.spreading(t);
        let r = self.radius;
        r.powi(3) * t * u.powi(-5) * (-r * r / (2.0 * self.sigma * self.sigma * u * u)).exp()
    }

    pub fn density(&self, t: f64) -> f64 {
        self.raw(t) / self.norm
    }

    /// Exit-time CDF (exact): fraction of the exiting subensemble gone by `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let z_total = self.radius / self.sigma;
        let z_remaining = self.radius / (self.sigma * self.spreading(t));
        (chi3_cdf(z_total) - chi3_cdf(z_remaining)) / chi3_cdf(z_total)
    }
}

/// Normalized analytic exit-time density value; see [`GaussianExitDensity`].
pub fn gaussian_exit_density_analytic(mass: f64, sigma: f64, radius: f64, t: f64) -> f64 {
    GaussianExitDensity::new(mass, sigma, radius)
        .map(|d| d.density(t))
        .unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// current positivity condition

#[derive(Debug, Clone)]
pub struct CpcViolation {
    pub time: f64,
    pub patch: usize,
    /// flux density `j . n` at the patch (negative).
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct CpcReport {
    pub holds: bool,
    pub violations: Vec<CpcViolation>,
    pub max_flux_density: f64,
}

/// Scan `j . n` over (times x patches); a violation is a flux density below
/// `-tol * max |j . n|` observed in the scan.
pub fn check_cpc(
    e: &Evolution,
    mesh: &SurfaceMesh,
    times: &[f64],
    tol: f64,
) -> Result<CpcReport> {
    validate_uniform_times(times)?;
    let series = flux_series(e, mesh, times)?;
    let mut max_density: f64 = 0.0;
    for row in &series.per_patch {
        for (p, v) in row.iter().enumerate() {
            max_density = max_density.max((v / mesh.patches[p].weight).abs());
        }
    }
    let threshold = if tol.is_infinite() {
        f64::NEG_INFINITY
    } else {
        -tol * max_density
    };
    let mut violations = Vec::new();
    for (ti, row) in series.per_patch.iter().enumerate() {
        for (p, v) in row.iter().enumerate() {
            let density = v / mesh.patches[p].weight;
            if density < threshold {
                violations.push(CpcViolation {
                    time: series.times[ti],
                    patch: p,
                    value: density,
                });
            }
        }
    }
    Ok(CpcReport {
        holds: violations.is_empty(),
        violations,
        max_flux_density: max_density,
    })
}

// ---------------------------------------------------------------------------
// scattering probabilities

#[derive(Debug, Clone)]
pub struct SigmaFluxParams {
    pub radius: f64,
    pub horizon: f64,
    pub time_steps: usize,
    pub n_theta: usize,
    pub n_phi: usize,
}

#[derive(Debug, Clone)]
pub struct SigmaFluxResult {
    pub value: f64,
    /// Mass still inside the ball at the horizon.
    pub remainder: f64,
}

/// Time-integrated outward flux through the `solid`-angle sector of the
/// origin-centered sphere of the given radius, Simpson in time, plus the
/// remainder estimate (mass still inside at the horizon).
pub fn sigma_flux(
    e: &Evolution,
    solid: &SolidAngle,
    params: &SigmaFluxParams,
) -> Result<SigmaFluxResult> {
    let (t0, t1) = e.time_range();
    if params.horizon > t1 + 1e-9 {
        return Err(CoreError::OutOfDomain(
            "horizon exceeds the evolution range".into(),
        ));
    }
    let (mesh, region) = if e.dim() == 3 {
        (
            SurfaceMesh::sphere([0.0; 3], params.radius, params.n_theta, params.n_phi),
            Region::ball([0.0; 3], params.radius)?,
        )
    } else {
        (
            SurfaceMesh::interval(-params.radius, params.radius),
            Region::interval(-params.radius, params.radius)?,
        )
    };
    let times = uniform_times(t0, params.horizon, params.time_steps);
    let series = flux_series(e, &mesh, &times)?;
    let weights: Vec<f64> = mesh
        .patches
        .iter()
        .enumerate()
        .map(|(i, p)| solid.patch_weight(i, p.normal))
        .collect();
    let weighted: Vec<f64> = series
        .per_patch
        .iter()
        .map(|row| row.iter().zip(&weights).map(|(v, w)| v * w).sum())
        .collect();
    let value = simpson_uniform(&weighted, series.time_step());
    let remainder = mass_inside(
        &e.state_at(params.horizon)?,
        &region,
        &QuadratureSpec::default(),
    )?;
    Ok(SigmaFluxResult { value, remainder })
}

/// Probability of finding the particle in the cone subtended by `solid`
/// (apex at the origin) at time `t`, by grid quadrature of the density
/// over the cone indicator.
///
/// Analytic evolutions quadrature on a synthesized box covering the packet
/// unless `grid_override` is given.
pub fn sigma_cone(
    e: &Evolution,
    solid: &SolidAngle,
    t: f64,
    grid_override: Option<&GridSpec>,
) -> Result<f64> {
    let state = e.state_at(t)?;
    match &state {
        WaveState::Grid(g) => {
            let cell = g.spec.cell_volume();
            let spec = g.spec.clone();
            let terms = exec::map_indexed(g.amplitudes.len(), |flat| {
                let x = spec.position(flat);
                g.amplitudes[flat].norm_sqr() * cell * solid.weight(x)
            });
            Ok(terms.iter().sum())
        }
        _ => {
            let spec = match grid_override {
                Some(s) => s.clone(),
                None => synthesize_density_grid(&state)?,
            };
            let cell = spec.cell_volume();
            let terms = exec::map_indexed(spec.total_points(), |flat| {
                let x = spec.position(flat);
                analytic_density(&state, x) * cell * solid.weight(x)
            });
            Ok(terms.iter().sum())
        }
    }
}

// origin-centered box with 7.5 widths of margin around every packet center
fn synthesize_density_grid(state: &WaveState) -> Result<GridSpec> {
    let packets: Vec<(Point, f64)> = match state {
        WaveState::Gaussian(g) => vec![(g.packet_center(), g.width())],
        WaveState::Sum(s) => s
            .components()
            .iter()
            .map(|(_, g)| (g.packet_center(), g.width()))
            .collect(),
        WaveState::Grid(_) => unreachable!(),
    };
    let dim = state.dim();
    let mut half = [0.0f64; 3];
    for (c, w) in &packets {
        for k in 0..dim {
            half[k] = half[k].max(c[k].abs() + 7.5 * w);
        }
    }
    if dim == 1 {
        GridSpec::new_1d(4096, 2.0 * half[0])
    } else {
        GridSpec::new_3d(
            [128; 3],
            [2.0 * half[0], 2.0 * half[1], 2.0 * half[2]],
        )
    }
}

/// Momentum-space probability of the cone subtended by `solid`: grid
/// quadrature of `|psihat|^2` with boundary directions at half weight.
pub fn momentum_cone_probability(ms: &MomentumState, solid: &SolidAngle) -> Result<f64> {
    if matches!(solid, SolidAngle::PatchSet(_)) {
        return Err(CoreError::InvalidParameter(
            "patch-index sets are mesh-specific; use a cap or 1-d side".into(),
        ));
    }
    let cell = ms.spec.cell_volume();
    let spec = ms.spec.clone();
    let terms = exec::map_indexed(ms.amplitudes.len(), |flat| {
        let p = spec.position(flat);
        ms.amplitudes[flat].norm_sqr() * cell * solid.weight(p)
    });
    Ok(terms.iter().sum())
}

// ---------------------------------------------------------------------------
// flux-across-surfaces verification

#[derive(Debug, Clone)]
pub struct FastRow {
    pub radius: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
    pub remainder: f64,
}

#[derive(Debug, Clone)]
pub struct FastInteraction {
    pub potential: crate::evolve::Potential,
    /// wave-operator horizon and step
    pub wave_t: f64,
    pub dt: f64,
    /// frames per inner step for the interacting flux evolution
    pub frame_every: usize,
}

#[derive(Debug, Clone)]
pub struct FastConfig {
    pub horizon: f64,
    pub time_steps: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    /// grid used to discretize analytic states for the momentum-space side
    pub momentum_grid: Option<GridSpec>,
    pub interaction: Option<FastInteraction>,
}

/// Verify the flux identity: time-integrated sector flux at each radius
/// against the momentum-cone probability of the (out-)state.
pub fn verify_fast(
    psi0: &WaveState,
    solid: &SolidAngle,
    radii: &[f64],
    cfg: &FastConfig,
) -> Result<Vec<FastRow>> {
    use crate::evolve::{EvolveMethod, Evolution};
    // momentum side
    let rhs_ms = match (&cfg.interaction, psi0) {
        (Some(inter), WaveState::Grid(g)) => {
            let out = crate::evolve::wave_operator_out(g, &inter.potential, inter.wave_t, inter.dt)?;
            crate::state::to_momentum(&out)
        }
        (Some(_), _) => {
            return Err(CoreError::InvalidParameter(
                "interacting verification needs a grid initial state".into(),
            ))
        }
        (None, WaveState::Grid(g)) => crate::state::to_momentum(g),
        (None, analytic) => {
            let spec = cfg.momentum_grid.clone().ok_or_else(|| {
                CoreError::InvalidParameter(
                    "analytic input needs cfg.momentum_grid for the momentum side".into(),
                )
            })?;
            let rep = crate::state::discretize(analytic, &spec)?;
            crate::state::to_momentum(&rep.state)
        }
    };
    let rhs = momentum_cone_probability(&rhs_ms, solid)?;
    // flux side
    let evolution = match &cfg.interaction {
        Some(inter) => Evolution::build(
            psi0.clone(),
            EvolveMethod::SplitStep {
                potential: inter.potential.clone(),
                dt: inter.dt,
                frame_every: inter.frame_every,
            },
            cfg.horizon,
        )?,
        None => {
            if psi0.is_analytic() {
                Evolution::build(psi0.clone(), EvolveMethod::AnalyticFree, cfg.horizon)?
            } else {
                Evolution::build(
                    psi0.clone(),
                    EvolveMethod::SpectralFree {
                        dt_frame: cfg.horizon / cfg.time_steps as f64,
                    },
                    cfg.horizon,
                )?
            }
        }
    };
    let mut rows = Vec::with_capacity(radii.len());
    for &radius in radii {
        let res = sigma_flux(
            &evolution,
            solid,
            &SigmaFluxParams {
                radius,
                horizon: cfg.horizon,
                time_steps: cfg.time_steps,
                n_theta: cfg.n_theta,
                n_phi: cfg.n_phi,
            },
        )?;
        rows.push(FastRow {
            radius,
            lhs: res.value,
            rhs,
            abs_err: (res.value - rhs).abs(),
            remainder: res.remainder,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// patch grouping (exit-position statistics)

/// Assignment of mesh patches to groups (polar bands about an axis for
/// spheres, one group per endpoint for intervals).
#[derive(Debug, Clone)]
pub struct PatchGroups {
    pub assignment: Vec<usize>,
    pub count: usize,
    /// total quadrature weight (area) per group
    pub areas: Vec<f64>,
}

impl PatchGroups {
    pub fn polar_bands(mesh: &SurfaceMesh, bands: usize, axis: Point) -> Result<PatchGroups> {
        if mesh.dim() == 1 {
            return Ok(PatchGroups {
                assignment: vec![0, 1],
                count: 2,
                areas: vec![1.0, 1.0],
            });
        }
        if bands == 0 {
            return Err(CoreError::InvalidParameter("need at least one band".into()));
        }
        let n = norm(axis);
        if !(n > 0.0) {
            return Err(CoreError::InvalidParameter("zero band axis".into()));
        }
        let axis = scale(axis, 1.0 / n);
        let mut assignment = Vec::with_capacity(mesh.patches.len());
        let mut areas = vec![0.0; bands];
        for p in &mesh.patches {
            let mu = dot(p.normal, axis).clamp(-1.0, 1.0);
            let band = (((mu + 1.0) / 2.0) * bands as f64) as usize;
            let band = band.min(bands - 1);
            assignment.push(band);
            areas[band] += p.weight;
        }
        Ok(PatchGroups {
            assignment,
            count: bands,
            areas,
        })
    }

    pub fn group_of(&self, patch: usize) -> usize {
        self.assignment[patch]
    }
}
