//! Raw multi-axis FFTs over flat complex buffers.
//!
//! `forward` applies the unnormalized DFT with negative exponent along every
//! active axis, `inverse` the positive-exponent transform (also
//! unnormalized); `inverse_normalized` divides by the point count so that
//! `inverse_normalized(forward(x)) == x` up to roundoff.
//!
//! Strided axes are handled by gathering lines into a contiguous scratch
//! volume, transforming, and scattering back; each phase writes disjoint
//! chunks so the parallel path is bitwise identical to the sequential one.

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

use super::GridSpec;
use crate::exec;
use crate::Point;

fn plan(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    planner.plan_fft(n, direction)
}

pub fn forward(spec: &GridSpec, data: &mut [Complex64]) {
    transform(spec, data, FftDirection::Forward);
}

pub fn inverse(spec: &GridSpec, data: &mut [Complex64]) {
    transform(spec, data, FftDirection::Inverse);
}

pub fn inverse_normalized(spec: &GridSpec, data: &mut [Complex64]) {
    transform(spec, data, FftDirection::Inverse);
    let scale = 1.0 / spec.total_points() as f64;
    for v in data.iter_mut() {
        *v *= scale;
    }
}

fn transform(spec: &GridSpec, data: &mut [Complex64], direction: FftDirection) {
    match spec.dim() {
        1 => {
            let fft = plan(spec.axis_points(0), direction);
            fft.process(data);
        }
        3 => {
            let (nx, ny, nz) = (
                spec.axis_points(0),
                spec.axis_points(1),
                spec.axis_points(2),
            );
            // z axis: contiguous lines
            let fft_z = plan(nz, direction);
            exec::for_each_chunk_mut(data, nz, |_, line| {
                fft_z.process(line);
            });
            // y axis: lines of stride nz inside each x slab
            let fft_y = plan(ny, direction);
            exec::for_each_chunk_mut(data, ny * nz, |_, slab| {
                let mut scratch = vec![Complex64::new(0.0, 0.0); ny];
                for z in 0..nz {
                    for y in 0..ny {
                        scratch[y] = slab[y * nz + z];
                    }
                    fft_y.process(&mut scratch);
                    for y in 0..ny {
                        slab[y * nz + z] = scratch[y];
                    }
                }
            });
            // x axis: gather into a line-major scratch volume, transform,
            // scatter back slab by slab
            let fft_x = plan(nx, direction);
            let mut lines = vec![Complex64::new(0.0, 0.0); data.len()];
            {
                let data_ref: &[Complex64] = data;
                exec::for_each_chunk_mut(&mut lines, nx, |line_id, row| {
                    // line_id = y * nz + z
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = data_ref[x * ny * nz + line_id];
                    }
                    fft_x.process(row);
                });
            }
            let lines_ref: &[Complex64] = &lines;
            exec::for_each_chunk_mut(data, ny * nz, |x, slab| {
                for (line_id, v) in slab.iter_mut().enumerate() {
                    *v = lines_ref[line_id * nx + x];
                }
            });
        }
        _ => unreachable!(),
    }
}

/// Turn grid samples into interpolant coefficients: after this,
/// `psi(x) = sum_j c_j exp(i p_j . x)` for x anywhere (the grid origin at
/// `-L/2` contributes an alternating sign on top of the plain DFT).
pub fn interpolant_coefficients(spec: &GridSpec, data: &mut [Complex64]) {
    forward(spec, data);
    let inv_n = 1.0 / spec.total_points() as f64;
    let dim = spec.dim();
    for (flat, v) in data.iter_mut().enumerate() {
        let idx = spec.unflatten(flat);
        let parity: usize = idx[..dim].iter().sum();
        let sign = if parity % 2 == 0 { inv_n } else { -inv_n };
        *v *= sign;
    }
}

/// Multiply raw-order spectral coefficients by `f(p)` where `p` is the
/// signed momentum vector of each mode.
pub fn multiply_momentum<F>(spec: &GridSpec, data: &mut [Complex64], f: F)
where
    F: Fn(Point) -> Complex64 + Sync,
{
    match spec.dim() {
        1 => {
            for (j, v) in data.iter_mut().enumerate() {
                *v *= f([spec.momentum(0, j), 0.0, 0.0]);
            }
        }
        3 => {
            let (ny, nz) = (spec.axis_points(1), spec.axis_points(2));
            exec::for_each_chunk_mut(data, nz, |line, chunk| {
                let jx = line / ny;
                let jy = line % ny;
                let px = spec.momentum(0, jx);
                let py = spec.momentum(1, jy);
                for (jz, v) in chunk.iter_mut().enumerate() {
                    *v *= f([px, py, spec.momentum(2, jz)]);
                }
            });
        }
        _ => unreachable!(),
    }
}
