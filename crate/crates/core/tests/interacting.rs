//! Interacting-dynamics checks: wave-operator stabilization in the
//! horizon and the flux identity with a scattering potential.

use qflux_core::evolve::{wave_operator_out, Potential};
use qflux_core::flux::{verify_fast, FastConfig, FastInteraction, SolidAngle};
use qflux_core::state::{discretize, make_gaussian, GridSpec, WaveState};

fn scattering_setup() -> (qflux_core::state::GridState, Potential) {
    // fast packet aimed at a bump: drift beats dispersion (v / sigma_v = 16)
    // so the interaction region clears decisively within the horizon
    let g = make_gaussian(1, [-6.0, 0.0, 0.0], [8.0, 0.0, 0.0], 1.0, 4.0).unwrap();
    let spec = GridSpec::new_1d(2048, 160.0).unwrap();
    let grid = discretize(&WaveState::Gaussian(g), &spec).unwrap().state;
    (grid, Potential::GaussianBump { v0: 1.0, a: 1.0 })
}

#[test]
fn wave_operator_stabilizes_in_the_horizon() {
    let (grid, bump) = scattering_setup();
    let out_t = wave_operator_out(&grid, &bump, 12.0, 0.005).unwrap();
    let out_2t = wave_operator_out(&grid, &bump, 24.0, 0.005).unwrap();
    let cell = out_t.spec.cell_volume();
    let l2 = (out_t
        .amplitudes
        .iter()
        .zip(&out_2t.amplitudes)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        * cell)
        .sqrt();
    assert!(l2 <= 1e-3, "T vs 2T difference {l2:.3e}");
    assert!((out_t.norm_sq() - 1.0).abs() <= 1e-9);
}

#[test]
fn interacting_flux_identity_at_the_largest_radius() {
    let (grid, bump) = scattering_setup();
    let cfg = FastConfig {
        horizon: 24.0,
        time_steps: 600,
        n_theta: 0,
        n_phi: 0,
        momentum_grid: None,
        interaction: Some(FastInteraction {
            potential: bump,
            wave_t: 12.0,
            dt: 0.005,
            frame_every: 10,
        }),
    };
    let rows = verify_fast(
        &WaveState::Grid(grid),
        &SolidAngle::Right,
        &[8.0, 16.0],
        &cfg,
    )
    .unwrap();
    // the transmitted fraction dominates for this kinetic energy
    assert!(rows[1].rhs > 0.5, "transmission {}", rows[1].rhs);
    for row in &rows {
        assert!(
            row.abs_err <= 5e-2,
            "R = {}: |lhs - rhs| = {:.3e}",
            row.radius,
            row.abs_err
        );
    }
}
