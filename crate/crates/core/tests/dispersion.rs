use std::f64::consts::PI;

use plume_core::dispersion::{
    sample_source_magnitude, solve_pde, wind_speed_bound, GridSpec, PdeSolver, PhysicalParams, SourceMagnitude,
    WindField, WindParams, DOMAIN_X, DOMAIN_Y,
};
use proptest::prelude::*;

/// Max-norm error of a decaying cosine mode at `T`, which is an exact
/// solution of pure diffusion with zero-flux walls.
fn cosine_mode_error(nx: usize, ny: usize, n_steps: usize, substeps: usize) -> f64 {
    let kappa = 2.0;
    let params = PhysicalParams::diffusion_only(kappa);
    let grid = GridSpec::new(nx, ny, n_steps, 20.0, substeps).unwrap();
    let (kx, ky) = (4.0 * PI / DOMAIN_X, PI / DOMAIN_Y);
    let mode = |t: f64, x: f64, y: f64| (-kappa * (kx * kx + ky * ky) * t).exp() * (kx * x).cos() * (ky * y).cos();
    let mut u0 = vec![0.0; grid.m()];
    for j in 0..ny {
        for i in 0..nx {
            u0[grid.index(i, j)] = mode(0.0, grid.x(i), grid.y(j));
        }
    }
    let traj = PdeSolver::new(&grid, &params)
        .solve_from(&u0, &SourceMagnitude::zeros(n_steps), &WindField::zeros(n_steps, grid.m()))
        .unwrap();
    let last = traj.snapshot(n_steps);
    let mut err = 0.0_f64;
    for j in 0..ny {
        for i in 0..nx {
            err = err.max((last[grid.index(i, j)] - mode(grid.final_time, grid.x(i), grid.y(j))).abs());
        }
    }
    err
}

#[test]
fn diffusion_converges_at_second_order() {
    // Base substep count satisfies the explicit bound on the coarsest grid;
    // every refinement halves dx, dy and the step.
    let levels = [(21, 5, 10, 4), (41, 9, 20, 8), (81, 17, 40, 16)];
    let errors: Vec<f64> = levels.iter().map(|&(nx, ny, n, s)| cosine_mode_error(nx, ny, n, s)).collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!(ratio >= 3.5, "refinement ratio {ratio} from errors {errors:?}");
    }
}

fn small_grid(nx: usize, ny: usize) -> GridSpec {
    GridSpec::with_auto_substeps(nx, ny, 40, 20.0, &PhysicalParams::default(), wind_speed_bound(1.0)).unwrap()
}

#[test]
fn source_driven_runs_stay_nonnegative() {
    let grid = small_grid(101, 21);
    let z = sample_source_magnitude(2.0, 0.5, &grid);
    for theta in [WindParams::zero(), WindParams::mean(1.0)] {
        let traj = solve_pde(&z, &theta, &grid, &PhysicalParams::default()).unwrap();
        let max = traj.values.iter().copied().fold(0.0, f64::max);
        let min = traj.values.iter().copied().fold(0.0, f64::min);
        assert!(max > 0.0);
        assert!(min >= -1e-8 * max, "undershoot {min} against peak {max}");
    }
}

#[test]
fn repeated_solves_are_bit_identical() {
    let grid = small_grid(61, 11);
    let z = sample_source_magnitude(3.5, 2.0, &grid);
    let theta = plume_core::dispersion::sample_wind_params(11, 1.0).unwrap();
    let a = solve_pde(&z, &theta, &grid, &PhysicalParams::default()).unwrap();
    let b = solve_pde(&z, &theta, &grid, &PhysicalParams::default()).unwrap();
    assert_eq!(a, b);
}

/// Per snapshot after the first: x of the largest value and x of the mass
/// centroid.
fn tracks(grid: &GridSpec) -> (Vec<f64>, Vec<f64>) {
    let z = sample_source_magnitude(2.0, 0.5, grid);
    let traj = solve_pde(&z, &WindParams::zero(), grid, &PhysicalParams::default()).unwrap();
    (1..=grid.n_steps)
        .map(|n| {
            let s = traj.snapshot(n);
            let k = (0..s.len()).fold(0, |best, k| if s[k] > s[best] { k } else { best });
            let (mut mass, mut moment) = (0.0, 0.0);
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let w = s[grid.index(i, j)] * grid.cell_area(i, j);
                    mass += w;
                    moment += w * grid.x(i);
                }
            }
            (grid.x(k % grid.nx), moment / mass)
        })
        .unzip()
}

#[test]
fn plume_moves_rightward_and_agrees_with_half_resolution() {
    let fine = small_grid(161, 21);
    let coarse = small_grid(81, 11);
    let ((peak_f, cen_f), (_, cen_c)) = (tracks(&fine), tracks(&coarse));
    assert!(peak_f.windows(2).all(|w| w[1] >= w[0]), "peak moved left: {peak_f:?}");
    assert!(cen_f.windows(2).all(|w| w[1] > w[0]), "centroid stalled: {cen_f:?}");
    assert!(cen_f.last().unwrap() > &20.0);
    for (f, c) in cen_f.iter().zip(&cen_c) {
        assert!((f - c).abs() <= coarse.dx(), "fine {f} vs coarse {c}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn solution_is_linear_in_the_source(
        seed in 0u64..1000,
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        e1 in 0.5f64..4.0,
        e2 in 0.5f64..4.0,
    ) {
        let grid = small_grid(41, 9);
        let params = PhysicalParams::default();
        let theta = plume_core::dispersion::sample_wind_params(seed, 1.0).unwrap();
        let z1 = sample_source_magnitude(e1, e2, &grid);
        let z2 = SourceMagnitude::new((0..grid.n_steps).map(|n| 1000.0 * ((n as f64) * 0.3).sin()).collect()).unwrap();
        let combo = SourceMagnitude::new(
            z1.values.iter().zip(&z2.values).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        let u1 = solve_pde(&z1, &theta, &grid, &params).unwrap();
        let u2 = solve_pde(&z2, &theta, &grid, &params).unwrap();
        let u = solve_pde(&combo, &theta, &grid, &params).unwrap();
        let expect: Vec<f64> = u1.values.iter().zip(&u2.values).map(|(a, b)| alpha * a + beta * b).collect();
        let rel = plume_core::linalg::rel_l2(&u.values, &expect);
        prop_assert!(rel < 1e-10 || plume_core::linalg::norm(&expect) == 0.0, "relative deviation {}", rel);
    }

    #[test]
    fn wind_parameters_stay_in_their_scaled_intervals(seed in any::<u64>(), scale in 0.05f64..1.0) {
        let p = plume_core::dispersion::sample_wind_params(seed, scale).unwrap();
        for (v, (lo, hi)) in p.theta.iter().zip(plume_core::dispersion::theta_bounds(scale)) {
            prop_assert!(*v >= lo && *v <= hi);
        }
    }
}
