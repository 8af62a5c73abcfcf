//! Release acceptance suite. Every guarantee the workspace makes is checked
//! here at desk scale, each with a pinned tolerance and a wall-clock budget;
//! one [PASS]/[FAIL] line is printed per criterion.

use std::time::Instant;

use wtorus::elliptic::{
    apply_elliptic, bilinear_form, solve_poisson, solve_resolvent, DiagonalField, SolveConfig,
    SolveMode,
};
use wtorus::exclusion::{
    sample_initial, simulate, solve_hydrodynamic, DensityProfile, RateKind, RateModel,
    TimeStepping,
};
use wtorus::homogenize::{
    build_field, fit_effective_coefficient, run_h_convergence_study, CoefficientSpec,
    ContinuousDual, ContinuousFn, EnvironmentKind, HomogenizedAxis, HomogenizedMatrix,
    RandomEnvironmentSpec, StudyReference,
};
use wtorus::interp::{
    approx_test_function, discretize_l2, discretize_weighted, interpolate,
    l2_error_vs_function, w_derivative_of_interpolant, InterpolantKind,
};
use wtorus::measure::{WCoordinate, WProduct};
use wtorus::mesh::{
    divergence_form_apply, inner_l2, inner_wk, norm_l2, w_diff, MeshFunction, TorusGrid,
};

const TAU: f64 = 2.0 * std::f64::consts::PI;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

/// Runs one criterion, prints its verdict line, and fails the test on any
/// violated bound or a blown time budget.
fn criterion(num: u32, label: &str, budget_s: f64, body: impl FnOnce() -> Result<(), String>) {
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed().as_secs_f64();
    match outcome {
        Ok(()) if elapsed <= budget_s => {
            println!("[PASS] {num:02} {label} ({elapsed:.2}s, budget {budget_s}s)");
        }
        Ok(()) => {
            println!("[FAIL] {num:02} {label}: took {elapsed:.2}s, budget {budget_s}s");
            panic!("criterion {num:02} exceeded its {budget_s}s budget ({elapsed:.2}s)");
        }
        Err(msg) => {
            println!("[FAIL] {num:02} {label}: {msg} ({elapsed:.2}s)");
            panic!("criterion {num:02} {label}: {msg}");
        }
    }
}

/// Splitmix-style generator; good enough spread for test-case parameters
/// and fully reproducible.
struct Rng(u64);

impl Rng {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }
}

fn random_weight(rng: &mut Rng, kind: usize) -> WCoordinate {
    match kind % 3 {
        0 => WCoordinate::identity(),
        1 => {
            let pos = [0.5, 0.37, 0.75][rng.below(3)];
            WCoordinate::with_atoms(vec![(pos, rng.range(0.5, 1.5))]).expect("valid atom")
        }
        _ => WCoordinate::with_atoms(vec![
            (0.25, rng.range(0.4, 1.2)),
            (0.7, rng.range(0.4, 1.2)),
        ])
        .expect("valid atoms"),
    }
}

fn random_function(rng: &mut Rng, grid: &TorusGrid) -> MeshFunction {
    grid.mesh_fn((0..grid.site_count()).map(|_| rng.range(-1.0, 1.0)).collect())
        .expect("matching length")
}

#[test]
fn c01_small_instances_match_the_dense_direct_solve() {
    criterion(1, "iterative solves match dense solves on small instances", 10.0, || {
        let mut rng = Rng(0xA11CE);
        let iterative = SolveConfig {
            mode: SolveMode::Iterative,
            rel_tol: 1e-12,
            ..SolveConfig::default()
        };
        let dense = SolveConfig::dense();
        for case in 0..100 {
            let d = [1, 1, 2, 2, 3, 4][case % 6];
            let max_n: usize = [256, 16, 6, 4][d - 1];
            let n = 2 + rng.below(max_n - 1);
            let axes: Vec<WCoordinate> =
                (0..d).map(|k| random_weight(&mut rng, case + k)).collect();
            let grid = TorusGrid::new(n, WProduct::new(axes).map_err(|e| e.to_string())?)
                .map_err(|e| format!("{e:?}"))?;
            let a = DiagonalField::sample(&grid, |_, _| rng.range(0.5, 2.0))
                .map_err(|e| format!("{e:?}"))?;
            ensure!(a.theta() <= 4.0 + 1e-12, "case {case}: spread {}", a.theta());
            let f = random_function(&mut rng, &grid);
            let ui = solve_resolvent(&a, 1.0, &f, &iterative).map_err(|e| format!("{e:?}"))?;
            let ud = solve_resolvent(&a, 1.0, &f, &dense).map_err(|e| format!("{e:?}"))?;
            let gap = ui
                .values()
                .iter()
                .zip(ud.values())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            ensure!(
                gap <= 1e-9,
                "case {case} (d={d}, n={n}): max-norm gap {gap:e} above 1e-9"
            );
        }
        Ok(())
    });
}

#[test]
fn c02_two_site_constants_match_the_closed_form() {
    criterion(2, "hand-checked two-site constants", 1.0, || {
        // n = 2, identity weight: both cells carry weight 1/2, each bond
        // conductance n/(1/2) = 4, and the two bonds stack, so
        //   lambda = 1 gives the system [[9, -8], [-8, 9]] u = f.
        // Cramer on that system with f = (1, -1) gives u = (1/17, -1/17);
        // the zero-lambda balance -8 u0 + 8 u1 = 1 with zero mean gives
        // (-1/16, 1/16).
        let matrix: [[f64; 2]; 2] = [[9.0, -8.0], [-8.0, 9.0]];
        let f = [1.0f64, -1.0];
        let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
        let by_cramer = [
            (f[0] * matrix[1][1] - matrix[0][1] * f[1]) / det,
            (matrix[0][0] * f[1] - f[0] * matrix[1][0]) / det,
        ];
        ensure!((by_cramer[0] - 1.0 / 17.0).abs() < 1e-15, "cramer check broke");

        let grid = TorusGrid::new(2, WProduct::identity(1).unwrap()).unwrap();
        let a = DiagonalField::constant(&grid, 1.0).unwrap();
        let fv = grid.mesh_fn(f.to_vec()).unwrap();
        let u = solve_resolvent(&a, 1.0, &fv, &SolveConfig::dense())
            .map_err(|e| format!("{e:?}"))?;
        for (i, expect) in by_cramer.iter().enumerate() {
            ensure!(
                (u.values()[i] - expect).abs() <= 1e-12,
                "resolvent entry {i}: {} vs {expect}",
                u.values()[i]
            );
        }
        // the resolvent output reproduces the data through the operator
        let back = apply_elliptic(&a, 1.0, &u).map_err(|e| format!("{e:?}"))?;
        for i in 0..2 {
            ensure!((back.values()[i] - f[i]).abs() <= 1e-12, "round trip entry {i}");
        }

        let p = solve_poisson(&a, &fv, &SolveConfig::dense()).map_err(|e| format!("{e:?}"))?;
        let poisson_expect = [-1.0 / 16.0, 1.0 / 16.0];
        for (i, expect) in poisson_expect.iter().enumerate() {
            ensure!(
                (p.values()[i] - expect).abs() <= 1e-12,
                "divergence-form entry {i}: {} vs {expect}",
                p.values()[i]
            );
        }
        // at lambda = 0 the operator applied to it returns -f
        let lp = apply_elliptic(&a, 0.0, &p).map_err(|e| format!("{e:?}"))?;
        for i in 0..2 {
            ensure!((lp.values()[i] + f[i]).abs() <= 1e-12, "balance entry {i}");
        }
        Ok(())
    });
}

#[test]
fn c03_fourier_mode_error_decays_with_order_at_least_09() {
    criterion(3, "single-mode convergence order", 5.0, || {
        let amp = 1.0 / (1.0 + TAU * TAU);
        let sizes = [8usize, 16, 32, 64, 128, 256, 512];
        let mut errors = Vec::new();
        for &n in &sizes {
            let grid = TorusGrid::new(n, WProduct::identity(1).unwrap()).unwrap();
            let a = DiagonalField::constant(&grid, 1.0).unwrap();
            let f = grid.sample(|y| (TAU * y[0]).cos());
            let u = solve_resolvent(&a, 1.0, &f, &SolveConfig::iterative())
                .map_err(|e| format!("{e:?}"))?;
            let err = u
                .values()
                .iter()
                .enumerate()
                .map(|(i, v)| (v - amp * (TAU * i as f64 / n as f64).cos()).abs())
                .fold(0.0f64, f64::max);
            errors.push(err);
        }
        let logs: Vec<(f64, f64)> =
            sizes.iter().zip(&errors).map(|(n, e)| ((*n as f64).ln(), e.ln())).collect();
        let mx = logs.iter().map(|p| p.0).sum::<f64>() / logs.len() as f64;
        let my = logs.iter().map(|p| p.1).sum::<f64>() / logs.len() as f64;
        let slope = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
        let order = -slope;
        ensure!(order >= 0.9, "empirical order {order:.3} below 0.9; errors {errors:?}");
        Ok(())
    });
}

#[test]
fn c04_interpolant_derivative_identity_at_random_points() {
    criterion(4, "derivative of interpolant equals interpolated difference", 1.0, || {
        let mut rng = Rng(0xD1FF);
        let scenarios: Vec<(usize, Vec<WCoordinate>)> = vec![
            (1, vec![WCoordinate::identity()]),
            (1, vec![WCoordinate::with_atoms(vec![(0.5, 1.0), (0.2, 0.6)]).unwrap()]),
            (2, vec![
                WCoordinate::identity(),
                WCoordinate::with_atoms(vec![(0.5, 1.0)]).unwrap(),
            ]),
            (2, vec![
                WCoordinate::with_atoms(vec![(0.25, 0.8), (0.7, 1.3)]).unwrap(),
                WCoordinate::identity(),
            ]),
        ];
        for (d, axes) in scenarios {
            let n = if d == 1 { 16 } else { 8 };
            let grid = TorusGrid::new(n, WProduct::new(axes).unwrap()).unwrap();
            let u = random_function(&mut rng, &grid);
            for m in 0..d {
                let du = w_diff(&u, m).map_err(|e| format!("{e:?}"))?;
                let scale =
                    1.0 + du.values().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                for _ in 0..200 {
                    let y: Vec<f64> = (0..d).map(|_| rng.unit()).collect();
                    let lhs =
                        w_derivative_of_interpolant(&u, m, &y).map_err(|e| format!("{e:?}"))?;
                    let rhs = interpolate(&du, InterpolantKind::WPartial(m), &y)
                        .map_err(|e| format!("{e:?}"))?;
                    ensure!(
                        (lhs - rhs).abs() <= 1e-12 * scale,
                        "d={d}, axis {m}, y={y:?}: {lhs} vs {rhs}"
                    );
                }
            }
        }
        Ok(())
    });
}

#[test]
fn c05_discretization_errors_decay_for_lipschitz_data() {
    criterion(5, "cell discretizations converge for Lipschitz data", 5.0, || {
        let w = WCoordinate::with_atoms(vec![(0.5, 1.0)]).unwrap();
        let mut site_errors = Vec::new();
        let mut weighted_errors = Vec::new();
        for n in [4usize, 8, 16, 32, 64] {
            let grid =
                TorusGrid::new(n, WProduct::new(vec![w.clone()]).unwrap()).unwrap();
            let u = discretize_l2(&grid, &mut |y| (std::f64::consts::PI * y[0]).sin().abs());
            let e = l2_error_vs_function(&u, InterpolantKind::PiecewiseConstant, &mut |y| {
                (std::f64::consts::PI * y[0]).sin().abs()
            })
            .map_err(|e| format!("{e:?}"))?;
            site_errors.push(e);

            let g = discretize_weighted(&grid, 0, &mut |y| (TAU * y[0]).cos())
                .map_err(|e| format!("{e:?}"))?;
            let e = l2_error_vs_function(&g, InterpolantKind::PiecewiseConstant, &mut |y| {
                (TAU * y[0]).cos()
            })
            .map_err(|e| format!("{e:?}"))?;
            weighted_errors.push(e);
        }
        for (name, errs) in [("site", &site_errors), ("weighted", &weighted_errors)] {
            for pair in errs.windows(2) {
                ensure!(pair[1] < pair[0], "{name} errors not monotone: {errs:?}");
            }
            let gain = errs[0] / errs.last().unwrap();
            ensure!(gain >= 4.0, "{name} errors only improved {gain:.2}x: {errs:?}");
        }
        Ok(())
    });
}

#[test]
fn c06_periodic_pattern_reaches_the_harmonic_mean_limit() {
    criterion(6, "lattice-scale pattern homogenizes to the harmonic mean", 30.0, || {
        let spec = CoefficientSpec::periodic(vec![vec![1.0, 2.0]]).map_err(|e| e.to_string())?;
        let w = WProduct::identity(1).unwrap();
        let data = ContinuousDual::site_only(ContinuousFn::new(|y| (TAU * y[0]).cos()));
        let amp = 1.0 / (1.0 + TAU * TAU * 4.0 / 3.0);
        let reference =
            StudyReference::Analytic(ContinuousFn::new(move |y| amp * (TAU * y[0]).cos()));
        let out = run_h_convergence_study(
            &spec,
            &w,
            &data,
            1.0,
            &[64, 128, 256, 512],
            &reference,
            &SolveConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let last = out.records.last().unwrap();
        ensure!(
            last.l2_error <= 2e-2,
            "gap to the averaged solution {} above 2e-2",
            last.l2_error
        );
        let mass_rel = (last.l2_mass - out.reference_l2_mass).abs() / out.reference_l2_mass;
        ensure!(mass_rel <= 0.05, "site-energy term off by {mass_rel:.4}");
        let energy_rel = (last.w_energy - out.reference_w_energy).abs() / out.reference_w_energy;
        ensure!(energy_rel <= 0.05, "gradient-energy term off by {energy_rel:.4}");
        let norms: Vec<f64> = out.records.iter().map(|r| r.sobolev_norm).collect();
        let spread = norms.iter().cloned().fold(0.0f64, f64::max)
            / norms.iter().cloned().fold(f64::INFINITY, f64::min);
        ensure!(spread <= 3.0, "graded-norm spread {spread:.2} above 3: {norms:?}");
        Ok(())
    });
}

#[test]
fn c07_random_medium_fit_recovers_the_closed_form_constant() {
    criterion(7, "random-medium effective constant off the membrane", 120.0, || {
        let target = 1.5 / 4.0f64.ln();
        let w = WProduct::new(vec![WCoordinate::with_atoms(vec![(0.5, 1.0)]).unwrap()])
            .unwrap();
        let grid = TorusGrid::new(512, w.clone()).unwrap();
        let data = ContinuousDual::site_only(ContinuousFn::new(|y| (TAU * y[0]).cos()));
        let rhs = data.strong_rhs(&grid).map_err(|e| e.to_string())?;
        let cfg = SolveConfig::iterative();
        let law = EnvironmentKind::IidUniform { lo: 0.5, hi: 2.0 };
        let membrane_value = law.mean();
        let groups: [[u64; 4]; 2] = [[101, 102, 103, 104], [201, 202, 203, 204]];
        let mut fits = Vec::new();
        for group in &groups {
            let mut group_fits = Vec::new();
            for &seed in group {
                let env = RandomEnvironmentSpec::new(vec![law.clone()], seed)
                    .map_err(|e| e.to_string())?;
                let field = build_field(&CoefficientSpec::RandomErgodic(env), &grid)
                    .map_err(|e| e.to_string())?;
                let observed =
                    solve_resolvent(&field, 1.0, &rhs, &cfg).map_err(|e| format!("{e:?}"))?;
                let mut build = |c: f64| {
                    HomogenizedMatrix::from_axes(vec![HomogenizedAxis::WithSingular {
                        ambient: c,
                        at: vec![(0.5, membrane_value)],
                    }])
                    .to_field(&grid)
                };
                let fit = fit_effective_coefficient(
                    &observed, &rhs, 1.0, 0.6, 1.8, &mut build, &cfg,
                )
                .map_err(|e| e.to_string())?;
                group_fits.push(fit);
            }
            fits.push(group_fits);
        }
        let stats = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
                / (xs.len() as f64 - 1.0);
            (m, (var / xs.len() as f64).sqrt())
        };
        let all: Vec<f64> = fits.iter().flatten().cloned().collect();
        let (mean, se) = stats(&all);
        ensure!(
            (mean - target).abs() <= 3.0 * se,
            "fitted {mean:.5} vs {target:.5}, allowance {:.5}; fits {all:?}",
            3.0 * se
        );
        let (m1, se1) = stats(&fits[0]);
        let (m2, se2) = stats(&fits[1]);
        let combined = (se1 * se1 + se2 * se2).sqrt();
        ensure!(
            (m1 - m2).abs() <= 3.0 * combined,
            "seed groups disagree: {m1:.5} vs {m2:.5}, allowance {:.5}",
            3.0 * combined
        );
        Ok(())
    });
}

#[test]
fn c08_particle_density_follows_the_heat_flow() {
    criterion(8, "particle system tracks the linear-case density", 120.0, || {
        let grid = TorusGrid::new(64, WProduct::identity(1).unwrap()).unwrap();
        let a = DiagonalField::constant(&grid, 1.0).unwrap();
        let model = RateModel::new(a.clone(), RateKind::Quadratic { b: 0.0 })
            .map_err(|e| format!("{e:?}"))?;
        let rho0 =
            DensityProfile::sample(&grid, |y| 0.5 + 0.25 * (TAU * y[0]).cos()).unwrap();
        let dict = vec![
            grid.sample(|_| 1.0),
            grid.sample(|y| (TAU * y[0]).cos()),
            grid.sample(|y| (TAU * y[0]).sin()),
        ];
        let t = 0.05;
        let report = wtorus_cli::parallel_hydro_report(
            &model,
            &a,
            &rho0,
            &[t],
            200,
            &dict,
            8642,
            TimeStepping::Explicit,
        )
        .map_err(|e| e.to_string())?;
        for row in &report.rows {
            let allowance = (3.0 * row.mc_stderr).max(0.02);
            ensure!(
                row.gap.abs() <= allowance,
                "observable {}: gap {:.5} above {allowance:.5}",
                row.h_index,
                row.gap
            );
        }
        // the macroscopic solver itself against the closed-form density
        let decay = (-TAU * TAU * t).exp();
        let worst = (0..64)
            .map(|i| {
                let x = i as f64 / 64.0;
                (report.pde_profiles[0][i] - (0.5 + 0.25 * decay * (TAU * x).cos())).abs()
            })
            .fold(0.0f64, f64::max);
        ensure!(worst <= 1e-3, "density solve off the closed form by {worst:e}");
        Ok(())
    });
}

#[test]
fn c09_membrane_jump_appears_in_particles_and_density_alike() {
    criterion(9, "both descriptions carry the membrane jump", 120.0, || {
        // an atom at 0.5 makes the bond across it nearly insulating; data
        // with odd phase pushes flux through that point, so a jump grows
        // and survives in both the particle profile and the density
        let n = 64usize;
        let w = WProduct::new(vec![WCoordinate::with_atoms(vec![(0.5, 1.0)]).unwrap()])
            .unwrap();
        let grid = TorusGrid::new(n, w).unwrap();
        let a = DiagonalField::constant(&grid, 1.0).unwrap();
        let model = RateModel::new(a.clone(), RateKind::Quadratic { b: 0.0 })
            .map_err(|e| format!("{e:?}"))?;
        let rho0 =
            DensityProfile::sample(&grid, |y| 0.5 + 0.25 * (TAU * y[0]).sin()).unwrap();
        let dict = vec![grid.sample(|_| 1.0)];
        let report = wtorus_cli::parallel_hydro_report(
            &model,
            &a,
            &rho0,
            &[0.05],
            200,
            &dict,
            97531,
            TimeStepping::Explicit,
        )
        .map_err(|e| e.to_string())?;
        // the membrane sits between sites n/2 - 1 and n/2
        let lo = n / 2 - 1;
        let hi = n / 2;
        let pde_jump = report.pde_profiles[0][hi] - report.pde_profiles[0][lo];
        ensure!(pde_jump.abs() >= 0.1, "density jump {pde_jump:.4} too small to call");
        let mc_jump = report.mc_profiles[0][hi] - report.mc_profiles[0][lo];
        let jump_se = (report.mc_profile_stderr[0][lo].powi(2)
            + report.mc_profile_stderr[0][hi].powi(2))
        .sqrt();
        ensure!(
            mc_jump.abs() >= 0.1 && mc_jump * pde_jump > 0.0,
            "particle jump {mc_jump:.4} does not match the density jump {pde_jump:.4}"
        );
        ensure!(
            (mc_jump - pde_jump).abs() <= 3.0 * jump_se,
            "jumps disagree: particle {mc_jump:.4} vs density {pde_jump:.4}, allowance {:.4}",
            3.0 * jump_se
        );
        // the four cells around the membrane agree within replica noise
        for site in [n / 2 - 2, n / 2 - 1, n / 2, n / 2 + 1] {
            let gap = (report.mc_profiles[0][site] - report.pde_profiles[0][site]).abs();
            let allowance = 3.0 * report.mc_profile_stderr[0][site];
            ensure!(
                gap <= allowance,
                "cell {site}: gap {gap:.4} above {allowance:.4}"
            );
        }
        Ok(())
    });
}

#[test]
fn c10_product_measure_is_stationary() {
    criterion(10, "product measure stays invariant", 60.0, || {
        let n = 32usize;
        let grid = TorusGrid::new(n, WProduct::identity(1).unwrap()).unwrap();
        let a = DiagonalField::constant(&grid, 1.0).unwrap();
        let model = RateModel::new(a, RateKind::Quadratic { b: 0.0 })
            .map_err(|e| format!("{e:?}"))?;
        let rho0 = DensityProfile::constant(&grid, 0.5).unwrap();
        let replicas = 400usize;
        let seed = 31337u64;
        let mut means = Vec::with_capacity(replicas);
        let mut corrs = Vec::with_capacity(replicas);
        for r in 0..replicas {
            let eta0 = sample_initial(&rho0, seed, 2 * r as u64);
            let run = simulate(&model, &eta0, &[0.1], seed, 2 * r as u64 + 1)
                .map_err(|e| format!("{e:?}"))?;
            let eta = &run.snapshots[0];
            let mean = eta.iter().map(|&b| b as f64).sum::<f64>() / n as f64;
            let corr = (0..n)
                .map(|x| (eta[x] * eta[(x + 1) % n]) as f64)
                .sum::<f64>()
                / n as f64;
            means.push(mean);
            corrs.push(corr);
        }
        let stats = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
                / (xs.len() as f64 - 1.0);
            (m, (var / xs.len() as f64).sqrt())
        };
        let (mean, mean_se) = stats(&means);
        ensure!(
            (mean - 0.5).abs() <= 3.0 * mean_se,
            "occupation mean {mean:.5} vs 0.5, allowance {:.5}",
            3.0 * mean_se
        );
        let (corr, corr_se) = stats(&corrs);
        ensure!(
            (corr - 0.25).abs() <= 3.0 * corr_se,
            "neighbor correlation {corr:.5} vs 0.25, allowance {:.5}",
            3.0 * corr_se
        );
        Ok(())
    });
}

#[test]
fn c11_structural_invariants_hold_on_random_inputs() {
    criterion(11, "structural invariants on randomized inputs", 30.0, || {
        let mut rng = Rng(0x57A7E);
        // adjointness, symmetry, nonnegativity of the weighted forms
        for case in 0..5 {
            let d = 1 + case % 2;
            let n = 4 + rng.below(5);
            let axes: Vec<WCoordinate> =
                (0..d).map(|k| random_weight(&mut rng, case + 2 * k)).collect();
            let grid = TorusGrid::new(n, WProduct::new(axes).unwrap())
                .map_err(|e| format!("{e:?}"))?;
            let a = DiagonalField::sample(&grid, |_, _| rng.range(0.25, 4.0))
                .map_err(|e| format!("{e:?}"))?;
            let u = random_function(&mut rng, &grid);
            let v = random_function(&mut rng, &grid);
            let div = divergence_form_apply(&a, &u).map_err(|e| format!("{e:?}"))?;
            let mut pairing = inner_l2(&div, &v).map_err(|e| format!("{e:?}"))?;
            for k in 0..d {
                let du = w_diff(&u, k).map_err(|e| format!("{e:?}"))?;
                let dv = w_diff(&v, k).map_err(|e| format!("{e:?}"))?;
                let weighted = grid
                    .mesh_fn(
                        du.values()
                            .iter()
                            .zip(a.axis_values(k))
                            .map(|(x, c)| x * c)
                            .collect(),
                    )
                    .unwrap();
                pairing += inner_wk(&weighted, &dv, k).map_err(|e| format!("{e:?}"))?;
            }
            ensure!(pairing.abs() <= 1e-10, "case {case}: adjointness defect {pairing:e}");

            let lambda = rng.range(0.2, 2.0);
            let buv = bilinear_form(&a, lambda, &u, &v).map_err(|e| format!("{e:?}"))?;
            let bvu = bilinear_form(&a, lambda, &v, &u).map_err(|e| format!("{e:?}"))?;
            ensure!((buv - bvu).abs() <= 1e-10, "case {case}: asymmetry {:e}", buv - bvu);
            let buu = bilinear_form(&a, lambda, &u, &u).map_err(|e| format!("{e:?}"))?;
            let uu = inner_l2(&u, &u).map_err(|e| format!("{e:?}"))?;
            ensure!(
                buu >= lambda * uu - 1e-10,
                "case {case}: form below its floor: {buu} vs {}",
                lambda * uu
            );
        }

        // long particle run: event tree stays consistent, particles conserved
        {
            let grid = TorusGrid::new(
                32,
                WProduct::new(vec![WCoordinate::with_atoms(vec![(0.5, 1.0)]).unwrap()])
                    .unwrap(),
            )
            .unwrap();
            let a = DiagonalField::constant(&grid, 1.0).unwrap();
            let model = RateModel::new(a, RateKind::Quadratic { b: 0.7 })
                .map_err(|e| format!("{e:?}"))?;
            let rho0 = DensityProfile::constant(&grid, 0.5).unwrap();
            let eta0 = sample_initial(&rho0, 4242, 0);
            let particles = eta0.particle_count();
            let run = simulate(&model, &eta0, &[0.5, 1.0, 2.0], 4242, 1)
                .map_err(|e| format!("{e:?}"))?;
            ensure!(
                run.desync_checks >= 1,
                "run too short to exercise the event-tree audit ({} events)",
                run.events
            );
            for (i, snap) in run.snapshots.iter().enumerate() {
                let count: usize = snap.iter().map(|&b| b as usize).sum();
                ensure!(count == particles, "snapshot {i}: {count} vs {particles}");
            }
        }

        // density solver conserves mass
        {
            let grid = TorusGrid::new(
                32,
                WProduct::new(vec![WCoordinate::with_atoms(vec![(0.5, 1.0)]).unwrap()])
                    .unwrap(),
            )
            .unwrap();
            let a = DiagonalField::constant(&grid, 1.0).unwrap();
            let rho0 =
                DensityProfile::sample(&grid, |y| 0.5 + 0.3 * (TAU * y[0]).sin()).unwrap();
            let states = solve_hydrodynamic(
                &a,
                &rho0,
                &RateKind::Quadratic { b: 0.5 },
                &[0.02, 0.05],
                TimeStepping::Explicit,
            )
            .map_err(|e| format!("{e:?}"))?;
            for (i, state) in states.iter().enumerate() {
                let drift = (state.mean() - rho0.mean()).abs();
                ensure!(drift <= 1e-10, "state {i}: mass drift {drift:e}");
            }
        }

        // spectral-gap stability: the same data keeps a comparable solution
        // norm across refinements
        {
            let w = WProduct::new(vec![WCoordinate::with_atoms(vec![(0.5, 1.0)]).unwrap()])
                .unwrap();
            let mut ratios = Vec::new();
            for n in [16usize, 64, 256] {
                let grid = TorusGrid::new(n, w.clone()).unwrap();
                let a = DiagonalField::constant(&grid, 1.0).unwrap();
                let f = grid.sample(|y| (TAU * y[0]).cos());
                let u = solve_poisson(&a, &f, &SolveConfig::default())
                    .map_err(|e| format!("{e:?}"))?;
                ratios.push(norm_l2(&u) / norm_l2(&f));
            }
            let spread = ratios.iter().cloned().fold(0.0f64, f64::max)
                / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            ensure!(spread <= 1.2, "solution-norm ratios drift: {ratios:?}");
        }

        // interpolants stay inside the data range
        {
            let grid = TorusGrid::new(
                8,
                WProduct::new(vec![WCoordinate::with_atoms(vec![(0.3, 0.9)]).unwrap()])
                    .unwrap(),
            )
            .unwrap();
            let u = random_function(&mut rng, &grid);
            let lo = u.values().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = u.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for kind in [
                InterpolantKind::PiecewiseConstant,
                InterpolantKind::WFull,
                InterpolantKind::WPartial(0),
            ] {
                for _ in 0..50 {
                    let y = [rng.unit()];
                    let value = interpolate(&u, kind, &y).map_err(|e| format!("{e:?}"))?;
                    ensure!(
                        (lo - 1e-12..=hi + 1e-12).contains(&value),
                        "interpolant left the data range at {y:?}: {value}"
                    );
                }
            }
            // and the smoothed step construction reproduces its targets at
            // the grid points
            let t = approx_test_function(
                &mut |x| (TAU * x).sin(),
                grid.w().axis(0),
                8,
            );
            for i in 0..8 {
                let x = i as f64 / 8.0;
                let gap = (t.eval(x) - (TAU * x).sin()).abs();
                ensure!(gap <= 1e-10, "grid reproduction off by {gap:e} at {x}");
            }
        }

        // identical configs and seeds give identical artifact bytes
        {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let config = serde_json::json!({
                "n": 8,
                "a": {"type": "constant", "value": 1.0},
                "rate": {"kind": "quadratic", "b": 0.0},
                "rho0": [
                    {"type": "constant", "value": 0.5},
                    {"type": "fourier", "mode": 1, "phase": "cos", "amplitude": 0.25}
                ],
                "t_list": [0.01],
                "replicas": 4,
                "seed": 5150,
                "profiles": true
            });
            for sub in ["a", "b"] {
                wtorus_cli::execute(
                    "hydro",
                    config.clone(),
                    Some(2),
                    &dir.path().join(sub),
                )
                .map_err(|e| e.to_string())?;
            }
            for name in ["pairings.csv", "profiles.csv"] {
                let a = std::fs::read(dir.path().join("a").join(name))
                    .map_err(|e| e.to_string())?;
                let b = std::fs::read(dir.path().join("b").join(name))
                    .map_err(|e| e.to_string())?;
                ensure!(a == b, "{name} differs between identical runs");
            }
        }
        Ok(())
    });
}
