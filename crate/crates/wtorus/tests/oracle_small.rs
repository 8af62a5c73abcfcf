//! Cross-checks the elliptic solvers against an operator assembled from
//! scratch in this file: cell weights computed directly from the weight
//! description, stencil coefficients written out from the difference
//! formulas, and small systems solved by Cramer's rule or checked through
//! residuals. Nothing here goes through the library's own assembly paths.

use rand_core::SeedableRng;
use rand_core::RngCore;

use wtorus::elliptic::{
    apply_elliptic, solve_poisson, solve_resolvent, DiagonalField, SolveConfig,
};
use wtorus::measure::{WCoordinate, WProduct};
use wtorus::mesh::TorusGrid;

fn uniform(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Independent weight description: slope pieces `(start, slope)` covering
/// `[0, 1)` plus point masses.
#[derive(Clone)]
struct RawW {
    pieces: Vec<(f64, f64)>,
    atoms: Vec<(f64, f64)>,
}

impl RawW {
    /// Lebesgue part of the increment over `(a, b]`, `0 <= a <= b <= 1`.
    fn slope_increment(&self, a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        for (i, &(start, slope)) in self.pieces.iter().enumerate() {
            let end = self.pieces.get(i + 1).map_or(1.0, |p| p.0);
            let lo = start.max(a);
            let hi = end.min(b);
            if hi > lo {
                acc += slope * (hi - lo);
            }
        }
        acc
    }

    /// Weight of the cell `(i/n, (i+1)/n]`; an atom at 0 belongs to the
    /// last cell (it is the jump at the seam crossed going up from
    /// `(n-1)/n` to 1).
    fn cell_weight(&self, i: usize, n: usize) -> f64 {
        let a = i as f64 / n as f64;
        let b = (i + 1) as f64 / n as f64;
        let mut acc = self.slope_increment(a, b);
        for &(p, m) in &self.atoms {
            let effective = if p == 0.0 { 1.0 } else { p };
            if effective > a && effective <= b {
                acc += m;
            }
        }
        acc
    }

    fn to_coordinate(&self) -> WCoordinate {
        WCoordinate::new(self.pieces.clone(), self.atoms.clone()).unwrap()
    }
}

fn identity_raw() -> RawW {
    RawW { pieces: vec![(0.0, 1.0)], atoms: vec![] }
}

/// Row-major dense matrix of `lambda - div(A grad_W)` on a product grid,
/// written from the stencil: site indices use stride 1 on axis 0.
fn assemble_oracle(ws: &[RawW], a_axes: &[Vec<f64>], n: usize, lambda: f64) -> Vec<f64> {
    let d = ws.len();
    let sites = n.pow(d as u32);
    let coords_of = |mut idx: usize| -> Vec<usize> {
        let mut c = vec![0usize; d];
        for ck in c.iter_mut() {
            *ck = idx % n;
            idx /= n;
        }
        c
    };
    let index_of = |c: &[usize]| -> usize {
        let mut idx = 0;
        for k in (0..d).rev() {
            idx = idx * n + c[k];
        }
        idx
    };
    let cw: Vec<Vec<f64>> =
        ws.iter().map(|w| (0..n).map(|i| w.cell_weight(i, n)).collect()).collect();
    let nf = n as f64;
    let mut t = vec![0.0f64; sites * sites];
    for x in 0..sites {
        let c = coords_of(x);
        t[x * sites + x] += lambda;
        for k in 0..d {
            let mut up = c.clone();
            up[k] = (c[k] + 1) % n;
            let mut dn = c.clone();
            dn[k] = (c[k] + n - 1) % n;
            let xu = index_of(&up);
            let xd = index_of(&dn);
            let here = nf * a_axes[k][x] / cw[k][c[k]];
            let below = nf * a_axes[k][xd] / cw[k][dn[k]];
            // -div: -(flux in from above - flux out below)
            t[x * sites + x] += here + below;
            t[x * sites + xu] -= here;
            t[x * sites + xd] -= below;
        }
    }
    t
}

fn matvec(t: &[f64], u: &[f64]) -> Vec<f64> {
    let n = u.len();
    (0..n).map(|r| (0..n).map(|c| t[r * n + c] * u[c]).sum()).collect()
}

fn build_grid(ws: &[RawW], n: usize) -> TorusGrid {
    let axes: Vec<WCoordinate> = ws.iter().map(|w| w.to_coordinate()).collect();
    TorusGrid::new(n, WProduct::new(axes).unwrap()).unwrap()
}

#[test]
fn library_layout_matches_the_oracle_layout() {
    let g = build_grid(&[identity_raw(), identity_raw()], 4);
    // axis 0 has stride 1
    assert_eq!(g.index_of(&[1, 0]), 1);
    assert_eq!(g.index_of(&[0, 1]), 4);
    assert_eq!(g.index_of(&[3, 2]), 11);
}

#[test]
fn two_site_constants_by_cramer() {
    // W = x, N = 2, A = 1, lambda = 1: stencil matrix [[9, -8], [-8, 9]]
    let raw = [identity_raw()];
    let t = assemble_oracle(&raw, &[vec![1.0, 1.0]], 2, 1.0);
    assert_eq!(t, vec![9.0, -8.0, -8.0, 9.0]);
    let det = t[0] * t[3] - t[1] * t[2];
    let f = [1.0f64, -1.0];
    let by_cramer = [
        (f[0] * t[3] - t[1] * f[1]) / det,
        (t[0] * f[1] - f[0] * t[2]) / det,
    ];
    assert!((by_cramer[0] - 1.0 / 17.0).abs() < 1e-15);
    assert!((by_cramer[1] + 1.0 / 17.0).abs() < 1e-15);

    let g = build_grid(&raw, 2);
    let a = DiagonalField::constant(&g, 1.0).unwrap();
    let fv = g.mesh_fn(f.to_vec()).unwrap();
    let u = solve_resolvent(&a, 1.0, &fv, &SolveConfig::default()).unwrap();
    assert!((u.values()[0] - by_cramer[0]).abs() < 1e-12);
    assert!((u.values()[1] - by_cramer[1]).abs() < 1e-12);

    // the zero-lambda problem pinned to mean zero: div(A grad_W u) = f
    let p = solve_poisson(&a, &fv, &SolveConfig::default()).unwrap();
    assert!((p.values()[0] + 1.0 / 16.0).abs() < 1e-12);
    assert!((p.values()[1] - 1.0 / 16.0).abs() < 1e-12);
    // residual against the oracle's zero-lambda matrix, sign included
    let t0 = assemble_oracle(&raw, &[vec![1.0, 1.0]], 2, 0.0);
    let minus_lu = matvec(&t0, p.values());
    assert!((minus_lu[0] + f[0]).abs() < 1e-12);
    assert!((minus_lu[1] + f[1]).abs() < 1e-12);
}

fn random_raw_w(rng: &mut rand_chacha::ChaCha8Rng, atoms: usize) -> RawW {
    let mut pieces = vec![(0.0, 0.3 + 3.0 * uniform(rng))];
    if uniform(rng) < 0.5 {
        let cut = 0.2 + 0.6 * uniform(rng);
        pieces.push((cut, 0.3 + 3.0 * uniform(rng)));
    }
    let mut at = Vec::new();
    for i in 0..atoms {
        // spread positions out so they never collide
        let p = (i as f64 + uniform(rng)) / atoms as f64;
        at.push((p, 0.2 + 1.5 * uniform(rng)));
    }
    RawW { pieces, atoms: at }
}

#[test]
fn random_small_problems_solve_the_assembled_system() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for case in 0..30 {
        let d = if case % 3 == 0 { 2 } else { 1 };
        let n = [2, 3, 4, 5, 8][case % 5];
        let atoms = case % 3;
        let ws: Vec<RawW> = (0..d).map(|_| random_raw_w(&mut rng, atoms)).collect();
        let sites = n_pow(n, d);
        let a_axes: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..sites).map(|_| 0.25 + 3.75 * uniform(&mut rng)).collect())
            .collect();
        let lambda = 0.1 + 2.0 * uniform(&mut rng);
        let f: Vec<f64> = (0..sites).map(|_| 2.0 * uniform(&mut rng) - 1.0).collect();

        let g = build_grid(&ws, n);
        let a = DiagonalField::new(&g, a_axes.clone()).unwrap();
        let fv = g.mesh_fn(f.clone()).unwrap();

        let t = assemble_oracle(&ws, &a_axes, n, lambda);
        // the assembled matrix is symmetric
        for r in 0..sites {
            for c in 0..r {
                assert!(
                    (t[r * sites + c] - t[c * sites + r]).abs() < 1e-9,
                    "asymmetric oracle entry at ({r},{c})"
                );
            }
        }

        // dense and iterative agree with each other and satisfy the
        // oracle's equation
        let ud = solve_resolvent(&a, lambda, &fv, &SolveConfig::dense()).unwrap();
        let ui = solve_resolvent(&a, lambda, &fv, &SolveConfig::iterative()).unwrap();
        let f_scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..sites {
            assert!((ud.values()[i] - ui.values()[i]).abs() < 1e-9);
        }
        let residual = matvec(&t, ud.values());
        for i in 0..sites {
            assert!(
                (residual[i] - f[i]).abs() < 1e-8 * f_scale.max(1.0),
                "case {case}: residual {} at site {i}",
                residual[i] - f[i]
            );
        }
        // and apply_elliptic agrees with the oracle matrix on the solution
        let applied = apply_elliptic(&a, lambda, &ud).unwrap();
        for i in 0..sites {
            assert!((applied.values()[i] - residual[i]).abs() < 1e-9);
        }
        checked += 1;
    }
    assert_eq!(checked, 30);
}

fn n_pow(n: usize, d: usize) -> usize {
    n.pow(d as u32)
}

#[test]
fn poisson_solutions_satisfy_the_zero_lambda_oracle() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    for case in 0..10 {
        let n = 4 + 2 * (case % 3);
        let ws = [random_raw_w(&mut rng, case % 2)];
        let a_vals: Vec<f64> = (0..n).map(|_| 0.5 + 2.0 * uniform(&mut rng)).collect();
        let mut f: Vec<f64> = (0..n).map(|_| 2.0 * uniform(&mut rng) - 1.0).collect();
        let mean = f.iter().sum::<f64>() / n as f64;
        for v in f.iter_mut() {
            *v -= mean;
        }
        let g = build_grid(&ws, n);
        let a = DiagonalField::new(&g, vec![a_vals.clone()]).unwrap();
        let fv = g.mesh_fn(f.clone()).unwrap();
        let u = solve_poisson(&a, &fv, &SolveConfig::default()).unwrap();
        assert!(u.mean().abs() < 1e-10);
        let t0 = assemble_oracle(&ws, &[a_vals], n, 0.0);
        let minus_lu = matvec(&t0, u.values());
        for i in 0..n {
            assert!(
                (minus_lu[i] + f[i]).abs() < 1e-8,
                "case {case}: Poisson residual {} at {i}",
                minus_lu[i] + f[i]
            );
        }
    }
}
