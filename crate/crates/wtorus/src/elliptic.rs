//! Elliptic problems in divergence form on the weighted torus.
//!
//! The operator is `u -> lambda*u - div(A grad_W u)` with a diagonal
//! coefficient field `A`. For `lambda > 0` it is symmetric positive definite
//! in the site inner product; at `lambda = 0` the kernel is the constants,
//! and the Poisson problem `div(A grad_W u) = f` is solvable exactly when `f`
//! has zero mean, with the solution pinned by mean-zero normalization.
//!
//! Solvers are matrix-free conjugate gradients by default, with a dense LU
//! fallback on small grids ([`SolveConfig`] picks). Both routes go through
//! the same stencil kernel, so they agree to solver tolerance; the dense
//! route exists mostly so the iterative one can be checked against it.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::linalg::DenseLu;
use crate::mesh::{self, MeshError, MeshFunction, TorusGrid};

#[derive(Debug, Clone, PartialEq)]
pub enum EllipticError {
    Mesh(MeshError),
    /// Coefficient entry non-finite or not strictly positive, or axis arrays
    /// of the wrong shape.
    BadCoefficient,
    NegativeLambda(f64),
    NonPositiveLambda(f64),
    /// Right-hand side of a Poisson problem has nonzero mean; no solution
    /// exists in that case.
    Compatibility { mean: f64 },
    NoConvergence { iterations: usize, relative_residual: f64 },
    DenseTooLarge { sites: usize, cutoff: usize },
}

impl fmt::Display for EllipticError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EllipticError::Mesh(e) => write!(f, "{e}"),
            EllipticError::BadCoefficient => {
                write!(f, "coefficient field must be finite, positive, one value per site and axis")
            }
            EllipticError::NegativeLambda(l) => write!(f, "lambda must be nonnegative, got {l}"),
            EllipticError::NonPositiveLambda(l) => {
                write!(f, "lambda must be strictly positive, got {l}")
            }
            EllipticError::Compatibility { mean } => {
                write!(f, "right-hand side has nonzero mean {mean:e}; no solution exists")
            }
            EllipticError::NoConvergence { iterations, relative_residual } => write!(
                f,
                "solver stalled after {iterations} iterations at relative residual {relative_residual:e}"
            ),
            EllipticError::DenseTooLarge { sites, cutoff } => {
                write!(f, "dense solve of {sites} sites exceeds cutoff {cutoff}")
            }
        }
    }
}

impl core::error::Error for EllipticError {}

impl From<MeshError> for EllipticError {
    fn from(e: MeshError) -> Self {
        EllipticError::Mesh(e)
    }
}

/// Diagonal coefficient field: one value per site and axis, the value at
/// `(x, k)` weighting the bond from `x` to `x + e_k`.
///
/// Entries must be finite and strictly positive, so an ellipticity bound
/// `theta` with `1/theta <= a <= theta` always exists; [`DiagonalField::theta`]
/// reports the smallest one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalField {
    grid: TorusGrid,
    axes: Vec<Vec<f64>>,
}

impl DiagonalField {
    pub fn new(grid: &TorusGrid, axes: Vec<Vec<f64>>) -> Result<Self, EllipticError> {
        if axes.len() != grid.d() {
            return Err(EllipticError::BadCoefficient);
        }
        for ax in &axes {
            if ax.len() != grid.site_count() {
                return Err(EllipticError::BadCoefficient);
            }
            if !ax.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(EllipticError::BadCoefficient);
            }
        }
        Ok(DiagonalField { grid: grid.clone(), axes })
    }

    pub fn constant(grid: &TorusGrid, c: f64) -> Result<Self, EllipticError> {
        let axes = vec![vec![c; grid.site_count()]; grid.d()];
        Self::new(grid, axes)
    }

    /// Samples `f(axis, position)` at every site for every axis.
    pub fn sample(grid: &TorusGrid, mut f: impl FnMut(usize, &[f64]) -> f64) -> Result<Self, EllipticError> {
        let mut axes = Vec::with_capacity(grid.d());
        for k in 0..grid.d() {
            let ax = grid.sample(|y| f(k, y));
            axes.push(ax.into_values());
        }
        Self::new(grid, axes)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn axis_values(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    pub(crate) fn raw(&self) -> &[Vec<f64>] {
        &self.axes
    }

    /// Smallest `theta >= 1` with `1/theta <= a <= theta` over all entries.
    pub fn theta(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for ax in &self.axes {
            for &v in ax {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let t = hi.max(1.0 / lo);
        t.max(1.0)
    }
}

/// How the linear systems get solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    /// Dense LU when the site count is at most `dense_cutoff`, else CG.
    Auto,
    /// Always matrix-free conjugate gradients.
    Iterative,
    /// Always dense LU; errors above `dense_cutoff` rather than attempting
    /// an O(sites³) factorization by surprise.
    Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveConfig {
    pub mode: SolveMode,
    /// CG stops when the residual drops below `rel_tol` times the data norm.
    pub rel_tol: f64,
    /// CG iteration cap, as a multiple of the site count.
    pub max_iter_factor: usize,
    pub dense_cutoff: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { mode: SolveMode::Auto, rel_tol: 1e-10, max_iter_factor: 50, dense_cutoff: 4096 }
    }
}

impl SolveConfig {
    pub fn iterative() -> Self {
        SolveConfig { mode: SolveMode::Iterative, ..Self::default() }
    }

    pub fn dense() -> Self {
        SolveConfig { mode: SolveMode::Dense, ..Self::default() }
    }
}

fn check_field(a: &DiagonalField, u: &MeshFunction) -> Result<(), EllipticError> {
    if a.grid != *u.grid() {
        return Err(EllipticError::Mesh(MeshError::GridMismatch));
    }
    Ok(())
}

/// `lambda*u - div(A grad_W u)` pointwise.
pub fn apply_elliptic(a: &DiagonalField, lambda: f64, u: &MeshFunction) -> Result<MeshFunction, EllipticError> {
    if lambda < 0.0 {
        return Err(EllipticError::NegativeLambda(lambda));
    }
    check_field(a, u)?;
    let mut out = u.grid().zeros();
    apply_raw(&a.grid, &a.axes, lambda, u.values(), out.values_mut());
    Ok(out)
}

/// `lambda*u - Lu` into `out`, raw slices.
fn apply_raw(grid: &TorusGrid, axes: &[Vec<f64>], lambda: f64, u: &[f64], out: &mut [f64]) {
    grid.divergence_raw(axes, u, out);
    for (o, &uv) in out.iter_mut().zip(u) {
        *o = lambda * uv - *o;
    }
}

/// Energy pairing `lambda <u,v>_N + N^{1-d} sum_{k,x} a_k (w_diff u)(w_diff v) cellweight_k`.
///
/// Equals `inner_l2(apply_elliptic(a, lambda, u), v)` exactly, by summation
/// by parts; symmetric in `u, v`.
pub fn bilinear_form(a: &DiagonalField, lambda: f64, u: &MeshFunction, v: &MeshFunction) -> Result<f64, EllipticError> {
    check_field(a, u)?;
    check_field(a, v)?;
    let g = &a.grid;
    let mut acc = lambda * mesh::inner_l2(u, v)?;
    let scale = (g.n() as f64) / g.site_count() as f64;
    for k in 0..g.d() {
        let du = mesh::w_diff(u, k)?;
        let dv = mesh::w_diff(v, k)?;
        let ak = &a.axes[k];
        let mut s = 0.0;
        for x in 0..g.site_count() {
            s += ak[x] * du.values()[x] * dv.values()[x] * g.cell_weight(k, g.axis_coord(x, k));
        }
        acc += scale * s;
    }
    Ok(acc)
}

/// Solves `lambda*u - div(A grad_W u) = f` for `lambda > 0`.
pub fn solve_resolvent(a: &DiagonalField, lambda: f64, f: &MeshFunction, cfg: &SolveConfig) -> Result<MeshFunction, EllipticError> {
    if !(lambda > 0.0) {
        return Err(EllipticError::NonPositiveLambda(lambda));
    }
    check_field(a, f)?;
    let grid = &a.grid;
    let s = grid.site_count();
    if f.values().iter().all(|&v| v == 0.0) {
        return Ok(grid.zeros());
    }
    let use_dense = match cfg.mode {
        SolveMode::Auto => s <= cfg.dense_cutoff,
        SolveMode::Iterative => false,
        SolveMode::Dense => {
            if s > cfg.dense_cutoff {
                return Err(EllipticError::DenseTooLarge { sites: s, cutoff: cfg.dense_cutoff });
            }
            true
        }
    };
    let mut x = vec![0.0f64; s];
    if use_dense {
        let m = assemble(grid, &a.axes, lambda, 0.0);
        let lu = DenseLu::factor(m, s).map_err(|_| EllipticError::NoConvergence {
            iterations: 0,
            relative_residual: f64::INFINITY,
        })?;
        x.copy_from_slice(f.values());
        lu.solve(&mut x);
    } else {
        cg(grid, &a.axes, lambda, f.values(), &mut x, cfg, false)?;
    }
    Ok(grid.mesh_fn(x).expect("length matches"))
}

/// Solves `div(A grad_W u) = f` for the mean-zero `u`; `f` must itself have
/// (numerically) zero mean or no solution exists.
pub fn solve_poisson(a: &DiagonalField, f: &MeshFunction, cfg: &SolveConfig) -> Result<MeshFunction, EllipticError> {
    check_field(a, f)?;
    let grid = &a.grid;
    let s = grid.site_count();
    let mean = f.mean();
    let norm = mesh::norm_l2(f);
    if libm::fabs(mean) > 1e-12 * norm {
        return Err(EllipticError::Compatibility { mean });
    }
    if norm == 0.0 {
        return Ok(grid.zeros());
    }
    // Solve (-L) u = -f: the left side is positive semidefinite with constant
    // kernel, so CG runs on the mean-zero subspace and the dense route adds a
    // scaled rank-one all-ones shift, which leaves the mean-zero solution
    // untouched while making the matrix invertible.
    let neg_f: Vec<f64> = f.values().iter().map(|v| -v).collect();
    let use_dense = match cfg.mode {
        SolveMode::Auto => s <= cfg.dense_cutoff,
        SolveMode::Iterative => false,
        SolveMode::Dense => {
            if s > cfg.dense_cutoff {
                return Err(EllipticError::DenseTooLarge { sites: s, cutoff: cfg.dense_cutoff });
            }
            true
        }
    };
    let mut x = vec![0.0f64; s];
    if use_dense {
        let mut m = assemble(grid, &a.axes, 0.0, 0.0);
        let mut trace = 0.0;
        for i in 0..s {
            trace += m[i * s + i];
        }
        let shift = trace / (s * s) as f64;
        for e in m.iter_mut() {
            *e += shift;
        }
        let lu = DenseLu::factor(m, s).map_err(|_| EllipticError::NoConvergence {
            iterations: 0,
            relative_residual: f64::INFINITY,
        })?;
        x.copy_from_slice(&neg_f);
        lu.solve(&mut x);
    } else {
        cg(grid, &a.axes, 0.0, &neg_f, &mut x, cfg, true)?;
    }
    let u = grid.mesh_fn(x).expect("length matches");
    Ok(mesh::mean_zero_project(&u))
}

/// Dense matrix of `u -> lambda*u - Lu (+ shift * ones*onesᵀ)`, row-major,
/// built column by column through the shared stencil kernel.
fn assemble(grid: &TorusGrid, axes: &[Vec<f64>], lambda: f64, shift: f64) -> Vec<f64> {
    let s = grid.site_count();
    let mut m = vec![0.0f64; s * s];
    let mut e = vec![0.0f64; s];
    let mut col = vec![0.0f64; s];
    for j in 0..s {
        e[j] = 1.0;
        apply_raw(grid, axes, lambda, &e, &mut col);
        e[j] = 0.0;
        for i in 0..s {
            m[i * s + j] = col[i] + shift;
        }
    }
    m
}

/// Conjugate gradients on `lambda*x - Lx = b`; with `project`, both data and
/// iterates are kept mean-zero so the semidefinite case stays definite.
fn cg(
    grid: &TorusGrid,
    axes: &[Vec<f64>],
    lambda: f64,
    b: &[f64],
    x: &mut [f64],
    cfg: &SolveConfig,
    project: bool,
) -> Result<(), EllipticError> {
    let s = grid.site_count();
    let mut r = b.to_vec();
    if project {
        remove_mean(&mut r);
    }
    let b_norm = libm::sqrt(dot(&r, &r));
    if b_norm == 0.0 {
        x.fill(0.0);
        return Ok(());
    }
    let mut p = r.clone();
    let mut ap = vec![0.0f64; s];
    let mut rr = dot(&r, &r);
    let max_iter = cfg.max_iter_factor.saturating_mul(s);
    for it in 0..max_iter {
        if libm::sqrt(rr) <= cfg.rel_tol * b_norm {
            return Ok(());
        }
        apply_raw(grid, axes, lambda, &p, &mut ap);
        if project {
            remove_mean(&mut ap);
        }
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(EllipticError::NoConvergence {
                iterations: it,
                relative_residual: libm::sqrt(rr) / b_norm,
            });
        }
        let alpha = rr / pap;
        for i in 0..s {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if project && it % 64 == 63 {
            remove_mean(x);
            remove_mean(&mut r);
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..s {
            p[i] = r[i] + beta * p[i];
        }
    }
    if libm::sqrt(rr) <= cfg.rel_tol * b_norm {
        Ok(())
    } else {
        Err(EllipticError::NoConvergence {
            iterations: max_iter,
            relative_residual: libm::sqrt(rr) / b_norm,
        })
    }
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A functional on mesh functions, given by a site part `f0` and per-axis
/// gradient parts `fk`:
/// `v -> inner_l2(f0, v) + sum_k inner_wk(fk, w_diff v, k)`.
///
/// Different `(f0, fk)` tuples can act identically; [`dual_canonicalize`]
/// picks the unique representative whose gradient parts are the actual
/// weighted differences of a single potential.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFunctional {
    f0: MeshFunction,
    fk: Vec<MeshFunction>,
}

impl DualFunctional {
    pub fn new(f0: MeshFunction, fk: Vec<MeshFunction>) -> Result<Self, MeshError> {
        if fk.len() != f0.grid().d() {
            return Err(MeshError::ValueCountMismatch { expected: f0.grid().d(), got: fk.len() });
        }
        for c in &fk {
            if c.grid() != f0.grid() {
                return Err(MeshError::GridMismatch);
            }
        }
        Ok(DualFunctional { f0, fk })
    }

    /// Functional with zero gradient parts.
    pub fn from_site_part(f0: MeshFunction) -> Self {
        let fk = (0..f0.grid().d()).map(|_| f0.grid().zeros()).collect();
        DualFunctional { f0, fk }
    }

    pub fn f0(&self) -> &MeshFunction {
        &self.f0
    }

    pub fn components(&self) -> &[MeshFunction] {
        &self.fk
    }

    pub fn grid(&self) -> &TorusGrid {
        self.f0.grid()
    }
}

/// Action of the functional on `v`.
pub fn dual_apply(f: &DualFunctional, v: &MeshFunction) -> Result<f64, MeshError> {
    let mut acc = mesh::inner_l2(&f.f0, v)?;
    for k in 0..f.fk.len() {
        let dv = mesh::w_diff(v, k)?;
        acc += mesh::inner_wk(&f.fk[k], &dv, k)?;
    }
    Ok(acc)
}

/// Folds the functional into the single site function acting identically
/// under the plain site inner product: summation by parts turns each
/// `inner_wk(fk, w_diff v, k)` into `-inner_l2(backward_diff fk, v)`, so the
/// result is `f0 - sum_k backward_diff(fk, k)`. This is the strong-form
/// right-hand side matching the weak problem `B[u, v] = f(v)`.
pub fn dual_strong_rhs(f: &DualFunctional) -> Result<MeshFunction, MeshError> {
    let mut rhs = f.f0.clone();
    for k in 0..f.grid().d() {
        let div = mesh::backward_diff(&f.fk[k], k)?;
        for (r, d) in rhs.values_mut().iter_mut().zip(div.values()) {
            *r -= d;
        }
    }
    Ok(rhs)
}

/// The canonical representative acting identically to `f`: its action equals
/// the Sobolev pairing with a single potential `u`, recovered by folding the
/// gradient parts via [`dual_strong_rhs`] and solving
/// `u - div(grad_W u) = folded data` with unit coefficients.
///
/// Returns `(f0, fk) = (u, w_diff u)`. The functional norm is then
/// [`dual_norm`] of the result; `dual_apply` is unchanged up to solver
/// tolerance.
pub fn dual_canonicalize(f: &DualFunctional, cfg: &SolveConfig) -> Result<DualFunctional, EllipticError> {
    let grid = f.grid().clone();
    let rhs = dual_strong_rhs(f)?;
    let ones = DiagonalField::constant(&grid, 1.0)?;
    let u = solve_resolvent(&ones, 1.0, &rhs, cfg)?;
    let mut fk = Vec::with_capacity(grid.d());
    for k in 0..grid.d() {
        fk.push(mesh::w_diff(&u, k)?);
    }
    Ok(DualFunctional { f0: u, fk })
}

/// `sqrt(|f0|²_N + sum_k |fk|²_{W_k,N})`: on a canonical representative this
/// is the dual-space norm of the functional.
pub fn dual_norm(f: &DualFunctional) -> f64 {
    let mut acc = mesh::inner_l2(&f.f0, &f.f0).expect("same grid");
    for (k, c) in f.fk.iter().enumerate() {
        acc += mesh::inner_wk(c, c, k).expect("same grid");
    }
    libm::sqrt(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{WCoordinate, WProduct};
    use crate::rng::{stream_rng, unit_f64};

    fn grid_1d(n: usize) -> TorusGrid {
        TorusGrid::new(n, WProduct::identity(1).unwrap()).unwrap()
    }

    fn atom_grid(n: usize) -> TorusGrid {
        let w = WCoordinate::with_atoms(vec![(0.5, 1.0)]).unwrap();
        TorusGrid::new(n, WProduct::new(vec![w]).unwrap()).unwrap()
    }

    fn random_fn(grid: &TorusGrid, seed: u64) -> MeshFunction {
        let mut rng = stream_rng(seed, 0);
        let vals = (0..grid.site_count()).map(|_| unit_f64(&mut rng) - 0.5).collect();
        grid.mesh_fn(vals).unwrap()
    }

    #[test]
    fn apply_two_site_hand_value() {
        let g = grid_1d(2);
        let a = DiagonalField::constant(&g, 1.0).unwrap();
        let u = g.mesh_fn(vec![1.0 / 17.0, -1.0 / 17.0]).unwrap();
        let out = apply_elliptic(&a, 1.0, &u).unwrap();
        assert!((out.values()[0] - 1.0).abs() < 1e-12);
        assert!((out.values()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constants_are_in_the_kernel() {
        let g = atom_grid(4);
        let a = DiagonalField::constant(&g, 2.0).unwrap();
        let c = g.mesh_fn(vec![3.0; 4]).unwrap();
        let z = apply_elliptic(&a, 0.0, &c).unwrap();
        assert!(z.values().iter().all(|v| v.abs() < 1e-12));
        let five = apply_elliptic(&a, 5.0, &c).unwrap();
        assert!(five.values().iter().all(|v| (v - 15.0).abs() < 1e-12));
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let g = grid_1d(2);
        let a = DiagonalField::constant(&g, 1.0).unwrap();
        let u = g.zeros();
        assert!(matches!(apply_elliptic(&a, -1.0, &u), Err(EllipticError::NegativeLambda(_))));
        assert!(matches!(
            solve_resolvent(&a, 0.0, &u, &SolveConfig::default()),
            Err(EllipticError::NonPositiveLambda(_))
        ));
    }

    #[test]
    fn bilinear_form_pairs_with_operator() {
        let w = WCoordinate::new(vec![(0.0, 0.5), (0.4, 2.0)], vec![(0.7, 0.25)]).unwrap();
        let g = TorusGrid::new(6, WProduct::new(vec![w]).unwrap()).unwrap();
        let a = DiagonalField::sample(&g, |_, y| 1.0 + 0.5 * y[0]).unwrap();
        for seed in 0..5 {
            let u = random_fn(&g, 100 + seed);
            let v = random_fn(&g, 200 + seed);
            let lhs = bilinear_form(&a, 1.3, &u, &v).unwrap();
            let rhs = mesh::inner_l2(&apply_elliptic(&a, 1.3, &u).unwrap(), &v).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
            let sym = bilinear_form(&a, 1.3, &v, &u).unwrap();
            assert!((lhs - sym).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn bilinear_form_on_constants_is_lambda_c_squared() {
        let g = atom_grid(3);
        let a = DiagonalField::constant(&g, 4.0).unwrap();
        let c = g.mesh_fn(vec![2.0; 3]).unwrap();
        assert!((bilinear_form(&a, 1.0, &c, &c).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn resolvent_two_site_hand_value() {
        let g = grid_1d(2);
        let a = DiagonalField::constant(&g, 1.0).unwrap();
        let f = g.mesh_fn(vec![1.0, -1.0]).unwrap();
        for cfg in [SolveConfig::default(), SolveConfig::iterative()] {
            let u = solve_resolvent(&a, 1.0, &f, &cfg).unwrap();
            assert!((u.values()[0] - 1.0 / 17.0).abs() < 1e-10);
            assert!((u.values()[1] + 1.0 / 17.0).abs() < 1e-10);
        }
    }

    #[test]
    fn resolvent_of_constant_is_constant_over_lambda() {
        let g = atom_grid(5);
        let a = DiagonalField::constant(&g, 3.0).unwrap();
        let f = g.mesh_fn(vec![2.0; 5]).unwrap();
        let u = solve_resolvent(&a, 4.0, &f, &SolveConfig::default()).unwrap();
        assert!(u.values().iter().all(|v| (v - 0.5).abs() < 1e-10));
    }

    #[test]
    fn resolvent_matches_fourier_solution() {
        let g = grid_1d(512);
        let a = DiagonalField::constant(&g, 1.0).unwrap();
        let tau = 2.0 * core::f64::consts::PI;
        let f = g.sample(|y| libm::cos(tau * y[0]));
        let u = solve_resolvent(&a, 1.0, &f, &SolveConfig::iterative()).unwrap();
        let amp = 1.0 / (1.0 + tau * tau);
        let mut worst = 0.0f64;
        for x in 0..512 {
            let exact = amp * libm::cos(tau * (x as f64) / 512.0);
            worst = worst.max((u.values()[x] - exact).abs());
        }
        assert!(worst < 1e-5, "max error {worst}");
    }

    #[test]
    fn dense_and_iterative_agree_on_rough_data() {
        let w = WCoordinate::new(vec![(0.0, 1.0), (0.3, 0.25)], vec![(0.6, 0.8)]).unwrap();
        let g = TorusGrid::new(8, WProduct::new(vec![w]).unwrap()).unwrap();
        let a = DiagonalField::sample(&g, |_, y| if y[0] < 0.5 { 0.7 } else { 2.1 }).unwrap();
        let f = random_fn(&g, 7);
        let ud = solve_resolvent(&a, 0.5, &f, &SolveConfig::dense()).unwrap();
        let ui = solve_resolvent(&a, 0.5, &f, &SolveConfig::iterative()).unwrap();
        for x in 0..8 {
            assert!((ud.values()[x] - ui.values()[x]).abs() < 1e-9);
        }
        let back = apply_elliptic(&a, 0.5, &ud).unwrap();
        for x in 0..8 {
            assert!((back.values()[x] - f.values()[x]).abs() < 1e-8);
        }
    }

    #[test]
    fn resolvent_a_priori_bound() {
        let g = atom_grid(6);
        let a = DiagonalField::sample(&g, |_, y| 1.0 + y[0]).unwrap();
        let f = random_fn(&g, 42);
        for lambda in [0.1, 1.0, 10.0] {
            let u = solve_resolvent(&a, lambda, &f, &SolveConfig::default()).unwrap();
            assert!(lambda * mesh::norm_l2(&u) <= mesh::norm_l2(&f) + 1e-8);
        }
    }

    #[test]
    fn poisson_two_site_hand_value() {
        let g = grid_1d(2);
        let a = DiagonalField::constant(&g, 1.0).unwrap();
        let f = g.mesh_fn(vec![1.0, -1.0]).unwrap();
        for cfg in [SolveConfig::default(), SolveConfig::iterative()] {
            let u = solve_poisson(&a, &f, &cfg).unwrap();
            assert!((u.values()[0] + 1.0 / 16.0).abs() < 1e-10, "got {}", u.values()[0]);
            assert!((u.values()[1] - 1.0 / 16.0).abs() < 1e-10);
        }
    }

    #[test]
    fn poisson_rejects_nonzero_mean() {
        let g = grid_1d(2);
        let a = DiagonalField::constant(&g, 1.0).unwrap();
        let f = g.mesh_fn(vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            solve_poisson(&a, &f, &SolveConfig::default()),
            Err(EllipticError::Compatibility { .. })
        ));
        let z = solve_poisson(&a, &g.zeros(), &SolveConfig::default()).unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn poisson_solution_is_mean_zero_and_solves() {
        let w = WCoordinate::with_atoms(vec![(0.25, 0.4), (0.9, 0.1)]).unwrap();
        let g = TorusGrid::new(10, WProduct::new(vec![w]).unwrap()).unwrap();
        let a = DiagonalField::sample(&g, |_, y| 1.5 + libm::sin(2.0 * core::f64::consts::PI * y[0]) * 0.4).unwrap();
        let f = mesh::mean_zero_project(&random_fn(&g, 9));
        for cfg in [SolveConfig::dense(), SolveConfig::iterative()] {
            let u = solve_poisson(&a, &f, &cfg).unwrap();
            assert!(u.mean().abs() < 1e-12);
            let lu = apply_elliptic(&a, 0.0, &u).unwrap();
            for x in 0..10 {
                // Lu = -(0*u - Lu) = f
                assert!((-lu.values()[x] - f.values()[x]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dense_mode_refuses_oversized_grids() {
        let g = grid_1d(64);
        let a = DiagonalField::constant(&g, 1.0).unwrap();
        let f = random_fn(&g, 3);
        let cfg = SolveConfig { dense_cutoff: 32, ..SolveConfig::dense() };
        assert!(matches!(
            solve_resolvent(&a, 1.0, &f, &cfg),
            Err(EllipticError::DenseTooLarge { sites: 64, cutoff: 32 })
        ));
    }

    #[test]
    fn coefficient_validation() {
        let g = grid_1d(4);
        assert!(matches!(
            DiagonalField::new(&g, vec![vec![1.0, 1.0, 0.0, 1.0]]),
            Err(EllipticError::BadCoefficient)
        ));
        assert!(matches!(
            DiagonalField::new(&g, vec![vec![1.0; 3]]),
            Err(EllipticError::BadCoefficient)
        ));
        let a = DiagonalField::new(&g, vec![vec![0.5, 1.0, 2.0, 1.0]]).unwrap();
        assert!((a.theta() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dual_apply_constant_site_part_gives_scaled_mean() {
        let g = atom_grid(4);
        let f0 = g.mesh_fn(vec![3.0; 4]).unwrap();
        let f = DualFunctional::from_site_part(f0);
        let v = g.mesh_fn(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((dual_apply(&f, &v).unwrap() - 3.0 * 2.5).abs() < 1e-12);
    }

    #[test]
    fn dual_apply_gradient_part_two_site() {
        let g = grid_1d(2);
        let f = DualFunctional::new(g.zeros(), vec![g.mesh_fn(vec![1.0, 1.0]).unwrap()]).unwrap();
        let v = g.mesh_fn(vec![0.0, 1.0]).unwrap();
        // w_diff v = (2, -2), both cell weights 1/2, N^{1-d} = 1
        assert!(dual_apply(&f, &v).unwrap().abs() < 1e-12);
    }

    #[test]
    fn canonicalize_fixes_constants() {
        let g = atom_grid(3);
        let f = DualFunctional::from_site_part(g.mesh_fn(vec![2.0; 3]).unwrap());
        let c = dual_canonicalize(&f, &SolveConfig::default()).unwrap();
        assert!(c.f0().values().iter().all(|v| (v - 2.0).abs() < 1e-9));
        assert!(c.components()[0].values().iter().all(|v| v.abs() < 1e-8));
        assert!((dual_norm(&c) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn canonicalize_preserves_the_action() {
        let g = atom_grid(4);
        let f0 = random_fn(&g, 11);
        let f1 = random_fn(&g, 12);
        let f = DualFunctional::new(f0, vec![f1]).unwrap();
        let c = dual_canonicalize(&f, &SolveConfig::default()).unwrap();
        for seed in 0..20 {
            let v = random_fn(&g, 500 + seed);
            let a = dual_apply(&f, &v).unwrap();
            let b = dual_apply(&c, &v).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
        // canonical action is the Sobolev pairing with the potential
        let v = random_fn(&g, 999);
        let pairing = mesh::inner_sobolev(c.f0(), &v).unwrap();
        assert!((dual_apply(&f, &v).unwrap() - pairing).abs() < 1e-9);
    }

    #[test]
    fn canonicalize_zero_gives_zero_norm() {
        let g = grid_1d(4);
        let f = DualFunctional::from_site_part(g.zeros());
        let c = dual_canonicalize(&f, &SolveConfig::default()).unwrap();
        assert!(dual_norm(&c) == 0.0);
    }
}
