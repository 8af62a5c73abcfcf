//! Interpolation of mesh functions back onto the continuous torus, the
//! reverse discretization maps, and a step-derivative test-function builder.
//!
//! All three interpolants are cellwise: the cell with base vertex `x`
//! covers `[x/N, (x+1)/N)` per axis (points on a grid line belong to the
//! cell starting there). Within a cell the multilinear interpolant expands
//! in the normalized weight offsets `t_k = (W_k(y_k) - W_k(x_k)) / cellweight_k`,
//! so it is affine in each `W_k(y_k)` rather than in `y_k` itself: across an
//! atom of `W_k` the interpolant jumps, exactly as functions with
//! weighted-difference regularity should.
//!
//! The discretization maps are the other direction: cell averages against
//! Lebesgue measure ([`discretize_l2`]) or against the product of Lebesgue
//! and one axis weight ([`discretize_weighted`]). Atom contributions are
//! summed exactly; only the density part is quadrature.
//!
//! L2 quantities of interpolants (norms, distances, the weighted energy) are
//! integrated exactly per cell from the expansion, not sampled, so
//! convergence studies built on them are quadrature-noise-free.

use alloc::vec;
use alloc::vec::Vec;

use crate::elliptic::DualFunctional;
use crate::measure::{CellDecomposition, WCoordinate};
use crate::mesh::{MeshError, MeshFunction, TorusGrid};
use crate::quad;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpolantKind {
    /// Value of the cell's base vertex everywhere in the cell.
    PiecewiseConstant,
    /// Multilinear in the weight offsets over all axes.
    WFull,
    /// Multilinear with the named axis frozen at its base: every term
    /// carrying a `W_m` offset is dropped.
    WPartial(usize),
}

fn wrap_unit(y: f64) -> f64 {
    let r = y - libm::floor(y);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Cell base coordinates and weight offsets `t_k` of a point.
fn locate(grid: &TorusGrid, y: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let n = grid.n();
    let nf = n as f64;
    let mut coords = Vec::with_capacity(grid.d());
    let mut t = Vec::with_capacity(grid.d());
    for k in 0..grid.d() {
        let yk = wrap_unit(y[k]);
        let mut i = libm::floor(yk * nf) as usize;
        if i >= n {
            i = n - 1;
        }
        let wk = grid.w().axis(k);
        let tk = (wk.eval(yk) - wk.eval(i as f64 / nf)) / grid.cell_weight(k, i);
        coords.push(i);
        t.push(tk);
    }
    (coords, t)
}

/// Multilinear combination of the `2^d` cell corner values with parameters `t`.
fn eval_corners(u: &MeshFunction, coords: &[usize], t: &[f64]) -> f64 {
    let g = u.grid();
    let d = g.d();
    let base = g.index_of(coords);
    let mut acc = 0.0;
    for mask in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut site = base;
        for k in 0..d {
            if mask & (1 << k) != 0 {
                weight *= t[k];
                site = g.up(site, k);
            } else {
                weight *= 1.0 - t[k];
            }
        }
        if weight != 0.0 {
            acc += weight * u.values()[site];
        }
    }
    acc
}

fn check_point(grid: &TorusGrid, y: &[f64]) -> Result<(), MeshError> {
    if y.len() != grid.d() {
        return Err(MeshError::ValueCountMismatch { expected: grid.d(), got: y.len() });
    }
    Ok(())
}

/// Evaluates the chosen interpolant of `u` at the torus point `y`
/// (coordinates are wrapped periodically).
pub fn interpolate(u: &MeshFunction, kind: InterpolantKind, y: &[f64]) -> Result<f64, MeshError> {
    let g = u.grid();
    check_point(g, y)?;
    let (coords, mut t) = locate(g, y);
    match kind {
        InterpolantKind::PiecewiseConstant => Ok(u.values()[g.index_of(&coords)]),
        InterpolantKind::WFull => Ok(eval_corners(u, &coords, &t)),
        InterpolantKind::WPartial(m) => {
            if m >= g.d() {
                return Err(MeshError::AxisOutOfRange);
            }
            t[m] = 0.0;
            Ok(eval_corners(u, &coords, &t))
        }
    }
}

/// Weighted derivative of the multilinear interpolant along axis `m`,
/// evaluated as the slope of the expansion in `W_m`: the interpolant is
/// affine in `t_m`, so the derivative is the difference of the two
/// `t_m`-faces over the cell weight. It agrees identically with
/// `interpolate(w_diff(u, m), WPartial(m), y)`, which gives tests a second
/// route to the same number.
pub fn w_derivative_of_interpolant(u: &MeshFunction, m: usize, y: &[f64]) -> Result<f64, MeshError> {
    let g = u.grid();
    check_point(g, y)?;
    if m >= g.d() {
        return Err(MeshError::AxisOutOfRange);
    }
    let (coords, mut t) = locate(g, y);
    t[m] = 1.0;
    let hi = eval_corners(u, &coords, &t);
    t[m] = 0.0;
    let lo = eval_corners(u, &coords, &t);
    Ok((hi - lo) / g.cell_weight(m, coords[m]))
}

/// Cell averages against Lebesgue measure: `N^d` times the integral of `f`
/// over each cell. Atom structure plays no role here.
pub fn discretize_l2(grid: &TorusGrid, f: &mut dyn FnMut(&[f64]) -> f64) -> MeshFunction {
    let n = grid.n();
    let nf = n as f64;
    let d = grid.d();
    let scale = libm::pow(nf, d as f64);
    let vol = 1.0 / scale;
    let mut lo = vec![0.0f64; d];
    let mut hi = vec![0.0f64; d];
    let mut values = Vec::with_capacity(grid.site_count());
    for idx in 0..grid.site_count() {
        let coords = grid.coords_of(idx);
        for k in 0..d {
            lo[k] = coords[k] as f64 / nf;
            hi[k] = (coords[k] + 1) as f64 / nf;
        }
        let cell = quad::integrate_box(f, &lo, &hi, 1e-12 * vol);
        values.push(cell * scale);
    }
    grid.mesh_fn(values).expect("length matches")
}

/// Integral of `g` along axis `k` over one cell against `dW_k`, with the
/// remaining coordinates fixed in `point`: density pieces by quadrature,
/// atoms by exact summation at their positions.
fn stieltjes_line_integral(
    g: &mut dyn FnMut(&[f64]) -> f64,
    point: &mut [f64],
    k: usize,
    dec: &CellDecomposition,
    tol: f64,
) -> f64 {
    let mut acc = 0.0;
    for piece in &dec.pieces {
        if piece.slope == 0.0 {
            continue;
        }
        let mut line = |yk: f64| {
            point[k] = wrap_unit(yk);
            g(point)
        };
        acc += piece.slope * quad::integrate(&mut line, piece.y0, piece.y1, tol);
    }
    for atom in &dec.atoms {
        point[k] = wrap_unit(atom.pos);
        acc += atom.mass * g(point);
    }
    acc
}

/// Weighted cell averages along axis `k`: the integral of `g` against
/// `d(y-others ⊗ W_k)` over the cell, divided by the cell's `W_k` weight and
/// the Lebesgue volume of the other axes.
pub fn discretize_weighted(
    grid: &TorusGrid,
    k: usize,
    g: &mut dyn FnMut(&[f64]) -> f64,
) -> Result<MeshFunction, MeshError> {
    let d = grid.d();
    if k >= d {
        return Err(MeshError::AxisOutOfRange);
    }
    let n = grid.n();
    let nf = n as f64;
    let decs: Vec<CellDecomposition> =
        (0..n).map(|i| grid.w().axis(k).cell_decomposition(i, n)).collect();
    // N^{d-1} normalizes the Lebesgue directions, the cell weight the k one.
    let other_scale = libm::pow(nf, (d - 1) as f64);
    let tol = 1e-13 / nf;
    let mut point = vec![0.0f64; d];
    let mut values = Vec::with_capacity(grid.site_count());
    for idx in 0..grid.site_count() {
        let coords = grid.coords_of(idx);
        let dec = &decs[coords[k]];
        let integral = if d == 1 {
            stieltjes_line_integral(g, &mut point, k, dec, tol)
        } else {
            let mut lo = Vec::with_capacity(d - 1);
            let mut hi = Vec::with_capacity(d - 1);
            let mut others = Vec::with_capacity(d - 1);
            for a in 0..d {
                if a != k {
                    others.push(a);
                    lo.push(coords[a] as f64 / nf);
                    hi.push((coords[a] + 1) as f64 / nf);
                }
            }
            let mut outer = |sub: &[f64]| {
                for (slot, &axis) in others.iter().enumerate() {
                    point[axis] = sub[slot];
                }
                stieltjes_line_integral(g, &mut point, k, dec, tol)
            };
            quad::integrate_box(&mut outer, &lo, &hi, tol / other_scale)
        };
        values.push(other_scale * integral / dec.weight);
    }
    grid.mesh_fn(values)
}

/// Discretizes a continuous functional `(f0, f1..fd)`: plain cell averages
/// for the site part, weighted cell averages for each gradient part.
pub fn discretize_functional(
    grid: &TorusGrid,
    f0: &mut dyn FnMut(&[f64]) -> f64,
    fk: &mut [&mut dyn FnMut(&[f64]) -> f64],
) -> Result<DualFunctional, MeshError> {
    if fk.len() != grid.d() {
        return Err(MeshError::ValueCountMismatch { expected: grid.d(), got: fk.len() });
    }
    let site = discretize_l2(grid, f0);
    let mut parts = Vec::with_capacity(fk.len());
    for (k, gk) in fk.iter_mut().enumerate() {
        parts.push(discretize_weighted(grid, k, *gk)?);
    }
    DualFunctional::new(site, parts)
}

/// A step function `g` and its weight primitive `G(x) = f(0) + ∫_(0,x] g dW`,
/// built so that `G` agrees with `f` at every grid point `j/n`: `g` on cell
/// `j` is the difference quotient of `f` against the cell weight.
///
/// When `f` closes up over the period (`f(0) = f(1)`), the full-period
/// integral of `g` against `dW` telescopes to zero, making `G` periodic; for
/// non-closing `f` the construction still reproduces `f` on the grid but
/// [`TestFunction::w_integral_of_g`] reports the nonzero defect.
#[derive(Debug, Clone)]
pub struct TestFunction {
    w: WCoordinate,
    n: usize,
    f0: f64,
    g: Vec<f64>,
}

pub fn approx_test_function(f: &mut dyn FnMut(f64) -> f64, w: &WCoordinate, n: usize) -> TestFunction {
    assert!(n >= 1, "need at least one cell");
    let nf = n as f64;
    let g = (0..n)
        .map(|j| {
            let lo = j as f64 / nf;
            let hi = (j + 1) as f64 / nf;
            (f(hi) - f(lo)) / w.increment(lo, hi).expect("cells are nonempty")
        })
        .collect();
    TestFunction { w: w.clone(), n, f0: f(0.0), g }
}

impl TestFunction {
    pub fn g_values(&self) -> &[f64] {
        &self.g
    }

    /// Step value at `x`: the value on the weight cell containing `x`
    /// (cells own their right endpoint; 0 wraps to the last cell).
    pub fn g_at(&self, x: f64) -> f64 {
        let r = wrap_unit(x);
        let nf = self.n as f64;
        if r == 0.0 {
            return self.g[self.n - 1];
        }
        let mut j = libm::ceil(r * nf) as usize;
        if j == 0 {
            j = 1;
        }
        self.g[(j - 1).min(self.n - 1)]
    }

    /// `G(x) = f(0) + ∫_(0,x] g dW`, with `x` wrapped into `[0,1)`.
    pub fn eval(&self, x: f64) -> f64 {
        let r = wrap_unit(x);
        let nf = self.n as f64;
        let mut acc = self.f0;
        for j in 0..self.n {
            let lo = j as f64 / nf;
            let hi = (j + 1) as f64 / nf;
            if hi <= r {
                acc += self.g[j] * self.w.increment(lo, hi).expect("nonempty");
            } else {
                if r > lo {
                    acc += self.g[j] * self.w.increment(lo, r).expect("nonempty");
                }
                break;
            }
        }
        acc
    }

    /// `∫_(0,1] g dW`; zero exactly when the generating `f` closes up.
    pub fn w_integral_of_g(&self) -> f64 {
        let nf = self.n as f64;
        (0..self.n)
            .map(|j| {
                self.g[j] * self.w.increment(j as f64 / nf, (j + 1) as f64 / nf).expect("nonempty")
            })
            .sum()
    }
}

/// Lebesgue moments `(∫1, ∫t, ∫t²)` of the weight offset over one cell.
/// Atoms carry no Lebesgue mass, but they shift `t` on later pieces.
fn cell_t_moments(dec: &CellDecomposition) -> (f64, f64, f64) {
    let cw = dec.weight;
    let mut m = (0.0, 0.0, 0.0);
    for p in &dec.pieces {
        let len = p.y1 - p.y0;
        let a = p.w0 / cw;
        let s = p.slope / cw;
        m.0 += len;
        m.1 += a * len + 0.5 * s * len * len;
        m.2 += a * a * len + a * s * len * len + s * s * len * len * len / 3.0;
    }
    m
}

/// Per-axis, per-cell integrals of products of the two multilinear basis
/// functions `1-t` and `t`; `pair[b][b']` with `b` indexing `{1-t, t}`.
fn pair_moments(grid: &TorusGrid) -> Vec<Vec<[[f64; 2]; 2]>> {
    let n = grid.n();
    (0..grid.d())
        .map(|k| {
            (0..n)
                .map(|i| {
                    let dec = grid.w().axis(k).cell_decomposition(i, n);
                    let (m0, m1, m2) = cell_t_moments(&dec);
                    [[m0 - 2.0 * m1 + m2, m1 - m2], [m1 - m2, m2]]
                })
                .collect()
        })
        .collect()
}

/// Corner coefficient vector of an interpolant over one cell: entry `mask`
/// multiplies the basis product with `t_k` on the set bits.
fn corner_coeffs(u: &MeshFunction, kind: InterpolantKind, base: usize, out: &mut [f64]) {
    let g = u.grid();
    let d = g.d();
    for mask in 0..(1usize << d) {
        let pick = match kind {
            InterpolantKind::PiecewiseConstant => base,
            InterpolantKind::WFull => {
                let mut site = base;
                for k in 0..d {
                    if mask & (1 << k) != 0 {
                        site = g.up(site, k);
                    }
                }
                site
            }
            InterpolantKind::WPartial(m) => {
                let mut site = base;
                for k in 0..d {
                    if k != m && mask & (1 << k) != 0 {
                        site = g.up(site, k);
                    }
                }
                site
            }
        };
        out[mask] = u.values()[pick];
    }
}

/// Exact `L²(torus)` inner product of two interpolants of functions on the
/// same grid, integrated cell by cell from the expansions.
pub fn interpolant_l2_inner(
    u: &MeshFunction,
    ku: InterpolantKind,
    v: &MeshFunction,
    kv: InterpolantKind,
) -> Result<f64, MeshError> {
    if u.grid() != v.grid() {
        return Err(MeshError::GridMismatch);
    }
    let g = u.grid();
    let d = g.d();
    if let InterpolantKind::WPartial(m) = ku {
        if m >= d {
            return Err(MeshError::AxisOutOfRange);
        }
    }
    if let InterpolantKind::WPartial(m) = kv {
        if m >= d {
            return Err(MeshError::AxisOutOfRange);
        }
    }
    let pm = pair_moments(g);
    let corners = 1usize << d;
    let mut a = vec![0.0f64; corners];
    let mut b = vec![0.0f64; corners];
    let mut acc = 0.0;
    for idx in 0..g.site_count() {
        let coords = g.coords_of(idx);
        corner_coeffs(u, ku, idx, &mut a);
        corner_coeffs(v, kv, idx, &mut b);
        for (ca, &va) in a.iter().enumerate() {
            if va == 0.0 {
                continue;
            }
            for (cb, &vb) in b.iter().enumerate() {
                if vb == 0.0 {
                    continue;
                }
                let mut prod = va * vb;
                for k in 0..d {
                    let ba = (ca >> k) & 1;
                    let bb = (cb >> k) & 1;
                    prod *= pm[k][coords[k]][ba][bb];
                }
                acc += prod;
            }
        }
    }
    Ok(acc)
}

pub fn interpolant_l2_norm(u: &MeshFunction, kind: InterpolantKind) -> Result<f64, MeshError> {
    Ok(libm::sqrt(interpolant_l2_inner(u, kind, u, kind)?.max(0.0)))
}

/// Exact `L²` distance between two interpolants of the same mesh function's
/// grid data, via the per-cell coefficient difference.
pub fn interpolant_l2_distance(
    u: &MeshFunction,
    ku: InterpolantKind,
    v: &MeshFunction,
    kv: InterpolantKind,
) -> Result<f64, MeshError> {
    if u.grid() != v.grid() {
        return Err(MeshError::GridMismatch);
    }
    let g = u.grid();
    let d = g.d();
    let pm = pair_moments(g);
    let corners = 1usize << d;
    let mut a = vec![0.0f64; corners];
    let mut b = vec![0.0f64; corners];
    let mut acc = 0.0;
    for idx in 0..g.site_count() {
        let coords = g.coords_of(idx);
        corner_coeffs(u, ku, idx, &mut a);
        corner_coeffs(v, kv, idx, &mut b);
        for i in 0..corners {
            a[i] -= b[i];
        }
        for ca in 0..corners {
            for cb in 0..corners {
                if a[ca] == 0.0 || a[cb] == 0.0 {
                    continue;
                }
                let mut prod = a[ca] * a[cb];
                for k in 0..d {
                    prod *= pm[k][coords[k]][(ca >> k) & 1][(cb >> k) & 1];
                }
                acc += prod;
            }
        }
    }
    Ok(libm::sqrt(acc.max(0.0)))
}

/// Exact squared energy of the interpolant's weighted derivative along `m`,
/// against Lebesgue measure on the other axes and `dW_m` on axis `m`. The
/// derivative does not depend on `y_m` within a cell, so the axis-`m` factor
/// is just the cell weight.
pub fn interpolant_w_energy(u: &MeshFunction, m: usize) -> Result<f64, MeshError> {
    let g = u.grid();
    let d = g.d();
    if m >= d {
        return Err(MeshError::AxisOutOfRange);
    }
    let pm = pair_moments(g);
    let corners = 1usize << d;
    let mut der = vec![0.0f64; corners];
    let mut acc = 0.0;
    for idx in 0..g.site_count() {
        let coords = g.coords_of(idx);
        let cw = g.cell_weight(m, coords[m]);
        for mask in 0..corners {
            if mask & (1 << m) != 0 {
                der[mask] = 0.0;
                continue;
            }
            let mut site = idx;
            for k in 0..d {
                if mask & (1 << k) != 0 {
                    site = g.up(site, k);
                }
            }
            der[mask] = (u.values()[g.up(site, m)] - u.values()[site]) / cw;
        }
        for ca in 0..corners {
            if ca & (1 << m) != 0 || der[ca] == 0.0 {
                continue;
            }
            for cb in 0..corners {
                if cb & (1 << m) != 0 || der[cb] == 0.0 {
                    continue;
                }
                let mut prod = der[ca] * der[cb] * cw;
                for k in 0..d {
                    if k != m {
                        prod *= pm[k][coords[k]][(ca >> k) & 1][(cb >> k) & 1];
                    }
                }
                acc += prod;
            }
        }
    }
    Ok(acc)
}

/// Continuum Sobolev norm of the multilinear interpolant: `L²` mass plus the
/// weighted derivative energies over every axis, each integrated exactly.
pub fn interpolant_h1w_norm(u: &MeshFunction) -> Result<f64, MeshError> {
    let mut acc = interpolant_l2_inner(u, InterpolantKind::WFull, u, InterpolantKind::WFull)?;
    for m in 0..u.grid().d() {
        acc += interpolant_w_energy(u, m)?;
    }
    Ok(libm::sqrt(acc.max(0.0)))
}

/// `L²(torus)` error between an interpolant of `u` and a continuous
/// function, by per-cell quadrature (the interpolant is smooth inside each
/// density piece; the adaptive rule picks up the kinks).
pub fn l2_error_vs_function(
    u: &MeshFunction,
    kind: InterpolantKind,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> Result<f64, MeshError> {
    let g = u.grid();
    let n = g.n();
    let nf = n as f64;
    let d = g.d();
    let vol = libm::pow(nf, -(d as f64));
    let mut lo = vec![0.0f64; d];
    let mut hi = vec![0.0f64; d];
    let mut acc = 0.0;
    for idx in 0..g.site_count() {
        let coords = g.coords_of(idx);
        for k in 0..d {
            lo[k] = coords[k] as f64 / nf;
            hi[k] = (coords[k] + 1) as f64 / nf;
        }
        let mut sq = |y: &[f64]| {
            let diff = interpolate(u, kind, y).expect("valid point") - f(y);
            diff * diff
        };
        acc += quad::integrate_box(&mut sq, &lo, &hi, 1e-11 * vol);
    }
    Ok(libm::sqrt(acc.max(0.0)))
}
