//! The uniform discrete torus and the weighted difference calculus on it.
//!
//! Sites are the points `x/N` for `x` in `{0..N-1}^d`, linearly indexed with
//! axis 0 fastest: `index = x_0 + N*x_1 + N^2*x_2 + ...`. Each axis carries a
//! weight; the cell weight of site `x` along axis `k` is the Stieltjes
//! measure of `(x_k/N, (x_k+1)/N]`, cached at grid construction.
//!
//! Three difference quotients show up:
//!
//! * `forward_diff`: `N * (u(x+e_k) - u(x))`, the plain scaled difference;
//! * `w_diff`: `(u(x+e_k) - u(x)) / cellweight_k(x_k)`, the quotient against
//!   the weight increment — this is the object the elliptic operator and the
//!   particle rates are built from;
//! * `backward_w_diff`: `(u(x) - u(x-e_k)) / cellweight_k(x_k)`, the
//!   backward difference over the *forward* weight increment at `x`.
//!
//! `divergence_form_apply` composes an edge flux `a_k * w_diff` with the
//! backward plain difference. The backward step is the adjoint of the forward
//! one under the site inner product, which is what makes summation by parts
//! exact, the operator symmetric negative-semidefinite, and the whole thing
//! agree with the generator of the random walk among the bond conductances:
//! the flux on bond `(x, x+e_k)` is owned by the base site `x` on both sides
//! of the pairing.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::elliptic::DiagonalField;
use crate::measure::WProduct;

#[derive(Debug, Clone, PartialEq)]
pub enum MeshError {
    /// `d` or `N` out of range (`d >= 1`, `N >= 2`), weight dimension
    /// mismatch, or site count overflowing `usize`.
    InvalidGrid,
    AxisOutOfRange,
    ValueCountMismatch { expected: usize, got: usize },
    /// Two mesh functions live on structurally different grids.
    GridMismatch,
}

impl fmt::Display for MeshError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeshError::InvalidGrid => write!(f, "invalid grid dimensions"),
            MeshError::AxisOutOfRange => write!(f, "axis out of range"),
            MeshError::ValueCountMismatch { expected, got } => {
                write!(f, "expected {expected} values, got {got}")
            }
            MeshError::GridMismatch => write!(f, "mesh functions live on different grids"),
        }
    }
}

impl core::error::Error for MeshError {}

/// The discrete torus: `d` axes, `N` sites per axis, one weight per axis.
///
/// Grids compare structurally, so two grids built from the same parameters
/// are interchangeable. Cheap to clone; immutable after construction.
#[derive(Debug, Clone)]
pub struct TorusGrid {
    d: usize,
    n: usize,
    w: WProduct,
    strides: Vec<usize>,
    sites: usize,
    cell_w: Vec<Vec<f64>>,
}

impl PartialEq for TorusGrid {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.n == other.n && self.w == other.w
    }
}

impl TorusGrid {
    pub fn new(n: usize, w: WProduct) -> Result<Self, MeshError> {
        let d = w.dim();
        if d == 0 || n < 2 {
            return Err(MeshError::InvalidGrid);
        }
        let mut sites: usize = 1;
        let mut strides = Vec::with_capacity(d);
        for _ in 0..d {
            strides.push(sites);
            sites = sites.checked_mul(n).ok_or(MeshError::InvalidGrid)?;
        }
        let mut cell_w = Vec::with_capacity(d);
        for k in 0..d {
            let wk = w.axis(k);
            let row: Vec<f64> = (0..n)
                .map(|i| wk.cell_weight(i, n).expect("index in range"))
                .collect();
            cell_w.push(row);
        }
        Ok(TorusGrid { d, n, w, strides, sites, cell_w })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn site_count(&self) -> usize {
        self.sites
    }

    pub fn w(&self) -> &WProduct {
        &self.w
    }

    /// Cached weight of cell `i` along axis `k`.
    pub fn cell_weight(&self, k: usize, i: usize) -> f64 {
        self.cell_w[k][i]
    }

    pub fn index_of(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.d);
        coords
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| (c % self.n) * s)
            .sum()
    }

    pub fn coords_of(&self, idx: usize) -> Vec<usize> {
        let mut c = vec![0usize; self.d];
        let mut rest = idx;
        for k in 0..self.d {
            c[k] = rest % self.n;
            rest /= self.n;
        }
        c
    }

    /// Coordinate of site `idx` along `axis`.
    #[inline]
    pub fn axis_coord(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.n
    }

    /// Site one step up along `axis`, wrapping.
    #[inline]
    pub fn up(&self, idx: usize, axis: usize) -> usize {
        let s = self.strides[axis];
        if self.axis_coord(idx, axis) == self.n - 1 {
            idx - (self.n - 1) * s
        } else {
            idx + s
        }
    }

    /// Site one step down along `axis`, wrapping.
    #[inline]
    pub fn down(&self, idx: usize, axis: usize) -> usize {
        let s = self.strides[axis];
        if self.axis_coord(idx, axis) == 0 {
            idx + (self.n - 1) * s
        } else {
            idx - s
        }
    }

    /// Position of a site on the unit torus.
    pub fn position_of(&self, idx: usize) -> Vec<f64> {
        let nf = self.n as f64;
        self.coords_of(idx).into_iter().map(|c| c as f64 / nf).collect()
    }

    /// Mesh function from explicit values (length must be `N^d`).
    pub fn mesh_fn(&self, values: Vec<f64>) -> Result<MeshFunction, MeshError> {
        if values.len() != self.sites {
            return Err(MeshError::ValueCountMismatch { expected: self.sites, got: values.len() });
        }
        Ok(MeshFunction { grid: self.clone(), values })
    }

    pub fn zeros(&self) -> MeshFunction {
        MeshFunction { grid: self.clone(), values: vec![0.0; self.sites] }
    }

    /// Samples a function of the torus position at every site.
    pub fn sample(&self, mut f: impl FnMut(&[f64]) -> f64) -> MeshFunction {
        let nf = self.n as f64;
        let mut y = vec![0.0f64; self.d];
        let mut values = Vec::with_capacity(self.sites);
        for idx in 0..self.sites {
            let mut rest = idx;
            for yk in y.iter_mut() {
                *yk = (rest % self.n) as f64 / nf;
                rest /= self.n;
            }
            values.push(f(&y));
        }
        MeshFunction { grid: self.clone(), values }
    }

    /// Raw kernel for `div(A grad_W u)`: per axis, flux
    /// `g_k(x) = a_k(x) (u(x+e_k) - u(x)) / w_k(x_k)`, then the adjoint
    /// difference `N (g_k(x) - g_k(x-e_k))`, summed over axes into `out`.
    pub(crate) fn divergence_raw(&self, a: &[Vec<f64>], u: &[f64], out: &mut [f64]) {
        let nf = self.n as f64;
        out.fill(0.0);
        let mut g = vec![0.0f64; self.sites];
        for k in 0..self.d {
            let ak = &a[k];
            let cw = &self.cell_w[k];
            for (x, gx) in g.iter_mut().enumerate() {
                let up = self.up(x, k);
                *gx = ak[x] * (u[up] - u[x]) / cw[self.axis_coord(x, k)];
            }
            for (x, o) in out.iter_mut().enumerate() {
                let dn = self.down(x, k);
                *o += nf * (g[x] - g[dn]);
            }
        }
    }
}

/// Real values attached to every site of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshFunction {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl MeshFunction {
    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value_at(&self, coords: &[usize]) -> f64 {
        self.values[self.grid.index_of(coords)]
    }

    /// Plain average over sites.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn check_same(a: &MeshFunction, b: &MeshFunction) -> Result<(), MeshError> {
    if a.grid != b.grid {
        return Err(MeshError::GridMismatch);
    }
    Ok(())
}

fn check_axis(u: &MeshFunction, axis: usize) -> Result<(), MeshError> {
    if axis >= u.grid.d {
        return Err(MeshError::AxisOutOfRange);
    }
    Ok(())
}

/// `N * (u(x+e_k) - u(x))`.
pub fn forward_diff(u: &MeshFunction, axis: usize) -> Result<MeshFunction, MeshError> {
    check_axis(u, axis)?;
    let g = &u.grid;
    let nf = g.n as f64;
    let values = (0..g.sites)
        .map(|x| nf * (u.values[g.up(x, axis)] - u.values[x]))
        .collect();
    Ok(MeshFunction { grid: g.clone(), values })
}

/// `N * (u(x) - u(x-e_k))`, the adjoint counterpart of [`forward_diff`].
pub fn backward_diff(u: &MeshFunction, axis: usize) -> Result<MeshFunction, MeshError> {
    check_axis(u, axis)?;
    let g = &u.grid;
    let nf = g.n as f64;
    let values = (0..g.sites)
        .map(|x| nf * (u.values[x] - u.values[g.down(x, axis)]))
        .collect();
    Ok(MeshFunction { grid: g.clone(), values })
}

/// `(u(x+e_k) - u(x)) / cellweight_k(x_k)`: the difference quotient against
/// the weight increment. Across an atom the denominator is large, so the
/// quotient is small: membranes flatten gradients.
pub fn w_diff(u: &MeshFunction, axis: usize) -> Result<MeshFunction, MeshError> {
    check_axis(u, axis)?;
    let g = &u.grid;
    let cw = &g.cell_w[axis];
    let values = (0..g.sites)
        .map(|x| (u.values[g.up(x, axis)] - u.values[x]) / cw[g.axis_coord(x, axis)])
        .collect();
    Ok(MeshFunction { grid: g.clone(), values })
}

/// Backward difference divided by the forward weight increment at `x`:
/// `(u(x) - u(x-e_k)) / cellweight_k(x_k)`. Note the denominator is the same
/// one `w_diff` uses at `x`, not the increment behind `x`.
pub fn backward_w_diff(u: &MeshFunction, axis: usize) -> Result<MeshFunction, MeshError> {
    check_axis(u, axis)?;
    let g = &u.grid;
    let cw = &g.cell_w[axis];
    let values = (0..g.sites)
        .map(|x| (u.values[x] - u.values[g.down(x, axis)]) / cw[g.axis_coord(x, axis)])
        .collect();
    Ok(MeshFunction { grid: g.clone(), values })
}

/// Site inner product `N^{-d} sum_x u v`.
pub fn inner_l2(u: &MeshFunction, v: &MeshFunction) -> Result<f64, MeshError> {
    check_same(u, v)?;
    let scale = 1.0 / u.grid.sites as f64;
    Ok(scale * dot(&u.values, &v.values))
}

/// Weighted inner product along `axis`:
/// `N^{1-d} sum_x u v cellweight_k(x_k)`.
pub fn inner_wk(u: &MeshFunction, v: &MeshFunction, axis: usize) -> Result<f64, MeshError> {
    check_same(u, v)?;
    check_axis(u, axis)?;
    let g = &u.grid;
    let scale = (g.n as f64) / g.sites as f64; // N^{1-d} = N / N^d
    let cw = &g.cell_w[axis];
    let mut acc = 0.0;
    for x in 0..g.sites {
        acc += u.values[x] * v.values[x] * cw[g.axis_coord(x, axis)];
    }
    Ok(scale * acc)
}

/// Sobolev pairing: site inner product plus the weighted pairings of the
/// `w_diff` quotients over every axis.
pub fn inner_sobolev(u: &MeshFunction, v: &MeshFunction) -> Result<f64, MeshError> {
    check_same(u, v)?;
    let mut acc = inner_l2(u, v)?;
    for k in 0..u.grid.d {
        let du = w_diff(u, k)?;
        let dv = w_diff(v, k)?;
        acc += inner_wk(&du, &dv, k)?;
    }
    Ok(acc)
}

pub fn norm_l2(u: &MeshFunction) -> f64 {
    libm::sqrt(dot(&u.values, &u.values) / u.grid.sites as f64)
}

pub fn norm_sobolev(u: &MeshFunction) -> f64 {
    libm::sqrt(inner_sobolev(u, u).expect("same grid"))
}

/// `sum_k div_k(a_k w_diff_k u)` with the backward outer difference; see the
/// module docs for why backward. Summation by parts holds exactly:
/// `inner_l2(divergence_form_apply(A, u), v) = -sum_k inner_wk(a_k w_diff u, w_diff v, k)`.
pub fn divergence_form_apply(a: &DiagonalField, u: &MeshFunction) -> Result<MeshFunction, MeshError> {
    if *a.grid() != u.grid {
        return Err(MeshError::GridMismatch);
    }
    let mut out = u.grid.zeros();
    u.grid.divergence_raw(a.raw(), &u.values, &mut out.values);
    Ok(out)
}

/// Subtracts the site average.
pub fn mean_zero_project(u: &MeshFunction) -> MeshFunction {
    let m = u.mean();
    MeshFunction { grid: u.grid.clone(), values: u.values.iter().map(|v| v - m).collect() }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
