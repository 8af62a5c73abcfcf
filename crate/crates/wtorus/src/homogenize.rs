//! Families of oscillating coefficient fields, their predicted effective
//! limits, and the machinery to measure convergence numerically.
//!
//! A coefficient family is one of three kinds: a fixed continuous field
//! discretized per grid, a lattice-periodic pattern, or a stationary random
//! environment. As the grid refines, solutions of
//! `lambda*u - div(A_N grad_W u) = f_N` approach the solution with the
//! effective field, whose entries are reciprocals of the averaged
//! reciprocals: a harmonic-mean law. Atoms of the weight get special
//! treatment in the random case: every coefficient cell whose closure
//! touches an atom position carries the plain mean instead of a sample,
//! and the effective entry at the atom position is that mean.
//!
//! Convergence studies record, per grid size, the discrete Sobolev norm of
//! the solution, the `L²` distance of its piecewise-constant interpolant to
//! a reference, and the two energy summands; references are either analytic
//! or a fine-grid solve with the predicted field. Everything is
//! deterministic given the environment seed.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::elliptic::{
    self, DiagonalField, EllipticError, SolveConfig, SolveMode,
};
use crate::interp::{self, InterpolantKind};
use crate::linalg;
use crate::measure::WProduct;
use crate::mesh::{self, MeshError, MeshFunction, TorusGrid};
use crate::rng::{stream_rng, unit_f64};

#[derive(Debug, Clone, PartialEq)]
pub enum HomogenizeError {
    Mesh(MeshError),
    Elliptic(EllipticError),
    BadSpec(&'static str),
    BadStudy(&'static str),
}

impl fmt::Display for HomogenizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HomogenizeError::Mesh(e) => write!(f, "{e}"),
            HomogenizeError::Elliptic(e) => write!(f, "{e}"),
            HomogenizeError::BadSpec(s) => write!(f, "bad coefficient spec: {s}"),
            HomogenizeError::BadStudy(s) => write!(f, "bad study setup: {s}"),
        }
    }
}

impl core::error::Error for HomogenizeError {}

impl From<MeshError> for HomogenizeError {
    fn from(e: MeshError) -> Self {
        HomogenizeError::Mesh(e)
    }
}

impl From<EllipticError> for HomogenizeError {
    fn from(e: EllipticError) -> Self {
        HomogenizeError::Elliptic(e)
    }
}

/// A continuous scalar field on the torus, by axis and position. Cheap to
/// clone and shareable across threads.
#[derive(Clone)]
pub struct FixedField(Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>);

impl FixedField {
    pub fn new(f: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        FixedField(Arc::new(f))
    }

    pub fn eval(&self, axis: usize, y: &[f64]) -> f64 {
        (self.0)(axis, y)
    }
}

impl fmt::Debug for FixedField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FixedField(<fn>)")
    }
}

/// A continuous scalar function of position, same sharing properties.
#[derive(Clone)]
pub struct ContinuousFn(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>);

impl ContinuousFn {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        ContinuousFn(Arc::new(f))
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        (self.0)(y)
    }
}

impl fmt::Debug for ContinuousFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContinuousFn(<fn>)")
    }
}

/// Marginal law and spatial structure of one axis of a random environment.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvironmentKind {
    /// Independent uniform draws on `[lo, hi]` per site.
    IidUniform { lo: f64, hi: f64 },
    /// Independent draws from a finite set with given probabilities.
    IidChoice { values: Vec<f64>, probs: Vec<f64> },
    /// A finite-state Markov chain run along each lattice line parallel to
    /// the axis, started from its stationary distribution; lines are
    /// independent. `rows` is the transition matrix, row-stochastic and
    /// irreducible.
    MarkovLine { states: Vec<f64>, rows: Vec<Vec<f64>> },
}

impl EnvironmentKind {
    fn validate(&self) -> Result<(), HomogenizeError> {
        match self {
            EnvironmentKind::IidUniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo <= hi) {
                    return Err(HomogenizeError::BadSpec("uniform law needs 0 < lo <= hi"));
                }
            }
            EnvironmentKind::IidChoice { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(HomogenizeError::BadSpec("choice law needs matching nonempty lists"));
                }
                if !values.iter().all(|v| v.is_finite() && *v > 0.0) {
                    return Err(HomogenizeError::BadSpec("choice values must be positive"));
                }
                if !probs.iter().all(|p| *p >= 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(HomogenizeError::BadSpec("choice probabilities must sum to one"));
                }
            }
            EnvironmentKind::MarkovLine { states, rows } => {
                let m = states.len();
                if m == 0 || rows.len() != m || rows.iter().any(|r| r.len() != m) {
                    return Err(HomogenizeError::BadSpec("markov chain needs a square transition matrix"));
                }
                if !states.iter().all(|v| v.is_finite() && *v > 0.0) {
                    return Err(HomogenizeError::BadSpec("markov states must be positive"));
                }
                for r in rows {
                    if !r.iter().all(|p| *p >= 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                        return Err(HomogenizeError::BadSpec("markov rows must be stochastic"));
                    }
                }
                // reachability closure for irreducibility
                let mut reach = vec![false; m * m];
                for i in 0..m {
                    for j in 0..m {
                        reach[i * m + j] = i == j || rows[i][j] > 0.0;
                    }
                }
                for k in 0..m {
                    for i in 0..m {
                        for j in 0..m {
                            if reach[i * m + k] && reach[k * m + j] {
                                reach[i * m + j] = true;
                            }
                        }
                    }
                }
                if reach.iter().any(|r| !r) {
                    return Err(HomogenizeError::BadSpec("markov chain must be irreducible"));
                }
            }
        }
        Ok(())
    }

    /// Stationary distribution; trivial for the i.i.d. kinds.
    fn stationary(&self) -> Result<Vec<f64>, HomogenizeError> {
        match self {
            EnvironmentKind::IidUniform { .. } => Ok(Vec::new()),
            EnvironmentKind::IidChoice { probs, .. } => Ok(probs.clone()),
            EnvironmentKind::MarkovLine { rows, .. } => {
                let m = rows.len();
                // transpose(P) - I with the last balance equation replaced by
                // the normalization sum(pi) = 1
                let mut a = vec![0.0f64; m * m];
                for i in 0..m {
                    for j in 0..m {
                        a[i * m + j] = rows[j][i] - if i == j { 1.0 } else { 0.0 };
                    }
                }
                for j in 0..m {
                    a[(m - 1) * m + j] = 1.0;
                }
                let mut b = vec![0.0f64; m];
                b[m - 1] = 1.0;
                linalg::solve_dense(a, m, &mut b)
                    .map_err(|_| HomogenizeError::BadSpec("markov chain has no unique stationary law"))?;
                Ok(b)
            }
        }
    }

    /// Stationary mean of the coefficient value.
    pub fn mean(&self) -> f64 {
        match self {
            EnvironmentKind::IidUniform { lo, hi } => 0.5 * (lo + hi),
            EnvironmentKind::IidChoice { values, probs } => {
                values.iter().zip(probs).map(|(v, p)| v * p).sum()
            }
            EnvironmentKind::MarkovLine { states, .. } => {
                let pi = self.stationary().expect("validated");
                states.iter().zip(&pi).map(|(v, p)| v * p).sum()
            }
        }
    }

    /// Stationary mean of the reciprocal.
    pub fn reciprocal_mean(&self) -> f64 {
        match self {
            EnvironmentKind::IidUniform { lo, hi } => {
                if hi > lo {
                    libm::log(hi / lo) / (hi - lo)
                } else {
                    1.0 / lo
                }
            }
            EnvironmentKind::IidChoice { values, probs } => {
                values.iter().zip(probs).map(|(v, p)| p / v).sum()
            }
            EnvironmentKind::MarkovLine { states, .. } => {
                let pi = self.stationary().expect("validated");
                states.iter().zip(&pi).map(|(v, p)| p / v).sum()
            }
        }
    }
}

/// Stationary random environment: one law per axis plus the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEnvironmentSpec {
    pub axes: Vec<EnvironmentKind>,
    pub seed: u64,
}

impl RandomEnvironmentSpec {
    pub fn new(axes: Vec<EnvironmentKind>, seed: u64) -> Result<Self, HomogenizeError> {
        if axes.is_empty() {
            return Err(HomogenizeError::BadSpec("environment needs at least one axis"));
        }
        for k in &axes {
            k.validate()?;
        }
        Ok(RandomEnvironmentSpec { axes, seed })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RandomEnvironmentSpec { axes: self.axes.clone(), seed }
    }
}

/// A family of coefficient fields indexed by the grid size.
#[derive(Debug, Clone)]
pub enum CoefficientSpec {
    /// One fixed continuous field, discretized by weighted cell averages on
    /// every grid; no oscillation, so the family is its own limit.
    DiscretizedFixed(FixedField),
    /// Per-axis value patterns tiled by lattice index: site `x` carries
    /// `values[k][x_k mod len]` on axis `k`. Oscillates at the lattice scale.
    PeriodicPattern { axes: Vec<Vec<f64>> },
    /// Fresh stationary samples per grid, with the atom-cell mean override.
    RandomErgodic(RandomEnvironmentSpec),
}

impl CoefficientSpec {
    pub fn periodic(axes: Vec<Vec<f64>>) -> Result<Self, HomogenizeError> {
        if axes.is_empty() {
            return Err(HomogenizeError::BadSpec("pattern needs at least one axis"));
        }
        for ax in &axes {
            if ax.is_empty() || !ax.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(HomogenizeError::BadSpec("pattern values must be positive"));
            }
        }
        Ok(CoefficientSpec::PeriodicPattern { axes })
    }

    fn dim(&self) -> Option<usize> {
        match self {
            CoefficientSpec::DiscretizedFixed(_) => None,
            CoefficientSpec::PeriodicPattern { axes } => Some(axes.len()),
            CoefficientSpec::RandomErgodic(env) => Some(env.axes.len()),
        }
    }
}

/// Cells along one axis whose closure contains the position `p`: one cell
/// for an interior point, the two flanking cells when `p` sits on a grid
/// line (an atom at 0 flanks the seam, touching the last and first cells).
fn closure_cells(p: f64, n: usize) -> (usize, Option<usize>) {
    let nf = n as f64;
    let s = p * nf;
    let r = libm::round(s);
    if libm::fabs(s - r) < 1e-9 {
        let j = r as i64;
        let left = (j - 1).rem_euclid(n as i64) as usize;
        let right = j.rem_euclid(n as i64) as usize;
        (left, Some(right))
    } else {
        ((libm::floor(s) as usize).min(n - 1), None)
    }
}

/// Realizes the coefficient field for `spec` on `grid`.
pub fn build_field(spec: &CoefficientSpec, grid: &TorusGrid) -> Result<DiagonalField, HomogenizeError> {
    if let Some(d) = spec.dim() {
        if d != grid.d() {
            return Err(HomogenizeError::BadSpec("spec dimension does not match grid"));
        }
    }
    match spec {
        CoefficientSpec::DiscretizedFixed(f) => {
            let mut axes = Vec::with_capacity(grid.d());
            for k in 0..grid.d() {
                let field = f.clone();
                let ak = interp::discretize_weighted(grid, k, &mut |y| field.eval(k, y))?;
                axes.push(ak.into_values());
            }
            Ok(DiagonalField::new(grid, axes)?)
        }
        CoefficientSpec::PeriodicPattern { axes } => {
            let mut out = Vec::with_capacity(grid.d());
            for k in 0..grid.d() {
                let pat = &axes[k];
                let vals = (0..grid.site_count())
                    .map(|idx| pat[grid.axis_coord(idx, k) % pat.len()])
                    .collect();
                out.push(vals);
            }
            Ok(DiagonalField::new(grid, out)?)
        }
        CoefficientSpec::RandomErgodic(env) => {
            let n = grid.n();
            let sites = grid.site_count();
            let mut out = Vec::with_capacity(grid.d());
            for (k, kind) in env.axes.iter().enumerate() {
                let mut vals = vec![0.0f64; sites];
                sample_axis(kind, env.seed, k, grid, &mut vals)?;
                // mean override on every cell whose closure meets an atom
                let mean = kind.mean();
                for &(p, _) in grid.w().axis(k).atoms() {
                    let (a, b) = closure_cells(p, n);
                    for idx in 0..sites {
                        let c = grid.axis_coord(idx, k);
                        if c == a || Some(c) == b {
                            vals[idx] = mean;
                        }
                    }
                }
                out.push(vals);
            }
            Ok(DiagonalField::new(grid, out)?)
        }
    }
}

fn sample_axis(
    kind: &EnvironmentKind,
    seed: u64,
    axis: usize,
    grid: &TorusGrid,
    out: &mut [f64],
) -> Result<(), HomogenizeError> {
    match kind {
        EnvironmentKind::IidUniform { lo, hi } => {
            let mut rng = stream_rng(seed, axis as u64);
            for v in out.iter_mut() {
                *v = lo + (hi - lo) * unit_f64(&mut rng);
            }
        }
        EnvironmentKind::IidChoice { values, probs } => {
            let mut rng = stream_rng(seed, axis as u64);
            for v in out.iter_mut() {
                *v = values[pick(probs, unit_f64(&mut rng))];
            }
        }
        EnvironmentKind::MarkovLine { states, rows } => {
            let pi = kind.stationary()?;
            let n = grid.n();
            let lines = grid.site_count() / n;
            // enumerate lines by their transverse index: all sites with
            // axis coordinate zero, in index order
            let mut line_no = 0u64;
            for idx in 0..grid.site_count() {
                if grid.axis_coord(idx, axis) != 0 {
                    continue;
                }
                let mut rng = stream_rng(seed, ((axis as u64) << 32) | line_no);
                line_no += 1;
                let mut state = pick(&pi, unit_f64(&mut rng));
                let mut site = idx;
                for _ in 0..n {
                    out[site] = states[state];
                    state = pick(&rows[state], unit_f64(&mut rng));
                    site = grid.up(site, axis);
                }
            }
            debug_assert_eq!(line_no as usize, lines);
        }
    }
    Ok(())
}

fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Effective entry along one axis.
#[derive(Debug, Clone, PartialEq)]
pub enum HomogenizedAxis {
    Constant(f64),
    /// Constant off a finite set of singular positions, with pinned values
    /// at those positions.
    WithSingular { ambient: f64, at: Vec<(f64, f64)> },
}

/// The predicted effective coefficient matrix (diagonal, possibly varying
/// with position).
#[derive(Debug, Clone)]
pub struct HomogenizedMatrix {
    d: usize,
    inner: HomogenizedInner,
}

#[derive(Debug, Clone)]
enum HomogenizedInner {
    PerAxis(Vec<HomogenizedAxis>),
    Pointwise(FixedField),
}

impl HomogenizedMatrix {
    pub fn from_axes(axes: Vec<HomogenizedAxis>) -> Self {
        HomogenizedMatrix { d: axes.len(), inner: HomogenizedInner::PerAxis(axes) }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn axis(&self, k: usize) -> Option<&HomogenizedAxis> {
        match &self.inner {
            HomogenizedInner::PerAxis(v) => v.get(k),
            HomogenizedInner::Pointwise(_) => None,
        }
    }

    /// Pointwise value; singular positions win when hit exactly.
    pub fn eval(&self, k: usize, y: &[f64]) -> f64 {
        match &self.inner {
            HomogenizedInner::Pointwise(f) => f.eval(k, y),
            HomogenizedInner::PerAxis(v) => match &v[k] {
                HomogenizedAxis::Constant(c) => *c,
                HomogenizedAxis::WithSingular { ambient, at } => {
                    for &(p, val) in at {
                        if libm::fabs(y[k] - p) < 1e-12 {
                            return val;
                        }
                    }
                    *ambient
                }
            },
        }
    }

    /// Discretizes the prediction onto a grid for reference solves. Singular
    /// positions are materialized with the same closure rule the field
    /// builder uses: both cells flanking a grid-line position receive the
    /// pinned value.
    pub fn to_field(&self, grid: &TorusGrid) -> Result<DiagonalField, HomogenizeError> {
        if grid.d() != self.d {
            return Err(HomogenizeError::BadSpec("prediction dimension does not match grid"));
        }
        match &self.inner {
            HomogenizedInner::Pointwise(f) => {
                let mut axes = Vec::with_capacity(self.d);
                for k in 0..self.d {
                    let field = f.clone();
                    let vals = grid.sample(|y| field.eval(k, y));
                    axes.push(vals.into_values());
                }
                Ok(DiagonalField::new(grid, axes)?)
            }
            HomogenizedInner::PerAxis(v) => {
                let n = grid.n();
                let sites = grid.site_count();
                let mut axes = Vec::with_capacity(self.d);
                for (k, ax) in v.iter().enumerate() {
                    match ax {
                        HomogenizedAxis::Constant(c) => axes.push(vec![*c; sites]),
                        HomogenizedAxis::WithSingular { ambient, at } => {
                            let mut vals = vec![*ambient; sites];
                            for &(p, val) in at {
                                let (a, b) = closure_cells(p, n);
                                for idx in 0..sites {
                                    let c = grid.axis_coord(idx, k);
                                    if c == a || Some(c) == b {
                                        vals[idx] = val;
                                    }
                                }
                            }
                            axes.push(vals);
                        }
                    }
                }
                Ok(DiagonalField::new(grid, axes)?)
            }
        }
    }
}

/// Closed-form effective matrix for the family: reciprocal of the weak
/// limit of the reciprocals. Periodic patterns give the harmonic mean of
/// the pattern; random environments give `1/E[1/b]` away from the atom
/// positions of `w` and `E[b]` on them; a fixed field is its own limit.
pub fn predicted_homogenized_matrix(
    spec: &CoefficientSpec,
    w: &WProduct,
) -> Result<HomogenizedMatrix, HomogenizeError> {
    if let Some(d) = spec.dim() {
        if d != w.dim() {
            return Err(HomogenizeError::BadSpec("spec dimension does not match weight"));
        }
    }
    match spec {
        CoefficientSpec::DiscretizedFixed(f) => Ok(HomogenizedMatrix {
            d: w.dim(),
            inner: HomogenizedInner::Pointwise(f.clone()),
        }),
        CoefficientSpec::PeriodicPattern { axes } => {
            let hm = axes
                .iter()
                .map(|pat| {
                    let recip: f64 = pat.iter().map(|v| 1.0 / v).sum::<f64>() / pat.len() as f64;
                    HomogenizedAxis::Constant(1.0 / recip)
                })
                .collect();
            Ok(HomogenizedMatrix::from_axes(hm))
        }
        CoefficientSpec::RandomErgodic(env) => {
            let mut axes = Vec::with_capacity(env.axes.len());
            for (k, kind) in env.axes.iter().enumerate() {
                let ambient = 1.0 / kind.reciprocal_mean();
                let at: Vec<(f64, f64)> =
                    w.axis(k).atoms().iter().map(|&(p, _)| (p, kind.mean())).collect();
                if at.is_empty() {
                    axes.push(HomogenizedAxis::Constant(ambient));
                } else {
                    axes.push(HomogenizedAxis::WithSingular { ambient, at });
                }
            }
            Ok(HomogenizedMatrix::from_axes(axes))
        }
    }
}

/// The two summands of the solution energy: the scaled `l2` mass
/// `lambda * N^{-d} sum u²` and the weighted gradient energy
/// `N^{1-d} sum_k sum_x a_k (w_diff u)² cellweight_k`. Their sum is the
/// bilinear form of `u` with itself.
pub fn energy_pair(
    a: &DiagonalField,
    u: &MeshFunction,
    lambda: f64,
) -> Result<(f64, f64), HomogenizeError> {
    if a.grid() != u.grid() {
        return Err(HomogenizeError::Mesh(MeshError::GridMismatch));
    }
    let g = u.grid();
    let mass = lambda * mesh::inner_l2(u, u)?;
    let scale = (g.n() as f64) / g.site_count() as f64;
    let mut energy = 0.0;
    for k in 0..g.d() {
        let du = mesh::w_diff(u, k)?;
        let ak = a.axis_values(k);
        let mut s = 0.0;
        for x in 0..g.site_count() {
            s += ak[x] * du.values()[x] * du.values()[x] * g.cell_weight(k, g.axis_coord(x, k));
        }
        energy += scale * s;
    }
    Ok((mass, energy))
}

/// Continuous right-hand-side data `(f0, f1..fd)`; gradient components may
/// be omitted entirely.
#[derive(Debug, Clone)]
pub struct ContinuousDual {
    pub f0: ContinuousFn,
    pub fk: Vec<ContinuousFn>,
}

impl ContinuousDual {
    pub fn site_only(f0: ContinuousFn) -> Self {
        ContinuousDual { f0, fk: Vec::new() }
    }

    /// Discretizes onto a grid: cell averages for the site part, weighted
    /// cell averages for the gradient parts, folded into the strong-form
    /// right-hand side.
    pub fn strong_rhs(&self, grid: &TorusGrid) -> Result<MeshFunction, HomogenizeError> {
        if !self.fk.is_empty() && self.fk.len() != grid.d() {
            return Err(HomogenizeError::BadSpec("gradient data must cover every axis or none"));
        }
        let f0 = self.f0.clone();
        let site = interp::discretize_l2(grid, &mut |y| f0.eval(y));
        if self.fk.is_empty() {
            return Ok(site);
        }
        let mut parts = Vec::with_capacity(self.fk.len());
        for (k, gk) in self.fk.iter().enumerate() {
            let gk = gk.clone();
            parts.push(interp::discretize_weighted(grid, k, &mut |y| gk.eval(y))?);
        }
        let dual = elliptic::DualFunctional::new(site, parts)?;
        Ok(elliptic::dual_strong_rhs(&dual)?)
    }
}

/// Reference the study compares against.
#[derive(Debug, Clone)]
pub enum StudyReference {
    /// Closed-form solution of the effective problem.
    Analytic(ContinuousFn),
    /// Solve the effective problem on a grid `factor` times the largest
    /// study size.
    FineGrid { factor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub n: usize,
    /// Discrete Sobolev norm of the solution; bounded along the family.
    pub sobolev_norm: f64,
    /// `L²` distance of the piecewise-constant interpolant to the reference.
    pub l2_error: f64,
    /// First energy summand.
    pub l2_mass: f64,
    /// Second energy summand.
    pub w_energy: f64,
}

#[derive(Debug, Clone)]
pub struct HomogenizationResult {
    pub records: Vec<StudyRecord>,
    pub predicted: HomogenizedMatrix,
    pub reference_n: usize,
    pub reference_l2_mass: f64,
    pub reference_w_energy: f64,
}

/// Solves the family problem along a grid ladder and measures convergence
/// to the effective reference.
///
/// Per grid size: build the field, discretize the data, solve, record the
/// Sobolev norm, the `L²` gap to the reference, and the energy pair. The
/// reference solution is either the supplied closed form (compared by
/// quadrature) or a fine-grid solve with the predicted field (compared
/// exactly on the fine lattice; every study size must divide the fine one).
/// Reference energies are evaluated discretely on the fine grid in both
/// cases. Fine-grid and large-N solves force the iterative path so the
/// dense fallback cannot blow up on big lattices.
pub fn run_h_convergence_study(
    spec: &CoefficientSpec,
    w: &WProduct,
    data: &ContinuousDual,
    lambda: f64,
    n_list: &[usize],
    reference: &StudyReference,
    cfg: &SolveConfig,
) -> Result<HomogenizationResult, HomogenizeError> {
    if !(lambda > 0.0) {
        return Err(HomogenizeError::BadStudy("lambda must be positive"));
    }
    if n_list.is_empty() || n_list.windows(2).any(|p| p[0] >= p[1]) {
        return Err(HomogenizeError::BadStudy("grid sizes must be strictly increasing"));
    }
    let predicted = predicted_homogenized_matrix(spec, w)?;
    let last = *n_list.last().expect("nonempty");
    let reference_n = match reference {
        StudyReference::Analytic(_) => 4 * last,
        StudyReference::FineGrid { factor } => {
            if *factor == 0 {
                return Err(HomogenizeError::BadStudy("fine-grid factor must be positive"));
            }
            factor * last
        }
    };
    if let StudyReference::FineGrid { .. } = reference {
        if n_list.iter().any(|n| reference_n % n != 0) {
            return Err(HomogenizeError::BadStudy("every study size must divide the fine grid"));
        }
    }
    let fine_cfg = SolveConfig { mode: SolveMode::Iterative, ..*cfg };

    let fine_grid = TorusGrid::new(reference_n, w.clone())?;
    let fine_field = predicted.to_field(&fine_grid)?;
    let u_ref = match reference {
        StudyReference::Analytic(u0) => {
            let u0 = u0.clone();
            fine_grid.sample(|y| u0.eval(y))
        }
        StudyReference::FineGrid { .. } => {
            let rhs = data.strong_rhs(&fine_grid)?;
            elliptic::solve_resolvent(&fine_field, lambda, &rhs, &fine_cfg)?
        }
    };
    let (reference_l2_mass, reference_w_energy) = energy_pair(&fine_field, &u_ref, lambda)?;

    let mut records = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = TorusGrid::new(n, w.clone())?;
        let field = build_field(spec, &grid)?;
        let rhs = data.strong_rhs(&grid)?;
        let solve_cfg = if grid.site_count() > cfg.dense_cutoff { &fine_cfg } else { cfg };
        let u = elliptic::solve_resolvent(&field, lambda, &rhs, solve_cfg)?;
        let l2_error = match reference {
            StudyReference::Analytic(u0) => {
                let u0 = u0.clone();
                interp::l2_error_vs_function(&u, InterpolantKind::PiecewiseConstant, &mut |y| {
                    u0.eval(y)
                })?
            }
            StudyReference::FineGrid { .. } => {
                pw_distance_on_fine(&u, &u_ref)
            }
        };
        let (l2_mass, w_energy) = energy_pair(&field, &u, lambda)?;
        records.push(StudyRecord {
            n,
            sobolev_norm: mesh::norm_sobolev(&u),
            l2_error,
            l2_mass,
            w_energy,
        });
    }
    Ok(HomogenizationResult {
        records,
        predicted,
        reference_n,
        reference_l2_mass,
        reference_w_energy,
    })
}

/// Exact `L²` distance between the piecewise-constant interpolants of a
/// coarse and a fine mesh function when the coarse size divides the fine
/// one: both are constant on fine cells, so the lattice sum is the integral.
fn pw_distance_on_fine(coarse: &MeshFunction, fine: &MeshFunction) -> f64 {
    let gc = coarse.grid();
    let gf = fine.grid();
    debug_assert_eq!(gf.n() % gc.n(), 0);
    let ratio = gf.n() / gc.n();
    let mut acc = 0.0;
    for idx in 0..gf.site_count() {
        let fc = gf.coords_of(idx);
        let cc: Vec<usize> = fc.iter().map(|&c| c / ratio).collect();
        let diff = coarse.values()[gc.index_of(&cc)] - fine.values()[idx];
        acc += diff * diff;
    }
    libm::sqrt(acc / gf.site_count() as f64)
}

/// Least-squares fit of one scalar knob: minimizes the site-norm distance
/// between the observed solution and the solve produced by `build(c)`, by
/// golden-section search on `[lo, hi]`. The distance is unimodal in `c`
/// for monotone families, which all the built-in ones are.
pub fn fit_effective_coefficient(
    observed: &MeshFunction,
    rhs: &MeshFunction,
    lambda: f64,
    lo: f64,
    hi: f64,
    build: &mut dyn FnMut(f64) -> Result<DiagonalField, HomogenizeError>,
    cfg: &SolveConfig,
) -> Result<f64, HomogenizeError> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(HomogenizeError::BadStudy("fit interval must be nonempty"));
    }
    let mut eval = |c: f64| -> Result<f64, HomogenizeError> {
        let field = build(c)?;
        let u = elliptic::solve_resolvent(&field, lambda, rhs, cfg)?;
        let mut acc = 0.0;
        for (a, b) in u.values().iter().zip(observed.values()) {
            acc += (a - b) * (a - b);
        }
        Ok(acc)
    };
    let phi = 0.5 * (libm::sqrt(5.0) - 1.0);
    let mut a = lo;
    let mut b = hi;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    for _ in 0..60 {
        if b - a < 1e-5 * (hi - lo) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// A fixed dictionary of probe functions for averaged-convergence checks:
/// the constant, the leading Fourier pairs per axis, and per axis one
/// weight-adapted profile built from a sine through the step-derivative
/// construction.
pub fn weak_test_dictionary(grid: &TorusGrid, fourier_modes: usize) -> Vec<MeshFunction> {
    let tau = 2.0 * core::f64::consts::PI;
    let mut dict = Vec::new();
    dict.push(grid.mesh_fn(vec![1.0; grid.site_count()]).expect("sized"));
    for k in 0..grid.d() {
        for m in 1..=fourier_modes {
            let mf = m as f64;
            dict.push(grid.sample(|y| libm::cos(tau * mf * y[k])));
            dict.push(grid.sample(|y| libm::sin(tau * mf * y[k])));
        }
        let t = interp::approx_test_function(
            &mut |x| libm::sin(tau * x),
            grid.w().axis(k),
            grid.n(),
        );
        dict.push(grid.sample(|y| t.eval(y[k])));
    }
    dict
}

/// Weighted average of the axis flux `a_k * w_diff u` over the cells of a
/// coarse grid: per coarse cell, the flux values are averaged against the
/// fine cell weights. Returns one value per coarse cell, indexed like a
/// `coarse_n` grid with the same dimension.
pub fn coarse_flux_average(
    a: &DiagonalField,
    u: &MeshFunction,
    axis: usize,
    coarse_n: usize,
) -> Result<Vec<f64>, HomogenizeError> {
    if a.grid() != u.grid() {
        return Err(HomogenizeError::Mesh(MeshError::GridMismatch));
    }
    let g = u.grid();
    if axis >= g.d() || coarse_n == 0 || coarse_n > g.n() {
        return Err(HomogenizeError::BadStudy("coarse grid must be at most the fine grid"));
    }
    let du = mesh::w_diff(u, axis)?;
    let ak = a.axis_values(axis);
    let cells = coarse_n.pow(g.d() as u32);
    let mut num = vec![0.0f64; cells];
    let mut den = vec![0.0f64; cells];
    for idx in 0..g.site_count() {
        let coords = g.coords_of(idx);
        let mut cidx = 0;
        for k in (0..g.d()).rev() {
            cidx = cidx * coarse_n + coords[k] * coarse_n / g.n();
        }
        let wgt = g.cell_weight(axis, coords[axis]);
        num[cidx] += ak[idx] * du.values()[idx] * wgt;
        den[cidx] += wgt;
    }
    Ok(num.iter().zip(&den).map(|(n, d)| n / d).collect())
}
