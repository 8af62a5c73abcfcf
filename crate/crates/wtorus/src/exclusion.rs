//! Exclusion dynamics with bond conductances inherited from the weighted
//! difference operator, and the matching macroscopic density equation.
//!
//! Particles hop across lattice bonds at rate `N² ξ c(η)`, where the
//! conductance `ξ` of the bond from `x` to `x+e_k` is `a_k(x)` divided by
//! `N` times the weight of the crossed cell, and the occupancy factor `c`
//! couples nearest and next-nearest neighbors. Bonds crossing an atom of
//! the weight are slow, so particles pile up on one side: the microscopic
//! picture of a membrane. Time is macroscopic throughout; the `N²` speedup
//! lives in the rates, never in the clock.
//!
//! The matching density limit is `∂_t ρ = div(A grad_W Φ(ρ))` with `Φ` the
//! polynomial tied to the occupancy factor. [`solve_hydrodynamic`]
//! integrates the discrete form of that equation; [`hydrodynamic_check`]
//! compares Monte Carlo averages of the empirical measure against it.
//!
//! Simulation is exact event-driven kinetic Monte Carlo: a Fenwick tree
//! holds one rate per directed bond `(x, x+e_k)`, waits are exponential in
//! the total rate, and a swap touches only the bonds whose rate windows
//! overlap the two flipped sites. Bonds joining equal occupancies carry
//! rate zero; skipping those no-op swaps leaves the law unchanged.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::elliptic::DiagonalField;
use crate::mesh::{self, MeshError, MeshFunction, TorusGrid};
use crate::rng::{stream_rng, unit_f64, unit_f64_pos};

/// Events between two full recomputations of the rate table.
const DESYNC_CHECK_EVERY: u64 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub enum ExclusionError {
    Mesh(MeshError),
    /// Occupancy-factor parameters allow a nonpositive rate.
    BadRate(&'static str),
    /// Density value outside `[0, 1]` or not finite.
    BadDensity,
    /// Bond coordinates outside the lattice.
    BadBond,
    /// Sample times not finite, nonnegative, strictly increasing.
    BadTimes,
    /// Stable step size underflowed; the configuration needs the implicit
    /// integrator.
    Stiff { dt: f64 },
    /// Incrementally maintained total rate drifted from a fresh recompute.
    RateTreeDesync { expected: f64, got: f64 },
}

impl fmt::Display for ExclusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExclusionError::Mesh(e) => write!(f, "{e}"),
            ExclusionError::BadRate(s) => write!(f, "bad rate parameters: {s}"),
            ExclusionError::BadDensity => write!(f, "density values must lie in [0, 1]"),
            ExclusionError::BadBond => write!(f, "bond coordinates outside the lattice"),
            ExclusionError::BadTimes => {
                write!(f, "sample times must be finite, nonnegative, strictly increasing")
            }
            ExclusionError::Stiff { dt } => {
                write!(f, "stable step size underflowed (dt = {dt:e}); use the implicit stepper")
            }
            ExclusionError::RateTreeDesync { expected, got } => {
                write!(f, "rate tree desync: recomputed {expected:e}, maintained {got:e}")
            }
        }
    }
}

impl core::error::Error for ExclusionError {}

impl From<MeshError> for ExclusionError {
    fn from(e: MeshError) -> Self {
        ExclusionError::Mesh(e)
    }
}

/// Occupancy dependence of the swap rates, together with the flux
/// nonlinearity it produces in the density equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateKind {
    /// `c = 1 + b(η(x−e) + η(x+2e))`, flux `Φ(α) = α + bα²`. Needs
    /// `b > −1/2` so the rate stays positive on every configuration.
    Quadratic { b: f64 },
    /// Adds pair products of the four straddling neighbors:
    /// `c = 1 + a(η(x−e) + η(x+2e)) + b(η(x−2e)η(x−e) + η(x−e)η(x+2e)
    /// + η(x+2e)η(x+3e))`, flux `Φ(α) = α + aα² + bα³`.
    Cubic { a: f64, b: f64 },
}

impl RateKind {
    pub fn validate(&self) -> Result<(), ExclusionError> {
        match *self {
            RateKind::Quadratic { b } => {
                if !b.is_finite() || b <= -0.5 {
                    return Err(ExclusionError::BadRate("need b > -1/2"));
                }
            }
            RateKind::Cubic { a, b } => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(ExclusionError::BadRate("parameters must be finite"));
                }
                // every assignment of the four neighbor bits must leave the
                // rate strictly positive
                for bits in 0..16u32 {
                    let m2 = (bits & 1) as f64;
                    let m1 = ((bits >> 1) & 1) as f64;
                    let p2 = ((bits >> 2) & 1) as f64;
                    let p3 = ((bits >> 3) & 1) as f64;
                    let c = 1.0 + a * (m1 + p2) + b * (m2 * m1 + m1 * p2 + p2 * p3);
                    if c <= 0.0 {
                        return Err(ExclusionError::BadRate(
                            "some neighbor configuration gives a nonpositive rate",
                        ));
                    }
                }
                // the flux must be strictly increasing on [0, 1]
                if self.min_phi_prime(0.0, 1.0) <= 0.0 {
                    return Err(ExclusionError::BadRate("flux is not monotone on [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Flux nonlinearity of the density equation.
    pub fn phi(&self, alpha: f64) -> f64 {
        match *self {
            RateKind::Quadratic { b } => alpha + b * alpha * alpha,
            RateKind::Cubic { a, b } => alpha + a * alpha * alpha + b * alpha * alpha * alpha,
        }
    }

    pub fn phi_prime(&self, alpha: f64) -> f64 {
        match *self {
            RateKind::Quadratic { b } => 1.0 + 2.0 * b * alpha,
            RateKind::Cubic { a, b } => 1.0 + 2.0 * a * alpha + 3.0 * b * alpha * alpha,
        }
    }

    fn phi_prime_extremes(&self, lo: f64, hi: f64) -> (f64, f64) {
        let mut min = self.phi_prime(lo).min(self.phi_prime(hi));
        let mut max = self.phi_prime(lo).max(self.phi_prime(hi));
        if let RateKind::Cubic { a, b } = *self {
            // interior vertex of the quadratic derivative
            if b != 0.0 {
                let v = -a / (3.0 * b);
                if v > lo && v < hi {
                    let pv = self.phi_prime(v);
                    min = min.min(pv);
                    max = max.max(pv);
                }
            }
        }
        (min, max)
    }

    fn min_phi_prime(&self, lo: f64, hi: f64) -> f64 {
        self.phi_prime_extremes(lo, hi).0
    }

    fn max_phi_prime(&self, lo: f64, hi: f64) -> f64 {
        self.phi_prime_extremes(lo, hi).1
    }

    /// Occupancy factor of the bond from `x` to `x + e_k`.
    fn c_factor(&self, grid: &TorusGrid, eta: &[u8], x: usize, k: usize) -> f64 {
        let m1 = eta[grid.down(x, k)] as f64;
        let p2 = eta[grid.up(grid.up(x, k), k)] as f64;
        match *self {
            RateKind::Quadratic { b } => 1.0 + b * (m1 + p2),
            RateKind::Cubic { a, b } => {
                let m2 = eta[grid.down(grid.down(x, k), k)] as f64;
                let p3 = eta[grid.up(grid.up(grid.up(x, k), k), k)] as f64;
                1.0 + a * (m1 + p2) + b * (m2 * m1 + m1 * p2 + p2 * p3)
            }
        }
    }

    /// Base offsets `t` such that flipping the occupation at site `z` can
    /// change the rate of the bond based at `z + t·e_j`, on any axis `j`.
    /// Covers both the gating pair of the bond and its occupancy window.
    fn affected_offsets(&self) -> &'static [i64] {
        match self {
            RateKind::Quadratic { .. } => &[-2, -1, 0, 1],
            RateKind::Cubic { .. } => &[-3, -2, -1, 0, 1, 2],
        }
    }
}

/// Hard-particle configuration on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyConfig {
    grid: TorusGrid,
    eta: Vec<u8>,
    particles: usize,
}

impl OccupancyConfig {
    pub fn new(grid: &TorusGrid, eta: Vec<u8>) -> Result<Self, ExclusionError> {
        if eta.len() != grid.site_count() {
            return Err(ExclusionError::Mesh(MeshError::ValueCountMismatch {
                expected: grid.site_count(),
                got: eta.len(),
            }));
        }
        if !eta.iter().all(|&b| b <= 1) {
            return Err(ExclusionError::BadDensity);
        }
        let particles = eta.iter().map(|&b| b as usize).sum();
        Ok(OccupancyConfig { grid: grid.clone(), eta, particles })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn eta(&self) -> &[u8] {
        &self.eta
    }

    pub fn particle_count(&self) -> usize {
        self.particles
    }
}

/// Conductances and occupancy couplings of one dynamics.
#[derive(Debug, Clone)]
pub struct RateModel {
    a: DiagonalField,
    kind: RateKind,
    /// `xi[k][x]`: conductance of the bond from `x` to `x + e_k`, equal to
    /// `a_k(x) / (N · cellweight_k(x_k))`.
    xi: Vec<Vec<f64>>,
    /// `N²`, the diffusive speedup folded into every rate.
    speed: f64,
}

impl RateModel {
    pub fn new(a: DiagonalField, kind: RateKind) -> Result<Self, ExclusionError> {
        kind.validate()?;
        let grid = a.grid().clone();
        let nf = grid.n() as f64;
        let mut xi = Vec::with_capacity(grid.d());
        for k in 0..grid.d() {
            let ak = a.axis_values(k);
            let vals = (0..grid.site_count())
                .map(|x| ak[x] / (nf * grid.cell_weight(k, grid.axis_coord(x, k))))
                .collect();
            xi.push(vals);
        }
        Ok(RateModel { a, kind, xi, speed: nf * nf })
    }

    pub fn grid(&self) -> &TorusGrid {
        self.a.grid()
    }

    pub fn coefficients(&self) -> &DiagonalField {
        &self.a
    }

    pub fn kind(&self) -> &RateKind {
        &self.kind
    }

    fn check_bond(&self, x: &[usize], k: usize) -> Result<usize, ExclusionError> {
        let g = self.grid();
        if k >= g.d() || x.len() != g.d() || x.iter().any(|&c| c >= g.n()) {
            return Err(ExclusionError::BadBond);
        }
        Ok(g.index_of(x))
    }

    /// Rate of the bond at `idx` along `k` given the occupancies, including
    /// the zero gate for equal endpoints.
    fn effective_rate(&self, eta: &[u8], idx: usize, k: usize) -> f64 {
        let g = self.grid();
        if eta[idx] == eta[g.up(idx, k)] {
            return 0.0;
        }
        self.speed * self.xi[k][idx] * self.kind.c_factor(g, eta, idx, k)
    }
}

/// Conductance of the bond from `x` to `x + e_k`. Symmetric in the bond
/// orientation by construction.
pub fn conductance(model: &RateModel, x: &[usize], k: usize) -> Result<f64, ExclusionError> {
    let idx = model.check_bond(x, k)?;
    Ok(model.xi[k][idx])
}

/// Swap rate of the bond from `x` to `x + e_k` in configuration `eta`:
/// `N² ξ c(η)`. The occupancy factor reads only sites beyond the bond, so
/// the rate is unchanged by the swap itself: the dynamics is reversible
/// with respect to every Bernoulli product measure when the factor is
/// constant.
pub fn swap_rate(
    model: &RateModel,
    eta: &OccupancyConfig,
    x: &[usize],
    k: usize,
) -> Result<f64, ExclusionError> {
    if eta.grid() != model.grid() {
        return Err(ExclusionError::Mesh(MeshError::GridMismatch));
    }
    let idx = model.check_bond(x, k)?;
    Ok(model.speed * model.xi[k][idx] * model.kind.c_factor(model.grid(), &eta.eta, idx, k))
}

/// Fenwick tree over per-bond rates: point update, prefix-sum sampling.
struct RateTree {
    tree: Vec<f64>,
    rates: Vec<f64>,
}

impl RateTree {
    fn new(rates: Vec<f64>) -> Self {
        let n = rates.len();
        let mut tree = vec![0.0f64; n + 1];
        for (i, &r) in rates.iter().enumerate() {
            let mut j = i + 1;
            while j <= n {
                tree[j] += r;
                j += j & j.wrapping_neg();
            }
        }
        RateTree { tree, rates }
    }

    fn len(&self) -> usize {
        self.rates.len()
    }

    fn set(&mut self, i: usize, r: f64) {
        let delta = r - self.rates[i];
        if delta == 0.0 {
            return;
        }
        self.rates[i] = r;
        let n = self.len();
        let mut j = i + 1;
        while j <= n {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut acc = 0.0;
        let mut j = self.len();
        while j > 0 {
            acc += self.tree[j];
            j &= j - 1;
        }
        acc
    }

    /// First index whose prefix sum exceeds `target`; callers keep `target`
    /// inside `[0, total)`. Rounding can land on a zero-rate slot, so skip
    /// forward to the next live one.
    fn sample(&self, target: f64) -> usize {
        let n = self.len();
        let mut pos = 0usize;
        let mut rem = target;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] < rem {
                rem -= self.tree[next];
                pos = next;
            }
            step >>= 1;
        }
        let mut idx = pos.min(n - 1);
        while idx + 1 < n && self.rates[idx] <= 0.0 {
            idx += 1;
        }
        while self.rates[idx] <= 0.0 && idx > 0 {
            idx -= 1;
        }
        idx
    }
}

/// One simulated trajectory, observed at the requested times.
#[derive(Debug, Clone)]
pub struct SimulationRecord {
    pub times: Vec<f64>,
    /// Occupancies at each requested time, in site-index order.
    pub snapshots: Vec<Vec<u8>>,
    pub events: u64,
    pub desync_checks: u64,
}

fn validate_times(times: &[f64]) -> Result<(), ExclusionError> {
    if times.is_empty()
        || !times.iter().all(|t| t.is_finite() && *t >= 0.0)
        || times.windows(2).any(|p| p[0] >= p[1])
    {
        return Err(ExclusionError::BadTimes);
    }
    Ok(())
}

fn site_shift(grid: &TorusGrid, mut idx: usize, axis: usize, t: i64) -> usize {
    if t >= 0 {
        for _ in 0..t {
            idx = grid.up(idx, axis);
        }
    } else {
        for _ in 0..(-t) {
            idx = grid.down(idx, axis);
        }
    }
    idx
}

/// Runs the dynamics from `eta0`, snapshotting the configuration at each
/// of `sample_times` (macroscopic units). Exact event-driven simulation;
/// the trajectory is a deterministic function of `(seed, stream)`.
pub fn simulate(
    model: &RateModel,
    eta0: &OccupancyConfig,
    sample_times: &[f64],
    seed: u64,
    stream: u64,
) -> Result<SimulationRecord, ExclusionError> {
    if eta0.grid() != model.grid() {
        return Err(ExclusionError::Mesh(MeshError::GridMismatch));
    }
    validate_times(sample_times)?;
    let g = model.grid();
    let sites = g.site_count();
    let d = g.d();
    let mut eta = eta0.eta.clone();

    let all_rates = |eta: &[u8]| -> Vec<f64> {
        let mut r = Vec::with_capacity(d * sites);
        for k in 0..d {
            for x in 0..sites {
                r.push(model.effective_rate(eta, x, k));
            }
        }
        r
    };
    let mut tree = RateTree::new(all_rates(&eta));

    let mut rng = stream_rng(seed, stream);
    let mut t = 0.0f64;
    let mut next_sample = 0usize;
    let mut snapshots: Vec<Vec<u8>> = Vec::with_capacity(sample_times.len());
    let mut events = 0u64;
    let mut desync_checks = 0u64;
    let mut touched: Vec<usize> = Vec::with_capacity(2 * d * 6);
    let offsets = model.kind.affected_offsets();

    while next_sample < sample_times.len() {
        let total = tree.total();
        if total <= 0.0 {
            // frozen configuration: nothing moves again
            while next_sample < sample_times.len() {
                snapshots.push(eta.clone());
                next_sample += 1;
            }
            break;
        }
        let wait = -libm::log(unit_f64_pos(&mut rng)) / total;
        let t_new = t + wait;
        while next_sample < sample_times.len() && sample_times[next_sample] < t_new {
            snapshots.push(eta.clone());
            next_sample += 1;
        }
        if next_sample == sample_times.len() {
            break;
        }
        t = t_new;
        let bond = tree.sample(unit_f64(&mut rng) * total);
        let axis = bond / sites;
        let x = bond % sites;
        let y = g.up(x, axis);
        eta.swap(x, y);
        events += 1;

        touched.clear();
        for &z in &[x, y] {
            for j in 0..d {
                for &off in offsets {
                    let b = j * sites + site_shift(g, z, j, off);
                    if !touched.contains(&b) {
                        touched.push(b);
                    }
                }
            }
        }
        for &b in &touched {
            tree.set(b, model.effective_rate(&eta, b % sites, b / sites));
        }

        if events % DESYNC_CHECK_EVERY == 0 {
            let fresh = all_rates(&eta);
            let expected: f64 = fresh.iter().sum();
            let got = tree.total();
            if libm::fabs(expected - got) > 1e-9 * expected.max(1.0) {
                return Err(ExclusionError::RateTreeDesync { expected, got });
            }
            tree = RateTree::new(fresh);
            desync_checks += 1;
        }
    }

    Ok(SimulationRecord {
        times: sample_times.to_vec(),
        snapshots,
        events,
        desync_checks,
    })
}

/// Pairing of the empirical measure with a test function:
/// `N^{−d} Σ_x H(x/N) η(x)`.
pub fn empirical_pairing(eta: &OccupancyConfig, h: &MeshFunction) -> Result<f64, ExclusionError> {
    if eta.grid() != h.grid() {
        return Err(ExclusionError::Mesh(MeshError::GridMismatch));
    }
    let mut acc = 0.0;
    for (e, hv) in eta.eta.iter().zip(h.values()) {
        if *e == 1 {
            acc += hv;
        }
    }
    Ok(acc / eta.grid().site_count() as f64)
}

/// Macroscopic density, pointwise in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    inner: MeshFunction,
}

impl DensityProfile {
    pub fn new(rho: MeshFunction) -> Result<Self, ExclusionError> {
        if !rho.values().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(ExclusionError::BadDensity);
        }
        Ok(DensityProfile { inner: rho })
    }

    pub fn constant(grid: &TorusGrid, alpha: f64) -> Result<Self, ExclusionError> {
        DensityProfile::new(grid.mesh_fn(vec![alpha; grid.site_count()])?)
    }

    /// Evaluates a continuous profile at the lattice points.
    pub fn sample(grid: &TorusGrid, f: impl FnMut(&[f64]) -> f64) -> Result<Self, ExclusionError> {
        DensityProfile::new(grid.sample(f))
    }

    pub fn grid(&self) -> &TorusGrid {
        self.inner.grid()
    }

    pub fn values(&self) -> &[f64] {
        self.inner.values()
    }

    pub fn as_mesh_fn(&self) -> &MeshFunction {
        &self.inner
    }

    pub fn mean(&self) -> f64 {
        self.inner.mean()
    }
}

/// Independent site occupations with `P(η(x) = 1) = ρ(x)`.
pub fn sample_initial(rho0: &DensityProfile, seed: u64, stream: u64) -> OccupancyConfig {
    let mut rng = stream_rng(seed, stream);
    let eta: Vec<u8> =
        rho0.values().iter().map(|&p| u8::from(unit_f64(&mut rng) < p)).collect();
    let particles = eta.iter().map(|&b| b as usize).sum();
    OccupancyConfig { grid: rho0.grid().clone(), eta, particles }
}

/// Time integrator for the density equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStepping {
    /// Adaptive explicit Euler, step bounded by the stability estimate
    /// `dt ≤ 0.45 / (max row sum × max Φ')`. Positivity-preserving.
    Explicit,
    /// Backward Euler with the given step, damped Newton on the flux
    /// variable plus conjugate gradients per Newton step. For stiff
    /// configurations (large atom masses).
    ImplicitEuler { dt: f64 },
}

/// Integrates `∂_t ρ = div(A grad_W Φ(ρ))` from `rho0`, returning the
/// density at each requested time. Mass is conserved and values stay in
/// `[0, 1]`.
pub fn solve_hydrodynamic(
    a: &DiagonalField,
    rho0: &DensityProfile,
    kind: &RateKind,
    t_list: &[f64],
    method: TimeStepping,
) -> Result<Vec<DensityProfile>, ExclusionError> {
    kind.validate()?;
    if a.grid() != rho0.grid() {
        return Err(ExclusionError::Mesh(MeshError::GridMismatch));
    }
    validate_times(t_list)?;
    let g = rho0.grid().clone();
    let sites = g.site_count();
    let nf = g.n() as f64;

    // twice the largest diagonal entry of the linear part: the full
    // absolute row sum of div(A grad_W)
    let mut max_row = 0.0f64;
    for x in 0..sites {
        let mut row = 0.0;
        for k in 0..g.d() {
            let down = g.down(x, k);
            let ak = a.axis_values(k);
            row += nf * ak[x] / g.cell_weight(k, g.axis_coord(x, k));
            row += nf * ak[down] / g.cell_weight(k, g.axis_coord(down, k));
        }
        max_row = max_row.max(2.0 * row);
    }

    let mut rho = rho0.values().to_vec();
    let mut t = 0.0f64;
    let horizon = t_list.last().copied().unwrap_or(1.0).max(1.0);
    let mut out = Vec::with_capacity(t_list.len());
    let mut phi = vec![0.0f64; sites];
    let mut lphi = vec![0.0f64; sites];

    match method {
        TimeStepping::Explicit => {
            for &ti in t_list {
                while t < ti {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for &v in &rho {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    let dpmax = kind.max_phi_prime(lo, hi).max(1e-12);
                    let dt_stab = 0.45 / (max_row * dpmax);
                    let dt = dt_stab.min(ti - t);
                    if dt < 1e-13 * horizon {
                        return Err(ExclusionError::Stiff { dt });
                    }
                    for (p, &r) in phi.iter_mut().zip(&rho) {
                        *p = kind.phi(r);
                    }
                    g.divergence_raw(a.raw(), &phi, &mut lphi);
                    for (r, &l) in rho.iter_mut().zip(&lphi) {
                        *r += dt * l;
                    }
                    clamp_density(&mut rho, dt)?;
                    t += dt;
                }
                out.push(profile_from(&g, &rho)?);
            }
        }
        TimeStepping::ImplicitEuler { dt: dt0 } => {
            if !(dt0.is_finite() && dt0 > 0.0) {
                return Err(ExclusionError::Stiff { dt: dt0 });
            }
            for &ti in t_list {
                if ti > t {
                    let steps = libm::ceil((ti - t) / dt0) as usize;
                    let h = (ti - t) / steps as f64;
                    for _ in 0..steps {
                        rho = implicit_step(&g, a, kind, &rho, h)?;
                    }
                    t = ti;
                }
                out.push(profile_from(&g, &rho)?);
            }
        }
    }
    Ok(out)
}

fn profile_from(g: &TorusGrid, rho: &[f64]) -> Result<DensityProfile, ExclusionError> {
    DensityProfile::new(g.mesh_fn(rho.to_vec())?)
}

fn clamp_density(rho: &mut [f64], dt: f64) -> Result<(), ExclusionError> {
    for v in rho.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-9 {
                return Err(ExclusionError::Stiff { dt });
            }
            *v = 0.0;
        } else if *v > 1.0 {
            if *v > 1.0 + 1e-9 {
                return Err(ExclusionError::Stiff { dt });
            }
            *v = 1.0;
        }
    }
    Ok(())
}

/// Monotone scalar inverse of the flux on `[0, 1]`, by safeguarded Newton.
fn phi_inverse(kind: &RateKind, psi: f64) -> f64 {
    if psi <= 0.0 {
        return 0.0;
    }
    if psi >= kind.phi(1.0) {
        return 1.0;
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut r = psi.clamp(0.0, 1.0);
    for _ in 0..80 {
        let f = kind.phi(r) - psi;
        if libm::fabs(f) < 1e-15 * (1.0 + libm::fabs(psi)) {
            return r;
        }
        if f > 0.0 {
            hi = r;
        } else {
            lo = r;
        }
        let step = f / kind.phi_prime(r);
        let mut next = r - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        r = next;
    }
    r
}

/// One backward-Euler step in the flux variable `ψ = Φ(ρ)`: solves
/// `Φ⁻¹(ψ) − h·div(A grad_W ψ) = ρ_old` by damped Newton; the Jacobian
/// `diag(1/Φ') − h·div(A grad_W)` is symmetric positive definite, so each
/// Newton system goes through conjugate gradients.
fn implicit_step(
    g: &TorusGrid,
    a: &DiagonalField,
    kind: &RateKind,
    rho_old: &[f64],
    h: f64,
) -> Result<Vec<f64>, ExclusionError> {
    let sites = rho_old.len();
    let mut psi: Vec<f64> = rho_old.iter().map(|&r| kind.phi(r)).collect();
    let mut r_of_psi = vec![0.0f64; sites];
    let mut lpsi = vec![0.0f64; sites];
    let mut residual = vec![0.0f64; sites];

    let eval_residual = |psi: &[f64], r_of_psi: &mut [f64], lpsi: &mut [f64], out: &mut [f64]| {
        for (ri, &p) in r_of_psi.iter_mut().zip(psi.iter()) {
            *ri = phi_inverse(kind, p);
        }
        g.divergence_raw(a.raw(), psi, lpsi);
        let mut norm = 0.0f64;
        for i in 0..out.len() {
            out[i] = r_of_psi[i] - h * lpsi[i] - rho_old[i];
            norm = norm.max(libm::fabs(out[i]));
        }
        norm
    };

    let mut norm = eval_residual(&psi, &mut r_of_psi, &mut lpsi, &mut residual);
    let tol = 1e-12 * (1.0 + norm);
    for _ in 0..50 {
        if norm <= tol {
            break;
        }
        // Jacobian diagonal from the current density iterate
        let diag: Vec<f64> = r_of_psi.iter().map(|&r| 1.0 / kind.phi_prime(r)).collect();
        let step = newton_cg(g, a, &diag, h, &residual)?;
        let mut damping = 1.0f64;
        let mut trial = vec![0.0f64; sites];
        loop {
            for i in 0..sites {
                trial[i] = psi[i] - damping * step[i];
            }
            let trial_norm = eval_residual(&trial, &mut r_of_psi, &mut lpsi, &mut residual);
            if trial_norm <= (1.0 - 0.25 * damping) * norm || damping < 1e-4 {
                psi.copy_from_slice(&trial);
                norm = trial_norm;
                break;
            }
            damping *= 0.5;
        }
    }
    if norm > 1e-6 {
        return Err(ExclusionError::Stiff { dt: h });
    }
    let mut rho: Vec<f64> = psi.iter().map(|&p| phi_inverse(kind, p)).collect();
    clamp_density(&mut rho, h)?;
    Ok(rho)
}

/// Conjugate gradients on `(diag − h·div(A grad_W)) s = b`.
fn newton_cg(
    g: &TorusGrid,
    a: &DiagonalField,
    diag: &[f64],
    h: f64,
    b: &[f64],
) -> Result<Vec<f64>, ExclusionError> {
    let sites = b.len();
    let apply = |v: &[f64], out: &mut [f64], scratch: &mut [f64]| {
        g.divergence_raw(a.raw(), v, scratch);
        for i in 0..sites {
            out[i] = diag[i] * v[i] - h * scratch[i];
        }
    };
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();

    let mut x = vec![0.0f64; sites];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0f64; sites];
    let mut scratch = vec![0.0f64; sites];
    let b_norm = libm::sqrt(dot(b, b));
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut rs = dot(&r, &r);
    for _ in 0..10 * sites.max(50) {
        if libm::sqrt(rs) <= 1e-12 * b_norm {
            break;
        }
        apply(&p, &mut ap, &mut scratch);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(ExclusionError::Stiff { dt: h });
        }
        let alpha = rs / pap;
        for i in 0..sites {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..sites {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(x)
}

/// Observables of one replica: empirical pairings per `(time, test
/// function)` and the raw occupation profile per time. Replica `r` draws
/// its initial configuration from stream `2r` and its dynamics from
/// stream `2r + 1`, so replicas are independent and the set of results is
/// the same no matter how the replica loop is scheduled.
#[derive(Debug, Clone)]
pub struct ReplicaObservables {
    pub pairings: Vec<Vec<f64>>,
    pub profiles: Vec<Vec<f64>>,
}

pub fn replica_observables(
    model: &RateModel,
    rho0: &DensityProfile,
    t_list: &[f64],
    dict: &[MeshFunction],
    seed: u64,
    replica: usize,
) -> Result<ReplicaObservables, ExclusionError> {
    let eta0 = sample_initial(rho0, seed, 2 * replica as u64);
    let run = simulate(model, &eta0, t_list, seed, 2 * replica as u64 + 1)?;
    let mut pairings = Vec::with_capacity(t_list.len());
    let mut profiles = Vec::with_capacity(t_list.len());
    for snap in &run.snapshots {
        let cfg = OccupancyConfig {
            grid: model.grid().clone(),
            eta: snap.clone(),
            particles: snap.iter().map(|&b| b as usize).sum(),
        };
        let row: Result<Vec<f64>, ExclusionError> =
            dict.iter().map(|h| empirical_pairing(&cfg, h)).collect();
        pairings.push(row?);
        profiles.push(snap.iter().map(|&b| b as f64).collect());
    }
    Ok(ReplicaObservables { pairings, profiles })
}

/// One comparison row: Monte Carlo average of `⟨π_t, H⟩` against the
/// lattice pairing of the solved density.
#[derive(Debug, Clone, PartialEq)]
pub struct HydroRow {
    pub t: f64,
    pub h_index: usize,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub pde_value: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct HydroReport {
    pub times: Vec<f64>,
    pub rows: Vec<HydroRow>,
    /// Per time: site-wise mean occupation over replicas.
    pub mc_profiles: Vec<Vec<f64>>,
    /// Per time: site-wise standard error of that mean.
    pub mc_profile_stderr: Vec<Vec<f64>>,
    /// Per time: the solved density at the lattice points.
    pub pde_profiles: Vec<Vec<f64>>,
    pub replicas: usize,
}

/// Runs `replicas` independent simulations from product initial data with
/// marginals `rho0`, averages the empirical pairings of every dictionary
/// function at every requested time, and compares them with the density
/// equation driven by the effective coefficients `a_hom`.
pub fn hydrodynamic_check(
    model: &RateModel,
    a_hom: &DiagonalField,
    rho0: &DensityProfile,
    t_list: &[f64],
    replicas: usize,
    dict: &[MeshFunction],
    seed: u64,
) -> Result<HydroReport, ExclusionError> {
    if replicas < 2 {
        return Err(ExclusionError::BadRate("need at least two replicas"));
    }
    if dict.is_empty() {
        return Err(ExclusionError::BadRate("need at least one test function"));
    }
    if rho0.grid() != model.grid() {
        return Err(ExclusionError::Mesh(MeshError::GridMismatch));
    }
    for h in dict {
        if h.grid() != model.grid() {
            return Err(ExclusionError::Mesh(MeshError::GridMismatch));
        }
    }
    let pde = solve_hydrodynamic(a_hom, rho0, model.kind(), t_list, TimeStepping::Explicit)?;

    let nt = t_list.len();
    let nh = dict.len();
    let sites = model.grid().site_count();
    let mut sum = vec![0.0f64; nt * nh];
    let mut sumsq = vec![0.0f64; nt * nh];
    let mut psum = vec![0.0f64; nt * sites];
    let mut psumsq = vec![0.0f64; nt * sites];
    for r in 0..replicas {
        let obs = replica_observables(model, rho0, t_list, dict, seed, r)?;
        for (ti, row) in obs.pairings.iter().enumerate() {
            for (hi, &v) in row.iter().enumerate() {
                sum[ti * nh + hi] += v;
                sumsq[ti * nh + hi] += v * v;
            }
        }
        for (ti, prof) in obs.profiles.iter().enumerate() {
            for (si, &v) in prof.iter().enumerate() {
                psum[ti * sites + si] += v;
                psumsq[ti * sites + si] += v * v;
            }
        }
    }

    let m = replicas as f64;
    let stderr_of = |s: f64, sq: f64| {
        let mean = s / m;
        let var = ((sq - m * mean * mean) / (m - 1.0)).max(0.0);
        (mean, libm::sqrt(var / m))
    };
    let mut rows = Vec::with_capacity(nt * nh);
    for ti in 0..nt {
        for hi in 0..nh {
            let (mean, se) = stderr_of(sum[ti * nh + hi], sumsq[ti * nh + hi]);
            let pde_value = mesh::inner_l2(&dict[hi], pde[ti].as_mesh_fn())?;
            rows.push(HydroRow {
                t: t_list[ti],
                h_index: hi,
                mc_mean: mean,
                mc_stderr: se,
                pde_value,
                gap: mean - pde_value,
            });
        }
    }
    let mut mc_profiles = Vec::with_capacity(nt);
    let mut mc_profile_stderr = Vec::with_capacity(nt);
    for ti in 0..nt {
        let mut means = Vec::with_capacity(sites);
        let mut ses = Vec::with_capacity(sites);
        for si in 0..sites {
            let (mean, se) = stderr_of(psum[ti * sites + si], psumsq[ti * sites + si]);
            means.push(mean);
            ses.push(se);
        }
        mc_profiles.push(means);
        mc_profile_stderr.push(ses);
    }
    Ok(HydroReport {
        times: t_list.to_vec(),
        rows,
        mc_profiles,
        mc_profile_stderr,
        pde_profiles: pde.iter().map(|p| p.values().to_vec()).collect(),
        replicas,
    })
}
