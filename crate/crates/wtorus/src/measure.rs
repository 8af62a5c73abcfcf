//! Weight coordinates: strictly increasing cadlag functions on the real line
//! whose increments are 1-periodic.
//!
//! A weight is stored as a piecewise-constant density on `[0,1)` plus a finite
//! list of point masses. `eval` extends it to the whole line through
//! `W(x + n) = W(x) + n * W-increment-per-period`, and the Stieltjes measure
//! of a half-open interval `(a, b]` is `eval(b) - eval(a)`. Cells own their
//! right endpoint, so an atom sitting exactly on a grid line belongs to the
//! cell to its left.

use alloc::vec::Vec;
use core::fmt;

/// Validation and range errors for weight construction and queries.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightError {
    /// The density description is empty.
    EmptySlopes,
    /// The first density interval must start at 0.
    FirstBreakpointNotZero,
    /// Breakpoints must be strictly increasing inside `[0,1)`.
    UnorderedBreakpoints,
    /// Every density slope must be finite and strictly positive.
    NonPositiveSlope,
    /// Atom positions must lie in `[0,1)`.
    AtomOutOfRange,
    /// Atom masses must be finite and strictly positive.
    NonPositiveMass,
    /// Two atoms share a position; merge them instead.
    DuplicateAtom,
    /// `increment(a, b)` requires `a < b`.
    BadInterval,
    /// Cell index out of range for the requested resolution.
    CellOutOfRange,
    /// A product weight needs at least one axis.
    NoAxes,
}

impl fmt::Display for WeightError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightError::EmptySlopes => write!(f, "weight needs at least one density interval"),
            WeightError::FirstBreakpointNotZero => {
                write!(f, "first density interval must start at 0")
            }
            WeightError::UnorderedBreakpoints => {
                write!(f, "density breakpoints must be strictly increasing in [0,1)")
            }
            WeightError::NonPositiveSlope => write!(f, "density slopes must be positive"),
            WeightError::AtomOutOfRange => write!(f, "atom positions must lie in [0,1)"),
            WeightError::NonPositiveMass => write!(f, "atom masses must be positive"),
            WeightError::DuplicateAtom => write!(f, "duplicate atom position"),
            WeightError::BadInterval => write!(f, "interval must satisfy a < b"),
            WeightError::CellOutOfRange => write!(f, "cell index out of range"),
            WeightError::NoAxes => write!(f, "product weight needs at least one axis"),
        }
    }
}

impl core::error::Error for WeightError {}

/// One axis worth of weight: density breakpoints with per-interval slopes,
/// atoms as `(position, mass)` pairs, and the cached increment over a period.
///
/// Immutable after construction; fine to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct WCoordinate {
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
    atoms: Vec<(f64, f64)>,
    total: f64,
}

impl WCoordinate {
    /// Builds a weight from `(interval start, slope)` pairs and atoms.
    ///
    /// The first interval must start at 0 and starts must increase strictly;
    /// the last interval extends to 1. Atoms may sit anywhere in `[0,1)`,
    /// grid-aligned or not.
    pub fn new(slopes: Vec<(f64, f64)>, mut atoms: Vec<(f64, f64)>) -> Result<Self, WeightError> {
        if slopes.is_empty() {
            return Err(WeightError::EmptySlopes);
        }
        if slopes[0].0 != 0.0 {
            return Err(WeightError::FirstBreakpointNotZero);
        }
        let mut breakpoints = Vec::with_capacity(slopes.len());
        let mut slope_vals = Vec::with_capacity(slopes.len());
        let mut prev = -1.0f64;
        for &(x, s) in &slopes {
            if !x.is_finite() || x < 0.0 || x >= 1.0 || x <= prev {
                return Err(WeightError::UnorderedBreakpoints);
            }
            if !s.is_finite() || s <= 0.0 {
                return Err(WeightError::NonPositiveSlope);
            }
            breakpoints.push(x);
            slope_vals.push(s);
            prev = x;
        }
        for &(p, m) in &atoms {
            if !p.is_finite() || !(0.0..1.0).contains(&p) {
                return Err(WeightError::AtomOutOfRange);
            }
            if !m.is_finite() || m <= 0.0 {
                return Err(WeightError::NonPositiveMass);
            }
        }
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite atom positions"));
        if atoms.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(WeightError::DuplicateAtom);
        }
        let mut total = 0.0;
        for i in 0..breakpoints.len() {
            let end = if i + 1 < breakpoints.len() { breakpoints[i + 1] } else { 1.0 };
            total += slope_vals[i] * (end - breakpoints[i]);
        }
        total += atoms.iter().map(|&(_, m)| m).sum::<f64>();
        Ok(WCoordinate { breakpoints, slopes: slope_vals, atoms, total })
    }

    /// The identity weight `W(x) = x`: unit density, no atoms.
    pub fn identity() -> Self {
        WCoordinate {
            breakpoints: alloc::vec![0.0],
            slopes: alloc::vec![1.0],
            atoms: Vec::new(),
            total: 1.0,
        }
    }

    /// Unit density plus the given atoms.
    pub fn with_atoms(atoms: Vec<(f64, f64)>) -> Result<Self, WeightError> {
        Self::new(alloc::vec![(0.0, 1.0)], atoms)
    }

    /// Increment of the weight over one period, `W(x+1) - W(x)`.
    pub fn total_increment(&self) -> f64 {
        self.total
    }

    /// Sorted `(position, mass)` atom pairs.
    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// Density pieces as `(interval start, slope)` pairs in increasing
    /// order; the last interval runs to 1.
    pub fn density_pieces(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.breakpoints.iter().copied().zip(self.slopes.iter().copied())
    }

    /// Atom positions only; this is the singular support of the measure and
    /// drives the membrane-cell logic in the homogenization module.
    pub fn singular_support(&self) -> impl Iterator<Item = f64> + '_ {
        self.atoms.iter().map(|&(p, _)| p)
    }

    /// Density part of `W(r) - W(0-)` for `r` in `[0,1]`.
    fn density_cum(&self, r: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.breakpoints.len() {
            let lo = self.breakpoints[i];
            if r <= lo {
                break;
            }
            let hi = if i + 1 < self.breakpoints.len() { self.breakpoints[i + 1] } else { 1.0 };
            acc += self.slopes[i] * (if r < hi { r } else { hi } - lo);
        }
        acc
    }

    /// Atom part of `W(r) - W(0-)`; cadlag, so an atom at `p` counts for
    /// every `r >= p`.
    fn atom_cum(&self, r: f64) -> f64 {
        self.atoms.iter().take_while(|&&(p, _)| p <= r).map(|&(_, m)| m).sum()
    }

    /// Evaluates the periodic extension at any real `x`. Total function.
    pub fn eval(&self, x: f64) -> f64 {
        let n = libm::floor(x);
        let mut r = x - n;
        // Guard against r rounding up to 1 for x just below an integer.
        let mut periods = n;
        if r >= 1.0 {
            r = 0.0;
            periods += 1.0;
        }
        periods * self.total + self.density_cum(r) + self.atom_cum(r)
    }

    /// Stieltjes measure of `(a, b]`; rejects `a >= b`.
    pub fn increment(&self, a: f64, b: f64) -> Result<f64, WeightError> {
        if !(a < b) {
            return Err(WeightError::BadInterval);
        }
        Ok(self.eval(b) - self.eval(a))
    }

    /// Measure of the grid cell `(i/n, (i+1)/n]`. Strictly positive because
    /// the density is.
    pub fn cell_weight(&self, i: usize, n: usize) -> Result<f64, WeightError> {
        if n == 0 || i >= n {
            return Err(WeightError::CellOutOfRange);
        }
        let nf = n as f64;
        self.increment(i as f64 / nf, (i + 1) as f64 / nf)
    }

    /// Exact decomposition of the cell `(i/n, (i+1)/n]` into linear density
    /// pieces and atoms, both expressed through the running within-cell
    /// weight `W(y) - W(i/n)`. Used for exact interpolant integrals.
    pub(crate) fn cell_decomposition(&self, i: usize, n: usize) -> CellDecomposition {
        let nf = n as f64;
        let a = i as f64 / nf;
        let b = (i + 1) as f64 / nf;
        let base = self.eval(a);
        let mut cuts: Vec<f64> = Vec::new();
        cuts.push(a);
        for &bp in &self.breakpoints {
            if bp > a && bp < b {
                cuts.push(bp);
            }
        }
        for &(p, _) in &self.atoms {
            if p > a && p < b {
                cuts.push(p);
            }
        }
        cuts.sort_by(|x, y| x.partial_cmp(y).expect("finite cuts"));
        cuts.dedup();
        cuts.push(b);

        let mut pieces = Vec::new();
        for w in cuts.windows(2) {
            let (y0, y1) = (w[0], w[1]);
            let mid = 0.5 * (y0 + y1);
            let slope = self.slope_at(mid - libm::floor(mid));
            // Weight accumulated from the cell base up to y0, atoms included.
            let w0 = self.eval(y0) - base;
            pieces.push(CellPiece { y0, y1, slope, w0 });
        }

        let mut atoms = Vec::new();
        for &(p, m) in &self.atoms {
            let pos = if b == 1.0 && p == 0.0 { 1.0 } else { p };
            if pos > a && pos <= b {
                atoms.push(CellAtom { pos, mass: m });
            }
        }
        CellDecomposition { pieces, atoms, weight: self.eval(b) - base }
    }

    fn slope_at(&self, r: f64) -> f64 {
        let mut s = self.slopes[0];
        for i in 0..self.breakpoints.len() {
            if r >= self.breakpoints[i] {
                s = self.slopes[i];
            } else {
                break;
            }
        }
        s
    }
}

/// One linear density piece of a cell: on `[y0, y1)` the running weight is
/// `w0 + slope * (y - y0)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellPiece {
    pub y0: f64,
    pub y1: f64,
    pub slope: f64,
    pub w0: f64,
}

/// An atom inside a cell, by position and mass; positions follow the cell
/// convention (an atom at 0 shows up as 1.0 in the last cell).
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellAtom {
    pub pos: f64,
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct CellDecomposition {
    pub pieces: Vec<CellPiece>,
    pub atoms: Vec<CellAtom>,
    pub weight: f64,
}

/// Product weight over the axes of the torus, one `WCoordinate` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct WProduct {
    axes: Vec<WCoordinate>,
}

impl WProduct {
    pub fn new(axes: Vec<WCoordinate>) -> Result<Self, WeightError> {
        if axes.is_empty() {
            return Err(WeightError::NoAxes);
        }
        Ok(WProduct { axes })
    }

    /// Identity weight in `d` dimensions.
    pub fn identity(d: usize) -> Result<Self, WeightError> {
        if d == 0 {
            return Err(WeightError::NoAxes);
        }
        Ok(WProduct { axes: alloc::vec![WCoordinate::identity(); d] })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, k: usize) -> &WCoordinate {
        &self.axes[k]
    }

    pub fn axes(&self) -> &[WCoordinate] {
        &self.axes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_atom() -> WCoordinate {
        WCoordinate::with_atoms(vec![(0.25, 0.2), (0.75, 0.3)]).unwrap()
    }

    fn unit_atom_half() -> WCoordinate {
        WCoordinate::with_atoms(vec![(0.5, 1.0)]).unwrap()
    }

    #[test]
    fn identity_eval() {
        let w = WCoordinate::identity();
        assert_eq!(w.eval(0.25), 0.25);
        assert_eq!(w.eval(1.25), 1.25);
        assert_eq!(w.eval(-0.5), -0.5);
        assert_eq!(w.total_increment(), 1.0);
    }

    #[test]
    fn atom_is_cadlag() {
        let w = unit_atom_half();
        assert_eq!(w.eval(0.5), 1.5);
        assert!((w.eval(0.4999) - 0.4999).abs() < 1e-12);
        assert_eq!(w.total_increment(), 2.0);
    }

    #[test]
    fn two_atom_total_and_cells() {
        let w = two_atom();
        assert!((w.total_increment() - 1.5).abs() < 1e-12);
        // n = 2: atom 0.25 falls in (0, 1/2], atom 0.75 in (1/2, 1].
        assert!((w.cell_weight(0, 2).unwrap() - 0.7).abs() < 1e-12);
        assert!((w.cell_weight(1, 2).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn gridline_atom_owned_by_left_cell() {
        let w = unit_atom_half();
        assert!((w.cell_weight(0, 2).unwrap() - 1.5).abs() < 1e-12);
        assert!((w.cell_weight(1, 2).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn atom_at_zero_wraps_into_last_cell() {
        let w = WCoordinate::with_atoms(vec![(0.0, 0.4)]).unwrap();
        let c0 = w.cell_weight(0, 4).unwrap();
        let c3 = w.cell_weight(3, 4).unwrap();
        assert!((c0 - 0.25).abs() < 1e-12);
        assert!((c3 - 0.65).abs() < 1e-12);
        let sum: f64 = (0..4).map(|i| w.cell_weight(i, 4).unwrap()).sum();
        assert!((sum - w.total_increment()).abs() < 1e-12);
    }

    #[test]
    fn piecewise_density() {
        let w = WCoordinate::new(vec![(0.0, 2.0), (0.5, 0.5)], vec![]).unwrap();
        assert!((w.total_increment() - 1.25).abs() < 1e-12);
        assert!((w.eval(0.25) - 0.5).abs() < 1e-12);
        assert!((w.eval(0.75) - 1.125).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(WCoordinate::new(vec![], vec![]), Err(WeightError::EmptySlopes));
        assert_eq!(
            WCoordinate::new(vec![(0.1, 1.0)], vec![]),
            Err(WeightError::FirstBreakpointNotZero)
        );
        assert_eq!(
            WCoordinate::new(vec![(0.0, 1.0), (0.0, 2.0)], vec![]),
            Err(WeightError::UnorderedBreakpoints)
        );
        assert_eq!(WCoordinate::new(vec![(0.0, -1.0)], vec![]), Err(WeightError::NonPositiveSlope));
        assert_eq!(WCoordinate::with_atoms(vec![(1.0, 0.1)]), Err(WeightError::AtomOutOfRange));
        assert_eq!(WCoordinate::with_atoms(vec![(0.5, 0.0)]), Err(WeightError::NonPositiveMass));
        assert_eq!(
            WCoordinate::with_atoms(vec![(0.5, 0.1), (0.5, 0.2)]),
            Err(WeightError::DuplicateAtom)
        );
        let w = WCoordinate::identity();
        assert_eq!(w.increment(0.5, 0.5), Err(WeightError::BadInterval));
        assert_eq!(w.cell_weight(2, 2), Err(WeightError::CellOutOfRange));
    }

    #[test]
    fn cell_decomposition_accounts_for_everything() {
        let w = two_atom();
        for n in [2usize, 3, 4, 7] {
            for i in 0..n {
                let dec = w.cell_decomposition(i, n);
                let piece_mass: f64 =
                    dec.pieces.iter().map(|p| p.slope * (p.y1 - p.y0)).sum();
                let atom_mass: f64 = dec.atoms.iter().map(|a| a.mass).sum();
                let cw = w.cell_weight(i, n).unwrap();
                assert!((piece_mass + atom_mass - cw).abs() < 1e-12);
                assert!((dec.weight - cw).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn increments_are_additive(a in -2.0f64..2.0, len1 in 0.01f64..1.5, len2 in 0.01f64..1.5) {
            let w = two_atom();
            let b = a + len1;
            let c = b + len2;
            let whole = w.increment(a, c).unwrap();
            let parts = w.increment(a, b).unwrap() + w.increment(b, c).unwrap();
            prop_assert!((whole - parts).abs() < 1e-10 * (1.0 + whole.abs()));
        }

        #[test]
        fn periodic_increments(x in -3.0f64..3.0) {
            let w = two_atom();
            let d = w.eval(x + 1.0) - w.eval(x);
            prop_assert!((d - w.total_increment()).abs() < 1e-10);
        }

        #[test]
        fn cell_weights_tile_the_period(n in 1usize..40) {
            let w = two_atom();
            let sum: f64 = (0..n).map(|i| w.cell_weight(i, n).unwrap()).sum();
            prop_assert!((sum - w.total_increment()).abs() < 1e-10);
        }
    }
}
