//! Gauss-Legendre quadrature with bisection refinement. Integrands coming out
//! of the cell decompositions are smooth (the decomposition already split at
//! atoms and density breakpoints), so the refinement rarely triggers; it is
//! there for user-supplied functions with mild kinks.

use alloc::vec;

/// 16-point Gauss-Legendre rule, positive half: (abscissa, weight) on [-1,1].
const GL16: [(f64, f64); 8] = [
    (0.09501250983763744019, 0.18945061045506849629),
    (0.28160355077925891323, 0.18260341504492358887),
    (0.45801677765722738634, 0.16915651939500253819),
    (0.61787624440264374845, 0.14959598881657673208),
    (0.75540440835500303390, 0.12462897125553387205),
    (0.86563120238783174388, 0.09515851168249278481),
    (0.94457502307323257608, 0.06225352393864789286),
    (0.98940093499164993260, 0.02715245941175409485),
];

/// Fixed 16-point rule on [a, b].
pub(crate) fn gl16(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for &(x, w) in &GL16 {
        acc += w * (f(c - h * x) + f(c + h * x));
    }
    acc * h
}

fn adaptive_rec(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let whole = gl16(f, a, b);
    let m = 0.5 * (a + b);
    let halves = gl16(f, a, m) + gl16(f, m, b);
    if depth == 0 || libm::fabs(whole - halves) <= tol + 1e-14 * libm::fabs(halves) {
        halves
    } else {
        adaptive_rec(f, a, m, 0.5 * tol, depth - 1) + adaptive_rec(f, m, b, 0.5 * tol, depth - 1)
    }
}

/// Adaptive integral of `f` over `[a, b]` to absolute tolerance ~`tol`.
pub(crate) fn integrate(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    adaptive_rec(f, a, b, tol, 16)
}

fn box_rec(
    f: &mut dyn FnMut(&[f64]) -> f64,
    lo: &[f64],
    hi: &[f64],
    point: &mut [f64],
    axis: usize,
    tol: f64,
) -> f64 {
    if axis == lo.len() {
        return f(point);
    }
    let (a, b) = (lo[axis], hi[axis]);
    // Split borrows so the closure can recurse.
    let g = |y: f64, f: &mut dyn FnMut(&[f64]) -> f64, point: &mut [f64]| {
        point[axis] = y;
        box_rec(f, lo, hi, point, axis + 1, tol)
    };
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for &(x, w) in &GL16 {
        acc += w * (g(c - h * x, f, point) + g(c + h * x, f, point));
    }
    acc * h
}

/// Tensor Gauss-Legendre integral of `f` over the axis-aligned box
/// `[lo, hi)`. Cells are small and integrands smooth, so a fixed rule per
/// axis is accurate to near machine precision here.
pub(crate) fn integrate_box(f: &mut dyn FnMut(&[f64]) -> f64, lo: &[f64], hi: &[f64], tol: f64) -> f64 {
    debug_assert_eq!(lo.len(), hi.len());
    let mut point = vec![0.0; lo.len()];
    box_rec(f, lo, hi, &mut point, 0, tol)
}
