//! Small dense LU with partial pivoting. Used for the dense solver fallback
//! on small grids and for Markov stationary distributions; kept in-crate so
//! the core stays `no_std`.

use alloc::vec;
use alloc::vec::Vec;

pub(crate) struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    /// Factors a row-major `n x n` matrix. Fails on (numerically) singular
    /// input.
    pub(crate) fn factor(mut a: Vec<f64>, n: usize) -> Result<Self, ()> {
        debug_assert_eq!(a.len(), n * n);
        let mut piv = vec![0usize; n];
        for col in 0..n {
            let mut p = col;
            let mut best = libm::fabs(a[col * n + col]);
            for r in (col + 1)..n {
                let v = libm::fabs(a[r * n + col]);
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(());
            }
            piv[col] = p;
            if p != col {
                for c in 0..n {
                    a.swap(col * n + c, p * n + c);
                }
            }
            let d = a[col * n + col];
            for r in (col + 1)..n {
                let m = a[r * n + col] / d;
                a[r * n + col] = m;
                if m != 0.0 {
                    for c in (col + 1)..n {
                        a[r * n + c] -= m * a[col * n + c];
                    }
                }
            }
        }
        Ok(DenseLu { n, lu: a, piv })
    }

    pub(crate) fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        // The factorization swaps whole rows, so P A = L U; apply P to b in
        // full before substituting.
        for col in 0..n {
            let p = self.piv[col];
            if p != col {
                b.swap(col, p);
            }
        }
        for col in 0..n {
            let bc = b[col];
            if bc != 0.0 {
                for r in (col + 1)..n {
                    b[r] -= self.lu[r * n + col] * bc;
                }
            }
        }
        for col in (0..n).rev() {
            b[col] /= self.lu[col * n + col];
            let bc = b[col];
            if bc != 0.0 {
                for r in 0..col {
                    b[r] -= self.lu[r * n + col] * bc;
                }
            }
        }
    }
}

/// One-shot dense solve; `a` is row-major `n x n`, `b` of length `n`.
pub(crate) fn solve_dense(a: Vec<f64>, n: usize, b: &mut [f64]) -> Result<(), ()> {
    DenseLu::factor(a, n)?.solve(b);
    Ok(())
}
