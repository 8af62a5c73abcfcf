//! Calculus and simulation on the d-dimensional discrete torus when each axis
//! carries a weight function `W_k` instead of plain length.
//!
//! A weight is a strictly increasing cadlag function with periodic increments,
//! represented as a piecewise-constant density plus point masses ("atoms").
//! Atoms model permeable membranes: a difference quotient taken against the
//! weight increment sees an atom as a slow interface, and every object built
//! on top (elliptic operators, interpolants, particle jump rates) inherits
//! that behaviour.
//!
//! The crate is organised bottom-up:
//!
//! * [`measure`]: the weight functions themselves and exact Stieltjes cell
//!   arithmetic;
//! * [`mesh`]: grid indexing, weighted difference quotients and inner
//!   products;
//! * [`elliptic`]: the operator `lambda*u - div(A grad_W u)` with matrix-free
//!   CG and a dense fallback, plus the dual-space representation of
//!   functionals;
//! * [`interp`]: piecewise-constant and weight-multilinear interpolants,
//!   cell-average discretizations and exact/quadrature norms;
//! * [`homogenize`]: coefficient field builders (fixed, periodic, random
//!   stationary) and effective-coefficient studies over a ladder of grids;
//! * [`exclusion`]: the exclusion process with bond conductances derived from
//!   the weights, an event-driven simulator and the macroscopic density
//!   equation it should follow.
//!
//! Everything here is deterministic: random draws go through a seeded
//! counter-based generator and replicas get disjoint streams, so identical
//! inputs reproduce identical output bit for bit.
//!
//! The crate is `no_std` (with `alloc`); IO, file formats and the command
//! line live in the companion crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod elliptic;
pub mod exclusion;
pub mod homogenize;
pub mod interp;
pub mod measure;
pub mod mesh;

pub(crate) mod linalg;
pub(crate) mod quad;
pub(crate) mod rng;
