//! Numerical laboratory for multiscale Cantor measures built over Λ(p) alphabets.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`alphabet`] — search for and certify Λ(p) subsets of `[N]^d` via exact
//!    even-exponent oracles (coefficient convolution / additive energy) and
//!    midpoint quadrature, and generate admissible multiscale parameter plans.
//! 2. [`cantor`] — build finite-stage random-translate Cantor measures μ_k from
//!    a plan and per-level alphabets, with exact integer node arithmetic,
//!    ball-condition sampling, martingale checks, and persistence.
//! 3. [`spectral`] — evaluate the Fourier transform μ̂_k exactly (tree
//!    recursion), profile its decay over frequency annuli, and fit a decay
//!    exponent.
//! 4. [`estimates`] — extension norms ‖ĝdμ_k‖_{L^p(J)}, localized restriction
//!    reports against the predicted C₀^k N_k^{d/p} T_k^{-1/2} growth, weighted
//!    norms with cube-adjusted weights, decoupling checks, and the mixed-norm
//!    inequality.
//!
//! All randomized operations take explicit seeds and are bit-reproducible for
//! a fixed seed, independent of thread count (parallel reductions use a fixed
//! chunking policy and ordered combination).

pub mod alphabet;
pub mod cantor;
pub mod error;
pub mod estimates;
pub mod quad;
pub mod spectral;

pub use error::{Error, Result};
