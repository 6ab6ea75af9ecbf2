//! Core library for simulating nested entanglement-distribution networks on
//! truncated bosonic Hilbert spaces.
//!
//! The crate is layered bottom-up:
//!
//! - [`liouville`]: truncated-Fock operator/superoperator algebra — tensor
//!   products, partial traces, channel exponentials, resolvent solves.
//! - [`elementary`]: physical builders for elementary network segments and
//!   the probabilistic merging (entanglement-swapping) superoperators, for
//!   both the linear-chain and the triangle-lattice protocols.
//! - [`engine`]: the semi-analytic level recursion. Completion statistics of
//!   one nesting level are evaluated in the Laplace domain; the average
//!   output state is the image at s = 0 and the mean generation time is the
//!   negated s-derivative of its trace at s = 0.
//! - [`montecarlo`]: an exact discrete-event trajectory sampler of the same
//!   protocols, used to cross-validate the engine.
//! - [`keyrate`]: logical projection, GHZ-diagonal coefficients, error
//!   rates, and the asymptotic secret-key rate.
//! - [`optimize`]: derivative-free parameter optimization and grid sweeps
//!   over hardware/protocol parameters.
//!
//! All numerical conventions (vectorization order, mode ordering, default
//! tolerances) are documented in [`liouville`] and shared by every module.

pub mod elementary;
pub mod engine;
pub mod error;
pub mod keyrate;
pub mod liouville;
pub mod montecarlo;
pub mod optimize;

pub use error::{Error, Result};
