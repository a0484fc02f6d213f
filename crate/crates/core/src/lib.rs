//! Lattice Markov-chain approximations of symmetric pure-jump processes.
//!
//! The crate builds conductances on the scaled lattice `k⁻¹ℤ^d`, the
//! associated discrete Dirichlet forms and generators, transfer operators
//! between lattice and continuum `L²` spaces, a Fourier oracle for the limit
//! process on the torus, path samplers and random-conductance fields.

pub mod conductance;
pub mod error;
pub mod forms;
pub mod kernels;
pub mod lattice;
pub mod paths;
pub mod quadrature;
pub mod rcm;
pub mod resolvent;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod transfer;

pub use error::{JumpGridError, Result};
pub use kernels::{JumpKernel, PhiProfile};
pub use lattice::{AgConstants, LatticeWindow, Topology};
