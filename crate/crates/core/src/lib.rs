//! Directional limiting-absorption solver for periodic elliptic equations
//! `-∇·(A∇u) + Vu - λu = f` in one and two dimensions.
//!
//! The pipeline runs from Fourier-coefficient media ([`medium`]) through cell
//! eigenproblems ([`cell`]) and band sampling ([`bands`]) to level-set
//! classification along an observation direction ([`fermi`]), and finally to
//! the deformed-contour representation of the outgoing solution ([`lap`]).

pub mod bands;
pub mod cell;
pub mod error;
pub mod fermi;
pub mod io;
pub mod lap;
pub mod lattice;
pub mod medium;
pub mod quadrature;
pub mod special;
pub mod verify;

pub use error::{LapError, Result};
pub use num_complex::Complex64 as C64;
