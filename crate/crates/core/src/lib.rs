//! Numerics for Benedicks–Carleson quadratic maps f(x) = 1 − a x²:
//! parameter certification, bound-period partitions, induced Markov
//! systems, Birkhoff spectra via equilibrium-state families, and
//! Lebesgue large-deviation rates.

pub mod binding;
pub mod certify;
pub mod error;
pub mod inducing;
pub mod laps;
pub mod ldp;
pub mod map;
pub mod precision;
pub mod serde_ext;
pub mod stats;
pub mod thermo;

pub use error::{Error, Result};
pub use map::{Observable, QuadraticMap};
pub use precision::Big;
