//! Bootstrap tomography at desk scale: a simulated substrate is trained through
//! per-site encoder networks and a decoder to run a universal two-qubit gate set,
//! and fragment tomography checks that bounded circuits pin down all circuits.

pub mod circuits;
pub mod codec;
pub mod error;
pub mod gates;
pub mod lattice;
pub mod nets;
pub mod oracle;
pub mod stuff;
pub mod tomography;
pub mod training;

pub use error::{Error, Result};
