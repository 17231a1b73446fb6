//! Sketched feature×gradient kernel representations of trained networks and
//! the CKA / NBS similarity indices used to compare them.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod krr;
pub mod linalg;
pub mod representation;
pub mod similarity;
pub mod sketch;
pub mod testbed;
pub mod verify;

pub use error::{Error, Result};
