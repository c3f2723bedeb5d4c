//! Equilibrium selection for small-noise controlled diffusions under
//! ergodic control.

pub mod bench;
pub mod dynamics;
pub mod error;
pub mod hjb;
pub mod matctrl;
pub mod simulate;

pub use error::{Error, Result};
