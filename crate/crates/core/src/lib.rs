//! Robust output-feedback trajectory synthesis with system-level synthesis, and
//! the inverse problem: recovering the feedback gain, the nominal trajectory and
//! unknown parametric constraints from noisy closed-loop demonstrations.

pub mod demo;
pub mod error;
pub mod forward;
pub mod inverse;
pub mod io;
pub mod linalg;
pub mod model;
pub mod opt;
pub mod sls;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
