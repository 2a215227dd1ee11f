pub mod attention;
pub mod backbone;
pub mod bench;
pub mod error;
pub mod learner;
pub mod numkernel;
pub mod taskdist;

pub use error::{Error, Result};
