pub mod classify;
pub mod error;
pub mod features;
pub mod flow;
pub mod gmm;
pub mod hmm;
pub mod io;
pub mod model;
pub mod nmm;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod selftest;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
