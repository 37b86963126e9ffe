pub mod agents;
pub mod controller;
pub mod domain;
pub mod error;
pub mod fsutil;
pub mod neural_adjoint;
pub mod optim;
pub mod oracle;
pub mod surrogate;

pub use error::{Error, Result};
