pub mod adjoint;
pub mod adv_hpt;
pub mod driver;
pub mod error;
pub mod linalg;
pub mod oracle;
pub mod rng;
pub mod synthetic;
pub mod trace;
pub mod verify;

pub use error::{Result, TsgError};
