pub mod ap_loss;
pub mod config;
pub mod embed;
pub mod error;
pub mod eval;
pub mod io;
pub mod labeling;
pub mod mixup;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
