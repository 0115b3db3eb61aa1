pub mod basis;
pub mod bridge;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod fit;
pub mod io;
pub mod latent;
pub mod marginal;
pub mod normal;
pub mod quad;
pub mod rank;
pub mod simgen;

pub use error::{FsgcError, Result};
