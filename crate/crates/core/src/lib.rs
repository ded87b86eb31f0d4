pub mod analysis;
pub mod error;
pub mod key_agreement;
pub mod lwe;
pub mod protocol;
pub mod quantizer;
pub mod trainer;
pub mod wire;

pub use error::{Error, Result};
pub use lwe::{Ciphertext, LevelVector, LweParams, PublicMatrix, SecretKey, Seed};
pub use protocol::{Mode, RoundMetrics, RunConfig, RunSummary, Simulation};
pub use quantizer::{DitherSource, QuantConfig};
