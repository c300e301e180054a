pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod net;

pub use config::{TecNetConfig, Toggles, STAGES};
pub use net::{Outputs, TecNet};
