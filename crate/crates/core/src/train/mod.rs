pub mod adam;
pub mod loss;
pub mod schedule;
pub mod trainer;

pub use adam::Adam;
pub use loss::{branch_loss, total_loss, LossParts};
pub use schedule::{loss_coefficients, ramp_lambda, Plateau, TrainSchedule};
pub use trainer::{train, TrainOptions, TrainReport};
