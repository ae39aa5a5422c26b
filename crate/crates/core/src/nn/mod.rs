//! Parameter storage, optimizers, learning-rate schedules and small layer helpers.

mod layers;
mod optim;
mod params;

pub use layers::{Conv1dLayer, LayerNormLayer, Linear};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{ParamId, ParamStore};
