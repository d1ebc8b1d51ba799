//! Minimal neural-network toolkit: autodiff tape, parameter store, Adam.

mod optim;
mod params;
mod tape;

pub use optim::{Adam, WarmupLinearDecay};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, Grads, LossFn, Tape, Var};
