//! Base velocity field, one-step flow map, and their training loops.

mod data;
mod model;
mod train;

pub use data::{MixtureSpec, ToyDistribution};
pub(crate) use model::step_along;
pub use model::{Backbone, BackboneConfig, DepthTrace, FlowMapModel, VelocityField};
pub use train::{
    continue_base_training, continue_freeflow, freeflow_distill, freeflow_loss, freeflow_target,
    integrate_ode, integrate_with, sample_freeflow_batch, train_base_velocity, BaseTrainConfig,
    FreeFlowConfig, LossRow, Solver,
};
