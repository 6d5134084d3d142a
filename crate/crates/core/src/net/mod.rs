//! The unrolled MAR network: T stages of K-net → M-net → X-net with
//! learned proximal operators wrapped around the analytic half-steps of
//! the artifact model, plus the warm-start block, exact reverse-mode
//! gradients, a desk-scale trainer and a checkpoint format.

pub mod checkpoint;
pub mod conv2d;
pub mod forward;
pub mod layers;
pub mod params;
pub mod tape;
pub mod train;

pub use forward::{
    forward, loss_value, reconstruct, scene_loss_and_grads, stage_images, ForwardPass,
    LossWeights, NetState,
};
pub use layers::{Mode, ProxNetKParams, ProxNetTensorParams, ResBlockParams};
pub use params::{NetHyper, NetworkParams, StageParams};
pub use train::{train, AdamState, TrainConfig, TrainLog};
