//! Gradient-based learners: PPO, TD3, GAE, optimizers, replay and observation normalization.

mod buffer;
mod gae;
mod normalize;
mod optim;
mod policy;
pub mod ppo;
pub mod td3;

pub use buffer::ReplayBuffer;
pub use gae::gae;
pub use normalize::{random_observations, vbn_fit, ObsNorm, ObsNormMode, STD_FLOOR};
pub use optim::{adam_step, clip_global_norm, sgd_step, AdamConfig, AdamState};
pub use policy::{argmax, gaussian_log_prob, log_softmax, ActMode, MlpPolicy, RandomPolicy};
pub use ppo::{build_batch, ppo_update, PpoAgent, PpoBatch, PpoConfig, PpoLosses};
pub use td3::{soft_update, Actor, Td3Agent, Td3Config, Td3Losses, Td3Nets, TwinCritic};
