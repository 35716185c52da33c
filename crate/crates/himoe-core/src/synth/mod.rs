//! Synthetic multi-embodiment manipulation data: planar arms, scripted
//! expert demonstrations, dataset assembly, and closed-loop evaluation.

pub mod arm;
pub mod dataset;
pub mod embodiments;
pub mod rollout;

pub use arm::PlanarArm;
pub use dataset::{build_dataset, Dataset, DatasetManifest, MixtureEntry, NormScope, TrainExample};
pub use embodiments::{
    default_embodiments, embodiment_by_id, generate_episode, sample_task, Embodiment, Episode,
    Task, DELTA, GRIP_CLOSED, INSTR_LEN, MAX_STREAMS, OBS_DIM, VOCAB_SIZE,
};
pub use rollout::{rollout_eval, Policy, RolloutConfig, RolloutObs, ScriptedPolicy, ZeroPolicy};
