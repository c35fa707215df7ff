//! Linear adapters over frozen base embeddings and everything needed to
//! train them: hyperparameters, Adam with a warm-up/cosine schedule, the
//! epoch loop, checkpoints and a finite-difference gradient checker.

pub mod adapter;
pub mod checkpoint;
pub mod gradcheck;
pub mod hyper;
pub mod optim;
pub mod train;

pub use adapter::{adapter_forward, Adapter, AdapterGrad, AdapterParams, ParamGrads};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use gradcheck::{grad_check, GradCheckResult, LossSelector};
pub use hyper::{Ablation, HyperParams};
pub use optim::{Adam, LrSchedule};
pub use train::{
    evaluate_params, evaluate_step, mine_dataset, plan_step, train, train_data, train_with_eval, Banks, EpochRecord, RngState,
    StepOutput, StepPlan, TrainData, TrainOutcome, TrainReport,
};
