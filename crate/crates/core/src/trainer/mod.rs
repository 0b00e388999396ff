//! Model assembly, optimisation, evaluation, and checkpoints.

mod checkpoint;
mod model;
mod sgd;
mod train;

pub use checkpoint::{config_text, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use model::{argmax, cross_entropy, Ablation, ForwardTrace, Model, ModelConfig, SampleGrad, MODEL_KEYS};
pub use sgd::{sgd_scalar, sgd_step, SgdConfig, SgdState};
pub use train::{
    evaluate, history_csv, train, EpochRecord, Evaluation, TrainConfig, TrainState, Trainer, HISTORY_HEADER,
    PLATEAU_DELTA, TRAIN_KEYS,
};
