//! Layer-wise training, the self-adaptation controller (early stopping,
//! warm-up selection, pruning), encoder pretraining and downstream heads.

mod config;
mod controller;
mod encoder;
pub mod loss;
mod trainer;

pub use config::{
    BatchMode, EsEpochs, EsIterations, EsLayers, Objective, PruneConfig, TrainConfig, WarmupConfig,
};
pub use controller::{es_check_history, es_iterations_check, es_layers_check, prune, prune_layer};
pub use encoder::{
    encoder_features, pretrain_encoder, train_head, triplet_layer_gradient, Head, HeadConfig,
    HeadReport, HeadTarget, HeadTask,
};
pub use trainer::{
    train_layerwise, warmup_select, CandidateScore, LayerTrace, NfeCounter, TrainData,
    TrainReport, WarmupCandidate, WarmupReport,
};
