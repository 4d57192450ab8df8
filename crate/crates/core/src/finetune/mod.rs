//! Supervised re-identification fine-tuning.

mod losses;
mod sampler;
mod trainer;

pub use losses::{
    bnneck_forward, bnneck_train_graph, id_cross_entropy, id_cross_entropy_graph, mine_hard, smoothed_targets, triplet_batch_hard,
    triplet_batch_hard_graph, HardTriplets, NeckState, TRIPLET_MARGIN,
};
pub use sampler::{pk_sample, IdentityIndex};
pub use trainer::{
    augment, finetune_base_lr, prepare_image, run_finetune, FinetuneConfig, FinetuneMetrics, FinetuneSummary, ReidModel, FINETUNE_CHECKPOINT,
};
