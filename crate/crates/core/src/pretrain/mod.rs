//! Student/teacher self-distillation with masked image modeling.

mod gradcheck;
mod losses;
mod trainer;

pub use gradcheck::{combined_loss_gradcheck, CombinedCheck};
pub use losses::{
    dino_loss, dino_loss_graph, dino_pairs, ema_update, mim_loss, mim_loss_graph, pretrain_base_lr, pretrain_base_lr_with,
    teacher_distribution, total_loss, update_center, MimLoss, MimValue,
};
pub use trainer::{
    assemble, build_item, checkpoint_name, config_hash, run_pretrain, student_loss, teacher_forward, teacher_targets, train_step, ItemViews,
    LossWeights, OptimizerKind, PretrainConfig, PretrainState, PretrainSummary, RunOptions, StepMetrics, StepSchedule, StudentBatch,
    StudentLoss, TeacherTargets,
};
