//! Loss functions, checkpoint serialization, and the two training phases.

pub mod checkpoint;
pub mod losses;
pub mod phases;

pub use checkpoint::{load_model, read_file, restore, snapshot, write_file, RunMeta};
pub use losses::{
    charbonnier, dice_loss, size_loss, total_loss, AblationFlags, LossTerms, LossWeights,
    CHARBONNIER_EPS, DICE_SMOOTH,
};
pub use phases::{
    mean_recon_loss, run_pretrain, run_supervised, Phase, PhaseConfig, TrainState, BEST_CKPT,
    LAST_CKPT, METRICS_CSV, METRICS_CSV_HEADER,
};
