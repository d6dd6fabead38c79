//! The EVD-aware query rewriter: action space, renderer, log-linear policy,
//! its training losses, and the two-phase training loop.

mod loss;
mod policy;
mod space;
mod train;

use thiserror::Error;

pub use loss::{
    align_loss, align_loss_prepared, bt_probability, inverse_temperatures, pro_loss, pro_loss_on_scores, sft_loss,
    AlignBatch, PreferenceList, PreparedPreference, SftExample, TIE_EPSILON,
};
pub use policy::{PreparedSequence, RewritePolicy, DEFAULT_FEATURE_DIM};
pub use space::{
    action_space, ActionSpace, Choice, RewriteAction, RewriteCandidate, SenseOption, Slot, Template,
};
pub use train::{train_rewriter, Phase, RewardMode, RewriterTrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("illegal rewrite action: {0}")]
    IllegalAction(String),
    #[error("preference list has tied or unordered rewards")]
    DegenerateRanking,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}
