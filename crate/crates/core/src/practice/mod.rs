//! Training-free group-relative practice: grouped rollouts, relative scoring,
//! experience distillation and the epoch loop.

mod bank;
mod distill;
mod group;
mod run;

pub use bank::{
    clip_words, BankEdit, BankEditError, BankSnapshot, EditOutcome, ExperienceBank,
    ExperienceEntry, DEFAULT_CAPACITY, EXPERIENCE_HEADER, MAX_ENTRY_WORDS,
};
pub use distill::{
    distill_semantic_advantage, parse_edits, summarize_trajectory, DistillError, DISTILL_PROMPT,
};
pub use group::{rollout_group, score_group, RolloutGroup, ScoreMode, DEFAULT_GROUP_CONCURRENCY};
pub use run::{
    load_snapshot, practice_run, snapshot_path, test_with_bank, EditLog, EpochStats,
    PracticeOptions, PracticeReport, TaskFailure,
};

#[derive(Debug, Clone, thiserror::Error)]
pub enum PracticeError {
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("task '{0}' has no ground truth")]
    MissingGroundTruth(String),
    #[error("the dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error("{0}")]
    Io(String),
}
