//! Automatic evaluation: Character F1, Frame Accuracy, Fréchet feature
//! distance over classifier activations, and the character-token coverage
//! ratio, plus the report/aggregation plumbing that ties them together.

mod frechet;
mod metrics;
mod report;

pub use frechet::frechet_distance;
pub use metrics::{
    character_f1, character_f1_macro, coverage_ratio, frame_accuracy, story_exact_match,
};
pub use report::{
    aggregate_reports, evaluate, load_outputs, AggregateReport, EvalConfigEcho, EvalReport,
    StoryBreakdown, StoryOutputs,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Numeric(#[from] crate::numeric::NumericError),

    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),

    #[error(transparent)]
    Tokenizer(#[from] crate::vqvae::VqVaeError),

    #[error("input lengths disagree: {0}")]
    LengthMismatch(String),

    #[error("feature sets of dim {dim} need at least {need} vectors, got {got}")]
    TooFewFeatures { dim: usize, need: usize, got: usize },

    #[error("eigendecomposition did not converge")]
    Eigen,

    #[error("every story has an empty target set T")]
    AllTargetsEmpty,

    #[error("missing generated outputs for: {}", .0.join(", "))]
    MissingOutputs(Vec<String>),

    #[error("malformed evaluation inputs: {0}")]
    Malformed(String),
}
