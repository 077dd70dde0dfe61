//! Model checkpoint and training-data selection from a few unlabeled
//! target samples.
//!
//! Each layer's activation distribution is summarized by four aggregated
//! moments ([`moments`]). Tracking those moments across an ordered
//! hyperparameter grid gives one trajectory per input domain
//! ([`trajectory`]). Interval correlations between the source and target
//! trajectories ([`coherence`]) locate the point where the two stop
//! moving together, which drives checkpoint selection ([`selection`]) and
//! pre-training data selection ([`dataselect`]).
//!
//! [`harness`] trains tiny networks on synthetic shifted tasks to check
//! the whole pipeline end to end, and [`io`] holds the interchange formats.

pub mod coherence;
pub mod dataselect;
pub mod error;
pub mod harness;
pub mod io;
pub mod moments;
pub mod selection;
pub mod trajectory;

pub use coherence::{best_split, coherence_factor, coherence_matrix, pearson_interval, CoherenceMatrix, Split, SplitScore};
pub use error::{Error, Result};
pub use moments::{
    aggregated_moments, aggregated_moments_fast, validate_activation_matrix, ActivationMatrix, Domain, FlattenMode,
    Moment, MomentVector, ValidationVerdict, Violation,
};
pub use selection::{
    layer_stop_and_strength, select_two_sided, select_unweighted, select_weighted, weighted_vote, Aggregation,
    SelectionMode, SelectionResult, WeightedVote,
};
pub use trajectory::{build_trajectory, HyperparameterGrid, Trajectory};
