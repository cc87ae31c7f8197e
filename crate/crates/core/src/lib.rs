//! Joint tests for differential mean and differential variability of
//! DNA methylation markers in case/control studies.

pub mod data;
pub mod error;
pub mod estimation;
pub mod hypothesis;
pub mod pipeline;
pub mod simulation;

pub use data::*;
pub use error::{Error, Result};
pub use estimation::{joint_covariance, KdeConfig, MarkerFitter};
pub use hypothesis::{
    chi_bar_sq_pvalue, constrained_mle, constrained_test, levene_test, pauc_estimate, pauc_test,
    two_df_wald, welch_t_test, ActiveRegion, ConstrainedHypothesis, ConstrainedSolution,
    PaucEstimate, TieRule,
};
