//! GMM synthetic control estimation.
//!
//! The crate estimates synthetic control weights by the generalized method of
//! moments, using untreated "instrument" units to form moment conditions, and
//! ships the pieces needed around it: comparison estimators, partition
//! selection, block-subsampling confidence intervals and a placebo simulation
//! lab built on fitted factor models.
//!
//! Module map:
//!
//! * [`panel`]: balanced panels, role assignment, CSV ingestion.
//! * [`linalg`]: simplex QP, projections, HAC long-run variance, PCA, hull test.
//! * [`moments`]: instrument-stacked moments, weighting, Sargan–Hansen statistic.
//! * [`estimators`]: GMM, OLS, uniform, factor and Powell-style estimators.
//! * [`selection`]: sequential and two-step control/instrument partitioning.
//! * [`inference`]: block-subsampling confidence intervals.
//! * [`simlab`]: DGP fitting, simulation, treatment assignment, studies.
//! * [`cli`]: the `gmmsc` command-line front end.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod moments;
pub mod panel;
pub mod selection;
pub mod simlab;
pub mod stats;
pub mod weights;

pub use error::{EstimationError, NumericError, PanelError};
pub use estimators::{EstimationResult, Method};

pub use panel::{PanelData, RoleAssignment};
pub use weights::WeightVector;
