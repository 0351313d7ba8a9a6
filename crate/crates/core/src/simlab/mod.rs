//! Placebo-study pipeline: fit a factor process to a panel, simulate panels
//! from it, assign treatment and score estimators.

pub mod ar;
pub mod assign;
pub mod dgp;
pub mod study;

pub use ar::{fit_ar_cls, is_stationary, select_ar, ArModel, BURN_IN, MAX_AR_ORDER};
pub use assign::{assign_treatment, fit_logistic, Assignment, AssignmentMode, LogisticFit, TreatmentSampler};
pub use dgp::{clustered_loadings, fit_dgp, simulate_panel, simulate_units, FittedDGP, Simulated, Truth};
pub use study::{run_study, CellReport, EstimatorMetrics, RepDetail, SimReport, StudyDesign, StudyEstimator};
