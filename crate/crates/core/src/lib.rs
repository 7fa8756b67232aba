//! Search-visibility measurement and self-preferencing tests for
//! marketplace panels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fe_glm;
pub mod panel;
pub mod report;
pub mod robustness;
pub mod sp_tests;
pub mod stats;
pub mod synthetic;
pub mod visibility;

pub use fe_glm::{Design, FitError, FitResult, ModelSpec, PercentEffect};
pub use panel::{Panel, PanelObservation, Variable};
pub use sp_tests::{Conclusion, TestKind, TestReport, Verdict};
pub use synthetic::{GroundTruth, SimulationConfig};
pub use visibility::{EcpCurve, KeywordRankRecord, VisibilityTable};
