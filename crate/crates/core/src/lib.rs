//! Local calibration analysis for probabilistic classifiers.
//!
//! The crate measures how well confidence scores track accuracy, both
//! globally (ECE/MCE, NLL, Brier) and locally: each sample's calibration is
//! judged against kernel-weighted neighbors sharing its confidence bin, which
//! exposes miscalibration that global averages wash out. A kernel-weighted
//! recalibration rule resets confidences to the local accuracy of a reference
//! set, alongside the standard global baselines (histogram binning,
//! temperature scaling, isotonic regression, and group-wise wrappers).
//! Downstream consequences are quantified with group-wise calibration gaps
//! and a selective-prediction cost/rejection simulation, and a seeded
//! synthetic generator provides analytically known ground truth for all of
//! it.

pub mod binning;
pub mod dataset;
pub mod decision;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod recalib;
pub mod synth;

pub use binning::{BinKind, BinningScheme};
pub use dataset::{Dataset, FeatureMatrix, PredictionRecord};
pub use error::{CalibError, Result};
pub use kernel::{KernelFamily, KernelSpec, PcaTransform};
pub use metrics::{BinStats, GroupMce, LceReport, QueryPoint};
pub use recalib::{
    HbState, IrState, LoReState, Recalibrator, RecalibratedDataset, TsState,
};
pub use synth::{McEstimate, SynthSpec, SynthTruth};
