//! The toy comparison of hidden-state L2 matching against direct KL
//! minimization over a large random output vocabulary.

mod lab;

pub use lab::{
    run_toy, spearman, sweep, ArmStats, DimSummary, SweepCell, SweepResult, ToyArm, ToyResult, ToyRun, ToyRunConfig,
    DEFAULT_DIMS, DEFAULT_LR_SWEEP,
};
