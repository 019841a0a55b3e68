//! Agreement and classification metrics for the distilled student, and the
//! paired bootstrap used to compare systems.

mod eval;
mod metrics;

pub use eval::{
    classify, first_token, first_token_agreement, write_records_csv, AudioPrompt, ClassificationTask, EvalRecord,
    PromptSource, TextPrompt, RECORDS_HEADER,
};
pub use metrics::{accuracy, paired_bootstrap, weighted_f1, BootstrapReport, DEFAULT_RESAMPLES};

#[cfg(test)]
mod tests;
