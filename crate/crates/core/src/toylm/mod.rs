//! The frozen teacher LM and the synthetic language it is pretrained on.

mod corpus;
mod model;
mod pretrain;

pub use corpus::{CorpusSpec, Language, SyntheticCorpus, ASSISTANT, BOS, EOS, FIRST_CONTENT, PROMPT_PREFIX, PROMPT_SUFFIX, USER};
pub use model::{argmax, LmSpec, ToyLm};
pub use pretrain::{perplexity, pretrain_lm, LmReport, LmTrainConfig, PERPLEXITY_MARGIN};
