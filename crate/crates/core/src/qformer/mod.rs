//! The Q-Former adapter and the toy ASR model whose decoder seeds it.

mod adapter;
mod donor;

pub use adapter::{init_from_decoder, InitMode, QFormerAdapter, QFormerSpec, PROJECTION_INIT_STD, QUERY_INIT_STD};
pub use donor::{pretrain_donor, AsrModel, DecoderSpec, DonorConfig, DonorDecoder, DonorReport};
