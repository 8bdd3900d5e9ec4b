//! Language-model pipeline: the toy decoder, low-rank adaptation, sequence
//! splicing, training stages, decoding, and response parsing.

pub mod checkpoint;
pub mod decode;
pub mod decoder;
pub mod lora;
pub mod loss;
pub mod model;
pub mod parse;
pub mod sequence;
pub mod train;

pub use checkpoint::Checkpoint;
pub use decode::{decode, sample_token, DecodeCfg};
pub use decoder::{Decoder, DecoderCfg};
pub use lora::{lora_backward, lora_forward, LoraAdapter, LoraTarget};
pub use loss::{answer_cross_entropy, loss};
pub use model::{LmModel, Prediction};
pub use parse::{parse_response, Label, ParseCfg};
pub use sequence::{append_answer, splice, splice_backward, AnswerTarget, SpliceMap};
pub use train::{pretrain_encoders, train, train_with_progress, PreparedSample, PretrainModel, TrainTrace};
