pub mod config;
pub mod lora;
pub mod mask;
pub mod model;
pub mod tokenizer;

pub use config::{EncoderConfig, MaskMode};
pub use lora::{apply_lora, merge_lora, LoraAdapter};
pub use mask::build_attention_mask;
pub use model::{encode, encode_on, EncoderOutput, EncoderVars};
pub use tokenizer::{tokenize, TokenSequence, BOS, EOS, MASK, PAD};

#[cfg(test)]
mod tests;
