#![allow(dead_code)]

use lincir_core::encoder::{DualEncoder, EncoderConfig, Parameters};
use lincir_core::experiment::world_vocabulary;
use lincir_core::text::Vocabulary;

/// An untrained, frozen encoder of width 16 over the synthetic world's words.
pub fn tiny_encoder(seed: u64) -> (DualEncoder, Vocabulary) {
    let vocab = world_vocabulary();
    let config = EncoderConfig {
        d_text: 16,
        d_image: 16,
        d_joint: 16,
        n_layers_text: 1,
        n_heads_text: 2,
        n_heads_image: 2,
        ..EncoderConfig::desk(vocab.len())
    };
    let mut encoder = DualEncoder::init(config, seed).unwrap();
    encoder.quantize();
    encoder.freeze();
    (encoder, vocab)
}
