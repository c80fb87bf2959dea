#![allow(dead_code)]

use lightsleep::nn::{BlockConfig, ConvSpec, LayerConfig, ModelConfig};
use lightsleep::EPOCH_LEN;

/// A narrow model over full 3000-sample epochs, cheap enough for unit-style
/// training runs.
pub fn small_epoch_config() -> ModelConfig {
    let block = LayerConfig {
        conv: ConvSpec::new(8, 8, 3, 2, 1, 1),
        shuffle_groups: 2,
    };
    ModelConfig {
        input_channels: 1,
        input_len: EPOCH_LEN,
        n_classes: 5,
        stem: LayerConfig {
            conv: ConvSpec::new(1, 8, 50, 1, 25, 0),
            shuffle_groups: 2,
        },
        blocks: vec![BlockConfig { layers: [block; 2] }],
        dropout_p: 0.2,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
