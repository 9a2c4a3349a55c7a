//! Shared fixtures for the criterion benchmarks.

use aeroseg_core::data::{generate_synthetic, Dataset, SynthConfig};
use aeroseg_core::encoder::EncoderConfig;
use aeroseg_core::model::{ModelConfig, SegModel};

/// A small but realistically-shaped model for forward benchmarks.
pub fn bench_model() -> SegModel<f32> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            width: 96,
            blocks: 2,
            heads: 2,
            mlp_ratio: 4,
            pe_source_side: 256,
            shallow_tap: 0,
            in_channels: 3,
        },
        decoder_heads: 2,
        twoway_depth: 2,
        c_refine: 32,
        freeze_backbone: false,
    };
    SegModel::new(cfg, 1234).expect("valid bench config")
}

pub fn bench_dataset() -> Dataset {
    generate_synthetic(
        &SynthConfig {
            images: 8,
            instances_per_image: 3,
            img_side: 256,
            ..SynthConfig::default()
        },
        99,
    )
    .expect("valid bench dataset")
}
