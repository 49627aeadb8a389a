#![allow(dead_code)]

pub mod oracles;

use sslwb::augment::AugmentationPolicy;
use sslwb::dataset::{render_sample, SyntheticCorpusSpec};
use sslwb::engine::{Corpus, FinetuneConfig, Method, PretrainConfig};
use sslwb::models::EncoderConfig;

/// Labeled synthetic corpus of `classes × per_class` images, drawing
/// samples `offset..offset + per_class` of each class.
pub fn corpus(classes: usize, per_class: usize, offset: usize, size: u32, seed: u64) -> Corpus {
    let spec = SyntheticCorpusSpec::uniform(classes, offset + per_class, size, seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for i in offset..offset + per_class {
            images.push(render_sample(&spec, c, i));
            labels.push(Some(c));
        }
    }
    Corpus::new(images, labels, (0..classes).map(|c| format!("class-{c}")).collect()).unwrap()
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        heads: 2,
        ..EncoderConfig::transformer(1, 16, 8, 16)
    }
}

pub fn tiny_policy() -> AugmentationPolicy {
    AugmentationPolicy {
        global_size: 16,
        local_size: 8,
        ..AugmentationPolicy::default()
    }
}

/// Seconds-scale configuration for structural tests.
pub fn tiny_pretrain(method: Method) -> PretrainConfig {
    let mut c = PretrainConfig {
        method,
        encoder: tiny_encoder(),
        epochs: 2,
        batch_size: 8,
        seed: 11,
        augmentation: tiny_policy(),
        ..PretrainConfig::default()
    };
    let p = &mut c.params;
    p.projection_hidden = 16;
    p.projection_dim = 8;
    p.dino_hidden = 16;
    p.dino_bottleneck = 8;
    p.prototypes = 16;
    p.local_crops = 2;
    p.decoder_width = 8;
    p.clusters = 4;
    p.kmeans_iters = 10;
    c
}

pub fn tiny_finetune() -> FinetuneConfig {
    FinetuneConfig {
        encoder: tiny_encoder(),
        epochs: 2,
        batch_size: 8,
        seed: 5,
        augmentation: tiny_policy(),
        ..FinetuneConfig::default()
    }
}

pub const SSL: [Method; 4] = [Method::Simclr, Method::Dino, Method::Mae, Method::Deepcluster];
