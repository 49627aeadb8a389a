//! Pretraining loops, finetuning, optimization and checkpoints.

mod checkpoint;
mod data;
mod finetune;
mod log;
mod optim;
mod pretrain;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::models::{Arch, EncoderConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::Corpus;
pub use finetune::{finetune, FinetuneConfig, FinetuneInit, FinetuneOutcome};
pub use log::{EpochRecord, StepRecord, TrainingLog};
pub use optim::{AdamW, DecayKind, LrSchedule};
pub use pretrain::{pretrain, pretrain_mixed, pretrain_with, PretrainOutput, RunOptions, TraceEvent};

/// Largest accepted batch and input side; keeps a run inside desk memory.
pub const MAX_BATCH: usize = 1024;
pub const MAX_INPUT: usize = 128;

/// Head names used by the pretraining methods.
pub mod heads {
    pub const PROJECTION: &str = "projection";
    pub const DINO: &str = "dino";
    pub const DECODER: &str = "decoder";
    pub const PSEUDO: &str = "pseudo";
    pub const CLASSIFIER: &str = "classifier";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simclr,
    Dino,
    Mae,
    Deepcluster,
    Mixed,
    Supervised,
    None,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Simclr,
        Method::Dino,
        Method::Mae,
        Method::Deepcluster,
        Method::Mixed,
        Method::Supervised,
        Method::None,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Simclr => "simclr",
            Method::Dino => "dino",
            Method::Mae => "mae",
            Method::Deepcluster => "deepcluster",
            Method::Mixed => "mixed",
            Method::Supervised => "supervised",
            Method::None => "none",
        }
    }

    /// Methods that never read ground-truth labels.
    pub fn is_self_supervised(self) -> bool {
        matches!(self, Method::Simclr | Method::Dino | Method::Mae | Method::Deepcluster)
    }

    pub fn needs_labels(self) -> bool {
        matches!(self, Method::Mixed | Method::Supervised)
    }

    pub fn has_teacher(self) -> bool {
        matches!(self, Method::Dino | Method::Mixed)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Hyperparameters of the individual objectives. Only those of the chosen
/// method are read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodParams {
    /// Contrastive temperature τ.
    pub temperature: f64,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    /// Local crops per image for self-distillation.
    pub local_crops: usize,
    pub teacher_momentum: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub dino_hidden: usize,
    pub dino_bottleneck: usize,
    pub prototypes: usize,
    pub mask_ratio: f64,
    pub decoder_width: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    /// Cluster count; 0 means twice the number of classes in the class table.
    pub clusters: usize,
    pub kmeans_iters: usize,
    pub supervised_weight: f64,
    pub ssl_weight: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            projection_hidden: 128,
            projection_dim: 64,
            local_crops: 4,
            teacher_momentum: 0.996,
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
            dino_hidden: 128,
            dino_bottleneck: 64,
            prototypes: 256,
            mask_ratio: 0.75,
            decoder_width: 32,
            decoder_blocks: 1,
            decoder_heads: 2,
            clusters: 0,
            kmeans_iters: 30,
            supervised_weight: 0.45,
            ssl_weight: 0.55,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub method: Method,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub params: MethodParams,
    pub augmentation: AugmentationPolicy,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// All runs are single-threaded with fixed reduction orders; the flag
    /// is recorded for provenance.
    pub deterministic: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dino,
            encoder: EncoderConfig::default(),
            epochs: 10,
            batch_size: 64,
            lr: LrSchedule::default(),
            weight_decay: 0.05,
            seed: 0,
            params: MethodParams::default(),
            augmentation: AugmentationPolicy::default(),
            checkpoint_every: 0,
            deterministic: true,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lr.validate()?;
        self.augmentation.validate()?;
        let p = &self.params;
        check(self.epochs >= 1, || "epochs must be at least 1".into())?;
        check(self.batch_size >= 1 && self.batch_size <= MAX_BATCH, || {
            format!("batch size {} outside 1..={MAX_BATCH}", self.batch_size)
        })?;
        check(self.encoder.input_size <= MAX_INPUT, || {
            format!("input size {} exceeds {MAX_INPUT}", self.encoder.input_size)
        })?;
        check(self.augmentation.global_size == self.encoder.input_size, || {
            format!(
                "augmentation global size {} differs from encoder input {}",
                self.augmentation.global_size, self.encoder.input_size
            )
        })?;
        check(self.weight_decay >= 0.0, || "weight decay must be non-negative".into())?;
        match self.method {
            Method::Simclr => {
                check(self.batch_size >= 2, || "contrastive training needs batch size >= 2".into())?;
                check(p.temperature > 0.0, || "temperature must be positive".into())?;
                check(p.projection_dim > 0 && p.projection_hidden > 0, || "projection dims must be positive".into())?;
            }
            Method::Dino | Method::Mixed => {
                check((0.0..=1.0).contains(&p.teacher_momentum), || "teacher momentum outside [0, 1]".into())?;
                check((0.0..=1.0).contains(&p.center_momentum), || "center momentum outside [0, 1]".into())?;
                check(p.teacher_temp > 0.0 && p.student_temp > 0.0, || "temperatures must be positive".into())?;
                check(p.prototypes > 0 && p.dino_hidden > 0 && p.dino_bottleneck > 0, || {
                    "distillation head dims must be positive".into()
                })?;
                if self.encoder.arch == Arch::PatchTransformer && p.local_crops > 0 {
                    check(self.augmentation.local_size % self.encoder.patch_size == 0, || {
                        format!(
                            "local crop size {} is not a multiple of patch {}",
                            self.augmentation.local_size, self.encoder.patch_size
                        )
                    })?;
                }
                if self.method == Method::Mixed {
                    crate::objectives::MixedWeights::new(p.supervised_weight, p.ssl_weight)?;
                }
            }
            Method::Mae => {
                if self.encoder.arch != Arch::PatchTransformer {
                    return Err(Error::Unsupported(
                        "masked reconstruction needs the patch_transformer encoder".into(),
                    ));
                }
                let n = self.encoder.tokens_for(self.encoder.input_size);
                let masked = (p.mask_ratio * n as f64).floor() as usize;
                check((0.0..1.0).contains(&p.mask_ratio) && masked >= 1 && masked < n, || {
                    format!("mask ratio {} must hide at least one and not all of {n} patches", p.mask_ratio)
                })?;
                check(p.decoder_heads > 0 && p.decoder_width % p.decoder_heads == 0, || {
                    "decoder width must be divisible by its heads".into()
                })?;
            }
            Method::Deepcluster => {
                check(p.kmeans_iters >= 1, || "kmeans_iters must be at least 1".into())?;
            }
            Method::Supervised | Method::None => {}
        }
        Ok(())
    }

    /// SHA-256 over every setting that influences the trained parameters.
    pub fn digest(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.checkpoint_every = 0;
        c.deterministic = true;
        let text = toml::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }

    /// Policy actually used for views; conv encoders take locals at the
    /// global size.
    pub fn view_policy(&self) -> AugmentationPolicy {
        let mut p = self.augmentation.clone();
        if self.encoder.arch == Arch::ConvResidual {
            p.local_size = p.global_size;
        }
        p
    }
}
