use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::heads::CLASSIFIER;
use super::pretrain::batch_plan;
use super::{AdamW, Checkpoint, Corpus, EpochRecord, LrSchedule, StepRecord, TrainingLog, MAX_BATCH};
use crate::augment::{make_train_view, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::evaluation::{eval_batches, predict_batches};
use crate::models::{encode, EncoderConfig, HeadConfig, Model, BACKBONE_PREFIX};
use crate::objectives::cross_entropy;
use crate::rng::{derive_seed, tag};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneInit {
    /// Fresh backbone: the "no pretraining" baseline.
    Random,
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub init: FinetuneInit,
    /// Backbone used for random initialization; checkpoints carry their own.
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    pub freeze_backbone: bool,
    /// 0: take the class count of the training corpus.
    pub num_classes: usize,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            init: FinetuneInit::Random,
            encoder: EncoderConfig::default(),
            epochs: 10,
            batch_size: 64,
            lr: LrSchedule::default(),
            weight_decay: 0.05,
            freeze_backbone: false,
            num_classes: 0,
            seed: 0,
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.augmentation.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("finetuning needs at least one epoch"));
        }
        if self.batch_size == 0 || self.batch_size > MAX_BATCH {
            return Err(Error::invalid(format!("batch size {} outside 1..={MAX_BATCH}", self.batch_size)));
        }
        if self.num_classes == 1 {
            return Err(Error::invalid("classification needs at least two classes"));
        }
        if self.init == FinetuneInit::Random {
            self.encoder.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub best: Model,
    pub last: Model,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: TrainingLog,
}

/// Supervised training of a new classification head (and, unless frozen,
/// the backbone) on `train`, selecting the epoch by accuracy on `val`.
pub fn finetune(cfg: &FinetuneConfig, init: Option<&Checkpoint>, train: &Corpus, val: &Corpus) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let classes = if cfg.num_classes > 0 { cfg.num_classes } else { train.num_classes() };
    if classes < 2 {
        return Err(Error::invalid("classification needs at least two classes"));
    }
    if train.num_classes() != classes || val.num_classes() != classes {
        return Err(Error::invalid(format!(
            "configured {classes} classes, corpora have {} (train) and {} (val)",
            train.num_classes(),
            val.num_classes()
        )));
    }
    if train.is_empty() || !train.is_labeled() {
        return Err(Error::invalid("finetuning needs a non-empty labeled training split"));
    }
    let mut model = match init {
        Some(ck) => {
            let fresh = Model::new(ck.encoder.clone(), 0)?;
            let backbone = ck.student.subset(BACKBONE_PREFIX);
            if backbone.schema() != fresh.backbone().schema() {
                return Err(Error::shape("checkpoint backbone does not match its encoder configuration"));
            }
            Model {
                encoder: ck.encoder.clone(),
                heads: Vec::new(),
                params: backbone,
            }
        }
        None => Model::new(cfg.encoder.clone(), cfg.seed)?,
    };
    if cfg.augmentation.global_size != model.encoder.input_size {
        return Err(Error::invalid(format!(
            "augmentation global size {} differs from encoder input {}",
            cfg.augmentation.global_size, model.encoder.input_size
        )));
    }
    let d = model.encoder.embed_dim();
    model.replace_heads(
        HeadConfig::classification(CLASSIFIER, d, classes),
        derive_seed(cfg.seed, &[tag::HEAD_REINIT]),
    )?;

    let labels = train.dense_labels()?;
    let val_labels = val.dense_labels()?;
    let val_batches = eval_batches(val, &cfg.augmentation)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = TrainingLog::default();
    let steps_per_epoch = batch_plan(train.len(), cfg.batch_size, cfg.seed, 0).len();
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut step = 0;
    let freeze = cfg.freeze_backbone;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let plan = batch_plan(train.len(), cfg.batch_size, cfg.seed, epoch);
        let mut sum = 0.0;
        let mut lr = 0.0;
        for idx in &plan {
            lr = cfg.lr.at(step, steps_per_epoch, cfg.epochs);
            let views = idx
                .iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, &[tag::AUG_SUP, epoch as u64, i as u64]);
                    make_train_view(&train.images[i], &cfg.augmentation, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = crate::models::Batch::from_views(&views)?;
            let mut g = Graph::<f32>::new();
            let emb = encode(&mut g, &model.params, &model.encoder, &batch)?;
            let logits = model.apply_head(&mut g, &model.params, CLASSIFIER, emb)?;
            let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let lg = cross_entropy(&g.value(logits).cast(), &targets)?;
            let root = g.loss(logits, lg.loss, lg.grad.cast())?;
            let grads = g.backward(root);
            opt.step(&mut model.params, &grads, lr, |n| !(freeze && n.starts_with(BACKBONE_PREFIX)))?;
            sum += lg.loss;
            log.push_step(StepRecord {
                step,
                epoch: epoch + 1,
                loss: lg.loss,
                components: BTreeMap::new(),
            });
            step += 1;
        }
        let val_acc = if val.is_empty() {
            0.0
        } else {
            let pred = predict_batches(&model, &val_batches)?;
            pred.iter().zip(&val_labels).filter(|(p, t)| p == t).count() as f64 / val.len() as f64
        };
        if val_acc > best.2 {
            best = (model.clone(), epoch + 1, val_acc);
        }
        log.push_epoch(EpochRecord {
            epoch: epoch + 1,
            loss: sum / plan.len() as f64,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
            metrics: [("val_accuracy".to_string(), val_acc)].into(),
        })?;
    }
    Ok(FinetuneOutcome {
        best: best.0,
        last: model,
        best_epoch: best.1,
        best_val_accuracy: best.2,
        log,
    })
}
