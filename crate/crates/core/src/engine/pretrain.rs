use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::heads::{CLASSIFIER, DECODER, DINO, PROJECTION, PSEUDO};
use super::{
    save_checkpoint, AdamW, Checkpoint, Corpus, EpochRecord, Method, PretrainConfig, RngState, StepRecord,
    TrainingLog, CHECKPOINT_VERSION,
};
use crate::augment::{make_eval_view, make_mask, make_multicrop, make_train_view, make_view_pair, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::models::{
    decode_masked, ema_update, encode, encode_visible, head_prefix, patchify, unpatchify, Batch, HeadConfig, Model,
    TeacherState, BACKBONE_PREFIX,
};
use crate::objectives::{
    cross_entropy, deepcluster_loss, dino_loss_from_logits, dino_pairs, kmeans, mae_loss, mixed_loss, nt_xent,
    sharpen_and_center, update_center, MaeTarget, MixedWeights, PseudoLabels, SimClrBatchRepr, Temperature,
};
use crate::rng::{derive_seed, stream, tag};
use crate::tensor::{Gradients, Graph, Mat, Var};

/// Observable events of a training run, in the order they happen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    EpochStart(usize),
    Recluster(usize),
    Forward,
    Loss,
    Backward,
    StudentUpdate,
    TeacherUpdate,
    CenterUpdate,
    EpochEnd(usize),
    Checkpoint(usize),
}

#[derive(Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint; its config digest must match.
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete.
    pub stop_after: Option<usize>,
    /// Destination of interval checkpoints (`epoch-NNNN.ckpt`).
    pub checkpoint_dir: Option<PathBuf>,
    /// Record a [`TraceEvent`] sequence.
    pub trace: bool,
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
    pub trace: Vec<TraceEvent>,
}

pub fn pretrain(cfg: &PretrainConfig, corpus: &Corpus) -> Result<PretrainOutput> {
    pretrain_with(cfg, corpus, RunOptions::default())
}

/// Multitask pretraining: classification head plus self-distillation head
/// on a shared backbone, weighted `ω1·L_sup + ω2·L_ssl`.
pub fn pretrain_mixed(cfg: &PretrainConfig, corpus: &Corpus) -> Result<PretrainOutput> {
    if cfg.method != Method::Mixed {
        return Err(Error::invalid(format!("pretrain_mixed called with method {}", cfg.method)));
    }
    pretrain(cfg, corpus)
}

pub fn pretrain_with(cfg: &PretrainConfig, corpus: &Corpus, opts: RunOptions) -> Result<PretrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if cfg.method.needs_labels() && !corpus.is_labeled() {
        return Err(Error::invalid(format!(
            "method {} can only be used when the pretraining dataset is annotated",
            cfg.method
        )));
    }
    if cfg.method == Method::Simclr && corpus.len() < 2 {
        return Err(Error::invalid("contrastive training needs at least two images"));
    }
    let mut run = Run::new(cfg, corpus, opts.trace)?;
    let mut log = TrainingLog::default();
    let (mut epoch, mut step) = (0, 0);
    if let Some(ck) = opts.resume {
        (epoch, step) = run.restore(ck)?;
    }
    let total_epochs = if cfg.method == Method::None { 0 } else { cfg.epochs };
    let steps_per_epoch = batch_plan(corpus.len(), cfg.batch_size, cfg.seed, 0).len();
    while epoch < total_epochs && opts.stop_after.is_none_or(|s| epoch < s) {
        let started = Instant::now();
        run.mark(TraceEvent::EpochStart(epoch + 1));
        let mut metrics = BTreeMap::new();
        if cfg.method == Method::Deepcluster {
            if let Some(r) = run.recluster(epoch)? {
                metrics.insert("reassigned".to_string(), r);
            }
        }
        let mut sum = 0.0;
        let mut comp_sum: BTreeMap<String, f64> = BTreeMap::new();
        let mut lr = 0.0;
        let plan = batch_plan(corpus.len(), cfg.batch_size, cfg.seed, epoch);
        for idx in &plan {
            lr = cfg.lr.at(step, steps_per_epoch, cfg.epochs);
            let out = run.step(epoch, idx)?;
            run.update(&out, lr)?;
            sum += out.loss;
            for (k, v) in &out.components {
                *comp_sum.entry(k.clone()).or_default() += v;
            }
            log.push_step(StepRecord {
                step,
                epoch: epoch + 1,
                loss: out.loss,
                components: out.components,
            });
            step += 1;
        }
        let n = plan.len() as f64;
        metrics.extend(comp_sum.into_iter().map(|(k, v)| (k, v / n)));
        epoch += 1;
        log.push_epoch(EpochRecord {
            epoch,
            loss: sum / n,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
            metrics,
        })?;
        run.mark(TraceEvent::EpochEnd(epoch));
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&run.checkpoint(epoch, step), &dir.join(format!("epoch-{epoch:04}.ckpt")))?;
                run.mark(TraceEvent::Checkpoint(epoch));
            }
        }
    }
    let checkpoint = run.checkpoint(epoch, step);
    Ok(PretrainOutput {
        checkpoint,
        log,
        trace: run.trace.unwrap_or_default(),
    })
}

/// Shuffled minibatches of one epoch. Incomplete trailing batches are
/// dropped unless the corpus fits in a single batch.
pub(super) fn batch_plan(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[tag::SHUFFLE, epoch as u64]));
    if n <= batch {
        return vec![order];
    }
    order.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

struct StepOut {
    loss: f64,
    components: BTreeMap<String, f64>,
    grads: Gradients<f32>,
    teacher_logits: Option<Mat<f64>>,
}

struct Run<'a> {
    cfg: &'a PretrainConfig,
    corpus: &'a Corpus,
    policy: AugmentationPolicy,
    model: Model,
    teacher: Option<TeacherState>,
    opt: AdamW,
    assignments: Option<Vec<usize>>,
    clusters: usize,
    trace: Option<Vec<TraceEvent>>,
}

fn seed_of(base: u64, stream_tag: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(base, &[stream_tag, epoch as u64, index as u64])
}

impl<'a> Run<'a> {
    fn new(cfg: &'a PretrainConfig, corpus: &'a Corpus, trace: bool) -> Result<Self> {
        let p = &cfg.params;
        let d = cfg.encoder.embed_dim();
        let mut model = Model::new(cfg.encoder.clone(), cfg.seed)?;
        let dino = HeadConfig::dino(DINO, d, p.dino_hidden, p.dino_bottleneck, p.prototypes);
        let classes = corpus.num_classes();
        let clusters = if p.clusters > 0 { p.clusters } else { 2 * classes };
        let heads = match cfg.method {
            Method::Simclr => vec![HeadConfig::projection(PROJECTION, d, p.projection_hidden, p.projection_dim)],
            Method::Dino => vec![dino],
            Method::Mae => vec![HeadConfig::decoder(
                DECODER,
                &cfg.encoder,
                p.decoder_width,
                p.decoder_blocks,
                p.decoder_heads,
            )],
            Method::Deepcluster => {
                if clusters < 2 || clusters > corpus.len() {
                    return Err(Error::invalid(format!(
                        "{clusters} clusters for {} images; set params.clusters",
                        corpus.len()
                    )));
                }
                vec![HeadConfig::classification(PSEUDO, d, clusters)]
            }
            Method::Supervised => vec![HeadConfig::classification(CLASSIFIER, d, classes)],
            Method::Mixed => vec![HeadConfig::classification(CLASSIFIER, d, classes), dino],
            Method::None => vec![],
        };
        model.attach_heads(&heads, cfg.seed)?;
        let teacher = if cfg.method.has_teacher() {
            let mut params = model.params.subset(BACKBONE_PREFIX);
            params.extend(model.params.subset(&head_prefix(DINO)));
            Some(TeacherState::new(params, p.teacher_momentum, p.prototypes)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            corpus,
            policy: cfg.view_policy(),
            model,
            teacher,
            opt: AdamW::new(cfg.weight_decay),
            assignments: None,
            clusters,
            trace: trace.then(Vec::new),
        })
    }

    fn mark(&mut self, e: TraceEvent) {
        if let Some(t) = &mut self.trace {
            t.push(e);
        }
    }

    fn restore(&mut self, ck: Checkpoint) -> Result<(usize, usize)> {
        if ck.config_digest != self.cfg.digest() {
            return Err(Error::ConfigMismatch);
        }
        if ck.method != self.cfg.method || ck.student.schema() != self.model.params.schema() {
            return Err(Error::shape("checkpoint parameters do not match the configured model"));
        }
        if ck.teacher.is_some() != self.teacher.is_some() {
            return Err(Error::shape("checkpoint teacher does not match the configured method"));
        }
        self.model.params = ck.student;
        self.teacher = ck.teacher;
        self.opt = ck.optimizer;
        self.assignments = ck.assignments;
        Ok((ck.epoch, ck.rng.global_step))
    }

    fn checkpoint(&self, epoch: usize, step: usize) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            method: self.cfg.method,
            epoch,
            encoder: self.model.encoder.clone(),
            heads: self.model.heads.clone(),
            student: self.model.params.clone(),
            teacher: self.teacher.clone(),
            optimizer: self.opt.clone(),
            rng: RngState {
                seed: self.cfg.seed,
                next_epoch: epoch,
                global_step: step,
            },
            config_digest: self.cfg.digest(),
            assignments: self.assignments.clone(),
        }
    }

    fn step(&mut self, epoch: usize, idx: &[usize]) -> Result<StepOut> {
        match self.cfg.method {
            Method::Simclr => self.simclr_step(epoch, idx),
            Method::Dino => self.dino_step(epoch, idx),
            Method::Mae => self.mae_step(epoch, idx),
            Method::Deepcluster => self.deepcluster_step(epoch, idx),
            Method::Supervised => self.supervised_step(epoch, idx),
            Method::Mixed => self.mixed_step(epoch, idx),
            Method::None => Err(Error::invalid("method none has no training step")),
        }
    }

    /// Student update, then (for distillation) teacher EMA, then center.
    fn update(&mut self, out: &StepOut, lr: f64) -> Result<()> {
        self.opt.step(&mut self.model.params, &out.grads, lr, |_| true)?;
        self.mark(TraceEvent::StudentUpdate);
        if let Some(teacher) = &self.teacher {
            let next = ema_update(teacher, &self.model.params)?;
            self.teacher = Some(next);
            self.mark(TraceEvent::TeacherUpdate);
            let logits = out
                .teacher_logits
                .as_ref()
                .ok_or_else(|| Error::invalid("distillation step produced no teacher outputs"))?;
            let t = self.teacher.as_mut().expect("set above");
            // kept at f32 precision so checkpoints restore it exactly
            t.center = update_center(&t.center, logits, self.cfg.params.center_momentum)?
                .into_iter()
                .map(|v| v as f32 as f64)
                .collect();
            self.mark(TraceEvent::CenterUpdate);
        }
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(())
    }

    fn image(&self, i: usize) -> &'a crate::dataset::Image {
        &self.corpus.images[i]
    }

    fn train_views(&self, stream_tag: u64, epoch: usize, idx: &[usize]) -> Result<Batch> {
        let views = idx
            .iter()
            .map(|&i| make_train_view(self.image(i), &self.policy, seed_of(self.cfg.seed, stream_tag, epoch, i)))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_views(&views)
    }

    fn finish(&mut self, g: &Graph<f32>, root: Var, loss: f64) -> StepOut {
        self.mark(TraceEvent::Backward);
        StepOut {
            loss,
            components: BTreeMap::new(),
            grads: g.backward(root),
            teacher_logits: None,
        }
    }

    fn simclr_step(&mut self, epoch: usize, idx: &[usize]) -> Result<StepOut> {
        let mut views = Vec::with_capacity(2 * idx.len());
        for &i in idx {
            let pair = make_view_pair(self.image(i), &self.policy, seed_of(self.cfg.seed, tag::AUG_SSL, epoch, i))?;
            views.push(pair.view_a);
            views.push(pair.view_b);
        }
        let batch = Batch::from_views(&views)?;
        let mut g = Graph::new();
        self.mark(TraceEvent::Forward);
        let emb = encode(&mut g, &self.model.params, &self.model.encoder, &batch)?;
        let z = self.model.apply_head(&mut g, &self.model.params, PROJECTION, emb)?;
        self.mark(TraceEvent::Loss);
        let repr = SimClrBatchRepr::new(g.value(z).cast())?;
        let lg = nt_xent(&repr, Temperature::new(self.cfg.params.temperature)?)?;
        let root = g.loss(z, lg.loss, lg.grad.cast())?;
        Ok(self.finish(&g, root, lg.loss))
    }

    /// Student and teacher forward over multi-crop views plus the
    /// distillation loss averaged over view pairs and images. Returns the
    /// student logits node, loss, its gradient and the teacher logits.
    fn dino_branch(&mut self, g: &mut Graph<f32>, epoch: usize, idx: &[usize]) -> Result<(Var, f64, Mat<f32>, Mat<f64>)> {
        let p = &self.cfg.params;
        let k = p.local_crops;
        let b = idx.len();
        let sets = idx
            .iter()
            .map(|&i| {
                make_multicrop(self.image(i), k as i64, &self.policy, seed_of(self.cfg.seed, tag::AUG_SSL, epoch, i))
            })
            .collect::<Result<Vec<_>>>()?;
        let globals = Batch::from_views(sets.iter().flat_map(|s| s.globals.iter()))?;
        let teacher = self.teacher.as_ref().expect("distillation methods have a teacher");
        let enc = &self.model.encoder;

        let eg = encode(g, &self.model.params, enc, &globals)?;
        let mut z = self.model.apply_head(g, &self.model.params, DINO, eg)?;
        if k > 0 {
            let locals = Batch::from_views(sets.iter().flat_map(|s| s.locals.iter()))?;
            let el = encode(g, &self.model.params, enc, &locals)?;
            let zl = self.model.apply_head(g, &self.model.params, DINO, el)?;
            let mut index: Vec<(u32, u32)> = (0..2 * b).map(|r| (0, r as u32)).collect();
            index.extend((0..k * b).map(|r| (1, r as u32)));
            z = g.assemble(&[z, zl], index)?;
        }
        let mut tg = Graph::<f32>::new();
        let te = encode(&mut tg, &teacher.params, enc, &globals)?;
        let tz = self.model.apply_head(&mut tg, &teacher.params, DINO, te)?;
        let t_logits: Mat<f64> = tg.value(tz).cast();
        let t_probs = sharpen_and_center(&t_logits, &teacher.center, p.teacher_temp)?;

        let s_logits: Mat<f64> = g.value(z).cast();
        let width = s_logits.cols;
        let scale = 1.0 / (dino_pairs(k + 2).len() * b) as f64;
        let mut loss = 0.0;
        let mut grad = Mat::<f32>::zeros(s_logits.rows, width);
        for i in 0..b {
            let rows: Vec<usize> = [2 * i, 2 * i + 1]
                .into_iter()
                .chain((0..k).map(|j| 2 * b + i * k + j))
                .collect();
            let t = Mat::from_vec(2, width, [t_probs.row(2 * i), t_probs.row(2 * i + 1)].concat());
            let mut s = Mat::zeros(rows.len(), width);
            for (r, &src) in rows.iter().enumerate() {
                s.row_mut(r).copy_from_slice(s_logits.row(src));
            }
            let lg = dino_loss_from_logits(&t, &s, p.student_temp)?;
            loss += lg.loss * scale;
            for (r, &dst) in rows.iter().enumerate() {
                for (o, v) in grad.row_mut(dst).iter_mut().zip(lg.grad.row(r)) {
                    *o = (v * scale) as f32;
                }
            }
        }
        Ok((z, loss, grad, t_logits))
    }

    fn dino_step(&mut self, epoch: usize, idx: &[usize]) -> Result<StepOut> {
        let mut g = Graph::new();
        self.mark(TraceEvent::Forward);
        let (z, loss, grad, t_logits) = self.dino_branch(&mut g, epoch, idx)?;
        self.mark(TraceEvent::Loss);
        let root = g.loss(z, loss, grad)?;
        let mut out = self.finish(&g, root, loss);
        out.teacher_logits = Some(t_logits);
        Ok(out)
    }

    fn mae_step(&mut self, epoch: usize, idx: &[usize]) -> Result<StepOut> {
        let enc = self.model.encoder.clone();
        let (size, patch) = (enc.input_size, enc.patch_size);
        let grid = size / patch;
        let batch = self.train_views(tag::AUG_SSL, epoch, idx)?;
        let masks = idx
            .iter()
            .map(|&i| {
                make_mask(
                    grid,
                    grid,
                    self.cfg.params.mask_ratio,
                    derive_seed(self.cfg.seed, &[epoch as u64, i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = self.model.head(DECODER).expect("decoder attached").clone();
        let mut g = Graph::new();
        self.mark(TraceEvent::Forward);
        let lat = encode_visible(&mut g, &self.model.params, &enc, &batch, &masks)?;
        let pred = decode_masked(&mut g, &self.model.params, &enc, &decoder, lat, &masks)?;
        self.mark(TraceEvent::Loss);
        let recon = unpatchify(g.value(pred), size, patch)?;
        let px = size * size * 3;
        let b = idx.len() as f64;
        let mut loss = 0.0;
        let mut grad_img = vec![0.0f32; recon.len()];
        for (i, mask) in masks.iter().enumerate() {
            let span = i * px..(i + 1) * px;
            let target = MaeTarget::new(
                size,
                size,
                recon[span.clone()].iter().map(|&v| v as f64).collect(),
                batch.data[span.clone()].iter().map(|&v| v as f64).collect(),
                mask.pixel_mask(patch),
            )?;
            let lg = mae_loss(&target)?;
            loss += lg.loss / b;
            for (o, v) in grad_img[span].iter_mut().zip(&lg.grad.data) {
                *o = (v / b) as f32;
            }
        }
        let grad = patchify::<f32>(&grad_img, idx.len(), size, patch);
        let root = g.loss(pred, loss, grad)?;
        Ok(self.finish(&g, root, loss))
    }

    /// Features of every image, clustered; the pseudolabel head is then
    /// re-initialized. Returns the share of images whose cluster changed,
    /// once a previous clustering exists.
    fn recluster(&mut self, epoch: usize) -> Result<Option<f64>> {
        let enc = &self.model.encoder;
        let mut rows: Vec<f64> = Vec::new();
        let all: Vec<usize> = (0..self.corpus.len()).collect();
        for chunk in all.chunks(256) {
            let views = chunk
                .iter()
                .map(|&i| make_eval_view(self.image(i), &self.policy))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::<f32>::new();
            let e = encode(&mut g, &self.model.params, enc, &Batch::from_views(&views)?)?;
            rows.extend(g.value(e).data.iter().map(|&v| v as f64));
        }
        let d = enc.embed_dim();
        let mut feats = Mat::from_vec(self.corpus.len(), d, rows);
        for r in 0..feats.rows {
            let row = feats.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let km = kmeans(
            &feats,
            self.clusters,
            self.cfg.params.kmeans_iters,
            derive_seed(self.cfg.seed, &[tag::KMEANS, epoch as u64]),
        )?;
        let assign = km.labels.assignments;
        let reassigned = self
            .assignments
            .as_ref()
            .map(|prev| reassignment_fraction(prev, &assign, self.clusters));
        self.assignments = Some(assign);
        self.model
            .reinit_head(PSEUDO, derive_seed(self.cfg.seed, &[tag::HEAD_REINIT, epoch as u64]))?;
        self.opt.reset(&head_prefix(PSEUDO));
        self.mark(TraceEvent::Recluster(epoch + 1));
        Ok(reassigned)
    }

    fn deepcluster_step(&mut self, epoch: usize, idx: &[usize]) -> Result<StepOut> {
        let assign = self.assignments.as_ref().expect("clustered at epoch start");
        let labels = PseudoLabels {
            assignments: idx.iter().map(|&i| assign[i]).collect(),
            k: self.clusters,
            epoch_id: epoch as u64,
        };
        let batch = self.train_views(tag::AUG_SSL, epoch, idx)?;
        let mut g = Graph::new();
        self.mark(TraceEvent::Forward);
        let emb = encode(&mut g, &self.model.params, &self.model.encoder, &batch)?;
        let logits = self.model.apply_head(&mut g, &self.model.params, PSEUDO, emb)?;
        self.mark(TraceEvent::Loss);
        let lg = deepcluster_loss(&labels.one_hot(), &g.value(logits).cast())?;
        let root = g.loss(logits, lg.loss, lg.grad.cast())?;
        Ok(self.finish(&g, root, lg.loss))
    }

    /// Supervised branch: logits node and its cross-entropy.
    fn supervised_branch(&mut self, g: &mut Graph<f32>, epoch: usize, idx: &[usize]) -> Result<(Var, f64, Mat<f64>)> {
        let classes: Vec<usize> = idx
            .iter()
            .map(|&i| self.corpus.labels[i].ok_or_else(|| Error::invalid(format!("image {i} has no label"))))
            .collect::<Result<_>>()?;
        let batch = self.train_views(tag::AUG_SUP, epoch, idx)?;
        let emb = encode(g, &self.model.params, &self.model.encoder, &batch)?;
        let logits = self.model.apply_head(g, &self.model.params, CLASSIFIER, emb)?;
        let lg = cross_entropy(&g.value(logits).cast(), &classes)?;
        Ok((logits, lg.loss, lg.grad))
    }

    fn supervised_step(&mut self, epoch: usize, idx: &[usize]) -> Result<StepOut> {
        let mut g = Graph::new();
        self.mark(TraceEvent::Forward);
        let (logits, loss, grad) = self.supervised_branch(&mut g, epoch, idx)?;
        self.mark(TraceEvent::Loss);
        let root = g.loss(logits, loss, grad.cast())?;
        Ok(self.finish(&g, root, loss))
    }

    fn mixed_step(&mut self, epoch: usize, idx: &[usize]) -> Result<StepOut> {
        let p = &self.cfg.params;
        let w = MixedWeights::new(p.supervised_weight, p.ssl_weight)?;
        let mut g = Graph::new();
        self.mark(TraceEvent::Forward);
        let (logits, l_sup, g_sup) = self.supervised_branch(&mut g, epoch, idx)?;
        let (z, l_ssl, g_ssl, t_logits) = self.dino_branch(&mut g, epoch, idx)?;
        self.mark(TraceEvent::Loss);
        let total = mixed_loss(l_sup, l_ssl, w)?;
        let a = g.loss(logits, w.supervised * l_sup, g_sup.map(|v| v * w.supervised).cast())?;
        let s = w.ssl as f32;
        let b = g.loss(z, w.ssl * l_ssl, g_ssl.map(|v| v * s))?;
        let root = g.add(a, b)?;
        let mut out = self.finish(&g, root, total);
        out.components = [("sup".to_string(), l_sup), ("ssl".to_string(), l_ssl)].into();
        out.teacher_logits = Some(t_logits);
        Ok(out)
    }
}

/// Share of points whose new cluster differs from the previous cluster
/// held by the majority of its members. Cluster ids are arbitrary across
/// runs of K-Means, so ids are matched through that majority first.
pub(crate) fn reassignment_fraction(prev: &[usize], next: &[usize], k: usize) -> f64 {
    let mut votes = vec![vec![0usize; k]; k];
    for (&p, &n) in prev.iter().zip(next) {
        if p < k && n < k {
            votes[n][p] += 1;
        }
    }
    let majority: Vec<usize> = votes
        .iter()
        .map(|v| v.iter().enumerate().max_by_key(|&(j, c)| (*c, std::cmp::Reverse(j))).map_or(0, |(j, _)| j))
        .collect();
    let moved = prev.iter().zip(next).filter(|&(&p, &n)| n >= k || majority[n] != p).count();
    moved as f64 / prev.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_plan_covers_each_index_once() {
        let plan = batch_plan(10, 3, 1, 0);
        assert_eq!(plan.len(), 3);
        let mut seen: Vec<usize> = plan.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(batch_plan(4, 8, 1, 0).len(), 1);
        assert_ne!(batch_plan(10, 3, 1, 0), batch_plan(10, 3, 1, 1));
    }

    #[test]
    fn reassignment_ignores_renaming() {
        assert_eq!(reassignment_fraction(&[0, 0, 1, 1], &[1, 1, 0, 0], 2), 0.0);
        assert_eq!(reassignment_fraction(&[0, 0, 1, 1], &[0, 0, 0, 1], 2), 0.25);
    }
}
