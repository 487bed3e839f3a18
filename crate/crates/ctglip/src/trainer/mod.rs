//! Mini-batch training: data → vision tower → alignment/segmentation
//! losses → Adam with cosine learning-rate decay, plus checkpointing and
//! the ablation switches (organ-text / abnormality-text / dictionary
//! negatives / image-level contrastive baseline).
//!
//! Everything downstream of the config is a pure function of
//! `(seed, step)`: epoch shuffles and negative-sampling draws are derived
//! from those two values alone, so a run is bit-reproducible and a
//! checkpoint resume continues the exact trajectory without storing any
//! generator state beyond the step counter.

mod checkpoint;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abnodict::{assemble_text_batch, AbnormalityDictionary, NegativeSampling};
use crate::encoders::{CtGlipModel, ForwardTrace, TextEncoder};
use crate::error::{Error, Result};
use crate::losses::{
    abnormality_text_loss_with_grad, clip_batch_loss_with_grad, organ_text_loss_with_grad,
    segmentation_loss_with_grad, total_loss, LossConfig,
};
use crate::reportproc::{organ_template, parse_report, OrganLexicon};
use crate::seeding::{mix2, mix3, rng_from};
use crate::synthdata::SubjectSample;
use rand::seq::SliceRandom;

/// Stream tags so the epoch shuffle and the per-step negative sampling
/// never share a generator with anything else.
const SHUFFLE_STREAM: u64 = 0x0e70_c55f;
const NEGATIVE_STREAM: u64 = 0x0d1c_7ba7;

/// Metrics log filename inside a training output directory.
pub const METRICS_NAME: &str = "metrics.jsonl";
/// Final checkpoint filename inside a training output directory.
pub const FINAL_CHECKPOINT_NAME: &str = "checkpoint_final.bin";

fn default_batch_size() -> usize {
    8
}

fn default_epochs() -> usize {
    20
}

fn default_lr_init() -> f64 {
    1e-3
}

fn default_lr_final() -> f64 {
    1e-6
}

fn default_weight_decay() -> f64 {
    3e-5
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

fn default_negatives_per_organ() -> usize {
    4
}

fn default_max_negatives() -> usize {
    512
}

/// Optimization and mode settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr_init")]
    pub lr_init: f64,
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Image-level contrastive baseline: whole-volume embedding vs.
    /// whole-report embedding. When set, the organ-level flags below are
    /// ignored and no segmentation objective is applied.
    #[serde(default)]
    pub vanilla_clip: bool,
    #[serde(default = "default_true")]
    pub enable_ot: bool,
    #[serde(default = "default_true")]
    pub enable_at: bool,
    #[serde(default = "default_true")]
    pub enable_dict: bool,
    /// Dictionary negatives sampled per normal organ (`T`).
    #[serde(default = "default_negatives_per_organ")]
    pub negatives_per_organ: usize,
    /// Cap on appended negatives per image (`B`).
    #[serde(default = "default_max_negatives")]
    pub max_negatives: usize,
    /// Write a checkpoint every this many steps (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        for (name, v) in [("lr_init", self.lr_init), ("lr_final", self.lr_final)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("{name} {v} must be finite and ≥ 0")));
            }
        }
        if self.lr_final > self.lr_init {
            return Err(Error::validation(format!(
                "lr_final {} exceeds lr_init {}",
                self.lr_final, self.lr_init
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay must be finite and ≥ 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::validation("adam_eps must be positive"));
        }
        if !self.vanilla_clip && !self.enable_ot && !self.enable_at {
            return Err(Error::validation(
                "grounded mode needs at least one alignment objective (enable_ot or enable_at)",
            ));
        }
        if !self.vanilla_clip && self.enable_dict && !self.enable_at {
            return Err(Error::validation(
                "dictionary negatives require the abnormality-text objective (enable_at)",
            ));
        }
        Ok(())
    }
}

/// Cosine decay from `lr_init` (step 0) to `lr_final` (step = total);
/// the endpoints are returned exactly, not through the cosine formula,
/// so they are reproducible to the last bit.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_final: f64) -> Result<f64> {
    if total_steps < 1 {
        return Err(Error::validation("total_steps must be at least 1"));
    }
    if step > total_steps {
        return Err(Error::validation(format!(
            "step {step} is past total_steps {total_steps}"
        )));
    }
    if lr_final > lr_init {
        return Err(Error::validation(format!(
            "lr_final {lr_final} exceeds lr_init {lr_init}"
        )));
    }
    if step == 0 {
        return Ok(lr_init);
    }
    if step == total_steps {
        return Ok(lr_final);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Adam first/second moments over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One coupled-weight-decay Adam step. Moments always advance; the
    /// parameter write is skipped entirely at `lr == 0` so parameters
    /// stay bitwise untouched.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::validation(format!(
                "optimizer sized for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] + cfg.weight_decay * params[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            if lr != 0.0 {
                params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// One line of the step-level metrics log. Grounded steps carry the
/// three component losses and the appended-negative count `b`; baseline
/// steps carry `l_clip` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_ot: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_at: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_segm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<u64>,
    pub total: f64,
}

/// Steps per epoch and total steps for a dataset under a config.
pub fn schedule(n_subjects: usize, cfg: &TrainConfig) -> Result<(u64, u64)> {
    if n_subjects == 0 {
        return Err(Error::validation("training set is empty"));
    }
    let spe = n_subjects.div_ceil(cfg.batch_size) as u64;
    Ok((spe, spe * cfg.epochs as u64))
}

/// Subject indices of the batch consumed at `step`: a per-epoch
/// Fisher-Yates shuffle seeded by `(seed, epoch)` alone, sliced by the
/// step's position inside the epoch.
pub fn batch_for_step(cfg: &TrainConfig, n_subjects: usize, step: u64) -> Result<Vec<usize>> {
    let (spe, _) = schedule(n_subjects, cfg)?;
    let epoch = step / spe;
    let slot = (step % spe) as usize;
    let mut perm: Vec<usize> = (0..n_subjects).collect();
    perm.shuffle(&mut rng_from(mix3(cfg.seed, SHUFFLE_STREAM, epoch)));
    let lo = slot * cfg.batch_size;
    let hi = ((slot + 1) * cfg.batch_size).min(n_subjects);
    Ok(perm[lo..hi].to_vec())
}

/// Per-subject result of a grounded forward/backward.
struct SubjectOutcome {
    l_ot: f64,
    l_at: f64,
    l_segm: f64,
    b: u64,
    grads: Vec<f64>,
}

/// A model plus optimizer mid-run, bound to the frozen text side.
pub struct TrainSession<'a> {
    pub model: CtGlipModel,
    pub adam: AdamState,
    /// Steps completed so far.
    pub step: u64,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    lexicon: &'a OrganLexicon,
    dictionary: &'a AbnormalityDictionary,
    text_encoder: &'a dyn TextEncoder,
    /// Organ-template text embeddings, one per lexicon organ.
    template_embeddings: BTreeMap<u32, Vec<f64>>,
}

impl<'a> TrainSession<'a> {
    pub fn new(
        model: CtGlipModel,
        train_cfg: TrainConfig,
        loss_cfg: LossConfig,
        lexicon: &'a OrganLexicon,
        dictionary: &'a AbnormalityDictionary,
        text_encoder: &'a dyn TextEncoder,
    ) -> Result<Self> {
        train_cfg.validate()?;
        loss_cfg.validate()?;
        if text_encoder.dim() != model.config.embed_dim {
            return Err(Error::validation(format!(
                "text encoder dim {} != model embed_dim {}",
                text_encoder.dim(),
                model.config.embed_dim
            )));
        }
        let template_embeddings = encode_templates(lexicon, text_encoder)?;
        let adam = AdamState::new(model.n_params());
        Ok(TrainSession {
            model,
            adam,
            step: 0,
            train_cfg,
            loss_cfg,
            lexicon,
            dictionary,
            text_encoder,
            template_embeddings,
        })
    }

    /// Rebuild a session mid-run from a checkpoint; the text encoder must
    /// digest-match the one the checkpoint was trained with.
    pub fn from_checkpoint(
        ckpt: Checkpoint,
        lexicon: &'a OrganLexicon,
        dictionary: &'a AbnormalityDictionary,
        text_encoder: &'a dyn TextEncoder,
    ) -> Result<Self> {
        if text_encoder.state_digest() != ckpt.text_digest {
            return Err(Error::validation(
                "checkpoint was trained with a different text encoder (digest mismatch)",
            ));
        }
        let mut session = TrainSession::new(
            CtGlipModel::from_params(ckpt.model_config, ckpt.params)?,
            ckpt.train_config,
            ckpt.loss_config,
            lexicon,
            dictionary,
            text_encoder,
        )?;
        let n = session.model.n_params();
        if ckpt.adam_m.len() != n || ckpt.adam_v.len() != n {
            return Err(Error::validation(
                "checkpoint optimizer state does not match the architecture",
            ));
        }
        session.adam = AdamState {
            m: ckpt.adam_m,
            v: ckpt.adam_v,
            t: ckpt.adam_t,
        };
        session.step = ckpt.step;
        Ok(session)
    }

    /// Snapshot everything needed to resume bit-identically.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.train_cfg.clone(),
            loss_config: self.loss_cfg,
            step: self.step,
            adam_t: self.adam.t,
            text_digest: self.text_encoder.state_digest(),
            params: self.model.params.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    /// One optimization step on `batch` at learning rate `lr`; advances
    /// the step counter on success.
    pub fn train_step(&mut self, batch: &[&SubjectSample], lr: f64) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::validation("train_step got an empty batch"));
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::validation(format!("learning rate {lr} invalid")));
        }
        let record = if self.train_cfg.vanilla_clip {
            self.vanilla_step(batch, lr)?
        } else {
            self.grounded_step(batch, lr)?
        };
        self.step += 1;
        Ok(record)
    }

    fn grounded_step(&mut self, batch: &[&SubjectSample], lr: f64) -> Result<StepRecord> {
        let step = self.step;
        let outcomes: Vec<SubjectOutcome> = batch
            .par_iter()
            .map(|subject| {
                self.grounded_subject(subject, batch.len()).map_err(|e| {
                    tag_subject(e, subject.subject_id, step)
                })
            })
            .collect::<Result<_>>()?;

        let inv = 1.0 / batch.len() as f64;
        let mut grads = self.model.zero_grads();
        let mut l_ot = 0.0;
        let mut l_at = 0.0;
        let mut l_segm = 0.0;
        let mut b_total = 0u64;
        // fixed-order reduction keeps parallel runs bit-identical
        for o in &outcomes {
            for (g, s) in grads.iter_mut().zip(&o.grads) {
                *g += s;
            }
            l_ot += o.l_ot * inv;
            l_at += o.l_at * inv;
            l_segm += o.l_segm * inv;
            b_total += o.b;
        }
        let breakdown = total_loss(l_ot, l_at, l_segm, &self.loss_cfg)
            .map_err(|e| tag_batch(e, batch, step))?;
        self.adam
            .update(&mut self.model.params, &grads, lr, &self.train_cfg)?;
        Ok(StepRecord {
            step,
            lr,
            l_ot: Some(breakdown.l_ot),
            l_at: Some(breakdown.l_at),
            l_segm: Some(breakdown.l_segm),
            l_clip: None,
            b: Some(b_total),
            total: breakdown.total,
        })
    }

    /// Forward, losses, and backward for one subject; gradients are
    /// pre-scaled by the loss weights and 1/batch so the caller only sums.
    fn grounded_subject(&self, subject: &SubjectSample, batch_len: usize) -> Result<SubjectOutcome> {
        let cfg = &self.train_cfg;
        let trace = self.model.forward(&subject.volume, &subject.mask, true)?;
        let m = trace.organ_ids.len();
        let inv = 1.0 / batch_len as f64;
        let dim = self.model.config.embed_dim;
        let z: Vec<Vec<f64>> = trace.embeddings.iter().map(|e| e.vector.clone()).collect();
        let mut d_emb = vec![vec![0.0; dim]; m];
        let mut l_ot = 0.0;
        let mut l_at = 0.0;
        let mut b = 0u64;
        if m > 0 {
            if cfg.enable_ot {
                let templates: Vec<Vec<f64>> = trace
                    .organ_ids
                    .iter()
                    .map(|id| {
                        self.template_embeddings.get(id).cloned().ok_or_else(|| {
                            Error::validation(format!("organ {id} in mask but not in lexicon"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let (l, d_z, _) = organ_text_loss_with_grad(&z, &templates, self.loss_cfg.tau)?;
                l_ot = l;
                let w = self.loss_cfg.lambda_ot * inv;
                for (acc, g) in d_emb.iter_mut().zip(&d_z) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += w * x;
                    }
                }
            }
            if cfg.enable_at {
                let parsed = parse_report(&subject.report, self.lexicon)?;
                let descriptions: Vec<_> = parsed
                    .descriptions
                    .into_iter()
                    .filter(|d| trace.organ_ids.contains(&d.organ_id))
                    .collect();
                let sampling = NegativeSampling {
                    per_organ: if cfg.enable_dict {
                        cfg.negatives_per_organ
                    } else {
                        0
                    },
                    max_negatives: cfg.max_negatives,
                    seed: mix3(mix2(cfg.seed, NEGATIVE_STREAM), self.step, subject.subject_id as u64),
                };
                let text_batch = assemble_text_batch(
                    &descriptions,
                    &trace.organ_ids,
                    self.lexicon,
                    self.dictionary,
                    &sampling,
                )?;
                b = text_batch.b as u64;
                let texts: Vec<&str> =
                    text_batch.descriptions.iter().map(|d| d.text.as_str()).collect();
                let embedded = self.text_encoder.encode(&texts)?;
                let t_at: Vec<Vec<f64>> = embedded.into_iter().map(|e| e.vector).collect();
                let (l, d_z, _) = abnormality_text_loss_with_grad(&z, &t_at, self.loss_cfg.tau)?;
                l_at = l;
                let w = self.loss_cfg.lambda_at * inv;
                for (acc, g) in d_emb.iter_mut().zip(&d_z) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += w * x;
                    }
                }
            }
        }
        let logits = trace.seg_logits.as_ref().expect("forward ran with segmentation");
        let (l_segm, mut d_logits) =
            segmentation_loss_with_grad(logits, &subject.mask, self.loss_cfg.dice_epsilon)?;
        let w_seg = self.loss_cfg.lambda_segm * inv;
        d_logits.mapv_inplace(|g| g * w_seg);
        let mut grads = self.model.zero_grads();
        self.model.backward(&trace, &d_emb, Some(&d_logits), &mut grads);
        Ok(SubjectOutcome {
            l_ot,
            l_at,
            l_segm,
            b,
            grads,
        })
    }

    fn vanilla_step(&mut self, batch: &[&SubjectSample], lr: f64) -> Result<StepRecord> {
        let step = self.step;
        let traces: Vec<ForwardTrace> = batch
            .par_iter()
            .map(|subject| {
                self.model
                    .forward_global(&subject.volume)
                    .map_err(|e| tag_subject(e, subject.subject_id, step))
            })
            .collect::<Result<_>>()?;
        let v: Vec<Vec<f64>> = traces
            .iter()
            .map(|t| t.embeddings[0].vector.clone())
            .collect();
        let reports: Vec<&str> = batch.iter().map(|s| s.report.as_str()).collect();
        let t: Vec<Vec<f64>> = self
            .text_encoder
            .encode(&reports)?
            .into_iter()
            .map(|e| e.vector)
            .collect();
        let (l_clip, d_v, _) = clip_batch_loss_with_grad(&v, &t, self.loss_cfg.tau)
            .map_err(|e| tag_batch(e, batch, step))?;
        if !l_clip.is_finite() {
            return Err(tag_batch(
                Error::Divergence(format!("clip loss is {l_clip}")),
                batch,
                step,
            ));
        }
        let per_subject: Vec<Vec<f64>> = traces
            .par_iter()
            .zip(&d_v)
            .map(|(trace, d)| {
                let mut grads = self.model.zero_grads();
                self.model
                    .backward(trace, std::slice::from_ref(d), None, &mut grads);
                grads
            })
            .collect();
        let mut grads = self.model.zero_grads();
        for s in &per_subject {
            for (g, x) in grads.iter_mut().zip(s) {
                *g += x;
            }
        }
        self.adam
            .update(&mut self.model.params, &grads, lr, &self.train_cfg)?;
        Ok(StepRecord {
            step,
            lr,
            l_ot: None,
            l_at: None,
            l_segm: None,
            l_clip: Some(l_clip),
            b: None,
            total: l_clip,
        })
    }

    /// Train to the schedule's end (resuming from `self.step`), invoking
    /// `on_step` after every optimization step.
    pub fn run(
        &mut self,
        subjects: &[SubjectSample],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        let (_, total) = schedule(subjects.len(), &self.train_cfg)?;
        while self.step < total {
            let indices = batch_for_step(&self.train_cfg, subjects.len(), self.step)?;
            let batch: Vec<&SubjectSample> = indices.iter().map(|&i| &subjects[i]).collect();
            let lr = cosine_lr(
                self.step,
                total,
                self.train_cfg.lr_init,
                self.train_cfg.lr_final,
            )?;
            let record = self.train_step(&batch, lr)?;
            on_step(&record)?;
        }
        Ok(())
    }

    /// Full training run with artifacts: appends to the metrics log,
    /// writes periodic checkpoints per `checkpoint_every`, and leaves a
    /// final checkpoint; returns the final snapshot.
    pub fn fit(&mut self, subjects: &[SubjectSample], out_dir: &Path) -> Result<Checkpoint> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let metrics_path = out_dir.join(METRICS_NAME);
        let file = if self.step > 0 {
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&metrics_path)
        } else {
            fs::File::create(&metrics_path)
        }
        .map_err(|e| Error::io(&metrics_path, e))?;
        let mut metrics = std::io::BufWriter::new(file);

        let (_, total) = schedule(subjects.len(), &self.train_cfg)?;
        let every = self.train_cfg.checkpoint_every;
        while self.step < total {
            let indices = batch_for_step(&self.train_cfg, subjects.len(), self.step)?;
            let batch: Vec<&SubjectSample> = indices.iter().map(|&i| &subjects[i]).collect();
            let lr = cosine_lr(
                self.step,
                total,
                self.train_cfg.lr_init,
                self.train_cfg.lr_final,
            )?;
            let record = self.train_step(&batch, lr)?;
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::parse(&metrics_path, e.to_string()))?;
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            if every > 0 && self.step % every as u64 == 0 {
                let path = out_dir.join(format!("checkpoint_{:06}.bin", self.step));
                save_checkpoint(&self.checkpoint(), &path)?;
            }
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let final_ckpt = self.checkpoint();
        save_checkpoint(&final_ckpt, &out_dir.join(FINAL_CHECKPOINT_NAME))?;
        Ok(final_ckpt)
    }
}

/// Embed the organ-name template of every lexicon organ in one pass.
pub fn encode_templates(
    lexicon: &OrganLexicon,
    text_encoder: &dyn TextEncoder,
) -> Result<BTreeMap<u32, Vec<f64>>> {
    let pairs: Vec<(u32, String)> = lexicon
        .organs()
        .map(|(id, name)| Ok((id, organ_template(name)?)))
        .collect::<Result<_>>()?;
    let texts: Vec<&str> = pairs.iter().map(|(_, t)| t.as_str()).collect();
    let embedded = text_encoder.encode(&texts)?;
    Ok(pairs
        .iter()
        .zip(embedded)
        .map(|((id, _), e)| (*id, e.vector))
        .collect())
}

fn tag_subject(e: Error, subject_id: usize, step: u64) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!(
            "{msg} (subject {subject_id}, step {step})"
        )),
        other => other,
    }
}

fn tag_batch(e: Error, batch: &[&SubjectSample], step: u64) -> Error {
    let ids: Vec<usize> = batch.iter().map(|s| s.subject_id).collect();
    match e {
        Error::Divergence(msg) => {
            Error::Divergence(format!("{msg} (batch {ids:?}, step {step})"))
        }
        other => other,
    }
}
