//! Joint optimization of both tasks' prompts and couplers over a frozen
//! backbone: losses, the optimizer loop, ablation switches, and trainable
//! state checkpointing.
//!
//! One tape carries a whole batch: antonym texts are encoded once, every
//! image crop is encoded per active task, and a single backward pass yields
//! gradients for exactly the parameter set the ablation flags enable.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::{self, Container, Dtype};
use crate::conditioning::{self, CouplerStack};
use crate::data::{sample_crop, DatasetSplit, ImageProvider, Normalizer, RgbImage, SampleRecord};
use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::prompted::{self, PromptSet};
use crate::scoring::{AntonymPair, HeadState, TaskTag};
use crate::tape::{BufId, Tape};

// ── configuration ────────────────────────────────────────────────────

/// Which trainable components a run enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub textual_prompts: bool,
    pub visual_prompts: bool,
    pub conditioning: bool,
    pub auxiliary_task: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            textual_prompts: true,
            visual_prompts: true,
            conditioning: true,
            auxiliary_task: true,
        }
    }
}

impl AblationFlags {
    /// No trainable components: handcrafted-prompt zero-shot scoring.
    pub fn zero_shot() -> Self {
        AblationFlags {
            textual_prompts: false,
            visual_prompts: false,
            conditioning: false,
            auxiliary_task: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditioning && !self.visual_prompts {
            return Err(Error::InvalidConfig(
                "conditioning requires visual prompts (couplers map visual prompt rows)".into(),
            ));
        }
        Ok(())
    }

    fn p_percept_active(&self) -> bool {
        self.textual_prompts
    }

    fn q_percept_active(&self) -> bool {
        self.visual_prompts
    }

    fn p_align_active(&self, mode: AlignmentMode) -> bool {
        self.auxiliary_task && mode == AlignmentMode::Blind && self.textual_prompts
    }

    fn q_align_active(&self) -> bool {
        self.visual_prompts && (self.auxiliary_task || self.conditioning)
    }

    fn couplers_active(&self) -> bool {
        self.conditioning
    }
}

/// How the auxiliary alignment task gets its text side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Learned antonym prompt pairing; no user text needed at test time.
    Blind,
    /// User prompts fed raw into the text encoder (no textual prompts on
    /// the alignment side).
    TextConditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub prompt_length: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub alignment_mode: AlignmentMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            prompt_length: 8,
            lambda: 0.1,
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 64,
            crop_size: 224,
            seed: 0,
            ablation: AblationFlags::default(),
            alignment_mode: AlignmentMode::Blind,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.crop_size == 0 {
            return Err(Error::InvalidConfig("crop_size must be >= 1".into()));
        }
        self.ablation.validate()
    }
}

/// Everything shape-affecting a state checkpoint was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
}

impl ConfigFingerprint {
    /// Refuse a pairing whose shape-affecting fields conflict, naming the
    /// first offending field.
    pub fn check_shapes(&self, other: &ConfigFingerprint) -> Result<()> {
        if self.backbone != other.backbone {
            return Err(Error::Checkpoint(format!(
                "backbone config mismatch: state has {:?}, run has {:?}",
                self.backbone, other.backbone
            )));
        }
        let mine = &self.train;
        let theirs = &other.train;
        if mine.prompt_length != theirs.prompt_length {
            return Err(Error::Checkpoint(format!(
                "prompt_length mismatch: state {} vs run {}",
                mine.prompt_length, theirs.prompt_length
            )));
        }
        if mine.ablation != theirs.ablation {
            return Err(Error::Checkpoint(format!(
                "ablation flags mismatch: state {:?} vs run {:?}",
                mine.ablation, theirs.ablation
            )));
        }
        if mine.alignment_mode != theirs.alignment_mode {
            return Err(Error::Checkpoint(format!(
                "alignment_mode mismatch: state {:?} vs run {:?}",
                mine.alignment_mode, theirs.alignment_mode
            )));
        }
        Ok(())
    }
}

// ── trainable state ──────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// All trainable tensors plus optimizer moments. Prompt sets are allocated
/// whenever any part of their task is enabled; the ablation flags in the
/// fingerprint decide which tensors actually train and encode.
#[derive(Debug, Clone)]
pub struct TrainableState {
    pub percept_prompts: PromptSet,
    pub align_prompts: PromptSet,
    pub couplers: Option<CouplerStack>,
    /// First and second Adam moments, aligned with `active_param_names`.
    pub moments: Vec<(Mat, Mat)>,
    pub step_count: u64,
    pub fingerprint: ConfigFingerprint,
}

impl TrainableState {
    /// Seeded initialization. Prompt draws depend only on (seed, task,
    /// tensor name), so shared components are bit-identical across
    /// ablation variants.
    pub fn init(backbone_cfg: &BackboneConfig, cfg: &TrainConfig) -> Result<TrainableState> {
        cfg.validate()?;
        backbone_cfg.validate()?;
        let flags = cfg.ablation;
        let b_main = if flags.textual_prompts || flags.visual_prompts {
            cfg.prompt_length
        } else {
            0
        };
        let b_align = if flags.q_align_active() || flags.p_align_active(cfg.alignment_mode) {
            cfg.prompt_length
        } else {
            0
        };
        let state = TrainableState {
            percept_prompts: PromptSet::seeded(cfg.seed, backbone_cfg, b_main, TaskTag::Percept),
            align_prompts: PromptSet::seeded(cfg.seed, backbone_cfg, b_align, TaskTag::Align),
            couplers: flags.couplers_active().then(|| CouplerStack::identity_init(backbone_cfg)),
            moments: Vec::new(),
            step_count: 0,
            fingerprint: ConfigFingerprint { backbone: *backbone_cfg, train: *cfg },
        };
        let mut out = state;
        out.moments = out
            .active_params()
            .iter()
            .map(|(_, m)| (Mat::zeros(m.rows, m.cols), Mat::zeros(m.rows, m.cols)))
            .collect();
        Ok(out)
    }

    fn flags(&self) -> AblationFlags {
        self.fingerprint.train.ablation
    }

    fn mode(&self) -> AlignmentMode {
        self.fingerprint.train.alignment_mode
    }

    /// Names of the tensors the optimizer updates, in update order.
    pub fn active_param_names(&self) -> Vec<String> {
        self.active_params().into_iter().map(|(n, _)| n.to_string()).collect()
    }

    fn active_params(&self) -> Vec<(String, &Mat)> {
        let flags = self.flags();
        let mode = self.mode();
        let mut out: Vec<(String, &Mat)> = Vec::new();
        if flags.p_percept_active() {
            for (i, m) in self.percept_prompts.textual.iter().enumerate() {
                out.push((format!("percept.textual.{i}"), m));
            }
        }
        if flags.q_percept_active() {
            for (i, m) in self.percept_prompts.visual.iter().enumerate() {
                out.push((format!("percept.visual.{i}"), m));
            }
        }
        if flags.p_align_active(mode) {
            for (i, m) in self.align_prompts.textual.iter().enumerate() {
                out.push((format!("align.textual.{i}"), m));
            }
        }
        if flags.q_align_active() {
            for (i, m) in self.align_prompts.visual.iter().enumerate() {
                out.push((format!("align.visual.{i}"), m));
            }
        }
        if let Some(c) = &self.couplers {
            for (i, layer) in c.layers.iter().enumerate() {
                out.push((format!("couplers.{i}.weight"), &layer.weight));
                out.push((format!("couplers.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    fn active_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let flags = self.flags();
        let mode = self.mode();
        let mut out: Vec<(String, &mut Mat)> = Vec::new();
        if flags.p_percept_active() {
            for (i, m) in self.percept_prompts.textual.iter_mut().enumerate() {
                out.push((format!("percept.textual.{i}"), m));
            }
        }
        if flags.q_percept_active() {
            for (i, m) in self.percept_prompts.visual.iter_mut().enumerate() {
                out.push((format!("percept.visual.{i}"), m));
            }
        }
        if flags.p_align_active(mode) {
            for (i, m) in self.align_prompts.textual.iter_mut().enumerate() {
                out.push((format!("align.textual.{i}"), m));
            }
        }
        if flags.q_align_active() {
            for (i, m) in self.align_prompts.visual.iter_mut().enumerate() {
                out.push((format!("align.visual.{i}"), m));
            }
        }
        if let Some(c) = &mut self.couplers {
            for (i, layer) in c.layers.iter_mut().enumerate() {
                out.push((format!("couplers.{i}.weight"), &mut layer.weight));
                out.push((format!("couplers.{i}.bias"), &mut layer.bias));
            }
        }
        out
    }

    /// Order-sensitive hash over every tensor in the state.
    pub fn param_hash(&self) -> u64 {
        let mut tensors: Vec<&Mat> = Vec::new();
        tensors.extend(self.percept_prompts.textual.iter());
        tensors.extend(self.percept_prompts.visual.iter());
        tensors.extend(self.align_prompts.textual.iter());
        tensors.extend(self.align_prompts.visual.iter());
        if let Some(c) = &self.couplers {
            for layer in &c.layers {
                tensors.push(&layer.weight);
                tensors.push(&layer.bias);
            }
        }
        mat::param_hash(tensors.into_iter())
    }

    fn empty_prompts(&self, width: usize) -> Vec<Mat> {
        (0..self.fingerprint.backbone.num_layers).map(|_| Mat::zeros(0, width)).collect()
    }

    /// Visual prompts the perceptual encoder actually sees: conditioned
    /// through the couplers when enabled, raw otherwise, none when visual
    /// prompts are ablated.
    pub fn effective_percept_visual(&self) -> Result<Vec<Mat>> {
        let flags = self.flags();
        if !flags.visual_prompts {
            return Ok(self.empty_prompts(self.fingerprint.backbone.vision_width));
        }
        match &self.couplers {
            Some(c) => conditioning::condition_prompts(
                c,
                &self.align_prompts.visual,
                &self.percept_prompts.visual,
            ),
            None => Ok(self.percept_prompts.visual.clone()),
        }
    }

    /// Inference head for the perceptual task.
    pub fn percept_head(&self, pair: AntonymPair) -> Result<HeadState> {
        let flags = self.flags();
        let textual = if flags.textual_prompts {
            self.percept_prompts.textual.clone()
        } else {
            self.empty_prompts(self.fingerprint.backbone.text_width)
        };
        Ok(HeadState { textual_prompts: textual, visual_prompts: self.effective_percept_visual()?, pair })
    }

    /// Inference head for the alignment task (blind mode).
    pub fn align_head(&self, pair: AntonymPair) -> Result<HeadState> {
        let flags = self.flags();
        let textual = if flags.p_align_active(self.mode()) {
            self.align_prompts.textual.clone()
        } else {
            self.empty_prompts(self.fingerprint.backbone.text_width)
        };
        let visual = if flags.visual_prompts {
            self.align_prompts.visual.clone()
        } else {
            self.empty_prompts(self.fingerprint.backbone.vision_width)
        };
        Ok(HeadState { textual_prompts: textual, visual_prompts: visual, pair })
    }
}

// ── losses ───────────────────────────────────────────────────────────

fn mse(predictions: &[f64], targets: &[f64], what: &str) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Degenerate(format!("{what}: empty batch")));
    }
    let n = predictions.len() as f64;
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Mean squared error of alignment predictions against targets.
pub fn loss_align(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    mse(predictions, targets, "loss_align")
}

/// Mean squared error of perceptual predictions against targets.
pub fn loss_percept(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    mse(predictions, targets, "loss_percept")
}

/// Weighted total: perceptual plus lambda times alignment.
pub fn loss_total(l_percept: f64, l_align: f64, lambda: f64) -> Result<f64> {
    if !l_percept.is_finite() || !l_align.is_finite() || !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Numerical(format!(
            "invalid loss inputs ({l_percept}, {l_align}, lambda {lambda})"
        )));
    }
    if lambda == 0.0 {
        return Ok(l_percept);
    }
    Ok(l_percept + lambda * l_align)
}

/// Per-task and total losses from one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub percept: f64,
    pub align: f64,
    pub total: f64,
}

// ── batches ──────────────────────────────────────────────────────────

/// One training batch: cropped images, normalized targets in [0,1], and
/// (for the text-conditioned mode) per-image user prompt tokens.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<RgbImage>,
    pub g_percept: Vec<f64>,
    pub g_align: Vec<f64>,
    pub user_tokens: Vec<Option<Vec<u32>>>,
}

impl Batch {
    pub fn validate(&self, needs_align: bool) -> Result<()> {
        let n = self.images.len();
        if n == 0 {
            return Err(Error::Degenerate("empty batch".into()));
        }
        if self.g_percept.len() != n || self.user_tokens.len() != n {
            return Err(Error::DimensionMismatch("batch field lengths differ".into()));
        }
        if needs_align && self.g_align.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} alignment targets for {n} images",
                self.g_align.len()
            )));
        }
        if self.g_percept.iter().chain(&self.g_align).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite batch targets".into()));
        }
        Ok(())
    }
}

/// Crop and normalize a batch from records. Alignment targets are filled
/// when records carry them and the normalizer has a range for them.
pub fn build_batch(
    backbone: &Backbone,
    records: &[&SampleRecord],
    images: &HashMap<String, RgbImage>,
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Batch> {
    let needs_align = cfg.ablation.auxiliary_task;
    let mut batch = Batch {
        images: Vec::with_capacity(records.len()),
        g_percept: Vec::with_capacity(records.len()),
        g_align: Vec::new(),
        user_tokens: Vec::with_capacity(records.len()),
    };
    for r in records {
        let img = images.get(&r.image_path).ok_or_else(|| {
            Error::Image(format!("image {} not loaded", r.image_path))
        })?;
        batch.images.push(sample_crop(img, cfg.crop_size, rng)?);
        batch.g_percept.push(normalizer.normalize_percept(r.mos_percept));
        if needs_align {
            let raw = r.mos_align.ok_or_else(|| {
                Error::Manifest(format!(
                    "{} lacks an alignment score; the auxiliary task needs one",
                    r.image_path
                ))
            })?;
            batch.g_align.push(normalizer.normalize_align(raw)?);
        }
        let tokens = match (&r.user_prompt, cfg.alignment_mode) {
            (Some(p), AlignmentMode::TextConditioned) if needs_align => {
                let t = backbone.tokenize(p);
                if t.is_empty() {
                    return Err(Error::Degenerate(format!("{}: empty user prompt", r.image_path)));
                }
                Some(t)
            }
            (None, AlignmentMode::TextConditioned) if needs_align => {
                return Err(Error::Manifest(format!(
                    "{} has no user prompt; text-conditioned alignment needs one",
                    r.image_path
                )));
            }
            _ => None,
        };
        batch.user_tokens.push(tokens);
    }
    batch.validate(needs_align)?;
    Ok(batch)
}

// ── gradient computation ─────────────────────────────────────────────

struct TapedTrainables {
    /// (name, leaf id), ordered like `active_param_names`.
    leaves: Vec<(String, BufId)>,
    p_percept: Vec<BufId>,
    q_percept_effective: Vec<BufId>,
    p_align: Vec<BufId>,
    q_align: Vec<BufId>,
}

fn push_trainables(tape: &mut Tape, state: &TrainableState) -> Result<TapedTrainables> {
    let flags = state.flags();
    let mode = state.mode();
    let mut leaves = Vec::new();
    let mut p_percept = Vec::new();
    let mut q_percept_raw = Vec::new();
    let mut p_align = Vec::new();
    let mut q_align = Vec::new();

    if flags.p_percept_active() {
        for (i, m) in state.percept_prompts.textual.iter().enumerate() {
            let id = tape.push(m);
            leaves.push((format!("percept.textual.{i}"), id));
            p_percept.push(id);
        }
    }
    if flags.q_percept_active() {
        for (i, m) in state.percept_prompts.visual.iter().enumerate() {
            let id = tape.push(m);
            leaves.push((format!("percept.visual.{i}"), id));
            q_percept_raw.push(id);
        }
    }
    if flags.p_align_active(mode) {
        for (i, m) in state.align_prompts.textual.iter().enumerate() {
            let id = tape.push(m);
            leaves.push((format!("align.textual.{i}"), id));
            p_align.push(id);
        }
    }
    if flags.q_align_active() {
        for (i, m) in state.align_prompts.visual.iter().enumerate() {
            let id = tape.push(m);
            leaves.push((format!("align.visual.{i}"), id));
            q_align.push(id);
        }
    }
    let q_percept_effective = match &state.couplers {
        Some(c) => {
            let mut coupler_ids = Vec::new();
            for (i, layer) in c.layers.iter().enumerate() {
                let w = tape.push(&layer.weight);
                let bias = tape.push(&layer.bias);
                leaves.push((format!("couplers.{i}.weight"), w));
                leaves.push((format!("couplers.{i}.bias"), bias));
                coupler_ids.push((w, bias));
            }
            conditioning::trace_condition(tape, &coupler_ids, &q_align, &q_percept_raw)?
        }
        None => q_percept_raw,
    };
    Ok(TapedTrainables { leaves, p_percept, q_percept_effective, p_align, q_align })
}

/// Losses and per-parameter gradients over one batch, without updating
/// anything. Gradient order matches `active_param_names`.
pub fn batch_gradients(
    backbone: &Backbone,
    state: &TrainableState,
    batch: &Batch,
) -> Result<(LossBreakdown, Vec<(String, Mat)>)> {
    let (breakdown, grads) = batch_pass(backbone, state, batch, true)?;
    Ok((breakdown, grads))
}

/// Losses only (no backward pass).
pub fn batch_loss(backbone: &Backbone, state: &TrainableState, batch: &Batch) -> Result<LossBreakdown> {
    Ok(batch_pass(backbone, state, batch, false)?.0)
}

fn batch_pass(
    backbone: &Backbone,
    state: &TrainableState,
    batch: &Batch,
    with_gradients: bool,
) -> Result<(LossBreakdown, Vec<(String, Mat)>)> {
    let cfg = &state.fingerprint.train;
    let flags = state.flags();
    let aux = flags.auxiliary_task;
    batch.validate(aux)?;

    let mut tape = Tape::new();
    let t = push_trainables(&mut tape, state)?;

    let percept_pair = AntonymPair::percept_default();
    let pos_ids = backbone.tokenize(&percept_pair.positive_text);
    let neg_ids = backbone.tokenize(&percept_pair.negative_text);
    let z_pos_p = prompted::trace_text_encode(&mut tape, backbone, &pos_ids, &t.p_percept)?;
    let z_neg_p = prompted::trace_text_encode(&mut tape, backbone, &neg_ids, &t.p_percept)?;

    let align_antonyms = if aux && cfg.alignment_mode == AlignmentMode::Blind {
        let pair = AntonymPair::align_default();
        let pos = backbone.tokenize(&pair.positive_text);
        let neg = backbone.tokenize(&pair.negative_text);
        Some((
            prompted::trace_text_encode(&mut tape, backbone, &pos, &t.p_align)?,
            prompted::trace_text_encode(&mut tape, backbone, &neg, &t.p_align)?,
        ))
    } else {
        None
    };

    let n = batch.images.len();
    let inv_n = 1.0 / n as f64;
    let mut percept_errors = Vec::with_capacity(n);
    let mut align_errors = Vec::with_capacity(n);
    for (i, image) in batch.images.iter().enumerate() {
        let x_p = prompted::trace_image_encode(&mut tape, backbone, image, &t.q_percept_effective)?;
        let s_pos = tape.cosine_sim(x_p, z_pos_p);
        let s_neg = tape.cosine_sim(x_p, z_neg_p);
        let q_p = tape.pair_score(s_pos, s_neg);
        percept_errors.push(tape.squared_error(q_p, batch.g_percept[i]));

        if aux {
            let x_a = prompted::trace_image_encode(&mut tape, backbone, image, &t.q_align)?;
            let q_a = match (&align_antonyms, &batch.user_tokens[i]) {
                (Some((z_pos_a, z_neg_a)), _) => {
                    let sa_pos = tape.cosine_sim(x_a, *z_pos_a);
                    let sa_neg = tape.cosine_sim(x_a, *z_neg_a);
                    tape.pair_score(sa_pos, sa_neg)
                }
                (None, Some(tokens)) => {
                    // Text-conditioned: logistic of the raw-text similarity,
                    // expressed as a pair score against a zero logit.
                    let z_u = prompted::trace_text_encode(&mut tape, backbone, tokens, &[])?;
                    let s = tape.cosine_sim(x_a, z_u);
                    let zero = tape.push_raw(vec![0.0], 1, 1);
                    tape.pair_score(s, zero)
                }
                (None, None) => {
                    return Err(Error::Manifest(format!(
                        "batch item {i} lacks user prompt tokens for text-conditioned alignment"
                    )));
                }
            };
            align_errors.push(tape.squared_error(q_a, batch.g_align[i]));
        }
    }

    let weights = vec![inv_n; n];
    let l_percept = tape.weighted_sum(&percept_errors, &weights);
    let (l_align_value, total) = if aux {
        let l_align = tape.weighted_sum(&align_errors, &weights);
        let total = tape.weighted_sum(&[l_percept, l_align], &[1.0, cfg.lambda]);
        (tape.scalar(l_align), total)
    } else {
        (0.0, l_percept)
    };
    let breakdown = LossBreakdown {
        percept: tape.scalar(l_percept),
        align: l_align_value,
        total: tape.scalar(total),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {}: percept {}, align {}",
            state.step_count, breakdown.percept, breakdown.align
        )));
    }
    if !with_gradients {
        return Ok((breakdown, Vec::new()));
    }

    tape.backward(total);
    let grads = t
        .leaves
        .iter()
        .map(|(name, id)| {
            let (rows, cols) = tape.shape(*id);
            (name.clone(), Mat::from_vec(rows, cols, tape.grad(*id)))
        })
        .collect();
    Ok((breakdown, grads))
}

// ── optimizer ────────────────────────────────────────────────────────

/// One optimization step over a batch: gradients, adaptive-moment update,
/// step counter. The backbone is untouched.
pub fn train_step(
    backbone: &Backbone,
    state: &mut TrainableState,
    batch: &Batch,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = batch_gradients(backbone, state, batch)?;
    let lr = state.fingerprint.train.learning_rate;
    let t = (state.step_count + 1) as f64;
    let bias1 = 1.0 - ADAM_BETA1.powf(t);
    let bias2 = 1.0 - ADAM_BETA2.powf(t);

    let mut moments = std::mem::take(&mut state.moments);
    {
        let params = state.active_params_mut();
        if params.len() != grads.len() || params.len() != moments.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                moments.len()
            )));
        }
        for (((name, param), (gname, grad)), (m, v)) in
            params.into_iter().zip(&grads).zip(moments.iter_mut())
        {
            if &name != gname {
                return Err(Error::DimensionMismatch(format!(
                    "parameter order mismatch: {name} vs {gname}"
                )));
            }
            for i in 0..param.data.len() {
                let g = grad.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * g;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m.data[i] / bias1;
                let v_hat = v.data[i] / bias2;
                param.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            if !param.is_finite() {
                return Err(Error::Numerical(format!("parameter {name} became non-finite")));
            }
        }
    }
    state.moments = moments;
    state.step_count += 1;
    Ok(breakdown)
}

// ── fit loop ─────────────────────────────────────────────────────────

/// One epoch's aggregate losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_percept: f64,
    pub loss_align: f64,
    pub loss_total: f64,
    pub wall_seconds: f64,
}

/// Load every training image once up front.
pub fn load_images(
    records: &[SampleRecord],
    provider: &dyn ImageProvider,
) -> Result<HashMap<String, RgbImage>> {
    let mut out = HashMap::new();
    for r in records {
        if !out.contains_key(&r.image_path) {
            out.insert(r.image_path.clone(), provider.load(&r.image_path)?);
        }
    }
    Ok(out)
}

/// Full training run: epochs x batches of train_step over random crops of
/// the training split. Deterministic given the seed; loss values in the
/// log do not depend on wall time.
pub fn fit(
    backbone: &Backbone,
    split: &DatasetSplit,
    provider: &dyn ImageProvider,
    cfg: &TrainConfig,
) -> Result<(TrainableState, Vec<EpochLog>)> {
    if split.train.is_empty() {
        return Err(Error::Degenerate("empty training split".into()));
    }
    let mut state = TrainableState::init(&backbone.cfg, cfg)?;
    let images = load_images(&split.train, provider)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        let mut shuffle_rng = mat::seeded_rng(cfg.seed, &format!("fit.shuffle.{epoch}"));
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }
        let mut crop_rng = mat::seeded_rng(cfg.seed, &format!("fit.crops.{epoch}"));
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let records: Vec<&SampleRecord> = chunk.iter().map(|&i| &split.train[i]).collect();
            let batch =
                build_batch(backbone, &records, &images, &split.normalizer, cfg, &mut crop_rng)?;
            let breakdown = train_step(backbone, &mut state, &batch)?;
            sums.0 += breakdown.percept;
            sums.1 += breakdown.align;
            sums.2 += breakdown.total;
            steps += 1;
        }
        let d = steps as f64;
        log.push(EpochLog {
            epoch,
            loss_percept: sums.0 / d,
            loss_align: sums.1 / d,
            loss_total: sums.2 / d,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((state, log))
}

// ── state checkpointing ──────────────────────────────────────────────

pub fn save_state(path: &Path, state: &TrainableState) -> Result<()> {
    let config = serde_json::json!({
        "fingerprint": state.fingerprint,
        "step_count": state.step_count,
    });
    let mut c = Container::new(Dtype::F64, config);
    for (i, m) in state.percept_prompts.textual.iter().enumerate() {
        c.push(&format!("percept.textual.{i}"), m.clone());
    }
    for (i, m) in state.percept_prompts.visual.iter().enumerate() {
        c.push(&format!("percept.visual.{i}"), m.clone());
    }
    for (i, m) in state.align_prompts.textual.iter().enumerate() {
        c.push(&format!("align.textual.{i}"), m.clone());
    }
    for (i, m) in state.align_prompts.visual.iter().enumerate() {
        c.push(&format!("align.visual.{i}"), m.clone());
    }
    if let Some(couplers) = &state.couplers {
        for (i, layer) in couplers.layers.iter().enumerate() {
            c.push(&format!("couplers.{i}.weight"), layer.weight.clone());
            c.push(&format!("couplers.{i}.bias"), layer.bias.clone());
        }
    }
    for ((name, _), (m, v)) in state.active_params().iter().zip(&state.moments) {
        c.push(&format!("adam.m.{name}"), m.clone());
        c.push(&format!("adam.v.{name}"), v.clone());
    }
    checkpoint::save(path, &c)
}

pub fn load_state(path: &Path) -> Result<TrainableState> {
    let c = checkpoint::load(path)?;
    if c.dtype != Dtype::F64 {
        return Err(Error::Checkpoint("trainable state container must be f64".into()));
    }
    let fingerprint: ConfigFingerprint = serde_json::from_value(
        c.config
            .get("fingerprint")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing fingerprint in state header".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("fingerprint decode: {e}")))?;
    let step_count = c
        .config
        .get("step_count")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("missing step_count in state header".into()))?;

    // Rebuild the shapes from the fingerprint, then overwrite every tensor.
    let mut state = TrainableState::init(&fingerprint.backbone, &fingerprint.train)?;
    state.step_count = step_count;
    let pull = |name: &str, like: &Mat| -> Result<Mat> {
        Ok(c.tensor_shaped(name, like.rows, like.cols)?.clone())
    };
    for (i, m) in state.percept_prompts.textual.iter_mut().enumerate() {
        *m = pull(&format!("percept.textual.{i}"), m)?;
    }
    for (i, m) in state.percept_prompts.visual.iter_mut().enumerate() {
        *m = pull(&format!("percept.visual.{i}"), m)?;
    }
    for (i, m) in state.align_prompts.textual.iter_mut().enumerate() {
        *m = pull(&format!("align.textual.{i}"), m)?;
    }
    for (i, m) in state.align_prompts.visual.iter_mut().enumerate() {
        *m = pull(&format!("align.visual.{i}"), m)?;
    }
    if let Some(couplers) = &mut state.couplers {
        for (i, layer) in couplers.layers.iter_mut().enumerate() {
            layer.weight = pull(&format!("couplers.{i}.weight"), &layer.weight)?;
            layer.bias = pull(&format!("couplers.{i}.bias"), &layer.bias)?;
        }
    }
    let names = state.active_param_names();
    let mut moments = Vec::with_capacity(names.len());
    for (name, (m, v)) in names.iter().zip(&state.moments) {
        moments.push((pull(&format!("adam.m.{name}"), m)?, pull(&format!("adam.v.{name}"), v)?));
    }
    state.moments = moments;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::make_toy_backbone;
    use crate::data::{make_synthetic_dataset, split_by_prompt, MemoryProvider};
    use tempfile::tempdir;

    fn toy_cfg(flags: AblationFlags) -> TrainConfig {
        TrainConfig {
            prompt_length: 2,
            lambda: 0.1,
            learning_rate: 0.01,
            epochs: 2,
            batch_size: 4,
            crop_size: 32,
            seed: 5,
            ablation: flags,
            alignment_mode: AlignmentMode::Blind,
        }
    }

    fn toy_setup(flags: AblationFlags) -> (Backbone, TrainableState, Batch) {
        let backbone = make_toy_backbone(7, &BackboneConfig::default()).unwrap();
        let cfg = toy_cfg(flags);
        let state = TrainableState::init(&backbone.cfg, &cfg).unwrap();
        let ds = make_synthetic_dataset(3, 8, 4).unwrap();
        let split = split_by_prompt(&ds.records, 0.8, 1).unwrap();
        let images = load_images(&ds.records, &MemoryProvider { images: ds.images }).unwrap();
        let refs: Vec<&SampleRecord> = split.train.iter().collect();
        let mut rng = mat::seeded_rng(9, "batch");
        let batch =
            build_batch(&backbone, &refs, &images, &split.normalizer, &cfg, &mut rng).unwrap();
        (backbone, state, batch)
    }

    #[test]
    fn loss_fixtures() {
        assert_eq!(loss_align(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(loss_align(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.25);
        assert!((loss_align(&[0.7], &[0.2]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(loss_percept(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.25);
        assert!(loss_percept(&[0.1], &[0.1, 0.2]).is_err());
        assert!(loss_percept(&[], &[]).is_err());
    }

    #[test]
    fn loss_total_fixtures() {
        assert_eq!(loss_total(0.3, 0.9, 0.0).unwrap(), 0.3);
        assert!((loss_total(0.2, 0.5, 0.1).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(loss_total(0.0, 0.0, 0.1).unwrap(), 0.0);
        assert!(loss_total(f64::NAN, 0.0, 0.1).is_err());
        assert!(loss_total(0.1, 0.1, -0.5).is_err());
    }

    #[test]
    fn flags_constraint_and_trainable_sets() {
        let bad = AblationFlags { visual_prompts: false, ..AblationFlags::default() };
        assert!(bad.validate().is_err());

        let full = toy_setup(AblationFlags::default()).1;
        let names = full.active_param_names();
        assert!(names.contains(&"percept.textual.0".to_string()));
        assert!(names.contains(&"align.visual.1".to_string()));
        assert!(names.contains(&"couplers.0.weight".to_string()));

        let a1 = AblationFlags {
            textual_prompts: true,
            visual_prompts: false,
            conditioning: false,
            auxiliary_task: false,
        };
        let state = toy_setup(a1).1;
        let names = state.active_param_names();
        assert_eq!(names, vec!["percept.textual.0", "percept.textual.1"]);

        let zero = toy_setup(AblationFlags::zero_shot()).1;
        assert!(zero.active_param_names().is_empty());
        assert_eq!(zero.percept_prompts.prompt_length, 0);
    }

    #[test]
    fn gradients_cover_exactly_the_active_set() {
        let (backbone, state, batch) = toy_setup(AblationFlags::default());
        let (_, grads) = batch_gradients(&backbone, &state, &batch).unwrap();
        assert_eq!(
            grads.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
            state.active_param_names()
        );
        for (name, g) in &grads {
            let norm: f64 = g.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-12, "{name} received no gradient");
        }
    }

    #[test]
    fn conditioning_feeds_align_prompts_without_aux_loss() {
        let flags = AblationFlags {
            textual_prompts: true,
            visual_prompts: true,
            conditioning: true,
            auxiliary_task: false,
        };
        let (backbone, mut state, batch) = toy_setup(flags);
        let (breakdown, grads) = batch_gradients(&backbone, &state, &batch).unwrap();
        assert_eq!(breakdown.align, 0.0);
        assert_eq!(breakdown.total, breakdown.percept);
        // At identity init the coupler's align block is zero, so no gradient
        // reaches the align prompts yet -- but the block itself gets one.
        let d = backbone.cfg.vision_width;
        let (_, gw) = grads.iter().find(|(n, _)| n == "couplers.0.weight").unwrap();
        let align_block: f64 = (0..d)
            .map(|r| (0..d).map(|c| gw.get(r, c).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!(align_block > 1e-12, "coupler align block received no gradient");
        // Once the block moves off zero, the channel opens.
        train_step(&backbone, &mut state, &batch).unwrap();
        let (_, grads) = batch_gradients(&backbone, &state, &batch).unwrap();
        let (_, g) = grads.iter().find(|(n, _)| n == "align.visual.0").unwrap();
        let norm: f64 = g.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "couplers passed no gradient into align visual prompts");
    }

    #[test]
    fn dead_branch_leaves_align_prompts_exactly_unchanged() {
        let flags = AblationFlags {
            textual_prompts: true,
            visual_prompts: true,
            conditioning: false,
            auxiliary_task: false,
        };
        let (backbone, mut state, batch) = toy_setup(flags);
        let before_t: Vec<Mat> = state.align_prompts.textual.clone();
        let before_v: Vec<Mat> = state.align_prompts.visual.clone();
        train_step(&backbone, &mut state, &batch).unwrap();
        for (a, b) in before_t.iter().zip(&state.align_prompts.textual) {
            assert!(a.bits_eq(b));
        }
        for (a, b) in before_v.iter().zip(&state.align_prompts.visual) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn repeated_steps_reduce_loss_on_a_fixed_batch() {
        let (backbone, mut state, batch) = toy_setup(AblationFlags::default());
        let initial = batch_loss(&backbone, &state, &batch).unwrap().total;
        for _ in 0..200 {
            train_step(&backbone, &mut state, &batch).unwrap();
        }
        let final_loss = batch_loss(&backbone, &state, &batch).unwrap().total;
        assert!(
            final_loss < initial,
            "loss did not decrease: {initial} -> {final_loss}"
        );
        assert_eq!(state.step_count, 200);
    }

    #[test]
    fn train_step_leaves_backbone_untouched() {
        let (backbone, mut state, batch) = toy_setup(AblationFlags::default());
        let hash = backbone.param_hash();
        for _ in 0..5 {
            train_step(&backbone, &mut state, &batch).unwrap();
        }
        assert_eq!(backbone.param_hash(), hash);
    }

    #[test]
    fn sampled_gradients_match_finite_differences() {
        let (backbone, state, batch) = toy_setup(AblationFlags::default());
        let (_, grads) = batch_gradients(&backbone, &state, &batch).unwrap();
        let h = 1e-5;
        // One entry from each parameter family.
        for (name, flat) in [
            ("percept.textual.0", 3usize),
            ("percept.visual.1", 7),
            ("align.visual.0", 5),
            ("couplers.1.weight", 20),
            ("couplers.0.bias", 2),
        ] {
            let analytic = grads.iter().find(|(n, _)| n == name).unwrap().1.data[flat];
            let eval = |delta: f64| -> f64 {
                let mut s = state.clone();
                {
                    let mut params = s.active_params_mut();
                    let slot = params.iter_mut().find(|(n, _)| n == name).unwrap();
                    slot.1.data[flat] += delta;
                }
                batch_loss(&backbone, &s, &batch).unwrap().total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() <= tol,
                "{name}[{flat}]: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn fit_is_deterministic_and_respects_epochs_zero() {
        let backbone = make_toy_backbone(7, &BackboneConfig::default()).unwrap();
        let ds = make_synthetic_dataset(4, 10, 5).unwrap();
        let split = split_by_prompt(&ds.records, 0.8, 2).unwrap();
        let provider = MemoryProvider { images: ds.images };
        let cfg = toy_cfg(AblationFlags::default());

        let (state_a, log_a) = fit(&backbone, &split, &provider, &cfg).unwrap();
        let (state_b, log_b) = fit(&backbone, &split, &provider, &cfg).unwrap();
        assert_eq!(log_a.len(), 2);
        for (a, b) in log_a.iter().zip(&log_b) {
            assert_eq!(a.loss_percept, b.loss_percept);
            assert_eq!(a.loss_align, b.loss_align);
            assert_eq!(a.loss_total, b.loss_total);
        }
        assert_eq!(state_a.param_hash(), state_b.param_hash());

        let mut zero_epochs = cfg;
        zero_epochs.epochs = 0;
        let (state_z, log_z) = fit(&backbone, &split, &provider, &zero_epochs).unwrap();
        assert!(log_z.is_empty());
        assert_eq!(state_z.step_count, 0);
        assert_eq!(
            state_z.param_hash(),
            TrainableState::init(&backbone.cfg, &zero_epochs).unwrap().param_hash()
        );
    }

    #[test]
    fn state_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let (backbone, mut state, batch) = toy_setup(AblationFlags::default());
        for _ in 0..3 {
            train_step(&backbone, &mut state, &batch).unwrap();
        }
        save_state(&path, &state).unwrap();
        let back = load_state(&path).unwrap();
        assert_eq!(back.step_count, 3);
        assert_eq!(back.fingerprint, state.fingerprint);
        assert_eq!(back.param_hash(), state.param_hash());
        for ((a, _), (b, _)) in state.moments.iter().zip(&back.moments) {
            assert!(a.bits_eq(b));
        }
        for ((_, a), (_, b)) in state.moments.iter().zip(&back.moments) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn corrupted_state_file_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let (_, state, _) = toy_setup(AblationFlags::default());
        save_state(&path, &state).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_state(&path).is_err());
    }

    #[test]
    fn fingerprint_conflicts_name_the_field() {
        let (_, state, _) = toy_setup(AblationFlags::default());
        let mut other = state.fingerprint.clone();
        other.train.prompt_length = 4;
        let err = state.fingerprint.check_shapes(&other).unwrap_err().to_string();
        assert!(err.contains("prompt_length"), "{err}");
        let mut flag_conflict = state.fingerprint.clone();
        flag_conflict.train.ablation.conditioning = false;
        let err = state.fingerprint.check_shapes(&flag_conflict).unwrap_err().to_string();
        assert!(err.contains("ablation"), "{err}");
        assert!(state.fingerprint.check_shapes(&state.fingerprint).is_ok());
    }

    #[test]
    fn percept_predictions_ignore_align_textual_prompts() {
        let (backbone, mut state, _) = toy_setup(AblationFlags::default());
        let ds = make_synthetic_dataset(11, 2, 2).unwrap();
        let side = backbone.cfg.image_size;
        let img = &ds.images.values().next().unwrap().resize_bilinear(side, side).unwrap();
        let head = state.percept_head(AntonymPair::percept_default()).unwrap();
        let before = crate::scoring::score_image(&backbone, img, &head).unwrap();
        for m in &mut state.align_prompts.textual {
            for v in &mut m.data {
                *v += 10.0;
            }
        }
        let head = state.percept_head(AntonymPair::percept_default()).unwrap();
        let after = crate::scoring::score_image(&backbone, img, &head).unwrap();
        assert_eq!(before.value.to_bits(), after.value.to_bits());
    }
}
