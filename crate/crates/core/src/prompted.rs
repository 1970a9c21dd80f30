//! Deep prompt injection around the frozen dual encoder.
//!
//! Fresh learnable textual prompts are prepended before the word tokens at
//! every text layer; fresh learnable visual prompts are appended after the
//! patch tokens at every vision layer. After each layer the outputs at
//! prompt positions are discarded, so prompts influence the representation
//! only through attention mixing inside their own layer.
//!
//! The traced entry points take prompt buffers already living on a tape
//! (leaf pushes during training, coupler outputs for the conditioned task)
//! and return the representation buffer, so gradients reach every prompt.

use crate::backbone::{Backbone, BackboneConfig, TapedLayer};
use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::scoring::TaskTag;
use crate::tape::{BufId, Tape};

/// Learnable prompts for one task: one textual and one visual matrix per
/// layer, all sharing prompt length b. b = 0 is the prompt-free mode.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub textual: Vec<Mat>,
    pub visual: Vec<Mat>,
    pub prompt_length: usize,
    pub task_tag: TaskTag,
}

/// Initialization spread for prompt entries.
pub const PROMPT_INIT_STD: f64 = 0.02;

impl PromptSet {
    /// Seeded normal initialization. Tensor-name seeding means the same
    /// (seed, task) draws identical prompts regardless of which other
    /// parameter groups exist in the run.
    pub fn seeded(seed: u64, cfg: &BackboneConfig, b: usize, task: TaskTag) -> Self {
        let draw = |axis: &str, i: usize, width: usize| {
            let mut rng = mat::seeded_rng(seed, &format!("prompts.{task}.{axis}.{i}"));
            Mat::random_normal(b, width, PROMPT_INIT_STD, &mut rng)
        };
        PromptSet {
            textual: (0..cfg.num_layers).map(|i| draw("textual", i, cfg.text_width)).collect(),
            visual: (0..cfg.num_layers).map(|i| draw("visual", i, cfg.vision_width)).collect(),
            prompt_length: b,
            task_tag: task,
        }
    }

    /// Prompt-free set: k empty matrices per tower.
    pub fn empty(cfg: &BackboneConfig, task: TaskTag) -> Self {
        PromptSet {
            textual: (0..cfg.num_layers).map(|_| Mat::zeros(0, cfg.text_width)).collect(),
            visual: (0..cfg.num_layers).map(|_| Mat::zeros(0, cfg.vision_width)).collect(),
            prompt_length: 0,
            task_tag: task,
        }
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.textual.len() != cfg.num_layers || self.visual.len() != cfg.num_layers {
            return Err(Error::DimensionMismatch(format!(
                "prompt set has {}/{} layer matrices, backbone has {}",
                self.textual.len(),
                self.visual.len(),
                cfg.num_layers
            )));
        }
        for (i, m) in self.textual.iter().enumerate() {
            if m.rows != self.prompt_length || m.cols != cfg.text_width {
                return Err(Error::DimensionMismatch(format!(
                    "textual prompt {i} is {}x{}, expected {}x{}",
                    m.rows, m.cols, self.prompt_length, cfg.text_width
                )));
            }
            if !m.is_finite() {
                return Err(Error::Numerical(format!("textual prompt {i} is non-finite")));
            }
        }
        for (i, m) in self.visual.iter().enumerate() {
            if m.rows != self.prompt_length || m.cols != cfg.vision_width {
                return Err(Error::DimensionMismatch(format!(
                    "visual prompt {i} is {}x{}, expected {}x{}",
                    m.rows, m.cols, self.prompt_length, cfg.vision_width
                )));
            }
            if !m.is_finite() {
                return Err(Error::Numerical(format!("visual prompt {i} is non-finite")));
            }
        }
        Ok(())
    }
}

/// Joint-space image representation.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub representation: Vec<f64>,
}

/// Joint-space text representation.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub representation: Vec<f64>,
}

fn checked_representation(rep: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if rep.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} representation is non-finite")));
    }
    if rep.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate(format!("{what} representation has zero norm")));
    }
    Ok(rep)
}

fn validate_prompt_buffers(
    tape: &Tape,
    prompt_ids: &[BufId],
    num_layers: usize,
    width: usize,
) -> Result<usize> {
    if prompt_ids.is_empty() {
        return Ok(0);
    }
    if prompt_ids.len() != num_layers {
        return Err(Error::DimensionMismatch(format!(
            "{} prompt buffers for {num_layers} layers",
            prompt_ids.len()
        )));
    }
    let (b, first_cols) = tape.shape(prompt_ids[0]);
    if first_cols != width {
        return Err(Error::DimensionMismatch(format!(
            "prompt width {first_cols}, tower width {width}"
        )));
    }
    for &id in prompt_ids {
        let (rows, cols) = tape.shape(id);
        if rows != b || cols != width {
            return Err(Error::DimensionMismatch(format!(
                "prompt buffer is {rows}x{cols}, expected {b}x{width}"
            )));
        }
        if tape.data(id).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite prompt entries".into()));
        }
    }
    Ok(b)
}

/// Trace the prompted image encoder onto `tape`. `prompt_ids` holds one
/// b x d_v buffer per layer (already on the tape); empty slice means the
/// prompt-free path. Returns the 1 x d_vl representation buffer.
pub fn trace_image_encode(
    tape: &mut Tape,
    backbone: &Backbone,
    image: &RgbImage,
    prompt_ids: &[BufId],
) -> Result<BufId> {
    let b = validate_prompt_buffers(tape, prompt_ids, backbone.cfg.num_layers, backbone.cfg.vision_width)?;
    let seq = backbone.embed_patches(image)?;
    let kept = seq.len();
    let mut x = tape.push(&seq.tokens);
    for (i, layer) in backbone.vision_layers.iter().enumerate() {
        let taped = TapedLayer::push(tape, layer);
        if b > 0 {
            let joined = tape.concat_rows(&[x, prompt_ids[i]]);
            let out = taped.forward(tape, joined);
            x = tape.slice_rows(out, 0, kept);
        } else {
            x = taped.forward(tape, x);
        }
    }
    let class = tape.slice_rows(x, 0, 1);
    let proj = tape.push(&backbone.vision_proj);
    Ok(tape.matmul(class, proj))
}

/// Trace the prompted text encoder onto `tape`. Prompts are prepended, so
/// word tokens sit at rows b..b+T inside each layer and rows 0..T after the
/// per-layer discard; the representation comes from the last word token.
pub fn trace_text_encode(
    tape: &mut Tape,
    backbone: &Backbone,
    token_ids: &[u32],
    prompt_ids: &[BufId],
) -> Result<BufId> {
    let b = validate_prompt_buffers(tape, prompt_ids, backbone.cfg.num_layers, backbone.cfg.text_width)?;
    let seq = backbone.embed_text(token_ids)?;
    let kept = seq.len();
    let mut x = tape.push(&seq.tokens);
    for (i, layer) in backbone.text_layers.iter().enumerate() {
        let taped = TapedLayer::push(tape, layer);
        if b > 0 {
            let joined = tape.concat_rows(&[prompt_ids[i], x]);
            let out = taped.forward(tape, joined);
            x = tape.slice_rows(out, b, kept);
        } else {
            x = taped.forward(tape, x);
        }
    }
    let last = tape.slice_rows(x, kept - 1, 1);
    let proj = tape.push(&backbone.text_proj);
    Ok(tape.matmul(last, proj))
}

/// Encode an image with per-layer visual prompts.
pub fn encode_image_prompted(
    backbone: &Backbone,
    image: &RgbImage,
    visual_prompts: &[Mat],
) -> Result<EncodedImage> {
    let mut tape = Tape::new();
    let ids: Vec<BufId> =
        visual_prompts.iter().filter(|m| m.rows > 0).map(|m| tape.push(m)).collect();
    if !ids.is_empty() && ids.len() != visual_prompts.len() {
        return Err(Error::DimensionMismatch("mixed empty and nonempty prompt matrices".into()));
    }
    let rep = trace_image_encode(&mut tape, backbone, image, &ids)?;
    Ok(EncodedImage { representation: checked_representation(tape.data(rep).to_vec(), "image")? })
}

/// Encode token ids with per-layer textual prompts.
pub fn encode_text_prompted(
    backbone: &Backbone,
    token_ids: &[u32],
    textual_prompts: &[Mat],
) -> Result<EncodedText> {
    let mut tape = Tape::new();
    let ids: Vec<BufId> =
        textual_prompts.iter().filter(|m| m.rows > 0).map(|m| tape.push(m)).collect();
    if !ids.is_empty() && ids.len() != textual_prompts.len() {
        return Err(Error::DimensionMismatch("mixed empty and nonempty prompt matrices".into()));
    }
    let rep = trace_text_encode(&mut tape, backbone, token_ids, &ids)?;
    Ok(EncodedText { representation: checked_representation(tape.data(rep).to_vec(), "text")? })
}

/// Prompt-free text encoding (used when feeding user descriptions directly).
pub fn encode_text_raw(backbone: &Backbone, token_ids: &[u32]) -> Result<EncodedText> {
    encode_text_prompted(backbone, token_ids, &[])
}
