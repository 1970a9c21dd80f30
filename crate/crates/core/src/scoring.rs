//! Antonym prompt-pairing score heads.
//!
//! A task head encodes the image once, encodes a positive/negative antonym
//! text pair, and maps the two cosine similarities through a two-way softmax
//! taken at the positive slot. Raw cosine values are exponentiated directly
//! (no temperature), so scores live in roughly (0.119, 0.881) for
//! cosine-bounded similarities.

use crate::backbone::Backbone;
use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::prompted::{self, EncodedText};

/// Which score head a prompt set, antonym pair, or score belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskTag {
    Align,
    Percept,
}

impl std::fmt::Display for TaskTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskTag::Align => write!(f, "align"),
            TaskTag::Percept => write!(f, "percept"),
        }
    }
}

/// A positive/negative antonym text pair for one task.
#[derive(Debug, Clone)]
pub struct AntonymPair {
    pub positive_text: String,
    pub negative_text: String,
    pub task_tag: TaskTag,
}

impl AntonymPair {
    pub fn new(positive: &str, negative: &str, task: TaskTag) -> Result<Self> {
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::InvalidConfig("antonym prompts must be nonempty".into()));
        }
        Ok(AntonymPair {
            positive_text: positive.to_string(),
            negative_text: negative.to_string(),
            task_tag: task,
        })
    }

    /// Default pair for the alignment task.
    pub fn align_default() -> Self {
        AntonymPair {
            positive_text: "Aligned photo.".to_string(),
            negative_text: "Misaligned photo.".to_string(),
            task_tag: TaskTag::Align,
        }
    }

    /// Default pair for the perceptual task.
    pub fn percept_default() -> Self {
        AntonymPair {
            positive_text: "Good photo.".to_string(),
            negative_text: "Bad photo.".to_string(),
            task_tag: TaskTag::Percept,
        }
    }
}

/// A quality prediction in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScore {
    pub value: f64,
    pub task_tag: TaskTag,
}

impl QualityScore {
    fn checked(value: f64, task: TaskTag) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 || value >= 1.0 {
            return Err(Error::Numerical(format!("quality score {value} outside (0,1)")));
        }
        Ok(QualityScore { value, task_tag: task })
    }
}

// ── raw math (shared with the tape ops) ──────────────────────────────

pub(crate) fn cosine_raw(x: &[f64], z: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(z).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nx * nz)
}

pub(crate) fn pair_score_raw(s_pos: f64, s_neg: f64) -> f64 {
    // Max-shifted two-way softmax: the shift and the shared denominator make
    // the complement identity q(a,b) + q(b,a) = 1 hold to the last ulp.
    let m = s_pos.max(s_neg);
    let e_pos = (s_pos - m).exp();
    let e_neg = (s_neg - m).exp();
    e_pos / (e_pos + e_neg)
}

// ── public scoring operations ────────────────────────────────────────

/// Cosine similarity of two joint-space vectors.
pub fn cosine_similarity(x: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() != z.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine_similarity lengths {} vs {}",
            x.len(),
            z.len()
        )));
    }
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || nz == 0.0 {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
    }
    Ok(cosine_raw(x, z))
}

/// Two-way softmax over (s_pos, s_neg), taken at the positive slot.
pub fn pair_score(s_pos: f64, s_neg: f64, task: TaskTag) -> Result<QualityScore> {
    if !s_pos.is_finite() || !s_neg.is_finite() {
        return Err(Error::Numerical(format!("non-finite similarity ({s_pos}, {s_neg})")));
    }
    QualityScore::checked(pair_score_raw(s_pos, s_neg), task)
}

/// Everything one task head needs at inference: prompts resolved (visual
/// prompts already conditioned for the perceptual task) plus the antonym
/// pair. `textual_prompts`/`visual_prompts` hold one matrix per layer; zero
/// rows mean the prompt-free handcrafted path.
#[derive(Debug, Clone)]
pub struct HeadState {
    pub textual_prompts: Vec<Mat>,
    pub visual_prompts: Vec<Mat>,
    pub pair: AntonymPair,
}

/// Antonym text encodings, cached for repeated inference calls.
#[derive(Debug, Clone)]
pub struct CachedPair {
    pub z_pos: Vec<f64>,
    pub z_neg: Vec<f64>,
    pub task_tag: TaskTag,
}

impl HeadState {
    /// Encode both antonym texts once for reuse across images.
    pub fn encode_pair(&self, backbone: &Backbone) -> Result<CachedPair> {
        let pos_ids = backbone.tokenize(&self.pair.positive_text);
        let neg_ids = backbone.tokenize(&self.pair.negative_text);
        let z_pos = prompted::encode_text_prompted(backbone, &pos_ids, &self.textual_prompts)?;
        let z_neg = prompted::encode_text_prompted(backbone, &neg_ids, &self.textual_prompts)?;
        Ok(CachedPair {
            z_pos: z_pos.representation,
            z_neg: z_neg.representation,
            task_tag: self.pair.task_tag,
        })
    }
}

/// Score from already-computed joint representations. Exposed so tests can
/// inject scaled or handcrafted representations.
pub fn score_from_representations(
    x: &[f64],
    z_pos: &[f64],
    z_neg: &[f64],
    task: TaskTag,
) -> Result<QualityScore> {
    let s_pos = cosine_similarity(x, z_pos)?;
    let s_neg = cosine_similarity(x, z_neg)?;
    pair_score(s_pos, s_neg, task)
}

/// Full prompt-paired score of one image under a task head.
pub fn score_image(backbone: &Backbone, image: &RgbImage, head: &HeadState) -> Result<QualityScore> {
    let cached = head.encode_pair(backbone)?;
    score_image_cached(backbone, image, &head.visual_prompts, &cached)
}

/// Score with pre-encoded antonym texts (the inference fast path).
pub fn score_image_cached(
    backbone: &Backbone,
    image: &RgbImage,
    visual_prompts: &[Mat],
    cached: &CachedPair,
) -> Result<QualityScore> {
    let x = prompted::encode_image_prompted(backbone, image, visual_prompts)?;
    score_from_representations(&x.representation, &cached.z_pos, &cached.z_neg, cached.task_tag)
}

/// Text-conditioned alignment score: similarity between the prompted image
/// encoding and the raw encoding of the user's own prompt, mapped to (0,1)
/// by the logistic. Used by the alignment task when user prompts are fed
/// directly instead of learned antonym texts.
pub fn score_alignment_text_conditioned(
    backbone: &Backbone,
    image: &RgbImage,
    user_prompt_tokens: &[u32],
    visual_prompts: &[Mat],
) -> Result<QualityScore> {
    if user_prompt_tokens.is_empty() {
        return Err(Error::Degenerate("empty user prompt".into()));
    }
    let x = prompted::encode_image_prompted(backbone, image, visual_prompts)?;
    let z: EncodedText = prompted::encode_text_raw(backbone, user_prompt_tokens)?;
    let s = cosine_similarity(&x.representation, &z.representation)?;
    QualityScore::checked(logistic(s), TaskTag::Align)
}

pub(crate) fn logistic(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}
