//! Frozen dual-encoder: a vision tower over patch tokens plus a class token,
//! a text tower over byte-level word tokens, and linear projections from both
//! towers into a shared joint space.
//!
//! Layers are standard pre-norm transformer blocks (single-head attention,
//! 4x MLP, GELU). Every layer application runs through the same tape-recorded
//! block code used by the trainable encoders, so the prompt-free paths here
//! and the prompted paths are bit-identical when no prompts are injected.
//! Weights live on the f32 grid and never change after construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Container, Dtype};
use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::tape::{BufId, Tape};

/// Input pixels are mapped from [0,1] to [-1,1] before patch embedding.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Transformer depth k, shared by both towers.
    pub num_layers: usize,
    /// Vision token width d_v.
    pub vision_width: usize,
    /// Text token width d_l.
    pub text_width: usize,
    /// Joint projection width d_vl.
    pub joint_dim: usize,
    /// Number of image patches M (must be a perfect square).
    pub patch_count: usize,
    /// Input image side in pixels.
    pub image_size: usize,
    /// Token id space for the text tower.
    pub vocab_size: usize,
    /// Maximum word-token sequence length N.
    pub max_text_len: usize,
}

impl Default for BackboneConfig {
    /// Desk-scale configuration used by the toy factory.
    fn default() -> Self {
        BackboneConfig {
            num_layers: 2,
            vision_width: 8,
            text_width: 8,
            joint_dim: 8,
            patch_count: 4,
            image_size: 32,
            vocab_size: 256,
            max_text_len: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("vision_width", self.vision_width),
            ("text_width", self.text_width),
            ("joint_dim", self.joint_dim),
            ("patch_count", self.patch_count),
            ("image_size", self.image_size),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        let g = self.patch_grid();
        if g * g != self.patch_count {
            return Err(Error::InvalidConfig(format!(
                "patch_count {} is not a perfect square",
                self.patch_count
            )));
        }
        if !self.image_size.is_multiple_of(g) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by patch grid {g}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Side of the patch grid (sqrt of patch_count).
    pub fn patch_grid(&self) -> usize {
        (self.patch_count as f64).sqrt().round() as usize
    }

    /// Pixels per patch side.
    pub fn patch_size(&self) -> usize {
        self.image_size / self.patch_grid()
    }

    /// Flattened RGB patch length fed to the patch embedder.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size() * self.patch_size()
    }
}

/// What a token position holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Class,
    Patch,
    Word,
    Prompt,
}

/// A token matrix (length x width) with per-position role tags.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn new(tokens: Mat, roles: Vec<Role>) -> Result<Self> {
        if tokens.rows == 0 {
            return Err(Error::Degenerate("empty token sequence".into()));
        }
        if roles.len() != tokens.rows {
            return Err(Error::DimensionMismatch(format!(
                "{} role tags for {} tokens",
                roles.len(),
                tokens.rows
            )));
        }
        Ok(TokenSequence { tokens, roles })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols
    }
}

// ── transformer block ────────────────────────────────────────────────

/// One pre-norm block: x + attn(ln1(x)), then h + mlp(ln2(h)).
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

const WEIGHT_STD: f64 = 0.25;
const BIAS_STD: f64 = 0.05;
const EMBED_STD: f64 = 0.5;
const POS_STD: f64 = 0.1;

impl LayerWeights {
    fn toy(seed: u64, prefix: &str, d: usize) -> Self {
        let hidden = 4 * d;
        let draw = |tag: &str, rows: usize, cols: usize, std: f64| {
            let mut rng = mat::seeded_rng(seed, &format!("{prefix}.{tag}"));
            Mat::random_normal(rows, cols, std, &mut rng)
        };
        LayerWeights {
            ln1_gain: Mat::row_vector(vec![1.0; d]),
            ln1_bias: Mat::zeros(1, d),
            wq: draw("attn.wq", d, d, WEIGHT_STD),
            bq: draw("attn.bq", 1, d, BIAS_STD),
            wk: draw("attn.wk", d, d, WEIGHT_STD),
            bk: draw("attn.bk", 1, d, BIAS_STD),
            wv: draw("attn.wv", d, d, WEIGHT_STD),
            bv: draw("attn.bv", 1, d, BIAS_STD),
            wo: draw("attn.wo", d, d, WEIGHT_STD),
            bo: draw("attn.bo", 1, d, BIAS_STD),
            ln2_gain: Mat::row_vector(vec![1.0; d]),
            ln2_bias: Mat::zeros(1, d),
            w1: draw("mlp.w1", d, hidden, WEIGHT_STD),
            b1: draw("mlp.b1", 1, hidden, BIAS_STD),
            w2: draw("mlp.w2", hidden, d, WEIGHT_STD),
            b2: draw("mlp.b2", 1, d, BIAS_STD),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        let fields: [(&str, &Mat); 16] = [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ];
        for (tag, m) in fields {
            out.push((format!("{prefix}.{tag}"), m));
        }
    }

    fn from_container(c: &Container, prefix: &str, d: usize) -> Result<Self> {
        let hidden = 4 * d;
        let pull = |tag: &str, rows: usize, cols: usize| -> Result<Mat> {
            Ok(c.tensor_shaped(&format!("{prefix}.{tag}"), rows, cols)?.clone())
        };
        Ok(LayerWeights {
            ln1_gain: pull("ln1.gain", 1, d)?,
            ln1_bias: pull("ln1.bias", 1, d)?,
            wq: pull("attn.wq", d, d)?,
            bq: pull("attn.bq", 1, d)?,
            wk: pull("attn.wk", d, d)?,
            bk: pull("attn.bk", 1, d)?,
            wv: pull("attn.wv", d, d)?,
            bv: pull("attn.bv", 1, d)?,
            wo: pull("attn.wo", d, d)?,
            bo: pull("attn.bo", 1, d)?,
            ln2_gain: pull("ln2.gain", 1, d)?,
            ln2_bias: pull("ln2.bias", 1, d)?,
            w1: pull("mlp.w1", d, hidden)?,
            b1: pull("mlp.b1", 1, hidden)?,
            w2: pull("mlp.w2", hidden, d)?,
            b2: pull("mlp.b2", 1, d)?,
        })
    }

    pub fn width(&self) -> usize {
        self.wq.rows
    }
}

/// A block's weights pushed onto a tape, ready to apply to token buffers.
/// The single forward implementation: both the frozen per-layer operations
/// and the trainable traced encoders go through [`TapedLayer::forward`].
pub struct TapedLayer {
    ln1_gain: BufId,
    ln1_bias: BufId,
    wq: BufId,
    bq: BufId,
    wk: BufId,
    bk: BufId,
    wv: BufId,
    bv: BufId,
    wo: BufId,
    bo: BufId,
    ln2_gain: BufId,
    ln2_bias: BufId,
    w1: BufId,
    b1: BufId,
    w2: BufId,
    b2: BufId,
    scale: f64,
}

impl TapedLayer {
    pub fn push(tape: &mut Tape, lw: &LayerWeights) -> TapedLayer {
        TapedLayer {
            ln1_gain: tape.push(&lw.ln1_gain),
            ln1_bias: tape.push(&lw.ln1_bias),
            wq: tape.push(&lw.wq),
            bq: tape.push(&lw.bq),
            wk: tape.push(&lw.wk),
            bk: tape.push(&lw.bk),
            wv: tape.push(&lw.wv),
            bv: tape.push(&lw.bv),
            wo: tape.push(&lw.wo),
            bo: tape.push(&lw.bo),
            ln2_gain: tape.push(&lw.ln2_gain),
            ln2_bias: tape.push(&lw.ln2_bias),
            w1: tape.push(&lw.w1),
            b1: tape.push(&lw.b1),
            w2: tape.push(&lw.w2),
            b2: tape.push(&lw.b2),
            scale: 1.0 / (lw.width() as f64).sqrt(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: BufId) -> BufId {
        let h = tape.layer_norm(x, self.ln1_gain, self.ln1_bias);
        let q = {
            let t = tape.matmul(h, self.wq);
            tape.add_bias(t, self.bq)
        };
        let k = {
            let t = tape.matmul(h, self.wk);
            tape.add_bias(t, self.bk)
        };
        let v = {
            let t = tape.matmul(h, self.wv);
            tape.add_bias(t, self.bv)
        };
        let scores = {
            let t = tape.matmul_trans_b(q, k);
            tape.scale(t, self.scale)
        };
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, v);
        let attn_out = {
            let t = tape.matmul(mixed, self.wo);
            tape.add_bias(t, self.bo)
        };
        let x2 = tape.add(x, attn_out);
        let h2 = tape.layer_norm(x2, self.ln2_gain, self.ln2_bias);
        let m = {
            let t = tape.matmul(h2, self.w1);
            let t = tape.add_bias(t, self.b1);
            tape.gelu(t)
        };
        let mlp_out = {
            let t = tape.matmul(m, self.w2);
            tape.add_bias(t, self.b2)
        };
        tape.add(x2, mlp_out)
    }
}

// ── the dual encoder ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_weight: Mat,
    pub patch_bias: Mat,
    pub class_token: Mat,
    pub vision_pos: Mat,
    pub vision_layers: Vec<LayerWeights>,
    pub vision_proj: Mat,
    pub token_embed: Mat,
    pub text_pos: Mat,
    pub text_layers: Vec<LayerWeights>,
    pub text_proj: Mat,
    /// Always true; backbone parameters never receive gradient updates.
    pub frozen: bool,
}

impl Backbone {
    /// Byte-level tokenization, truncated to the tower's maximum length.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.bytes().take(self.cfg.max_text_len).map(u32::from).collect()
    }

    /// Split a square RGB image into patch tokens, prepend the class token,
    /// and add positional embeddings (patch/class positions only).
    pub fn embed_patches(&self, image: &RgbImage) -> Result<TokenSequence> {
        let side = self.cfg.image_size;
        if image.width != side || image.height != side {
            return Err(Error::DimensionMismatch(format!(
                "image is {}x{}, backbone expects {side}x{side}",
                image.width, image.height
            )));
        }
        let g = self.cfg.patch_grid();
        let p = self.cfg.patch_size();
        let d = self.cfg.vision_width;
        let patch_dim = self.cfg.patch_dim();

        let mut tokens = Mat::zeros(self.cfg.patch_count + 1, d);
        let mut roles = Vec::with_capacity(self.cfg.patch_count + 1);
        for j in 0..d {
            tokens.set(0, j, self.class_token.get(0, j) + self.vision_pos.get(0, j));
        }
        roles.push(Role::Class);

        let mut patch = vec![0.0; patch_dim];
        for gy in 0..g {
            for gx in 0..g {
                let mut idx = 0;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..3 {
                            let v = image.pixel(gx * p + px, gy * p + py, c);
                            patch[idx] = (v - PIXEL_MEAN) / PIXEL_STD;
                            idx += 1;
                        }
                    }
                }
                let row = 1 + gy * g + gx;
                for j in 0..d {
                    let mut acc = self.patch_bias.get(0, j);
                    for (i, &pv) in patch.iter().enumerate() {
                        acc += pv * self.patch_weight.get(i, j);
                    }
                    tokens.set(row, j, acc + self.vision_pos.get(row, j));
                }
                roles.push(Role::Patch);
            }
        }
        TokenSequence::new(tokens, roles)
    }

    /// Embed word-token ids with positional embeddings.
    pub fn embed_text(&self, token_ids: &[u32]) -> Result<TokenSequence> {
        if token_ids.is_empty() {
            return Err(Error::Degenerate("empty token sequence".into()));
        }
        if token_ids.len() > self.cfg.max_text_len {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens exceed max_text_len {}",
                token_ids.len(),
                self.cfg.max_text_len
            )));
        }
        let d = self.cfg.text_width;
        let mut tokens = Mat::zeros(token_ids.len(), d);
        for (t, &id) in token_ids.iter().enumerate() {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::InvalidConfig(format!(
                    "token id {id} outside vocab of {}",
                    self.cfg.vocab_size
                )));
            }
            for j in 0..d {
                tokens.set(t, j, self.token_embed.get(id as usize, j) + self.text_pos.get(t, j));
            }
        }
        TokenSequence::new(tokens, vec![Role::Word; token_ids.len()])
    }

    fn layer_forward(&self, layers: &[LayerWeights], i: usize, seq: &TokenSequence) -> Result<TokenSequence> {
        if i == 0 || i > layers.len() {
            return Err(Error::InvalidConfig(format!(
                "layer index {i} outside 1..={}",
                layers.len()
            )));
        }
        let lw = &layers[i - 1];
        if seq.width() != lw.width() {
            return Err(Error::DimensionMismatch(format!(
                "sequence width {} vs layer width {}",
                seq.width(),
                lw.width()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.push(&seq.tokens);
        let taped = TapedLayer::push(&mut tape, lw);
        let y = taped.forward(&mut tape, x);
        let (rows, cols) = tape.shape(y);
        let out = Mat::from_vec(rows, cols, tape.data(y).to_vec());
        TokenSequence::new(out, seq.roles.clone())
    }

    /// Apply vision layer i (1-based) to a token sequence.
    pub fn vision_layer_forward(&self, i: usize, seq: &TokenSequence) -> Result<TokenSequence> {
        self.layer_forward(&self.vision_layers, i, seq)
    }

    /// Apply text layer i (1-based) to a token sequence.
    pub fn text_layer_forward(&self, i: usize, seq: &TokenSequence) -> Result<TokenSequence> {
        self.layer_forward(&self.text_layers, i, seq)
    }

    fn project(&self, proj: &Mat, x: &[f64], what: &str) -> Result<Vec<f64>> {
        if x.len() != proj.rows {
            return Err(Error::DimensionMismatch(format!(
                "{what} input width {} vs projection {}",
                x.len(),
                proj.rows
            )));
        }
        let mut out = vec![0.0; proj.cols];
        for (i, &v) in x.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += v * proj.get(i, j);
            }
        }
        Ok(out)
    }

    /// Linear map from the final class token into the joint space.
    pub fn project_image(&self, class_token: &[f64]) -> Result<Vec<f64>> {
        self.project(&self.vision_proj, class_token, "project_image")
    }

    /// Linear map from the final last word token into the joint space.
    pub fn project_text(&self, last_token: &[f64]) -> Result<Vec<f64>> {
        self.project(&self.text_proj, last_token, "project_text")
    }

    /// Prompt-free image path: patches through all layers, class projected.
    pub fn encode_image_vanilla(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let mut seq = self.embed_patches(image)?;
        for i in 1..=self.cfg.num_layers {
            seq = self.vision_layer_forward(i, &seq)?;
        }
        self.project_image(seq.tokens.row(0))
    }

    /// Prompt-free text path: tokens through all layers, last word projected.
    pub fn encode_text_vanilla(&self, token_ids: &[u32]) -> Result<Vec<f64>> {
        let mut seq = self.embed_text(token_ids)?;
        for i in 1..=self.cfg.num_layers {
            seq = self.text_layer_forward(i, &seq)?;
        }
        self.project_text(seq.tokens.row(seq.len() - 1))
    }

    /// All parameter tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_weight),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("class_token".to_string(), &self.class_token),
            ("vision.pos".to_string(), &self.vision_pos),
        ];
        for (i, lw) in self.vision_layers.iter().enumerate() {
            lw.named(&format!("vision.{i}"), &mut out);
        }
        out.push(("vision.proj".to_string(), &self.vision_proj));
        out.push(("token_embed".to_string(), &self.token_embed));
        out.push(("text.pos".to_string(), &self.text_pos));
        for (i, lw) in self.text_layers.iter().enumerate() {
            lw.named(&format!("text.{i}"), &mut out);
        }
        out.push(("text.proj".to_string(), &self.text_proj));
        out
    }

    /// Order-sensitive hash of every parameter's bit pattern. Equal hashes
    /// before and after a training run certify the freezing contract.
    pub fn param_hash(&self) -> u64 {
        mat::param_hash(self.named_tensors().into_iter().map(|(_, m)| m))
    }

    pub fn to_container(&self) -> Result<Container> {
        let config = serde_json::to_value(self.cfg)
            .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        let mut c = Container::new(Dtype::F32, config);
        for (name, t) in self.named_tensors() {
            c.push(&name, t.clone());
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_container()?)
    }

    /// Load a backbone from its container file. The configuration embedded
    /// in the header drives all shape checks; mismatched tensors are named.
    pub fn load_pretrained(path: &Path) -> Result<Backbone> {
        let c = checkpoint::load(path)?;
        if c.dtype != Dtype::F32 {
            return Err(Error::Checkpoint("backbone container must be f32".into()));
        }
        let cfg: BackboneConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
        cfg.validate()?;
        let d_v = cfg.vision_width;
        let d_l = cfg.text_width;
        let mut vision_layers = Vec::with_capacity(cfg.num_layers);
        let mut text_layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            vision_layers.push(LayerWeights::from_container(&c, &format!("vision.{i}"), d_v)?);
            text_layers.push(LayerWeights::from_container(&c, &format!("text.{i}"), d_l)?);
        }
        Ok(Backbone {
            cfg,
            patch_weight: c.tensor_shaped("patch_embed.weight", cfg.patch_dim(), d_v)?.clone(),
            patch_bias: c.tensor_shaped("patch_embed.bias", 1, d_v)?.clone(),
            class_token: c.tensor_shaped("class_token", 1, d_v)?.clone(),
            vision_pos: c.tensor_shaped("vision.pos", cfg.patch_count + 1, d_v)?.clone(),
            vision_layers,
            vision_proj: c.tensor_shaped("vision.proj", d_v, cfg.joint_dim)?.clone(),
            token_embed: c.tensor_shaped("token_embed", cfg.vocab_size, d_l)?.clone(),
            text_pos: c.tensor_shaped("text.pos", cfg.max_text_len, d_l)?.clone(),
            text_layers,
            text_proj: c.tensor_shaped("text.proj", d_l, cfg.joint_dim)?.clone(),
            frozen: true,
        })
    }
}

/// Build a frozen backbone with every tensor drawn from a stream seeded by
/// (seed, tensor name). Same inputs give a bit-identical backbone.
pub fn make_toy_backbone(seed: u64, cfg: &BackboneConfig) -> Result<Backbone> {
    cfg.validate()?;
    let d_v = cfg.vision_width;
    let d_l = cfg.text_width;
    let draw = |tag: &str, rows: usize, cols: usize, std: f64| {
        let mut rng = mat::seeded_rng(seed, tag);
        Mat::random_normal(rows, cols, std, &mut rng)
    };
    Ok(Backbone {
        cfg: *cfg,
        patch_weight: draw("patch_embed.weight", cfg.patch_dim(), d_v, WEIGHT_STD),
        patch_bias: draw("patch_embed.bias", 1, d_v, BIAS_STD),
        class_token: draw("class_token", 1, d_v, EMBED_STD),
        vision_pos: draw("vision.pos", cfg.patch_count + 1, d_v, POS_STD),
        vision_layers: (0..cfg.num_layers)
            .map(|i| LayerWeights::toy(seed, &format!("vision.{i}"), d_v))
            .collect(),
        vision_proj: draw("vision.proj", d_v, cfg.joint_dim, WEIGHT_STD),
        token_embed: draw("token_embed", cfg.vocab_size, d_l, EMBED_STD),
        text_pos: draw("text.pos", cfg.max_text_len, d_l, POS_STD),
        text_layers: (0..cfg.num_layers)
            .map(|i| LayerWeights::toy(seed, &format!("text.{i}"), d_l))
            .collect(),
        text_proj: draw("text.proj", d_l, cfg.joint_dim, WEIGHT_STD),
        frozen: true,
    })
}
