//! Per-layer affine couplers that condition the perceptual task's visual
//! prompts on the alignment task's visual prompts.
//!
//! Each layer owns one affine map from width 2*d_v to d_v, applied row by
//! row to the concatenation [q_align_row, q_percept_row]; the map is shared
//! across the b prompt rows of its layer. At identity initialization the
//! align half is zeroed and the percept half passes through, so conditioned
//! prompts equal the raw perceptual prompts exactly at step 0.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::tape::{BufId, Tape};

/// One affine map: weight (2*d_v x d_v) and bias (1 x d_v).
#[derive(Debug, Clone)]
pub struct Coupler {
    pub weight: Mat,
    pub bias: Mat,
}

/// One coupler per layer; all trainable.
#[derive(Debug, Clone)]
pub struct CouplerStack {
    pub layers: Vec<Coupler>,
    pub trainable: bool,
}

impl CouplerStack {
    /// Zero block over the align half, identity over the percept half,
    /// zero bias: output equals the raw perceptual prompts bit-exactly.
    pub fn identity_init(cfg: &BackboneConfig) -> Self {
        let d = cfg.vision_width;
        let layers = (0..cfg.num_layers)
            .map(|_| {
                let mut w = Mat::zeros(2 * d, d);
                for j in 0..d {
                    w.set(d + j, j, 1.0);
                }
                Coupler { weight: w, bias: Mat::zeros(1, d) }
            })
            .collect();
        CouplerStack { layers, trainable: true }
    }

    /// Seeded random couplers (oracle comparisons and robustness tests).
    pub fn seeded(seed: u64, cfg: &BackboneConfig, std: f64) -> Self {
        let d = cfg.vision_width;
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let mut wr = mat::seeded_rng(seed, &format!("couplers.{i}.weight"));
                let mut br = mat::seeded_rng(seed, &format!("couplers.{i}.bias"));
                Coupler {
                    weight: Mat::random_normal(2 * d, d, std, &mut wr),
                    bias: Mat::random_normal(1, d, std, &mut br),
                }
            })
            .collect();
        CouplerStack { layers, trainable: true }
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        let d = cfg.vision_width;
        if self.layers.len() != cfg.num_layers {
            return Err(Error::DimensionMismatch(format!(
                "{} couplers for {} layers",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        for (i, c) in self.layers.iter().enumerate() {
            if c.weight.rows != 2 * d || c.weight.cols != d {
                return Err(Error::DimensionMismatch(format!(
                    "coupler {i} weight is {}x{}, expected {}x{d}",
                    c.weight.rows,
                    c.weight.cols,
                    2 * d
                )));
            }
            if c.bias.rows != 1 || c.bias.cols != d {
                return Err(Error::DimensionMismatch(format!(
                    "coupler {i} bias is {}x{}, expected 1x{d}",
                    c.bias.rows, c.bias.cols
                )));
            }
        }
        Ok(())
    }
}

/// Push all coupler parameters onto a tape (training needs their ids for
/// gradients and updates).
pub fn push_couplers(tape: &mut Tape, couplers: &CouplerStack) -> Vec<(BufId, BufId)> {
    couplers.layers.iter().map(|c| (tape.push(&c.weight), tape.push(&c.bias))).collect()
}

/// Trace the conditioning of perceptual prompts on alignment prompts.
/// All inputs are buffers already on the tape; per layer the output is
/// concat([q_align, q_percept]) @ weight + bias, one coupled row per
/// prompt row.
pub fn trace_condition(
    tape: &mut Tape,
    coupler_ids: &[(BufId, BufId)],
    q_align_ids: &[BufId],
    q_percept_ids: &[BufId],
) -> Result<Vec<BufId>> {
    if coupler_ids.len() != q_align_ids.len() || q_align_ids.len() != q_percept_ids.len() {
        return Err(Error::DimensionMismatch(format!(
            "layer counts differ: {} couplers, {} align, {} percept",
            coupler_ids.len(),
            q_align_ids.len(),
            q_percept_ids.len()
        )));
    }
    let mut out = Vec::with_capacity(coupler_ids.len());
    for ((&(w, bias), &qa), &qp) in coupler_ids.iter().zip(q_align_ids).zip(q_percept_ids) {
        let (ar, ac) = tape.shape(qa);
        let (pr, pc) = tape.shape(qp);
        if ar != pr || ac != pc {
            return Err(Error::DimensionMismatch(format!(
                "prompt shapes differ: {ar}x{ac} align vs {pr}x{pc} percept"
            )));
        }
        let (wr, wc) = tape.shape(w);
        if wr != 2 * ac || wc != ac {
            return Err(Error::DimensionMismatch(format!(
                "coupler weight is {wr}x{wc}, prompts are width {ac}"
            )));
        }
        let joined = tape.concat_cols(qa, qp);
        let mapped = tape.matmul(joined, w);
        out.push(tape.add_bias(mapped, bias));
    }
    Ok(out)
}

/// Apply the couplers outside training (inference path). Same traced code,
/// values extracted from a throwaway tape.
pub fn condition_prompts(
    couplers: &CouplerStack,
    q_align: &[Mat],
    q_percept: &[Mat],
) -> Result<Vec<Mat>> {
    let mut tape = Tape::new();
    let coupler_ids = push_couplers(&mut tape, couplers);
    let qa: Vec<BufId> = q_align.iter().map(|m| tape.push(m)).collect();
    let qp: Vec<BufId> = q_percept.iter().map(|m| tape.push(m)).collect();
    let out = trace_condition(&mut tape, &coupler_ids, &qa, &qp)?;
    Ok(out
        .into_iter()
        .map(|id| {
            let (rows, cols) = tape.shape(id);
            Mat::from_vec(rows, cols, tape.data(id).to_vec())
        })
        .collect())
}
