//! Straight-line re-implementations used as independent test oracles.
//!
//! Everything here is written against the published numerical contract
//! (pre-norm single-head blocks, tanh-form GELU, eps-inside-sqrt layer
//! norm) using plain nested loops over `Vec<Vec<f64>>` rows — no code or
//! helpers shared with the crate under test beyond reading public weight
//! fields.

#![allow(dead_code)]

use agiqa_core::backbone::{Backbone, LayerWeights};
use agiqa_core::data::RgbImage;
use agiqa_core::mat::Mat;

pub type Rows = Vec<Vec<f64>>;

pub fn mat_rows(m: &Mat) -> Rows {
    (0..m.rows).map(|r| (0..m.cols).map(|c| m.get(r, c)).collect()).collect()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(t, &v)| v * b[t][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add_bias(x: &Rows, bias: &[f64]) -> Rows {
    x.iter().map(|row| row.iter().zip(bias).map(|(v, b)| v + b).collect()).collect()
}

pub fn layer_norm(x: &Rows, gain: &[f64], bias: &[f64]) -> Rows {
    let eps = 1e-5;
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c0 = (2.0 / std::f64::consts::PI).sqrt();
    let u = c0 * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// One pre-norm single-head transformer block.
pub fn layer_forward(x: &Rows, lw: &LayerWeights) -> Rows {
    let d = lw.wq.rows;
    let h = layer_norm(x, lw.ln1_gain.row(0), lw.ln1_bias.row(0));
    let q = add_bias(&matmul(&h, &mat_rows(&lw.wq)), lw.bq.row(0));
    let k = add_bias(&matmul(&h, &mat_rows(&lw.wk)), lw.bk.row(0));
    let v = add_bias(&matmul(&h, &mat_rows(&lw.wv)), lw.bv.row(0));
    let scale = 1.0 / (d as f64).sqrt();
    let attn: Rows = q
        .iter()
        .map(|qi| {
            let scores: Vec<f64> =
                k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            softmax(&scores)
        })
        .collect();
    let mixed = matmul(&attn, &v);
    let attn_out = add_bias(&matmul(&mixed, &mat_rows(&lw.wo)), lw.bo.row(0));
    let x2: Rows = x
        .iter()
        .zip(&attn_out)
        .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
        .collect();
    let h2 = layer_norm(&x2, lw.ln2_gain.row(0), lw.ln2_bias.row(0));
    let m: Rows = add_bias(&matmul(&h2, &mat_rows(&lw.w1)), lw.b1.row(0))
        .iter()
        .map(|row| row.iter().map(|v| gelu(*v)).collect())
        .collect();
    let mlp_out = add_bias(&matmul(&m, &mat_rows(&lw.w2)), lw.b2.row(0));
    x2.iter()
        .zip(&mlp_out)
        .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
        .collect()
}

/// Patch embedding: normalized pixels per patch (py, px, channel order),
/// linear map, class token first, positions added.
pub fn embed_image(backbone: &Backbone, image: &RgbImage) -> Rows {
    let cfg = &backbone.cfg;
    let g = cfg.patch_grid();
    let p = cfg.patch_size();
    let d = cfg.vision_width;
    let pos = mat_rows(&backbone.vision_pos);
    let w = mat_rows(&backbone.patch_weight);
    let mut rows = Vec::with_capacity(cfg.patch_count + 1);
    rows.push(
        (0..d)
            .map(|j| backbone.class_token.get(0, j) + pos[0][j])
            .collect::<Vec<f64>>(),
    );
    for gy in 0..g {
        for gx in 0..g {
            let mut patch = Vec::with_capacity(cfg.patch_dim());
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        patch.push((image.pixel(gx * p + px, gy * p + py, c) - 0.5) / 0.5);
                    }
                }
            }
            let row_idx = 1 + gy * g + gx;
            rows.push(
                (0..d)
                    .map(|j| {
                        let mut acc = backbone.patch_bias.get(0, j);
                        for (i, &pv) in patch.iter().enumerate() {
                            acc += pv * w[i][j];
                        }
                        acc + pos[row_idx][j]
                    })
                    .collect(),
            );
        }
    }
    rows
}

pub fn embed_text(backbone: &Backbone, token_ids: &[u32]) -> Rows {
    let d = backbone.cfg.text_width;
    token_ids
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|j| backbone.token_embed.get(id as usize, j) + backbone.text_pos.get(t, j))
                .collect()
        })
        .collect()
}

/// Full prompted image encoder: visual prompts appended after the patch
/// rows at every layer and discarded after it; final class row projected.
pub fn encode_image(backbone: &Backbone, image: &RgbImage, prompts: &[Rows]) -> Vec<f64> {
    let mut x = embed_image(backbone, image);
    let kept = x.len();
    for (i, lw) in backbone.vision_layers.iter().enumerate() {
        if !prompts.is_empty() {
            x.extend(prompts[i].iter().cloned());
        }
        x = layer_forward(&x, lw);
        x.truncate(kept);
    }
    project(&x[0], &backbone.vision_proj)
}

/// Full prompted text encoder: textual prompts prepended before the word
/// rows at every layer and discarded after it; final last word projected.
pub fn encode_text(backbone: &Backbone, token_ids: &[u32], prompts: &[Rows]) -> Vec<f64> {
    let mut x = embed_text(backbone, token_ids);
    let kept = x.len();
    for (i, lw) in backbone.text_layers.iter().enumerate() {
        if !prompts.is_empty() {
            let mut joined = prompts[i].clone();
            joined.extend(x);
            x = layer_forward(&joined, lw);
            x.drain(..prompts[i].len());
            x.truncate(kept);
        } else {
            x = layer_forward(&x, lw);
        }
    }
    project(&x[kept - 1], &backbone.text_proj)
}

pub fn project(x: &[f64], proj: &Mat) -> Vec<f64> {
    (0..proj.cols)
        .map(|j| x.iter().enumerate().map(|(i, &v)| v * proj.get(i, j)).sum())
        .collect()
}

/// Per-layer affine coupler: concatenated prompt rows through one weight
/// matrix plus bias.
pub fn couple(weight: &Mat, bias: &Mat, q_align: &Rows, q_percept: &Rows) -> Rows {
    let d = bias.cols;
    q_align
        .iter()
        .zip(q_percept)
        .map(|(qa, qp)| {
            let joined: Vec<f64> = qa.iter().chain(qp.iter()).cloned().collect();
            (0..d)
                .map(|j| {
                    let mut acc = bias.get(0, j);
                    for (i, &v) in joined.iter().enumerate() {
                        acc += v * weight.get(i, j);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn cosine(x: &[f64], z: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(z).map(|(a, b)| a * b).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nz: f64 = z.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nx * nz)
}

/// Two-way softmax at the positive slot, plain algebra.
pub fn pair_score(s_pos: f64, s_neg: f64) -> f64 {
    1.0 / (1.0 + (s_neg - s_pos).exp())
}

// ── metric oracles ───────────────────────────────────────────────────

/// Average ranks by counting: 1 + #(smaller) + #(equal others)/2.
pub fn ranks_by_counting(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let smaller = x.iter().filter(|&&v| v < xi).count() as f64;
            let equal_others = (x.iter().filter(|&&v| v == xi).count() - 1) as f64;
            1.0 + smaller + equal_others / 2.0
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks_by_counting(x), &ranks_by_counting(y))
}

/// Kendall tau-b by full pair enumeration.
pub fn kendall_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                ties_x += 1;
                ties_y += 1;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - ties_x) as f64) * ((n0 - ties_y) as f64)).sqrt();
    (concordant - discordant) as f64 / denom
}

/// All permutations of 0..n.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, remaining: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..remaining.len() {
            let v = remaining.remove(i);
            prefix.push(v);
            rec(prefix, remaining, out);
            prefix.pop();
            remaining.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}
