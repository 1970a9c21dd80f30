//! Rank and linear correlation metrics with repeat-run aggregation, plus
//! the per-generator alignment vs perception analysis.
//!
//! SRCC is Pearson correlation over average ranks; KRCC is tau-b; PLCC is
//! Pearson on raw values by default, with an optional 4-parameter logistic
//! pre-fit for reproduction comparisons.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::SampleRecord;
use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} targets",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate(format!("{} samples; need at least 2", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite values in correlation input".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite inputs"));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_raw(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let da = a - mx;
        let db = b - my;
        cov += da * db;
        vx += da * da;
        vy += db * db;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("constant input makes correlation undefined".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Spearman rank correlation (average-rank ties).
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson_raw(&average_ranks(x), &average_ranks(y))
}

/// Kendall rank correlation, tau-b (tie-corrected).
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in i + 1..n {
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
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate("all-tied input makes tau undefined".into()));
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Pearson linear correlation on raw values.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson_raw(x, y)
}

/// Four-parameter logistic curve used by the optional PLCC pre-fit.
fn logistic4(beta: &[f64; 4], x: f64) -> f64 {
    let [top, bottom, center, width] = *beta;
    bottom + (top - bottom) / (1.0 + (-(x - center) / width).exp())
}

/// Fit predictions to targets through a 4-parameter logistic (least
/// squares, plain gradient descent with backtracking), then return Pearson
/// correlation of the remapped predictions. Off by default in reports.
pub fn plcc_logistic(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let xmean = x.iter().sum::<f64>() / n;
    let xstd = (x.iter().map(|v| (v - xmean).powi(2)).sum::<f64>() / n).sqrt();
    if xstd == 0.0 || ymin == ymax {
        return Err(Error::Degenerate("constant input makes correlation undefined".into()));
    }
    let mut beta = [ymax, ymin, xmean, xstd.max(1e-6)];
    let sse = |b: &[f64; 4]| -> f64 {
        x.iter().zip(y).map(|(&a, &t)| (logistic4(b, a) - t).powi(2)).sum()
    };
    let mut step = 0.1;
    let mut current = sse(&beta);
    for _ in 0..2000 {
        // Numerical gradient; four parameters make this cheap.
        let mut grad = [0.0; 4];
        for p in 0..4 {
            let h = 1e-6 * (1.0 + beta[p].abs());
            let mut plus = beta;
            plus[p] += h;
            let mut minus = beta;
            minus[p] -= h;
            grad[p] = (sse(&plus) - sse(&minus)) / (2.0 * h);
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-12 {
            break;
        }
        let mut improved = false;
        while step > 1e-12 {
            let mut trial = beta;
            for p in 0..4 {
                trial[p] -= step * grad[p] / norm;
            }
            // Keep the width positive so the curve stays monotone.
            trial[3] = trial[3].max(1e-9);
            let v = sse(&trial);
            if v < current {
                beta = trial;
                current = v;
                step *= 1.5;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let remapped: Vec<f64> = x.iter().map(|&a| logistic4(&beta, a)).collect();
    pearson_raw(&remapped, y)
}

/// One repeat's metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationTriple {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
}

/// One repeat's metrics with its sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepeatResult {
    pub triple: CorrelationTriple,
    pub n: usize,
}

/// Aggregated repeats: mean metrics, population standard deviation across
/// repeats, total sample count, and the per-repeat rows.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub stddev: CorrelationTriple,
    pub n: usize,
    pub repeats: Vec<RepeatResult>,
}

/// Compute the three metrics for one prediction/target pairing.
pub fn correlation_triple(predictions: &[f64], targets: &[f64], logistic_fit: bool) -> Result<CorrelationTriple> {
    Ok(CorrelationTriple {
        srcc: srcc(predictions, targets)?,
        plcc: if logistic_fit {
            plcc_logistic(predictions, targets)?
        } else {
            plcc(predictions, targets)?
        },
        krcc: krcc(predictions, targets)?,
    })
}

/// Aggregate per-repeat prediction/target pairs into a report.
pub fn evaluate(repeats: &[(Vec<f64>, Vec<f64>)], logistic_fit: bool) -> Result<CorrelationReport> {
    if repeats.is_empty() {
        return Err(Error::Degenerate("no repeats to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(repeats.len());
    for (preds, targets) in repeats {
        rows.push(RepeatResult {
            triple: correlation_triple(preds, targets, logistic_fit)?,
            n: preds.len(),
        });
    }
    let r = rows.len() as f64;
    let mean = |f: fn(&CorrelationTriple) -> f64| -> f64 {
        let first = f(&rows[0].triple);
        // Identical repeats must report their exact value with zero spread.
        if rows.iter().all(|row| f(&row.triple) == first) {
            return first;
        }
        rows.iter().map(|row| f(&row.triple)).sum::<f64>() / r
    };
    let (ms, mp, mk) = (mean(|t| t.srcc), mean(|t| t.plcc), mean(|t| t.krcc));
    let std = |f: fn(&CorrelationTriple) -> f64, m: f64| -> f64 {
        (rows.iter().map(|row| (f(&row.triple) - m).powi(2)).sum::<f64>() / r).sqrt()
    };
    Ok(CorrelationReport {
        srcc: ms,
        plcc: mp,
        krcc: mk,
        stddev: CorrelationTriple {
            srcc: std(|t| t.srcc, ms),
            plcc: std(|t| t.plcc, mp),
            krcc: std(|t| t.krcc, mk),
        },
        n: rows.iter().map(|row| row.n).sum(),
        repeats: rows,
    })
}

/// One generator's alignment/perception agreement. `srcc` is absent for
/// groups skipped as undersized or degenerate; `note` says why.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisRow {
    pub generator: String,
    pub n: usize,
    pub srcc: Option<f64>,
    pub note: Option<String>,
}

/// Per-generator SRCC between alignment and perceptual MOS, plus overall.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisTable {
    pub rows: Vec<AnalysisRow>,
    pub overall_srcc: f64,
    pub overall_n: usize,
}

/// SRCC(mos_align, mos_percept) per generator tag. Records lacking an
/// alignment score are ignored; undersized or constant groups become rows
/// without a value rather than failing the table.
pub fn alignment_perception_analysis(records: &[SampleRecord]) -> Result<AnalysisTable> {
    let mut by_generator: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut all_align = Vec::new();
    let mut all_percept = Vec::new();
    for r in records {
        if let Some(ma) = r.mos_align {
            let slot = by_generator.entry(r.generator_tag.as_str()).or_default();
            slot.0.push(ma);
            slot.1.push(r.mos_percept);
            all_align.push(ma);
            all_percept.push(r.mos_percept);
        }
    }
    if all_align.len() < 2 {
        return Err(Error::Degenerate(
            "need at least 2 records with both MOS values for the analysis".into(),
        ));
    }
    let mut rows = Vec::new();
    for (generator, (align, percept)) in by_generator {
        let row = match srcc(&align, &percept) {
            Ok(v) => AnalysisRow {
                generator: generator.to_string(),
                n: align.len(),
                srcc: Some(v),
                note: None,
            },
            Err(e) => AnalysisRow {
                generator: generator.to_string(),
                n: align.len(),
                srcc: None,
                note: Some(format!("skipped: {e}")),
            },
        };
        rows.push(row);
    }
    Ok(AnalysisTable {
        rows,
        overall_srcc: srcc(&all_align, &all_percept)?,
        overall_n: all_align.len(),
    })
}
