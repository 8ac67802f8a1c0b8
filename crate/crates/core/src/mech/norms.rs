//! Residual-stream norm and sublayer-contribution profiles.
//!
//! Per virtual layer: the mean residual-input norm and the mean
//! per-position ratio of each sublayer's output norm over the residual
//! input norm, aggregated across positions and examples. The attention
//! ratio series also gets an autocorrelation summary (peak lag), which
//! surfaces block-aligned periodicity; the lag is reported, not asserted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSchedule, Model, ResidualTrace};
use crate::numerics::Element;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormProfile {
    pub residual_in_norm: Vec<f64>,
    pub residual_out_norm: Vec<f64>,
    pub attn_ratio: Vec<f64>,
    pub mlp_ratio: Vec<f64>,
    /// Lag (>= 1) with the highest autocorrelation of the attention-ratio
    /// series, when the depth supports one.
    pub attn_ratio_peak_lag: Option<usize>,
    pub n_examples: usize,
}

struct Accum {
    res_in: Vec<f64>,
    res_out: Vec<f64>,
    attn: Vec<f64>,
    mlp: Vec<f64>,
    count: Vec<f64>,
}

/// Per-position norms over the feature dim.
fn row_norms<E: Element>(data: &[E], rows: usize, d: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            data[i * d..(i + 1) * d]
                .iter()
                .map(|v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn accumulate<E: Element>(acc: &mut Accum, trace: &ResidualTrace<E>) {
    for (vl, tl) in trace.layers.iter().enumerate() {
        let (s, d) = (tl.residual_in.shape()[0], tl.residual_in.shape()[1]);
        let rin = row_norms(tl.residual_in.data(), s, d);
        let rout = row_norms(tl.residual_out.data(), s, d);
        let attn = row_norms(tl.attn_out.data(), s, d);
        let mlp = row_norms(tl.mlp_out.data(), s, d);
        for pos in 0..s {
            if rin[pos] == 0.0 {
                continue;
            }
            acc.res_in[vl] += rin[pos];
            acc.res_out[vl] += rout[pos];
            acc.attn[vl] += attn[pos] / rin[pos];
            acc.mlp[vl] += mlp[pos] / rin[pos];
            acc.count[vl] += 1.0;
        }
    }
}

/// Lag of the autocorrelation peak of a (mean-removed) series.
pub fn autocorrelation_peak_lag(series: &[f64]) -> Option<usize> {
    let n = series.len();
    if n < 4 {
        return None;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let denom: f64 = centered.iter().map(|v| v * v).sum();
    if denom <= 0.0 {
        return None;
    }
    let mut best = (1usize, f64::NEG_INFINITY);
    for lag in 1..=n / 2 {
        let num: f64 = (0..n - lag).map(|i| centered[i] * centered[i + lag]).sum();
        let r = num / denom;
        if r > best.1 {
            best = (lag, r);
        }
    }
    Some(best.0)
}

pub fn norm_profiles<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    batch: &[Vec<u32>],
) -> Result<NormProfile> {
    if batch.is_empty() {
        return Err(Error::Eval("norm_profiles needs a nonempty batch".into()));
    }
    let depth = schedule.effective_depth();
    let mut acc = Accum {
        res_in: vec![0.0; depth],
        res_out: vec![0.0; depth],
        attn: vec![0.0; depth],
        mlp: vec![0.0; depth],
        count: vec![0.0; depth],
    };
    for tokens in batch {
        let (_, trace) = model.forward(tokens, schedule, true)?;
        accumulate(&mut acc, &trace.expect("capture requested"));
    }
    let finish = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(&acc.count)
            .map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 })
            .collect()
    };
    let attn_ratio = finish(&acc.attn);
    Ok(NormProfile {
        residual_in_norm: finish(&acc.res_in),
        residual_out_norm: finish(&acc.res_out),
        attn_ratio: attn_ratio.clone(),
        mlp_ratio: finish(&acc.mlp),
        attn_ratio_peak_lag: autocorrelation_peak_lag(&attn_ratio),
        n_examples: batch.len(),
    })
}
