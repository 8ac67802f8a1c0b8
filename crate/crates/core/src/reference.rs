//! Straight-line reference implementations for verification.
//!
//! Everything here is deliberately naive: per-position nested loops in
//! f64, no shared kernels, no GEMM library. The main code paths are
//! required to agree with these within tight tolerances; test suites call
//! them as independent oracles. None of this is fast.

use crate::model::{Model, ROPE_BASE};

pub struct RefApply {
    pub attn_out: Vec<Vec<f64>>,
    pub mlp_out: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
}

fn norm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| gamma[j] * ((v - mu) * rstd) + beta[j])
        .collect()
}

fn matvec_rows(x: &[Vec<f64>], w: &crate::Tensor<f64>) -> Vec<Vec<f64>> {
    let (wr, wc) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..wc)
                .map(|j| (0..wr).map(|m| row[m] * w.data()[m * wc + j]).sum())
                .collect()
        })
        .collect()
}

fn rope_row(row: &mut [f64], pos: usize) {
    let dh = row.len();
    for i in 0..dh / 2 {
        let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / dh as f64);
        let (s, c) = theta.sin_cos();
        let (a, b) = (row[2 * i], row[2 * i + 1]);
        row[2 * i] = a * c - b * s;
        row[2 * i + 1] = a * s + b * c;
    }
}

/// One layer applied to per-position residual rows.
pub fn reference_apply_layer(model: &Model<f64>, phys: usize, x: &[Vec<f64>]) -> RefApply {
    let cfg = model.config();
    let p = &model.layers[phys];
    let (s, d) = (x.len(), cfg.d_model);
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let eps = cfg.norm_eps;

    let h1: Vec<Vec<f64>> = x
        .iter()
        .map(|row| norm_row(row, p.ln1_gamma.data(), p.ln1_beta.data(), eps))
        .collect();
    let q = matvec_rows(&h1, &p.w_q);
    let k = matvec_rows(&h1, &p.w_k);
    let v = matvec_rows(&h1, &p.w_v);

    let mut ctx = vec![vec![0.0; d]; s];
    for head in 0..heads {
        let lo = head * dh;
        let mut qh: Vec<Vec<f64>> = q.iter().map(|r| r[lo..lo + dh].to_vec()).collect();
        let mut kh: Vec<Vec<f64>> = k.iter().map(|r| r[lo..lo + dh].to_vec()).collect();
        for (pos, row) in qh.iter_mut().enumerate() {
            rope_row(row, pos);
        }
        for (pos, row) in kh.iter_mut().enumerate() {
            rope_row(row, pos);
        }
        for i in 0..s {
            let mut scores = Vec::with_capacity(i + 1);
            for kr in kh.iter().take(i + 1) {
                let dot: f64 = qh[i].iter().zip(kr).map(|(a, b)| a * b).sum();
                scores.push(dot / (dh as f64).sqrt());
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, &e) in exps.iter().enumerate() {
                let w = e / z;
                for c in 0..dh {
                    ctx[i][lo + c] += w * v[j][lo + c];
                }
            }
        }
    }
    let attn_out = matvec_rows(&ctx, &p.w_o);
    let x1: Vec<Vec<f64>> = x
        .iter()
        .zip(&attn_out)
        .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
        .collect();

    let h2: Vec<Vec<f64>> = x1
        .iter()
        .map(|row| norm_row(row, p.ln2_gamma.data(), p.ln2_beta.data(), eps))
        .collect();
    let up = matvec_rows(&h2, &p.w_up);
    let act: Vec<Vec<f64>> = up
        .iter()
        .map(|row| {
            row.iter()
                .map(|&u| {
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    0.5 * u * (1.0 + (c * (u + 0.044715 * u * u * u)).tanh())
                })
                .collect()
        })
        .collect();
    let mlp_out = matvec_rows(&act, &p.w_down);
    let out: Vec<Vec<f64>> = x1
        .iter()
        .zip(&mlp_out)
        .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
        .collect();
    RefApply {
        attn_out,
        mlp_out,
        out,
    }
}

pub fn reference_embed(model: &Model<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let d = model.config().d_model;
    tokens
        .iter()
        .map(|&t| model.embed.data()[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect()
}

pub fn reference_logits(model: &Model<f64>, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let xf: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            norm_row(
                row,
                model.final_gamma.data(),
                model.final_beta.data(),
                model.config().norm_eps,
            )
        })
        .collect();
    match &model.lm_head {
        Some(head) => matvec_rows(&xf, head),
        None => {
            let v = model.config().vocab_size;
            let d = model.config().d_model;
            xf.iter()
                .map(|row| {
                    (0..v)
                        .map(|tok| (0..d).map(|m| row[m] * model.embed.data()[tok * d + m]).sum())
                        .collect()
                })
                .collect()
        }
    }
}

/// Full forward over an explicit step list; returns `[pos][vocab]` logits.
pub fn reference_forward(model: &Model<f64>, tokens: &[u32], steps: &[usize]) -> Vec<Vec<f64>> {
    let mut x = reference_embed(model, tokens);
    for &phys in steps {
        x = reference_apply_layer(model, phys, &x).out;
    }
    reference_logits(model, &x)
}

pub fn reference_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}
