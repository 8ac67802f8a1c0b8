//! Tuned-lens early exit.
//!
//! A per-virtual-layer affine adapter maps the layer's residual output
//! into the pre-final-norm space; logits come from the model's own final
//! norm and unembedding. Adapters start at identity (so the last layer's
//! early exit is exact) and are trained by plain minibatch gradient
//! descent on the soft cross entropy against the final distribution,
//! with early stopping on plateau. Minimizing that objective minimizes
//! `KL(final || early_exit)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSchedule, Model};
use crate::numerics::{kernels, Element, Tape, Tensor};
use crate::rng::RunRng;

#[derive(Clone, Debug)]
pub struct TunedLens<E: Element> {
    /// One `(matrix [d,d], bias [d])` adapter per virtual layer.
    pub adapters: Vec<(Tensor<E>, Tensor<E>)>,
}

impl<E: Element> TunedLens<E> {
    pub fn identity(d_model: usize, effective_depth: usize) -> Self {
        let eye = Tensor::from_fn(&[d_model, d_model], |i| {
            if i / d_model == i % d_model {
                E::ONE
            } else {
                E::ZERO
            }
        });
        Self {
            adapters: (0..effective_depth)
                .map(|_| (eye.clone(), Tensor::zeros(&[d_model])))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LensFitConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_rows: usize,
    /// Stop after this many epochs without meaningful improvement.
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for LensFitConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            max_epochs: 80,
            batch_rows: 256,
            patience: 5,
            min_rel_improvement: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LensLayerStats {
    pub kl_mean: f64,
    pub top5_overlap_mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LensEvalReport {
    pub per_layer: Vec<LensLayerStats>,
    pub n_positions: usize,
}

/// Residual-out rows per virtual layer plus final log-probabilities,
/// concatenated over the batch.
struct LensData<E: Element> {
    states: Vec<Vec<E>>, // per layer: [n_rows * d]
    final_logprob: Vec<f64>, // [n_rows * vocab]
    n_rows: usize,
}

fn collect_states<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    batch: &[Vec<u32>],
) -> Result<LensData<E>> {
    let depth = schedule.effective_depth();
    let d = model.config().d_model;
    let vocab = model.config().vocab_size;
    let mut states: Vec<Vec<E>> = vec![Vec::new(); depth];
    let mut final_logprob = Vec::new();
    let mut n_rows = 0;
    for tokens in batch {
        let (logits, trace) = model.forward(tokens, schedule, true)?;
        let trace = trace.expect("capture requested");
        let s = tokens.len();
        for (vl, tl) in trace.layers.iter().enumerate() {
            states[vl].extend_from_slice(tl.residual_out.data());
        }
        for pos in 0..s {
            let row: Vec<f64> = logits.data()[pos * vocab..(pos + 1) * vocab]
                .iter()
                .map(|v| v.to_f64())
                .collect();
            let mut m = f64::NEG_INFINITY;
            for &v in &row {
                m = m.max(v);
            }
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            final_logprob.extend(row.iter().map(|v| v - lse));
        }
        n_rows += s;
    }
    let _ = d;
    Ok(LensData {
        states,
        final_logprob,
        n_rows,
    })
}

/// Early-exit log-probabilities of adapter `l` on rows `x [n, d]`.
fn early_exit_logprob<E: Element>(
    model: &Model<E>,
    adapter: &(Tensor<E>, Tensor<E>),
    x: &[E],
    n: usize,
) -> Vec<f64> {
    let d = model.config().d_model;
    let vocab = model.config().vocab_size;
    let mut h = kernels::matmul(x, adapter.0.data(), n, d, d, false, false);
    for row in 0..n {
        for j in 0..d {
            h[row * d + j] += adapter.1.data()[j];
        }
    }
    let (xf, _) = kernels::layer_norm(
        &h,
        model.final_gamma.data(),
        model.final_beta.data(),
        E::from_f64(model.config().norm_eps),
        n,
        d,
    );
    let logits = match &model.lm_head {
        Some(head) => kernels::matmul(&xf, head.data(), n, d, vocab, false, false),
        None => kernels::matmul(&xf, model.embed.data(), n, d, vocab, false, true),
    };
    let mut out = Vec::with_capacity(n * vocab);
    for row in 0..n {
        let r: Vec<f64> = logits[row * vocab..(row + 1) * vocab]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let mut m = f64::NEG_INFINITY;
        for &v in &r {
            m = m.max(v);
        }
        let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(r.iter().map(|v| v - lse));
    }
    out
}

/// Train adapters on `train_batch` (held out from any evaluation data).
pub fn tuned_lens_fit<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    train_batch: &[Vec<u32>],
    config: &LensFitConfig,
    rng: &RunRng,
) -> Result<TunedLens<E>> {
    if train_batch.is_empty() {
        return Err(Error::Eval("lens fit needs training data".into()));
    }
    let data = collect_states(model, schedule, train_batch)?;
    let d = model.config().d_model;
    let vocab = model.config().vocab_size;
    let mut lens = TunedLens::identity(d, schedule.effective_depth());

    // Constant soft targets in model precision.
    let target_rows: Vec<E> = data.final_logprob.iter().map(|lp| E::from_f64(lp.exp())).collect();

    for (vl, adapter) in lens.adapters.iter_mut().enumerate() {
        let x = &data.states[vl];
        let mut best = adapter.clone();
        let mut best_loss = f64::INFINITY;
        let mut stale = 0usize;
        let mut order: Vec<usize> = (0..data.n_rows).collect();
        for epoch in 0..config.max_epochs {
            // Deterministic reshuffle per epoch.
            let mut shuffle = rng.indexed_stream(&format!("lens/{}", vl), epoch as u64);
            for i in (1..order.len()).rev() {
                use rand_chacha::rand_core::RngCore;
                let j = (shuffle.next_u64() % (i as u64 + 1)) as usize;
                order.swap(i, j);
            }
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(config.batch_rows) {
                let n = chunk.len();
                let mut xb = Vec::with_capacity(n * d);
                let mut tb = Vec::with_capacity(n * vocab);
                for &r in chunk {
                    xb.extend_from_slice(&x[r * d..(r + 1) * d]);
                    tb.extend_from_slice(&target_rows[r * vocab..(r + 1) * vocab]);
                }
                let mut tape = Tape::new();
                let a_var = tape.leaf(adapter.0.clone());
                let b_var = tape.leaf(adapter.1.clone());
                let x_var = tape.constant(Tensor::from_parts(vec![n, d], xb));
                let gamma = tape.constant(model.final_gamma.clone());
                let beta = tape.constant(model.final_beta.clone());
                let h = tape.matmul(x_var, a_var)?;
                let h = tape.add_bias(h, b_var)?;
                let xf = tape.layer_norm(h, gamma, beta, E::from_f64(model.config().norm_eps))?;
                let logits = match &model.lm_head {
                    Some(head) => {
                        let hv = tape.constant(head.clone());
                        tape.matmul(xf, hv)?
                    }
                    None => {
                        let ev = tape.constant(model.embed.clone());
                        tape.matmul_t(xf, ev, false, true)?
                    }
                };
                let targets = Tensor::from_parts(vec![n, vocab], tb);
                let loss = tape.soft_cross_entropy(logits, &targets)?;
                epoch_loss += tape.value(loss).scalar_value()?.to_f64() * n as f64;
                seen += n;
                let mut grads = tape.backward(loss)?;
                let lr = E::from_f64(config.lr);
                if let Some(ga) = grads.take(a_var) {
                    let ad = adapter.0.data_mut();
                    for (p, &g) in ad.iter_mut().zip(ga.data()) {
                        *p -= lr * g;
                    }
                }
                if let Some(gb) = grads.take(b_var) {
                    let bd = adapter.1.data_mut();
                    for (p, &g) in bd.iter_mut().zip(gb.data()) {
                        *p -= lr * g;
                    }
                }
                adapter.0.check_finite("lens adapter")?;
                adapter.1.check_finite("lens bias")?;
            }
            epoch_loss /= seen as f64;
            if epoch_loss < best_loss * (1.0 - config.min_rel_improvement) {
                best_loss = epoch_loss;
                best = adapter.clone();
                stale = 0;
            } else {
                if epoch_loss < best_loss {
                    best_loss = epoch_loss;
                    best = adapter.clone();
                }
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
        *adapter = best;
    }
    Ok(lens)
}

/// Mean `KL(final || early_exit)` and mean top-5 overlap per layer.
pub fn tuned_lens_eval<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    lens: &TunedLens<E>,
    batch: &[Vec<u32>],
) -> Result<LensEvalReport> {
    if lens.adapters.len() != schedule.effective_depth() {
        return Err(Error::Eval(format!(
            "lens has {} adapters for effective depth {}",
            lens.adapters.len(),
            schedule.effective_depth()
        )));
    }
    let data = collect_states(model, schedule, batch)?;
    let vocab = model.config().vocab_size;
    let n = data.n_rows;
    let mut per_layer = Vec::with_capacity(lens.adapters.len());
    for (vl, adapter) in lens.adapters.iter().enumerate() {
        let early = early_exit_logprob(model, adapter, &data.states[vl], n);
        let mut kl_sum = 0.0;
        let mut overlap_sum = 0.0;
        for row in 0..n {
            let p = &data.final_logprob[row * vocab..(row + 1) * vocab];
            let q = &early[row * vocab..(row + 1) * vocab];
            let kl: f64 = p
                .iter()
                .zip(q)
                .map(|(lp, lq)| lp.exp() * (lp - lq))
                .sum();
            kl_sum += kl.max(0.0);
            overlap_sum += top5_overlap(p, q);
        }
        per_layer.push(LensLayerStats {
            kl_mean: kl_sum / n as f64,
            top5_overlap_mean: overlap_sum / n as f64,
        });
    }
    Ok(LensEvalReport {
        per_layer,
        n_positions: n,
    })
}

/// `|top5(p) ∩ top5(q)| / 5` with deterministic tie-breaking by index.
fn top5_overlap(p: &[f64], q: &[f64]) -> f64 {
    let top5 = |row: &[f64]| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(5);
        idx
    };
    let a = top5(p);
    let b = top5(q);
    let inter = a.iter().filter(|i| b.contains(i)).count();
    inter as f64 / 5.0
}
