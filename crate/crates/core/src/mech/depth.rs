//! Depth score via layer-skip interventions.
//!
//! For each virtual slot: remove its residual update (the input it would
//! have received feeds the next slot directly), let the change propagate
//! to the output, and record the maximum L2 change of the softmaxed
//! final logits over positions. Per-layer magnitudes are averaged over
//! examples, normalized into a distribution, and summarized by the
//! expected layer index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSchedule, Model};
use crate::numerics::{Element, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthProfile {
    /// Mean-over-examples of max-over-positions L2 logit-distribution
    /// change when skipping each virtual slot.
    pub magnitudes: Vec<f64>,
    /// Magnitudes normalized to sum to one.
    pub distribution: Vec<f64>,
    /// Expected slot index under `distribution`.
    pub score: f64,
    pub effective_depth: usize,
    pub n_examples: usize,
}

fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Vec<Vec<f64>> {
    let (s, v) = (logits.shape()[0], logits.shape()[1]);
    (0..s)
        .map(|i| {
            let row: Vec<f64> = logits.data()[i * v..(i + 1) * v]
                .iter()
                .map(|x| x.to_f64())
                .collect();
            crate::reference::reference_softmax(&row)
        })
        .collect()
}

fn max_l2_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Per-example skip magnitudes; reuses the clean per-slot inputs so each
/// skip only recomputes the suffix.
fn example_magnitudes<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    tokens: &[u32],
) -> Result<Vec<f64>> {
    let steps = schedule.steps();
    let (clean_logits, trace) = model.forward(tokens, schedule, true)?;
    let trace = trace.expect("capture requested");
    let clean_probs = softmax_rows(&clean_logits);

    (0..steps.len())
        .map(|skip| {
            // Input that would have entered the skipped slot.
            let mut x = trace.layers[skip].residual_in.clone();
            for &phys in &steps[skip + 1..] {
                x = model.apply_layer(phys, &x)?.out;
            }
            let logits = model.logits_from_residual(&x)?;
            Ok(max_l2_change(&softmax_rows(&logits), &clean_probs))
        })
        .collect()
}

pub fn depth_score<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    batch: &[Vec<u32>],
) -> Result<DepthProfile> {
    if batch.is_empty() {
        return Err(Error::Eval("depth_score needs a nonempty batch".into()));
    }
    let per_example: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|tokens| example_magnitudes(model, schedule, tokens))
        .collect::<Result<Vec<_>>>()?;

    let depth = schedule.effective_depth();
    let mut magnitudes = vec![0.0; depth];
    for ex in &per_example {
        for (m, v) in magnitudes.iter_mut().zip(ex) {
            *m += v;
        }
    }
    for m in &mut magnitudes {
        *m /= batch.len() as f64;
    }
    let total: f64 = magnitudes.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "all layer-skip magnitudes are zero; depth score undefined".into(),
        ));
    }
    let distribution: Vec<f64> = magnitudes.iter().map(|m| m / total).collect();
    let score = distribution
        .iter()
        .enumerate()
        .map(|(i, p)| i as f64 * p)
        .sum();
    Ok(DepthProfile {
        magnitudes,
        distribution,
        score,
        effective_depth: depth,
        n_examples: batch.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{schedule_from_descriptor, ModelConfig};
    use crate::rng::RunRng;

    fn model(layers: usize) -> Model<f64> {
        let config = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_physical_layers: layers,
            max_context: 16,
            norm_eps: 1e-5,
            tied_embedding: false,
        };
        Model::init(config, &RunRng::new(17)).unwrap()
    }

    #[test]
    fn distribution_sums_to_one_and_score_bounded() {
        let m = model(2);
        let sched = schedule_from_descriptor("2x2", 2).unwrap();
        let batch = vec![vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1]];
        let p = depth_score(&m, &sched, &batch).unwrap();
        assert_eq!(p.magnitudes.len(), 4);
        let sum: f64 = p.distribution.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        assert!(p.score >= 0.0 && p.score <= 3.0);
    }

    #[test]
    fn zero_update_model_is_flagged() {
        // Zero attention output and mlp down-projection make every layer
        // an exact no-op, which must error rather than normalize 0/0.
        let mut m = model(2);
        for l in &mut m.layers {
            for v in l.w_o.data_mut() {
                *v = 0.0;
            }
            for v in l.w_down.data_mut() {
                *v = 0.0;
            }
        }
        let sched = m.standard_schedule();
        let res = depth_score(&m, &sched, &[vec![1, 2, 3]]);
        assert!(matches!(res, Err(Error::Degenerate(_))));
    }

    #[test]
    fn tied_slots_are_measured_per_slot() {
        // loop(1x2): dropping either slot leaves the same one-application
        // network (the block is applied verbatim, with no iteration
        // conditioning), so the two magnitudes are measurable and equal.
        let m = model(1);
        let sched = schedule_from_descriptor("1x2", 1).unwrap();
        let p = depth_score(&m, &sched, &[vec![1, 2, 3, 4]]).unwrap();
        assert_eq!(p.magnitudes.len(), 2);
        assert!(p.magnitudes.iter().all(|&v| v > 0.0));
        assert_eq!(p.magnitudes[0], p.magnitudes[1]);

        // With two tied layers the truncated networks differ, so slots
        // mapping to the same physical layer get different magnitudes.
        let m2 = model(2);
        let sched2 = schedule_from_descriptor("2x2", 2).unwrap();
        let p2 = depth_score(&m2, &sched2, &[vec![1, 2, 3, 4]]).unwrap();
        assert!((p2.magnitudes[0] - p2.magnitudes[2]).abs() > 0.0);
    }
}
