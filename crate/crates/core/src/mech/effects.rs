//! Future local effects: the direct influence of one layer's residual
//! contribution on a later layer's update, without propagation.
//!
//! `M[s, l]` removes slot `s`'s update from the residual stream entering
//! slot `l`, re-applies slot `l` once, and reports the relative change of
//! its update, maximized across batch examples and sequence positions.
//! Nothing past slot `l` is recomputed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSchedule, Model};
use crate::numerics::{Element, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectMatrix {
    /// Row-major `[source][target]`; `None` on and below the diagonal
    /// (undefined by construction) and for targets whose clean update is
    /// zero at every position (flagged, not divided through).
    pub entries: Vec<Vec<Option<f64>>>,
    pub effective_depth: usize,
    pub n_examples: usize,
}

impl EffectMatrix {
    pub fn get(&self, source: usize, target: usize) -> Option<f64> {
        self.entries[source][target]
    }

    pub fn is_strictly_upper_triangular(&self) -> bool {
        self.entries
            .iter()
            .enumerate()
            .all(|(s, row)| row.iter().enumerate().all(|(l, e)| l > s || e.is_none()))
    }
}

struct ExampleEffects {
    /// max over positions of ||delta update_l|| / ||update_l||, or None
    /// when every position's clean update is zero.
    ratios: Vec<Vec<Option<f64>>>,
}

fn per_position_norms<E: Element>(t: &Tensor<E>) -> Vec<f64> {
    let (s, d) = (t.shape()[0], t.shape()[1]);
    (0..s)
        .map(|i| {
            t.data()[i * d..(i + 1) * d]
                .iter()
                .map(|v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn example_effects<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    tokens: &[u32],
) -> Result<ExampleEffects> {
    let steps = schedule.steps();
    let depth = steps.len();
    let (_, trace) = model.forward(tokens, schedule, true)?;
    let trace = trace.expect("capture requested");

    // Clean per-slot updates (attn + mlp contribution of the slot).
    let updates: Vec<Tensor<E>> = trace
        .layers
        .iter()
        .map(|tl| {
            let mut u = tl.attn_out.clone();
            let ud = u.data_mut();
            for (o, &m) in ud.iter_mut().zip(tl.mlp_out.data()) {
                *o += m;
            }
            u
        })
        .collect();

    let mut ratios = vec![vec![None; depth]; depth];
    for target in 1..depth {
        let clean_norms = per_position_norms(&updates[target]);
        let any_nonzero = clean_norms.iter().any(|&n| n > 0.0);
        for source in 0..target {
            if !any_nonzero {
                continue; // flagged undefined
            }
            // Input of `target` with `source`'s update removed.
            let mut modified = trace.layers[target].residual_in.clone();
            {
                let md = modified.data_mut();
                for (o, &u) in md.iter_mut().zip(updates[source].data()) {
                    *o -= u;
                }
            }
            let applied = model.apply_layer(steps[target], &modified)?;
            let mut new_update = applied.attn_out;
            {
                let nd = new_update.data_mut();
                for (o, &m) in nd.iter_mut().zip(applied.mlp_out.data()) {
                    *o += m;
                }
            }
            let (s, d) = (new_update.shape()[0], new_update.shape()[1]);
            let mut worst = 0.0f64;
            for pos in 0..s {
                if clean_norms[pos] == 0.0 {
                    continue;
                }
                let mut diff_sq = 0.0;
                for k in 0..d {
                    let delta = new_update.data()[pos * d + k].to_f64()
                        - updates[target].data()[pos * d + k].to_f64();
                    diff_sq += delta * delta;
                }
                worst = worst.max(diff_sq.sqrt() / clean_norms[pos]);
            }
            ratios[source][target] = Some(worst);
        }
    }
    Ok(ExampleEffects { ratios })
}

pub fn future_local_effects<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    batch: &[Vec<u32>],
) -> Result<EffectMatrix> {
    if batch.is_empty() {
        return Err(Error::Eval("future_local_effects needs a nonempty batch".into()));
    }
    let per_example: Vec<ExampleEffects> = batch
        .par_iter()
        .map(|tokens| example_effects(model, schedule, tokens))
        .collect::<Result<Vec<_>>>()?;

    let depth = schedule.effective_depth();
    let mut entries = vec![vec![None; depth]; depth];
    for ex in &per_example {
        for s in 0..depth {
            for l in 0..depth {
                if let Some(v) = ex.ratios[s][l] {
                    let slot = &mut entries[s][l];
                    *slot = Some(match *slot {
                        Some(prev) => v.max(prev),
                        None => v,
                    });
                }
            }
        }
    }
    Ok(EffectMatrix {
        entries,
        effective_depth: depth,
        n_examples: batch.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
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
        Model::init(config, &RunRng::new(23)).unwrap()
    }

    #[test]
    fn strictly_upper_triangular_and_nonnegative() {
        let m = model(3);
        let sched = m.standard_schedule();
        let batch = vec![vec![1, 2, 3, 4], vec![4, 3, 2, 1]];
        let em = future_local_effects(&m, &sched, &batch).unwrap();
        assert!(em.is_strictly_upper_triangular());
        for s in 0..3 {
            for l in s + 1..3 {
                let v = em.get(s, l).unwrap();
                assert!(v >= 0.0 && v.is_finite());
            }
        }
    }

    #[test]
    fn zero_output_source_has_zero_effect() {
        let mut m = model(2);
        // Layer 0 contributes nothing to the residual stream.
        for v in m.layers[0].w_o.data_mut() {
            *v = 0.0;
        }
        for v in m.layers[0].w_down.data_mut() {
            *v = 0.0;
        }
        let sched = m.standard_schedule();
        let em = future_local_effects(&m, &sched, &[vec![1, 2, 3]]).unwrap();
        assert_eq!(em.get(0, 1).unwrap(), 0.0);
    }
}
