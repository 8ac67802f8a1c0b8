//! Supervised fine-tuning on reasoning primitives, swept over dataset
//! sizes and seeds.
//!
//! Training pools and the evaluation set come from different substreams
//! and are verified disjoint by prompt hash before any gradient step;
//! loss is next-token cross entropy restricted to the answer tokens.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{adamw_step, AdamwHyper, AdamwState};
use crate::error::{Error, Result};
use crate::model::{LayerSchedule, Model, ModelGrads};
use crate::numerics::{Element, Tape};
use crate::rng::RunRng;
use crate::tasks::{eval_mc, gen_episodes, gen_task, LmScorer, TaskInstance, TaskKind};
use crate::tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    /// Variants fine-tuned on, sampled in equal parts.
    pub kind: TaskKind,
    pub depths: Vec<u8>,
    /// Dataset sizes swept (0 means evaluate the base model).
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_episodes: usize,
    pub eval_shots: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::VaCode,
            depths: vec![1, 2],
            sizes: vec![64, 128, 256, 512],
            seeds: vec![1, 2, 3],
            epochs: 4,
            lr: 3e-4,
            batch_size: 8,
            eval_episodes: 200,
            eval_shots: 5,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("sft needs depths, sizes and seeds"));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("sft sizes must be strictly increasing"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_episodes == 0 {
            return Err(Error::config("sft epochs/batch/eval_episodes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftPoint {
    pub size: usize,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftCurve {
    pub kind: TaskKind,
    pub depth: u8,
    pub points: Vec<SftPoint>,
}

/// Fine-tune clones of `model` at every `(size, seed)` and report the
/// accuracy curve per depth variant, mean +/- std over seeds.
pub fn sft_sweep<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    config: &SftConfig,
    eval_rng: &RunRng,
) -> Result<Vec<SftCurve>> {
    config.validate()?;

    // Fixed evaluation episodes per depth, shared by the whole sweep.
    let mut eval_sets = Vec::new();
    for &depth in &config.depths {
        let eps = gen_episodes(
            eval_rng,
            &format!("sft-eval/{}/d{}", config.kind.as_str(), depth),
            config.kind,
            depth,
            config.eval_shots,
            config.eval_episodes,
        )?;
        let mut hashes = HashSet::new();
        for ep in &eps {
            hashes.insert(ep.query.prompt_hash());
            for s in &ep.shots {
                hashes.insert(s.prompt_hash());
            }
        }
        eval_sets.push((depth, eps, hashes));
    }

    let mut curves: Vec<SftCurve> = config
        .depths
        .iter()
        .map(|&depth| SftCurve {
            kind: config.kind,
            depth,
            points: Vec::new(),
        })
        .collect();

    for &size in &config.sizes {
        let mut per_depth_accs: Vec<Vec<f64>> = vec![Vec::new(); config.depths.len()];
        for &seed in &config.seeds {
            let tuned = if size == 0 {
                model.clone()
            } else {
                let pool = build_pool(eval_rng, config, size, seed)?;
                for inst in &pool {
                    let h = inst.prompt_hash();
                    for (_, _, eval_hashes) in &eval_sets {
                        if eval_hashes.contains(&h) {
                            return Err(Error::Eval(
                                "sft training pool overlaps the evaluation set".into(),
                            ));
                        }
                    }
                }
                fine_tune(model, schedule, config, &pool, seed)?
            };
            let scorer = LmScorer::new(&tuned, schedule);
            for (di, (_, eps, _)) in eval_sets.iter().enumerate() {
                let report = eval_mc(&scorer, eps)?;
                per_depth_accs[di].push(report.accuracy);
            }
        }
        for (di, accs) in per_depth_accs.iter().enumerate() {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / accs.len() as f64;
            curves[di].points.push(SftPoint {
                size,
                per_seed: accs.clone(),
                mean,
                std: var.sqrt(),
            });
        }
    }
    Ok(curves)
}

/// `size` instances split equally across the depth variants, drawn from
/// the per-seed pool substream.
fn build_pool(rng: &RunRng, config: &SftConfig, size: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let per_variant = size / config.depths.len();
    if per_variant == 0 {
        return Err(Error::config("sft size smaller than variant count"));
    }
    let mut pool = Vec::with_capacity(size);
    for &depth in &config.depths {
        for i in 0..per_variant {
            let idx = rng.derive_seed(
                &format!("sft-pool/{}/{}/d{}", seed, config.kind.as_str(), depth),
                i as u64,
            );
            pool.push(gen_task(rng, config.kind, depth, idx)?);
        }
    }
    Ok(pool)
}

/// Plain AdamW fine-tuning, loss masked to the answer region.
fn fine_tune<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    config: &SftConfig,
    pool: &[TaskInstance],
    seed: u64,
) -> Result<Model<E>> {
    let mut tuned = model.clone();
    let mut opt = AdamwState::new(&tuned);
    let hyper = AdamwHyper {
        weight_decay: 0.0,
        ..AdamwHyper::default()
    };
    let order_rng = RunRng::new(seed);

    // Pre-tokenize: sequence = prompt + " " + answer, mask = answer span.
    let mut examples = Vec::with_capacity(pool.len());
    for inst in pool {
        let prompt_ids = tokenizer::encode(&inst.prompt)?;
        let full_ids = tokenizer::encode(&format!("{} {}", inst.prompt, inst.answer()))?;
        if full_ids.len() > tuned.config().max_context {
            return Err(Error::Eval("sft example exceeds max_context".into()));
        }
        // Targets are full_ids[1..]; answer tokens start at prompt len.
        let mask: Vec<bool> = (1..full_ids.len())
            .map(|t| t >= prompt_ids.len())
            .collect();
        examples.push((full_ids, mask));
    }

    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut shuffle_rng = order_rng.indexed_stream("sft-shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            use rand_chacha::rand_core::RngCore;
            let j = (shuffle_rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let mut total = ModelGrads::zeros_like(&tuned);
            let scale = E::from_f64(1.0 / chunk.len() as f64);
            for &ei in chunk {
                let (ids, mask) = &examples[ei];
                let inputs = &ids[..ids.len() - 1];
                let targets = &ids[1..];
                let mut tape = Tape::new();
                let vars = tuned.bind(&mut tape);
                let (logits, _) = tuned.forward_tape(&mut tape, &vars, inputs, schedule, false)?;
                let loss = tape.cross_entropy(logits, targets, Some(mask))?;
                let mut grads = tape.backward(loss)?;
                let g = tuned.extract_grads(&mut grads, &vars);
                total.add_scaled(&g, scale);
            }
            adamw_step(&mut tuned, &total, &mut opt, &hyper, config.lr)?;
            step += 1;
        }
    }
    let _ = step;
    Ok(tuned)
}
