//! Schedule-edit interventions: layer swaps and inference-time block
//! repetition, evaluated on language-modeling loss and reasoning
//! primitives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSchedule, Model};
use crate::numerics::{Element, Tape};
use crate::rng::RunRng;
use crate::tasks::{eval_mc, gen_episodes, LmScorer, TaskKind};
use crate::trainer::data::{window_in_family, MixtureComponent};

/// Mean next-token loss over held-out synthetic text windows (the
/// language-modeling analog used by intervention reports).
pub fn lm_loss<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    rng: &RunRng,
    n_windows: usize,
    context: usize,
) -> Result<f64> {
    let web = vec![MixtureComponent {
        name: "web".into(),
        weight: 1.0,
    }];
    let mut total = 0.0;
    for i in 0..n_windows {
        let w = window_in_family(rng, "eval-lm", &web, context, 0, i)?;
        let inputs = &w.tokens[..w.tokens.len() - 1];
        let targets = &w.tokens[1..];
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let (logits, _) = model.forward_tape(&mut tape, &vars, inputs, schedule, false)?;
        let loss = tape.cross_entropy(logits, targets, None)?;
        total += tape.value(loss).scalar_value()?.to_f64();
    }
    Ok(total / n_windows as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwapReport {
    pub slot_a: usize,
    pub slot_b: usize,
    pub block_len: usize,
    pub lm_loss_before: f64,
    pub lm_loss_after: f64,
    /// `(after - before) / before`; positive means degradation.
    pub lm_relative_degradation: f64,
    pub task_kind: TaskKind,
    pub task_depth: u8,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// `(before - after) / max(before, 1e-9)`; positive means degradation.
    pub accuracy_relative_degradation: f64,
    /// Physical layers under the swapped slots were identical, making the
    /// swap a guaranteed no-op.
    pub same_physical: bool,
}

/// Swap two blocks of `block_len` virtual slots and measure degradation.
#[allow(clippy::too_many_arguments)]
pub fn swap_eval<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    slot_a: usize,
    slot_b: usize,
    block_len: usize,
    rng: &RunRng,
    task_kind: TaskKind,
    task_depth: u8,
    n_episodes: usize,
) -> Result<SwapReport> {
    if block_len == 0 || !(1..=2).contains(&block_len) {
        return Err(Error::Eval("swap block_len must be 1 or 2".into()));
    }
    let swapped = schedule.swap_blocks(slot_a, slot_b, block_len)?;
    let same_physical = schedule.steps() == swapped.steps();

    let n_lm = 16;
    let context = (model.config().max_context - 1).min(128);
    let lm_before = lm_loss(model, schedule, rng, n_lm, context)?;
    let lm_after = lm_loss(model, &swapped, rng, n_lm, context)?;

    let shots = 3;
    let episodes = gen_episodes(rng, "swap-eval", task_kind, task_depth, shots, n_episodes)?;
    let acc_before = eval_mc(&LmScorer::new(model, schedule), &episodes)?.accuracy;
    let acc_after = eval_mc(&LmScorer::new(model, &swapped), &episodes)?.accuracy;

    Ok(SwapReport {
        slot_a,
        slot_b,
        block_len,
        lm_loss_before: lm_before,
        lm_loss_after: lm_after,
        lm_relative_degradation: (lm_after - lm_before) / lm_before,
        task_kind,
        task_depth,
        accuracy_before: acc_before,
        accuracy_after: acc_after,
        accuracy_relative_degradation: (acc_before - acc_after) / acc_before.max(1e-9),
        same_physical,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepeatPoint {
    pub extra_reps: usize,
    pub effective_depth: usize,
    /// Accuracy per evaluated task kind, in input order.
    pub accuracy: Vec<f64>,
}

/// Evaluate reasoning primitives with the block `[start, start+len)`
/// repeated 0..=max_extra additional times at inference.
#[allow(clippy::too_many_arguments)]
pub fn repeat_block_eval<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    start: usize,
    len: usize,
    max_extra: usize,
    rng: &RunRng,
    kinds: &[(TaskKind, u8)],
    n_episodes: usize,
) -> Result<Vec<RepeatPoint>> {
    if kinds.is_empty() {
        return Err(Error::Eval("repeat_block_eval needs at least one task".into()));
    }
    // Fixed episodes across repetition counts.
    let mut episode_sets = Vec::new();
    for (kind, depth) in kinds {
        episode_sets.push(gen_episodes(
            rng,
            &format!("repeat-eval/{}/d{}", kind.as_str(), depth),
            *kind,
            *depth,
            3,
            n_episodes,
        )?);
    }
    let mut out = Vec::with_capacity(max_extra + 1);
    for extra in 0..=max_extra {
        let sched = schedule.repeat_block(start, len, extra)?;
        let scorer = LmScorer::new(model, &sched);
        let mut accs = Vec::with_capacity(kinds.len());
        for eps in &episode_sets {
            accs.push(eval_mc(&scorer, eps)?.accuracy);
        }
        out.push(RepeatPoint {
            extra_reps: extra,
            effective_depth: sched.effective_depth(),
            accuracy: accs,
        });
    }
    Ok(out)
}
