//! Training: AdamW over mixture batches with a continuous LR schedule,
//! staged depth growth, and cooldown-phase adaptations (mixture
//! reweighting, retrofitted block looping).

mod adamw;
pub mod data;
mod lr;
mod sft;

pub use adamw::{adamw_step, AdamwHyper, AdamwState, Moment};
pub use data::{MixtureComponent, MixtureConfig};
pub use lr::LrSchedule;
pub use sft::{sft_sweep, SftConfig, SftCurve, SftPoint};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::{grow, plan_event, GrowthEvent, GrowthPlan};
use crate::model::{LayerSchedule, Model, ModelGrads, ScheduleKind};
use crate::numerics::{Element, Tape};
use crate::rng::RunRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub context: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Fraction of steps in the final decay/cooldown phase.
    #[serde(default = "default_cooldown_frac")]
    pub cooldown_frac: f64,
    #[serde(default)]
    pub final_lr_frac: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_cooldown_frac() -> f64 {
    0.15
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.1
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.context == 0 {
            return Err(Error::config("steps, batch_size and context must be positive"));
        }
        self.lr_schedule().validate()
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            total_steps: self.steps,
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr,
            cooldown_frac: self.cooldown_frac,
            final_lr_frac: self.final_lr_frac,
        }
    }

    pub fn hyper(&self) -> AdamwHyper {
        AdamwHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.context) as u64
    }
}

/// Retrofitted recurrence during cooldown: repeat the virtual block
/// `[block_start, block_start + block_len)` `extra_reps` extra times in
/// forward/backward. Weights stay untied; gradients of repeated slots
/// accumulate into their shared physical layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopAdaptation {
    pub block_start: usize,
    pub block_len: usize,
    pub extra_reps: usize,
}

#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Component contributing the most tokens to this step's batch.
    pub dominant_component: &'static str,
    pub component_tokens: [usize; 3],
}

/// Mean next-token loss and mean gradients over a batch of windows
/// (each `context + 1` token ids). Rows are processed independently and
/// reduced in fixed row order, so the result does not depend on thread
/// scheduling.
pub fn batch_loss_and_grads<E: Element>(
    model: &Model<E>,
    schedule: &LayerSchedule,
    windows: &[Vec<u32>],
) -> Result<(f64, ModelGrads<E>)> {
    if windows.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let per_row: Vec<(f64, ModelGrads<E>)> = windows
        .par_iter()
        .map(|w| {
            if w.len() < 2 {
                return Err(Error::config("window shorter than 2 tokens"));
            }
            let inputs = &w[..w.len() - 1];
            let targets = &w[1..];
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let (logits, _) = model.forward_tape(&mut tape, &vars, inputs, schedule, false)?;
            let loss = tape.cross_entropy(logits, targets, None)?;
            let loss_value = tape.value(loss).scalar_value()?.to_f64();
            let mut grads = tape.backward(loss)?;
            Ok((loss_value, model.extract_grads(&mut grads, &vars)))
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = E::from_f64(1.0 / windows.len() as f64);
    let mut total = ModelGrads::zeros_like(model);
    let mut loss_sum = 0.0;
    for (loss, g) in &per_row {
        total.add_scaled(g, scale);
        loss_sum += loss;
    }
    Ok((loss_sum / windows.len() as f64, total))
}

pub struct Trainer<E: Element> {
    pub model: Model<E>,
    pub opt: AdamwState<E>,
    /// Base execution schedule (before any cooldown adaptation).
    pub schedule: LayerSchedule,
    pub config: TrainerConfig,
    pub mixture: MixtureConfig,
    pub rng: RunRng,
    pub growth: Option<GrowthPlan>,
    pub loop_adaptation: Option<LoopAdaptation>,
    pub events: Vec<GrowthEvent>,
}

impl<E: Element> Trainer<E> {
    pub fn new(
        model: Model<E>,
        schedule: LayerSchedule,
        config: TrainerConfig,
        mixture: MixtureConfig,
        rng: RunRng,
        growth: Option<GrowthPlan>,
        loop_adaptation: Option<LoopAdaptation>,
    ) -> Result<Self> {
        config.validate()?;
        mixture.validate()?;
        model.validate_schedule(&schedule)?;
        if model.config().vocab_size != crate::tokenizer::vocab_size() {
            return Err(Error::config(format!(
                "model vocab {} != tokenizer vocab {}",
                model.config().vocab_size,
                crate::tokenizer::vocab_size()
            )));
        }
        if config.context + 1 > model.config().max_context {
            return Err(Error::config(
                "training context does not fit the model's max_context",
            ));
        }
        if let Some(plan) = &growth {
            plan.validate()?;
            if !schedule.is_standard() {
                return Err(Error::config(
                    "growing operates on untied models only (standard schedule required)",
                ));
            }
            if model.config().n_physical_layers != plan.block_size {
                return Err(Error::config(format!(
                    "growth starts from a {}-layer model, found {}",
                    plan.block_size,
                    model.config().n_physical_layers
                )));
            }
            let lr = config.lr_schedule();
            let last_growth = *plan.growth_steps()?.last().unwrap_or(&0);
            if last_growth >= lr.cooldown_start() {
                return Err(Error::config(format!(
                    "last growth at step {} but cooldown starts at {}: final depth must be reached before cooldown",
                    last_growth,
                    lr.cooldown_start()
                )));
            }
            if plan.total_steps > config.steps {
                return Err(Error::config("growth horizon exceeds total steps"));
            }
        }
        let opt = AdamwState::new(&model);
        let trainer = Self {
            model,
            opt,
            schedule,
            config,
            mixture,
            rng,
            growth,
            loop_adaptation,
            events: Vec::new(),
        };
        if let Some(adapt) = trainer.loop_adaptation {
            trainer.validate_adaptation(&adapt)?;
        }
        Ok(trainer)
    }

    /// Rebuild a trainer mid-run (checkpoint resume). The optimizer's
    /// step counter carries the position; growth progress is implied by
    /// the model depth and replayed events.
    #[allow(clippy::too_many_arguments)]
    pub fn from_state(
        model: Model<E>,
        opt: AdamwState<E>,
        schedule: LayerSchedule,
        config: TrainerConfig,
        mixture: MixtureConfig,
        rng: RunRng,
        growth: Option<GrowthPlan>,
        loop_adaptation: Option<LoopAdaptation>,
        events: Vec<GrowthEvent>,
    ) -> Result<Self> {
        config.validate()?;
        mixture.validate()?;
        model.validate_schedule(&schedule)?;
        if let Some(plan) = &growth {
            plan.validate()?;
            let depth = model.config().n_physical_layers;
            if depth % plan.block_size != 0 || depth > plan.final_depth {
                return Err(Error::config(format!(
                    "depth {} inconsistent with growth plan (block {}, final {})",
                    depth, plan.block_size, plan.final_depth
                )));
            }
            if depth != plan.block_size * (events.len() + 1) {
                return Err(Error::config(format!(
                    "depth {} does not match {} replayed growth events",
                    depth,
                    events.len()
                )));
            }
        }
        let trainer = Self {
            model,
            opt,
            schedule,
            config,
            mixture,
            rng,
            growth,
            loop_adaptation,
            events,
        };
        if let Some(adapt) = trainer.loop_adaptation {
            trainer.validate_adaptation(&adapt)?;
        }
        Ok(trainer)
    }

    fn validate_adaptation(&self, adapt: &LoopAdaptation) -> Result<()> {
        // Ranges are checked against the schedule at final depth: with a
        // growth plan, that is the post-growth standard schedule.
        let depth = match &self.growth {
            Some(plan) => plan.final_depth,
            None => self.schedule.effective_depth(),
        };
        let (s, l) = (adapt.block_start, adapt.block_len);
        if l == 0 || s + l > depth {
            return Err(Error::config(format!(
                "loop adaptation [{}, {}) outside effective depth {}",
                s,
                s + l,
                depth
            )));
        }
        if let ScheduleKind::MiddleLoop { prefix, block, reps, .. } = self.schedule.kind() {
            let loop_lo = *prefix;
            let loop_hi = prefix + block * reps;
            if s < loop_lo || s + l > loop_hi {
                return Err(Error::config(format!(
                    "loop adaptation [{}, {}) overlaps the unique prefix/suffix (looped region is [{}, {}))",
                    s,
                    s + l,
                    loop_lo,
                    loop_hi
                )));
            }
        }
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        self.config.lr_schedule()
    }

    pub fn in_cooldown(&self, step: u64) -> bool {
        step >= self.lr_schedule().cooldown_start()
    }

    /// Schedule actually used in forward/backward at `step`: the base
    /// schedule, with the adapted block repeated during cooldown.
    pub fn active_schedule(&self, step: u64) -> Result<LayerSchedule> {
        match (&self.loop_adaptation, self.in_cooldown(step)) {
            (Some(adapt), true) => {
                self.schedule
                    .repeat_block(adapt.block_start, adapt.block_len, adapt.extra_reps)
            }
            _ => Ok(self.schedule.clone()),
        }
    }

    /// Pending growth boundary at exactly this step, if any.
    fn growth_due(&self, step: u64) -> Result<Option<GrowthEvent>> {
        let Some(plan) = &self.growth else {
            return Ok(None);
        };
        let boundaries = plan.growth_steps()?;
        let due = boundaries.iter().filter(|&&b| b <= step).count();
        let expected_depth = plan.block_size * (due + 1);
        let current = self.model.config().n_physical_layers;
        if current < expected_depth {
            if current + plan.block_size != expected_depth {
                return Err(Error::config(format!(
                    "model depth {} inconsistent with growth plan at step {}",
                    current, step
                )));
            }
            return Ok(Some(plan_event(plan, current, step)?));
        }
        Ok(None)
    }

    /// One optimizer step at the current global step: applies any due
    /// growth first (growth happens between steps, never mid-batch).
    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let step = self.opt.step;
        if step >= self.config.steps {
            return Err(Error::config("training already complete"));
        }
        if let Some(event) = self.growth_due(step)? {
            self.apply_growth(event)?;
        }
        let schedule = self.active_schedule(step)?;
        let components = self.mixture.phase_components(self.in_cooldown(step)).to_vec();

        let mut windows = Vec::with_capacity(self.config.batch_size);
        let mut tallies = [0usize; 3];
        for row in 0..self.config.batch_size {
            let w = data::window_at(&self.rng, &components, self.config.context, step, row)?;
            for (t, n) in tallies.iter_mut().zip(w.component_tokens) {
                *t += n;
            }
            windows.push(w.tokens);
        }
        let (loss, grads) = batch_loss_and_grads(&self.model, &schedule, &windows)?;
        let lr = self.lr_schedule().lr_at(step);
        adamw_step(&mut self.model, &grads, &mut self.opt, &self.config.hyper(), lr)?;

        let dominant = data::COMPONENT_NAMES[tallies
            .iter()
            .enumerate()
            .max_by_key(|(_, &n)| n)
            .map(|(i, _)| i)
            .unwrap_or(0)];
        Ok(StepMetrics {
            step,
            loss,
            lr,
            dominant_component: dominant,
            component_tokens: tallies,
        })
    }

    fn apply_growth(&mut self, event: GrowthEvent) -> Result<()> {
        if !self.schedule.is_standard() {
            return Err(Error::config("cannot grow a tied schedule"));
        }
        let (model, opt) = grow(&self.model, &self.opt, &event)?;
        self.model = model;
        self.opt = opt;
        self.schedule = self.model.standard_schedule();
        self.events.push(event);
        Ok(())
    }

    /// Run up to `until` (exclusive), invoking `on_step` after every
    /// optimizer step.
    pub fn run_until(
        &mut self,
        until: u64,
        mut on_step: impl FnMut(&StepMetrics, &Trainer<E>) -> Result<()>,
    ) -> Result<()> {
        while self.opt.step < until.min(self.config.steps) {
            let metrics = self.step_once()?;
            on_step(&metrics, self)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growth::GrowthOperator;
    use crate::model::{schedule_from_descriptor, ModelConfig};
    use crate::tokenizer;

    pub(crate) fn test_model(layers: usize, seed: u64) -> Model<f32> {
        let config = ModelConfig {
            vocab_size: tokenizer::vocab_size(),
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_physical_layers: layers,
            max_context: 96,
            norm_eps: 1e-5,
            tied_embedding: false,
        };
        Model::init(config, &RunRng::new(seed)).unwrap()
    }

    fn tiny_config(steps: u64) -> TrainerConfig {
        TrainerConfig {
            steps,
            batch_size: 2,
            context: 32,
            peak_lr: 3e-3,
            warmup_steps: 4,
            cooldown_frac: 0.25,
            final_lr_frac: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            checkpoint_every: 0,
        }
    }

    #[test]
    fn loss_decreases_on_memorizable_corpus() {
        // Overfit sanity: loss should fall well below its start within
        // 200 steps on the tiny synthetic stream.
        let model = test_model(2, 1);
        let sched = model.standard_schedule();
        let mut trainer = Trainer::new(
            model,
            sched,
            tiny_config(200),
            MixtureConfig::default(),
            RunRng::new(5),
            None,
            None,
        )
        .unwrap();
        let mut first = None;
        let mut last = 0.0;
        trainer
            .run_until(200, |m, _| {
                if first.is_none() {
                    first = Some(m.loss);
                }
                last = m.loss;
                Ok(())
            })
            .unwrap();
        let first = first.unwrap();
        assert!(
            last < first * 0.6,
            "loss failed to decrease: first {} last {}",
            first,
            last
        );
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical() {
        let run = || {
            let model = test_model(1, 2);
            let sched = model.standard_schedule();
            let mut t = Trainer::new(
                model,
                sched,
                tiny_config(12),
                MixtureConfig::default(),
                RunRng::new(9),
                None,
                None,
            )
            .unwrap();
            t.run_until(12, |_, _| Ok(())).unwrap();
            t.model.param_digest()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn growth_trainer_reaches_final_depth() {
        let model = test_model(1, 3);
        let sched = model.standard_schedule();
        let plan = GrowthPlan {
            operator: GrowthOperator::Lidas,
            block_size: 1,
            final_depth: 3,
            alpha: 1.0,
            total_steps: 12,
        };
        let mut t = Trainer::new(
            model,
            sched,
            tiny_config(20),
            MixtureConfig::default(),
            RunRng::new(10),
            Some(plan),
            None,
        )
        .unwrap();
        t.run_until(20, |_, _| Ok(())).unwrap();
        assert_eq!(t.model.config().n_physical_layers, 3);
        assert_eq!(t.events.len(), 2);
        assert!(t.events.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn growth_requires_untied_schedule() {
        let model = test_model(2, 4);
        let sched = schedule_from_descriptor("2x2", 2).unwrap();
        let plan = GrowthPlan {
            operator: GrowthOperator::Midas,
            block_size: 2,
            final_depth: 4,
            alpha: 1.0,
            total_steps: 10,
        };
        let res = Trainer::new(
            model,
            sched,
            tiny_config(20),
            MixtureConfig::default(),
            RunRng::new(11),
            Some(plan),
            None,
        );
        assert!(res.is_err());
    }

    #[test]
    fn adaptation_changes_only_cooldown_schedule() {
        let model = test_model(4, 5);
        let sched = model.standard_schedule();
        let t = Trainer::new(
            model,
            sched,
            tiny_config(20), // cooldown starts at 15
            MixtureConfig::default(),
            RunRng::new(12),
            None,
            Some(LoopAdaptation {
                block_start: 1,
                block_len: 2,
                extra_reps: 1,
            }),
        )
        .unwrap();
        assert_eq!(t.active_schedule(0).unwrap().effective_depth(), 4);
        assert_eq!(t.active_schedule(15).unwrap().effective_depth(), 6);
        assert_eq!(t.active_schedule(15).unwrap().steps(), &[0, 1, 2, 1, 2, 3]);
    }

    #[test]
    fn adaptation_rejects_unique_prefix_overlap() {
        let model = test_model(4, 6);
        let sched = schedule_from_descriptor("1-2x3-1", 4).unwrap();
        let res = Trainer::new(
            model,
            sched.clone(),
            tiny_config(20),
            MixtureConfig::default(),
            RunRng::new(13),
            None,
            Some(LoopAdaptation {
                block_start: 0,
                block_len: 2,
                extra_reps: 1,
            }),
        );
        assert!(res.is_err());
        let ok = Trainer::new(
            test_model(4, 6),
            sched,
            tiny_config(20),
            MixtureConfig::default(),
            RunRng::new(13),
            None,
            Some(LoopAdaptation {
                block_start: 1,
                block_len: 2,
                extra_reps: 1,
            }),
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn k1_growth_plan_is_bitwise_baseline() {
        // A one-stage plan degenerates to standard training at depth B.
        let run = |plan: Option<GrowthPlan>| {
            let model = test_model(2, 7);
            let sched = model.standard_schedule();
            let mut t = Trainer::new(
                model,
                sched,
                tiny_config(10),
                MixtureConfig::default(),
                RunRng::new(21),
                plan,
                None,
            )
            .unwrap();
            t.run_until(10, |_, _| Ok(())).unwrap();
            (t.model.param_digest(), t.events.len())
        };
        let (baseline, _) = run(None);
        let (grown, events) = run(Some(GrowthPlan {
            operator: GrowthOperator::Midas,
            block_size: 2,
            final_depth: 2,
            alpha: 1.0,
            total_steps: 10,
        }));
        assert_eq!(events, 0);
        assert_eq!(baseline, grown);
    }

    #[test]
    fn duplicated_moments_diverge_after_training() {
        // After growth the copies start bit-identical, then separate once
        // distinct gradients flow.
        let model = test_model(1, 8);
        let sched = model.standard_schedule();
        let plan = GrowthPlan {
            operator: GrowthOperator::Lidas,
            block_size: 1,
            final_depth: 2,
            alpha: 0.0,
            total_steps: 8,
        };
        let mut t = Trainer::new(
            model,
            sched,
            tiny_config(8),
            MixtureConfig::default(),
            RunRng::new(22),
            Some(plan),
            None,
        )
        .unwrap();
        // Run exactly to the growth boundary (after budgets[0] steps).
        let boundary = t.growth.as_ref().unwrap().growth_steps().unwrap()[0];
        t.run_until(boundary, |_, _| Ok(())).unwrap();
        assert_eq!(t.model.config().n_physical_layers, 1);
        // Next step grows, then trains once.
        t.run_until(boundary + 1, |_, _| Ok(())).unwrap();
        assert_eq!(t.model.config().n_physical_layers, 2);
        assert!(!t.model.layers[0].bits_eq(&t.model.layers[1]));
        assert!(!t.opt.layers[0][2].bits_eq(&t.opt.layers[1][2]));
    }
}
