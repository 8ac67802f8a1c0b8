//! Property tests over the spec-level invariants.

use proptest::prelude::*;

use looplab_core::growth::{source_range, stage_budgets, GrowthOperator};
use looplab_core::model::{build_schedule, ScheduleSpec};
use looplab_core::numerics::{grad_check, kernels, Tape, Tensor};
use looplab_core::tasks;
use looplab_core::rng::RunRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Budgets sum exactly to the total for any feasible (T, k, alpha).
    #[test]
    fn budgets_sum_exactly(total in 64u64..200_000, stages in 1usize..12, alpha in 0.0f64..3.0) {
        prop_assume!(total >= stages as u64 * 4);
        if let Ok(budgets) = stage_budgets(total, stages, alpha) {
            prop_assert_eq!(budgets.iter().sum::<u64>(), total);
            prop_assert!(budgets.iter().all(|&b| b >= 1));
        }
    }

    /// Block-aligned ranges stay block-aligned; layer-aligned ranges stay
    /// centered within one layer of symmetry.
    #[test]
    fn growth_ranges_well_formed(stages in 1usize..10, block in 1usize..6) {
        let depth = stages * block;
        let (ms, _) = source_range(GrowthOperator::Midas, depth, block).unwrap();
        prop_assert_eq!(ms % block, 0);
        let (ls, _) = source_range(GrowthOperator::Lidas, depth, block).unwrap();
        let before = ls as i64;
        let after = (depth - (ls + block)) as i64;
        prop_assert!((before - after).abs() <= 1);
    }

    /// Softmax rows sum to one within 1e-12 in f64, at any axis.
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000) {
        let t = Tensor::<f64>::randn(&[rows, cols], 2.0, &mut RunRng::new(seed).stream("sm"));
        let out = kernels::softmax_axis(t.data(), &[rows, cols], 1);
        for r in 0..rows {
            let sum: f64 = out[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    /// Autodiff matches central differences on random composed graphs
    /// of the primitive ops.
    #[test]
    fn autodiff_matches_finite_differences(seed in 0u64..200, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let rng = RunRng::new(seed);
        let a = Tensor::<f64>::randn(&[m, k], 0.8, &mut rng.stream("a"));
        let b = Tensor::<f64>::randn(&[k, n], 0.8, &mut rng.stream("b"));
        let g = Tensor::<f64>::ones(&[n]);
        let beta = Tensor::<f64>::randn(&[n], 0.5, &mut rng.stream("beta"));
        let err = grad_check(&[a, b, g.clone(), beta], 1e-5, |tape, vars| {
            let prod = tape.matmul(vars[0], vars[1])?;
            let act = tape.gelu(prod)?;
            let normed = tape.layer_norm(act, vars[2], vars[3], 1e-5)?;
            let sm = tape.softmax(normed, 1)?;
            tape.sum(sm)
        }).unwrap();
        prop_assert!(err <= 1e-6, "fd error {}", err);
    }

    /// Schedule semantics: expanding any loop descriptor gives steps equal
    /// to sequentially concatenated block applications.
    #[test]
    fn loop_schedules_concatenate(block in 1usize..6, reps in 1usize..6) {
        let sched = build_schedule(&ScheduleSpec::Loop { block, reps }, block).unwrap();
        let expected: Vec<usize> = (0..reps).flat_map(|_| 0..block).collect();
        prop_assert_eq!(sched.steps(), &expected[..]);
        prop_assert_eq!(sched.effective_depth(), block * reps);
        prop_assert_eq!(sched.unique_layers(), block);
    }

    /// Generator/oracle agreement on random instances of every kind.
    #[test]
    fn generator_matches_oracle(seed in 0u64..300, kind_idx in 0usize..5, depth in 0u8..3) {
        let kind = tasks::ALL_KINDS[kind_idx];
        let depth = if kind.is_copy() { 0 } else { depth };
        let rng = RunRng::new(seed);
        let inst = tasks::gen_task(&rng, kind, depth, seed).unwrap();
        prop_assert_eq!(tasks::resolve_oracle(&inst).unwrap(), inst.answer());
    }

    /// Task instances round-trip through the JSONL schema losslessly.
    #[test]
    fn task_serialization_round_trips(seed in 0u64..200, kind_idx in 0usize..5) {
        let kind = tasks::ALL_KINDS[kind_idx];
        let depth = if kind.is_copy() { 0 } else { (seed % 3) as u8 };
        let inst = tasks::gen_task(&RunRng::new(seed), kind, depth, seed).unwrap();
        let line = serde_json::to_string(&inst).unwrap();
        let back: tasks::TaskInstance = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(inst, back);
    }
}

/// Tape backward on a shared leaf sums all occurrences (weight tying).
#[test]
fn shared_leaf_grad_is_occurrence_sum() {
    let w = Tensor::<f64>::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone());
    // f(w) = sum(w @ w): both occurrences feed the same leaf.
    let prod = tape.matmul(wv, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let got = grads.take(wv).unwrap();

    // Untied clone: duplicate the leaf, sum the two gradients.
    let mut tape2 = Tape::new();
    let w1 = tape2.leaf(w.clone());
    let w2 = tape2.leaf(w);
    let prod2 = tape2.matmul(w1, w2).unwrap();
    let loss2 = tape2.sum(prod2).unwrap();
    let mut grads2 = tape2.backward(loss2).unwrap();
    let g1 = grads2.take(w1).unwrap();
    let g2 = grads2.take(w2).unwrap();
    for i in 0..4 {
        let want = g1.data()[i] + g2.data()[i];
        assert!((got.data()[i] - want).abs() <= 1e-12);
    }
}

/// The sampled mixture converges to configured weights at n = 1e5.
#[test]
fn mixture_law_of_large_numbers() {
    use looplab_core::trainer::data::sample_component;
    use looplab_core::trainer::MixtureComponent;
    let comps = vec![
        MixtureComponent { name: "web".into(), weight: 0.6 },
        MixtureComponent { name: "tasks".into(), weight: 0.25 },
        MixtureComponent { name: "math".into(), weight: 0.15 },
    ];
    let mut rng = RunRng::new(123).stream("lln");
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[sample_component(&comps, &mut rng)] += 1;
    }
    for (c, comp) in counts.iter().zip(&comps) {
        let f = *c as f64 / n as f64;
        assert!(
            (f - comp.weight).abs() <= 0.01,
            "component {} frequency {} vs weight {}",
            comp.name,
            f,
            comp.weight
        );
    }
}
