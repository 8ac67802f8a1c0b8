//! Intervention oracles: depth-score magnitudes and future-local-effect
//! entries must match an independent straight-line recomputation, and
//! diagnostics must leave parameters untouched.

use looplab_core::mech::{depth_score, future_local_effects, norm_profiles, tuned_lens_eval, TunedLens};
use looplab_core::model::{schedule_from_descriptor, Model, ModelConfig};
use looplab_core::reference::{
    reference_apply_layer, reference_embed, reference_forward, reference_softmax,
};
use looplab_core::rng::RunRng;

fn model(layers: usize) -> Model<f64> {
    let config = ModelConfig {
        vocab_size: 13,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_physical_layers: layers,
        max_context: 16,
        norm_eps: 1e-5,
        tied_embedding: false,
    };
    Model::init(config, &RunRng::new(71)).unwrap()
}

fn max_l2_row_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
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

#[test]
fn depth_score_matches_brute_force_rebuild() {
    let m = model(2);
    let sched = schedule_from_descriptor("2", 2).unwrap();
    let batch = vec![vec![1u32, 5, 9, 2, 7], vec![3u32, 11, 4, 8, 0]];
    let profile = depth_score(&m, &sched, &batch).unwrap();

    // Oracle: rebuild the truncated network from scratch per skip, using
    // the straight-line reference only.
    for skip in 0..2 {
        let mut expected = 0.0;
        for tokens in &batch {
            let clean: Vec<Vec<f64>> = reference_forward(&m, tokens, sched.steps())
                .iter()
                .map(|row| reference_softmax(row))
                .collect();
            let truncated_steps: Vec<usize> = sched
                .steps()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, &s)| s)
                .collect();
            let skipped: Vec<Vec<f64>> = reference_forward(&m, tokens, &truncated_steps)
                .iter()
                .map(|row| reference_softmax(row))
                .collect();
            expected += max_l2_row_change(&skipped, &clean);
        }
        expected /= batch.len() as f64;
        let got = profile.magnitudes[skip];
        assert!(
            (got - expected).abs() <= 1e-10,
            "slot {}: got {}, oracle {}",
            skip,
            got,
            expected
        );
    }
}

#[test]
fn future_effects_match_hand_recomputation() {
    let m = model(2);
    let sched = schedule_from_descriptor("2", 2).unwrap();
    let tokens = vec![2u32, 6, 1, 12, 4];
    let em = future_local_effects(&m, &sched, &[tokens.clone()]).unwrap();

    // Hand-constructed M[0,1] via the reference implementation.
    let x0 = reference_embed(&m, &tokens);
    let l0 = reference_apply_layer(&m, 0, &x0);
    let update0: Vec<Vec<f64>> = l0
        .attn_out
        .iter()
        .zip(&l0.mlp_out)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let l1 = reference_apply_layer(&m, 1, &l0.out);
    let clean_update1: Vec<Vec<f64>> = l1
        .attn_out
        .iter()
        .zip(&l1.mlp_out)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let modified: Vec<Vec<f64>> = l0
        .out
        .iter()
        .zip(&update0)
        .map(|(row, u)| row.iter().zip(u).map(|(x, y)| x - y).collect())
        .collect();
    let l1_mod = reference_apply_layer(&m, 1, &modified);
    let new_update1: Vec<Vec<f64>> = l1_mod
        .attn_out
        .iter()
        .zip(&l1_mod.mlp_out)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let mut expected = 0.0f64;
    for pos in 0..tokens.len() {
        let clean_norm: f64 = clean_update1[pos].iter().map(|v| v * v).sum::<f64>().sqrt();
        if clean_norm == 0.0 {
            continue;
        }
        let diff: f64 = new_update1[pos]
            .iter()
            .zip(&clean_update1[pos])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        expected = expected.max(diff / clean_norm);
    }
    let got = em.get(0, 1).unwrap();
    assert!((got - expected).abs() <= 1e-10, "got {}, oracle {}", got, expected);
}

#[test]
fn diagnostics_leave_parameters_untouched() {
    let m = model(2);
    let sched = schedule_from_descriptor("2x2", 2).unwrap();
    let batch = vec![vec![1u32, 2, 3, 4, 5, 6]];
    let digest = m.param_digest();

    depth_score(&m, &sched, &batch).unwrap();
    future_local_effects(&m, &sched, &batch).unwrap();
    norm_profiles(&m, &sched, &batch).unwrap();
    tuned_lens_eval(&m, &sched, &TunedLens::identity(8, 4), &batch).unwrap();

    assert_eq!(digest, m.param_digest(), "a diagnostic mutated parameters");
}
