//! AdamW with decoupled weight decay.
//!
//! Moment buffers mirror the model's parameter structure so that depth
//! growth can duplicate a layer's moments alongside its weights without
//! any name remapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelGrads};
use crate::numerics::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamwHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Moment<E: Element> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
}

impl<E: Element> Moment<E> {
    fn zeros_like(t: &Tensor<E>) -> Self {
        Self {
            m: Tensor::zeros(t.shape()),
            v: Tensor::zeros(t.shape()),
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.m.bits_eq(&other.m) && self.v.bits_eq(&other.v)
    }
}

#[derive(Clone, Debug)]
pub struct AdamwState<E: Element> {
    pub embed: Moment<E>,
    pub layers: Vec<[Moment<E>; 10]>,
    pub final_gamma: Moment<E>,
    pub final_beta: Moment<E>,
    pub lm_head: Option<Moment<E>>,
    /// Global step counter; never reset, growth included.
    pub step: u64,
}

impl<E: Element> AdamwState<E> {
    pub fn new(model: &Model<E>) -> Self {
        Self {
            embed: Moment::zeros_like(&model.embed),
            layers: model
                .layers
                .iter()
                .map(|l| l.tensors().map(Moment::zeros_like))
                .collect(),
            final_gamma: Moment::zeros_like(&model.final_gamma),
            final_beta: Moment::zeros_like(&model.final_beta),
            lm_head: model.lm_head.as_ref().map(Moment::zeros_like),
            step: 0,
        }
    }
}

/// Layer-norm gains/biases are excluded from weight decay (indices into
/// the per-layer tensor array).
const DECAYED_LAYER_SLOTS: [bool; 10] = [
    false, false, true, true, true, true, false, false, true, true,
];

/// One AdamW step over the whole model. `lr` comes from the schedule at
/// the *current* step; the state's step counter increments afterwards.
pub fn adamw_step<E: Element>(
    model: &mut Model<E>,
    grads: &ModelGrads<E>,
    state: &mut AdamwState<E>,
    hyper: &AdamwHyper,
    lr: f64,
) -> Result<()> {
    grads.check_finite().map_err(|_| {
        Error::non_finite("adamw_step gradients (step aborted, parameters unchanged)")
    })?;
    let t = state.step + 1;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);

    update_tensor(&mut model.embed, &grads.embed, &mut state.embed, hyper, lr, bc1, bc2, true)?;
    for ((lp, lg), lm) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.layers)
    {
        for (i, (p, (g, mo))) in lp
            .tensors_mut()
            .into_iter()
            .zip(lg.iter().zip(lm.iter_mut()))
            .enumerate()
        {
            update_tensor(p, g, mo, hyper, lr, bc1, bc2, DECAYED_LAYER_SLOTS[i])?;
        }
    }
    update_tensor(
        &mut model.final_gamma,
        &grads.final_gamma,
        &mut state.final_gamma,
        hyper,
        lr,
        bc1,
        bc2,
        false,
    )?;
    update_tensor(
        &mut model.final_beta,
        &grads.final_beta,
        &mut state.final_beta,
        hyper,
        lr,
        bc1,
        bc2,
        false,
    )?;
    if let (Some(h), Some(g), Some(mo)) = (
        model.lm_head.as_mut(),
        grads.lm_head.as_ref(),
        state.lm_head.as_mut(),
    ) {
        update_tensor(h, g, mo, hyper, lr, bc1, bc2, true)?;
    }
    state.step = t;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_tensor<E: Element>(
    param: &mut Tensor<E>,
    grad: &Tensor<E>,
    moment: &mut Moment<E>,
    hyper: &AdamwHyper,
    lr: f64,
    bc1: f64,
    bc2: f64,
    decay: bool,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != moment.m.shape() {
        return Err(Error::shape(format!(
            "optimizer shape mismatch: param {:?}, grad {:?}, moment {:?}",
            param.shape(),
            grad.shape(),
            moment.m.shape()
        )));
    }
    let b1 = E::from_f64(hyper.beta1);
    let b2 = E::from_f64(hyper.beta2);
    let ob1 = E::from_f64(1.0 - hyper.beta1);
    let ob2 = E::from_f64(1.0 - hyper.beta2);
    let eps = E::from_f64(hyper.eps);
    let lr_e = E::from_f64(lr);
    let rc1 = E::from_f64(1.0 / bc1);
    let rc2 = E::from_f64(1.0 / bc2);
    let wd = if decay {
        E::from_f64(hyper.weight_decay)
    } else {
        E::ZERO
    };

    let p = param.data_mut();
    let m = moment.m.data_mut();
    let v = moment.v.data_mut();
    let g = grad.data();
    for i in 0..p.len() {
        m[i] = b1 * m[i] + ob1 * g[i];
        v[i] = b2 * v[i] + ob2 * g[i] * g[i];
        let mhat = m[i] * rc1;
        let vhat = v[i] * rc2;
        p[i] -= lr_e * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
    }
    param.check_finite("adamw parameter update")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::RunRng;

    fn tiny_model() -> Model<f64> {
        let config = ModelConfig {
            vocab_size: 7,
            d_model: 4,
            n_heads: 2,
            d_ff: 8,
            n_physical_layers: 1,
            max_context: 8,
            norm_eps: 1e-5,
            tied_embedding: false,
        };
        Model::init(config, &RunRng::new(1)).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut model = tiny_model();
        let before = model.param_digest();
        let grads = ModelGrads::zeros_like(&model);
        let mut state = AdamwState::new(&model);
        let hyper = AdamwHyper {
            weight_decay: 0.0,
            ..AdamwHyper::default()
        };
        adamw_step(&mut model, &grads, &mut state, &hyper, 1e-3).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(before, model.param_digest());
    }

    #[test]
    fn decay_only_shrinks_decayed_params() {
        let mut model = tiny_model();
        let w_before = model.layers[0].w_q.data()[0];
        let g_before = model.layers[0].ln1_gamma.data()[0];
        let grads = ModelGrads::zeros_like(&model);
        let mut state = AdamwState::new(&model);
        let hyper = AdamwHyper {
            weight_decay: 0.5,
            ..AdamwHyper::default()
        };
        let lr = 0.01;
        adamw_step(&mut model, &grads, &mut state, &hyper, lr).unwrap();
        let w_after = model.layers[0].w_q.data()[0];
        // shrinks by lr * wd * param
        assert!((w_after - (w_before - lr * 0.5 * w_before)).abs() < 1e-15);
        // layer norm gain is excluded from decay
        assert_eq!(model.layers[0].ln1_gamma.data()[0], g_before);
    }

    #[test]
    fn single_scalar_step_matches_hand_formula() {
        // One step from zero moments: mhat = g, vhat = g^2, so the update
        // is lr * (g/(|g|+eps) + wd*theta).
        let theta = 2.0f64;
        let g = 0.5f64;
        let (lr, wd, eps) = (0.1f64, 0.1f64, 1e-8f64);
        let hyper = AdamwHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay: wd,
        };
        let mut param = Tensor::new(vec![1], vec![theta]).unwrap();
        let grad = Tensor::new(vec![1], vec![g]).unwrap();
        let mut moment = Moment {
            m: Tensor::zeros(&[1]),
            v: Tensor::zeros(&[1]),
        };
        update_tensor(&mut param, &grad, &mut moment, &hyper, lr, 1.0 - 0.9, 1.0 - 0.999, true)
            .unwrap();
        let expected = theta - lr * (g / (g.abs() + eps) + wd * theta);
        assert!((param.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_params() {
        let mut model = tiny_model();
        let digest = model.param_digest();
        let mut grads = ModelGrads::zeros_like(&model);
        // Force a non-finite gradient without going through Tensor::new.
        grads.embed.data_mut()[0] = f64::INFINITY;
        let mut state = AdamwState::new(&model);
        let res = adamw_step(&mut model, &grads, &mut state, &AdamwHyper::default(), 1e-3);
        assert!(res.is_err());
        assert_eq!(digest, model.param_digest());
        assert_eq!(state.step, 0);
    }
}
