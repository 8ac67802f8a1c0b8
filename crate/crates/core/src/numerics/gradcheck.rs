//! Central-finite-difference gradient verification.
//!
//! Runs in f64 only; the perturbation loop rebuilds the graph from scratch
//! for every probe so it stays independent of the backward implementation
//! it is checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max over all parameter elements of
/// `|autodiff - central_difference| / max(|autodiff|, |cd|, eps_floor)`.
///
/// `build` must construct a scalar loss from the leaves it is given.
pub fn grad_check<F>(params: &[Tensor<f64>], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::config("grad_check step h must be > 0"));
    }
    // Central differences of an O(1) loss at h=1e-5 carry ~2e-11 absolute
    // cancellation noise in f64. The floor keeps the metric meaningful for
    // near-zero gradients: below it, agreement is measured absolutely
    // (tolerance * FLOOR, i.e. 1e-10 at the standard 1e-6 tolerance).
    const FLOOR: f64 = 1e-4;

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Tape("grad_check function must produce a scalar".into()));
        }
        tape.value(loss).scalar_value()
    };

    // Autodiff gradients once.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Tape("grad_check function must produce a scalar".into()));
    }
    let mut grads = tape.backward(loss)?;
    let auto: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for j in 0..param.numel() {
            let orig = param.data()[j];
            probe[pi].data_mut()[j] = orig + h;
            let fp = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - h;
            let fm = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let cd = (fp - fm) / (2.0 * h);
            let ad = auto[pi].data()[j];
            let rel = (ad - cd).abs() / ad.abs().max(cd.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
