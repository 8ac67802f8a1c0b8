//! Decoder-only pre-LN transformer executed through a [`LayerSchedule`].
//!
//! The model owns `n_physical_layers` unique layers; a schedule decides the
//! order (and multiplicity) in which they are applied, which makes
//! standard, looped, and block-repeated execution the same forward path.
//! Rotary embeddings are applied inside attention from position tables that
//! are identical at every virtual occurrence, so schedules can be edited
//! after training. Embeddings and the LM head sit outside schedules.

mod flops;
mod schedule;

pub use flops::{count_flops, FlopPhase};
pub use schedule::{build_schedule, schedule_from_descriptor, LayerSchedule, ScheduleKind, ScheduleSpec};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Element, Grads, Tape, Tensor, Var};
use crate::rng::RunRng;

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_physical_layers: usize,
    pub max_context: usize,
    pub norm_eps: f64,
    #[serde(default)]
    pub tied_embedding: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model / self.n_heads % 2 != 0 {
            return Err(Error::config("head dim must be even for rotary pairs"));
        }
        if self.n_physical_layers == 0 {
            return Err(Error::config("n_physical_layers must be >= 1"));
        }
        if self.max_context == 0 {
            return Err(Error::config("max_context must be >= 1"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be >= 1"));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::config("norm_eps must be > 0"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One physical transformer layer (pre-LN attention + pre-LN MLP).
#[derive(Clone, Debug)]
pub struct LayerParams<E: Element> {
    pub ln1_gamma: Tensor<E>,
    pub ln1_beta: Tensor<E>,
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
    pub ln2_gamma: Tensor<E>,
    pub ln2_beta: Tensor<E>,
    pub w_up: Tensor<E>,
    pub w_down: Tensor<E>,
}

pub const LAYER_PARAM_NAMES: [&str; 10] = [
    "ln1.gamma", "ln1.beta", "w_q", "w_k", "w_v", "w_o", "ln2.gamma", "ln2.beta", "w_up", "w_down",
];

impl<E: Element> LayerParams<E> {
    fn init(config: &ModelConfig, rng: &RunRng, layer: usize) -> Self {
        let d = config.d_model;
        let ff = config.d_ff;
        let glorot = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let w = |name: &str, rows: usize, cols: usize| {
            let mut stream = rng.stream(&format!("init/layer{}/{}", layer, name));
            Tensor::randn(&[rows, cols], glorot(rows, cols), &mut stream)
        };
        Self {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: w("w_q", d, d),
            w_k: w("w_k", d, d),
            w_v: w("w_v", d, d),
            w_o: w("w_o", d, d),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w_up: w("w_up", d, ff),
            w_down: w("w_down", ff, d),
        }
    }

    pub fn tensors(&self) -> [&Tensor<E>; 10] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<E>; 10] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .all(|(a, b)| a.bits_eq(b))
    }
}

pub struct Model<E: Element> {
    config: ModelConfig,
    pub embed: Tensor<E>,
    pub layers: Vec<LayerParams<E>>,
    pub final_gamma: Tensor<E>,
    pub final_beta: Tensor<E>,
    /// `None` when the input embedding is tied as the output head.
    pub lm_head: Option<Tensor<E>>,
    rope_cos: Arc<Vec<E>>,
    rope_sin: Arc<Vec<E>>,
}

impl<E: Element> Clone for Model<E> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed: self.embed.clone(),
            layers: self.layers.clone(),
            final_gamma: self.final_gamma.clone(),
            final_beta: self.final_beta.clone(),
            lm_head: self.lm_head.clone(),
            rope_cos: Arc::clone(&self.rope_cos),
            rope_sin: Arc::clone(&self.rope_sin),
        }
    }
}

/// Captured per-virtual-layer residual stream snapshots.
#[derive(Clone, Debug)]
pub struct TraceLayer<E: Element> {
    pub residual_in: Tensor<E>,
    pub attn_out: Tensor<E>,
    pub mlp_out: Tensor<E>,
    pub residual_out: Tensor<E>,
}

#[derive(Clone, Debug, Default)]
pub struct ResidualTrace<E: Element> {
    pub layers: Vec<TraceLayer<E>>,
}

/// Leaf vars for every parameter, bound to one tape.
pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<[Var; 10]>,
    pub final_gamma: Var,
    pub final_beta: Var,
    pub lm_head: Option<Var>,
}

/// Trace capture on the tape side (vars instead of tensors).
pub struct TraceVars {
    pub residual_in: Var,
    pub attn_out: Var,
    pub mlp_out: Var,
    pub residual_out: Var,
}

/// Structured gradients mirroring the parameter layout.
#[derive(Clone, Debug)]
pub struct ModelGrads<E: Element> {
    pub embed: Tensor<E>,
    pub layers: Vec<[Tensor<E>; 10]>,
    pub final_gamma: Tensor<E>,
    pub final_beta: Tensor<E>,
    pub lm_head: Option<Tensor<E>>,
}

impl<E: Element> ModelGrads<E> {
    pub fn zeros_like(model: &Model<E>) -> Self {
        Self {
            embed: Tensor::zeros(model.embed.shape()),
            layers: model
                .layers
                .iter()
                .map(|l| l.tensors().map(|t| Tensor::zeros(t.shape())))
                .collect(),
            final_gamma: Tensor::zeros(model.final_gamma.shape()),
            final_beta: Tensor::zeros(model.final_beta.shape()),
            lm_head: model.lm_head.as_ref().map(|t| Tensor::zeros(t.shape())),
        }
    }

    /// `self += scale * other`, in a fixed traversal order.
    pub fn add_scaled(&mut self, other: &Self, scale: E) {
        fn axpy<E: Element>(dst: &mut Tensor<E>, src: &Tensor<E>, scale: E) {
            let d = dst.data_mut();
            for (o, &v) in d.iter_mut().zip(src.data()) {
                *o += v * scale;
            }
        }
        axpy(&mut self.embed, &other.embed, scale);
        for (dl, sl) in self.layers.iter_mut().zip(&other.layers) {
            for (dt, st) in dl.iter_mut().zip(sl.iter()) {
                axpy(dt, st, scale);
            }
        }
        axpy(&mut self.final_gamma, &other.final_gamma, scale);
        axpy(&mut self.final_beta, &other.final_beta, scale);
        if let (Some(dh), Some(sh)) = (self.lm_head.as_mut(), other.lm_head.as_ref()) {
            axpy(dh, sh, scale);
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        self.embed.check_finite("grad embed")?;
        for l in &self.layers {
            for t in l {
                t.check_finite("grad layer")?;
            }
        }
        self.final_gamma.check_finite("grad final_gamma")?;
        self.final_beta.check_finite("grad final_beta")?;
        if let Some(h) = &self.lm_head {
            h.check_finite("grad lm_head")?;
        }
        Ok(())
    }
}

impl<E: Element> Model<E> {
    /// Fresh model with Glorot-normal projections, standard-normal(0.02)
    /// embeddings, unit layer norms.
    pub fn init(config: ModelConfig, rng: &RunRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let embed = Tensor::randn(&[v, d], 0.02, &mut rng.stream("init/embed"));
        let layers = (0..config.n_physical_layers)
            .map(|i| LayerParams::init(&config, rng, i))
            .collect();
        let lm_head = if config.tied_embedding {
            None
        } else {
            Some(Tensor::randn(
                &[d, v],
                (2.0 / (d + v) as f64).sqrt(),
                &mut rng.stream("init/lm_head"),
            ))
        };
        let (cos, sin) = kernels::rope_tables(config.max_context, config.head_dim(), ROPE_BASE);
        Ok(Self {
            config,
            embed,
            layers,
            final_gamma: Tensor::ones(&[d]),
            final_beta: Tensor::zeros(&[d]),
            lm_head,
            rope_cos: Arc::new(cos),
            rope_sin: Arc::new(sin),
        })
    }

    /// Rebuild a model from loaded parameters (checkpoint path).
    pub fn from_parts(
        config: ModelConfig,
        embed: Tensor<E>,
        layers: Vec<LayerParams<E>>,
        final_gamma: Tensor<E>,
        final_beta: Tensor<E>,
        lm_head: Option<Tensor<E>>,
    ) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.n_physical_layers {
            return Err(Error::config(format!(
                "{} layers loaded for n_physical_layers={}",
                layers.len(),
                config.n_physical_layers
            )));
        }
        let (cos, sin) = kernels::rope_tables(config.max_context, config.head_dim(), ROPE_BASE);
        Ok(Self {
            config,
            embed,
            layers,
            final_gamma,
            final_beta,
            lm_head,
            rope_cos: Arc::new(cos),
            rope_sin: Arc::new(sin),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn standard_schedule(&self) -> LayerSchedule {
        schedule_from_descriptor(&self.config.n_physical_layers.to_string(), self.config.n_physical_layers)
            .expect("standard schedule always valid")
    }

    pub fn validate_schedule(&self, schedule: &LayerSchedule) -> Result<()> {
        for &s in schedule.steps() {
            if s >= self.layers.len() {
                return Err(Error::Schedule(format!(
                    "schedule references layer {} of a {}-layer model",
                    s,
                    self.layers.len()
                )));
            }
        }
        Ok(())
    }

    fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::shape("empty token sequence"));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::Eval(format!(
                "sequence of {} tokens exceeds max_context {}",
                tokens.len(),
                self.config.max_context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::shape(format!(
                "token id {} >= vocab_size {}",
                bad, self.config.vocab_size
            )));
        }
        Ok(())
    }

    // ── Tape-free forward (evaluation, diagnostics) ─────────────────

    /// Apply one physical layer to residual input `[s, d]`.
    pub fn apply_layer(&self, phys: usize, x: &Tensor<E>) -> Result<LayerApply<E>> {
        let p = &self.layers[phys];
        let (s, d) = (x.shape()[0], x.shape()[1]);
        let h = self.config.n_heads;
        let dh = self.config.head_dim();
        let eps = E::from_f64(self.config.norm_eps);

        let (h1, _) = kernels::layer_norm(x.data(), p.ln1_gamma.data(), p.ln1_beta.data(), eps, s, d);
        let q = kernels::matmul(&h1, p.w_q.data(), s, d, d, false, false);
        let k = kernels::matmul(&h1, p.w_k.data(), s, d, d, false, false);
        let v = kernels::matmul(&h1, p.w_v.data(), s, d, d, false, false);
        let qh = split_heads(&q, s, h, dh);
        let kh = split_heads(&k, s, h, dh);
        let vh = split_heads(&v, s, h, dh);
        let qh = kernels::rope_apply(&qh, h, s, dh, &self.rope_cos, &self.rope_sin, false);
        let kh = kernels::rope_apply(&kh, h, s, dh, &self.rope_cos, &self.rope_sin, false);
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let scores = kernels::bmm(&qh, &kh, h, s, dh, s, true, scale);
        let probs = kernels::causal_softmax(&scores, h, s);
        let ctx = kernels::bmm(&probs, &vh, h, s, s, dh, false, E::ONE);
        let merged = merge_heads(&ctx, s, h, dh);
        let attn = kernels::matmul(&merged, p.w_o.data(), s, d, d, false, false);

        let x1: Vec<E> = x.data().iter().zip(&attn).map(|(&a, &b)| a + b).collect();
        let (h2, _) = kernels::layer_norm(&x1, p.ln2_gamma.data(), p.ln2_beta.data(), eps, s, d);
        let up = kernels::matmul(&h2, p.w_up.data(), s, d, self.config.d_ff, false, false);
        let act = kernels::gelu(&up);
        let mlp = kernels::matmul(&act, p.w_down.data(), s, self.config.d_ff, d, false, false);
        let out: Vec<E> = x1.iter().zip(&mlp).map(|(&a, &b)| a + b).collect();

        let apply = LayerApply {
            attn_out: Tensor::from_parts(vec![s, d], attn),
            mlp_out: Tensor::from_parts(vec![s, d], mlp),
            out: Tensor::from_parts(vec![s, d], out),
        };
        apply.out.check_finite(&format!("layer {} output", phys))?;
        Ok(apply)
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor<E>> {
        self.validate_tokens(tokens)?;
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            data.extend_from_slice(&self.embed.data()[t as usize * d..(t as usize + 1) * d]);
        }
        Ok(Tensor::from_parts(vec![tokens.len(), d], data))
    }

    /// Final norm + LM head over residual state `[s, d]`.
    pub fn logits_from_residual(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (s, d) = (x.shape()[0], x.shape()[1]);
        let eps = E::from_f64(self.config.norm_eps);
        let (xf, _) = kernels::layer_norm(x.data(), self.final_gamma.data(), self.final_beta.data(), eps, s, d);
        let logits = match &self.lm_head {
            Some(head) => kernels::matmul(&xf, head.data(), s, d, self.config.vocab_size, false, false),
            None => kernels::matmul(&xf, self.embed.data(), s, d, self.config.vocab_size, false, true),
        };
        let t = Tensor::from_parts(vec![s, self.config.vocab_size], logits);
        t.check_finite("logits")?;
        Ok(t)
    }

    /// Full forward pass; optionally captures the residual trace.
    pub fn forward(
        &self,
        tokens: &[u32],
        schedule: &LayerSchedule,
        capture: bool,
    ) -> Result<(Tensor<E>, Option<ResidualTrace<E>>)> {
        self.validate_schedule(schedule)?;
        let mut x = self.embed_tokens(tokens)?;
        let mut trace = capture.then(ResidualTrace::default);
        for &phys in schedule.steps() {
            let applied = self.apply_layer(phys, &x)?;
            if let Some(tr) = trace.as_mut() {
                tr.layers.push(TraceLayer {
                    residual_in: x.clone(),
                    attn_out: applied.attn_out.clone(),
                    mlp_out: applied.mlp_out.clone(),
                    residual_out: applied.out.clone(),
                });
            }
            x = applied.out;
        }
        let logits = self.logits_from_residual(&x)?;
        Ok((logits, trace))
    }

    // ── Tape forward (training) ─────────────────────────────────────

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<E>) -> ModelVars {
        ModelVars {
            embed: tape.leaf(self.embed.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| l.tensors().map(|t| tape.leaf(t.clone())))
                .collect(),
            final_gamma: tape.leaf(self.final_gamma.clone()),
            final_beta: tape.leaf(self.final_beta.clone()),
            lm_head: self.lm_head.as_ref().map(|t| tape.leaf(t.clone())),
        }
    }

    /// Forward pass on a tape. Gradient flows through every repetition of
    /// a physical layer, accumulating into its shared leaves.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<E>,
        vars: &ModelVars,
        tokens: &[u32],
        schedule: &LayerSchedule,
        capture: bool,
    ) -> Result<(Var, Option<Vec<TraceVars>>)> {
        self.validate_schedule(schedule)?;
        self.validate_tokens(tokens)?;
        let eps = E::from_f64(self.config.norm_eps);
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());

        let mut x = tape.embed(vars.embed, tokens)?;
        let mut trace = capture.then(Vec::new);
        for &phys in schedule.steps() {
            let [ln1_g, ln1_b, w_q, w_k, w_v, w_o, ln2_g, ln2_b, w_up, w_down] = vars.layers[phys];
            let h1 = tape.layer_norm(x, ln1_g, ln1_b, eps)?;
            let q = tape.matmul(h1, w_q)?;
            let k = tape.matmul(h1, w_k)?;
            let v = tape.matmul(h1, w_v)?;
            let qh = tape.split_heads(q, heads)?;
            let kh = tape.split_heads(k, heads)?;
            let vh = tape.split_heads(v, heads)?;
            let qh = tape.rope(qh, &self.rope_cos, &self.rope_sin)?;
            let kh = tape.rope(kh, &self.rope_cos, &self.rope_sin)?;
            let scores = tape.bmm(qh, kh, true, scale)?;
            let probs = tape.causal_softmax(scores)?;
            let ctx = tape.bmm(probs, vh, false, E::ONE)?;
            let merged = tape.merge_heads(ctx)?;
            let attn = tape.matmul(merged, w_o)?;
            let x1 = tape.add(x, attn)?;
            let h2 = tape.layer_norm(x1, ln2_g, ln2_b, eps)?;
            let up = tape.matmul(h2, w_up)?;
            let act = tape.gelu(up)?;
            let mlp = tape.matmul(act, w_down)?;
            let out = tape.add(x1, mlp)?;
            if let Some(tr) = trace.as_mut() {
                tr.push(TraceVars {
                    residual_in: x,
                    attn_out: attn,
                    mlp_out: mlp,
                    residual_out: out,
                });
            }
            x = out;
        }
        let xf = tape.layer_norm(x, vars.final_gamma, vars.final_beta, eps)?;
        let logits = match vars.lm_head {
            Some(head) => tape.matmul(xf, head)?,
            None => tape.matmul_t(xf, vars.embed, false, true)?,
        };
        Ok((logits, trace))
    }

    /// Collect structured gradients after `tape.backward`.
    pub fn extract_grads(&self, grads: &mut Grads<E>, vars: &ModelVars) -> ModelGrads<E> {
        let take = |grads: &mut Grads<E>, var: Var, shape: &[usize]| {
            grads.take(var).unwrap_or_else(|| Tensor::zeros(shape))
        };
        ModelGrads {
            embed: take(grads, vars.embed, self.embed.shape()),
            layers: self
                .layers
                .iter()
                .zip(&vars.layers)
                .map(|(l, lv)| {
                    let ts = l.tensors();
                    let mut i = 0;
                    lv.map(|v| {
                        let g = take(grads, v, ts[i].shape());
                        i += 1;
                        g
                    })
                })
                .collect(),
            final_gamma: take(grads, vars.final_gamma, self.final_gamma.shape()),
            final_beta: take(grads, vars.final_beta, self.final_beta.shape()),
            lm_head: vars
                .lm_head
                .map(|v| take(grads, v, self.lm_head.as_ref().unwrap().shape())),
        }
    }

    // ── Structure utilities ─────────────────────────────────────────

    /// Clone into an untied model whose physical layers are the schedule's
    /// virtual slots (used by the tying oracle and hybrid fine-tuning).
    pub fn untie(&self, schedule: &LayerSchedule) -> Result<(Model<E>, LayerSchedule)> {
        self.validate_schedule(schedule)?;
        let layers: Vec<LayerParams<E>> = schedule
            .steps()
            .iter()
            .map(|&s| self.layers[s].clone())
            .collect();
        let mut config = self.config.clone();
        config.n_physical_layers = layers.len();
        let model = Model::from_parts(
            config,
            self.embed.clone(),
            layers,
            self.final_gamma.clone(),
            self.final_beta.clone(),
            self.lm_head.clone(),
        )?;
        let std = model.standard_schedule();
        Ok((model, std))
    }

    pub fn cast<F: Element>(&self) -> Model<F> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                ln1_gamma: l.ln1_gamma.cast(),
                ln1_beta: l.ln1_beta.cast(),
                w_q: l.w_q.cast(),
                w_k: l.w_k.cast(),
                w_v: l.w_v.cast(),
                w_o: l.w_o.cast(),
                ln2_gamma: l.ln2_gamma.cast(),
                ln2_beta: l.ln2_beta.cast(),
                w_up: l.w_up.cast(),
                w_down: l.w_down.cast(),
            })
            .collect();
        Model::from_parts(
            self.config.clone(),
            self.embed.cast(),
            layers,
            self.final_gamma.cast(),
            self.final_beta.cast(),
            self.lm_head.as_ref().map(|t| t.cast()),
        )
        .expect("cast preserves validity")
    }

    /// Stable `(name, tensor)` listing: embed, layers in order, final
    /// norm, head. Checkpoints and optimizers share this order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_PARAM_NAMES.iter().zip(l.tensors()) {
                out.push((format!("layers.{}.{}", i, name), t));
            }
        }
        out.push(("final_norm.gamma".to_string(), &self.final_gamma));
        out.push(("final_norm.beta".to_string(), &self.final_beta));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    /// SHA-256 over all parameter bytes; diagnostics assert read-only
    /// behavior by comparing digests.
    pub fn param_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_params() {
            hasher.update(name.as_bytes());
            for &dim in t.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            hasher.update(&t.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Unique (physical) parameter count; schedules never change this.
    pub fn unique_param_count(&self) -> u64 {
        self.named_params()
            .iter()
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }
}

pub struct LayerApply<E: Element> {
    pub attn_out: Tensor<E>,
    pub mlp_out: Tensor<E>,
    pub out: Tensor<E>,
}

fn split_heads<E: Element>(x: &[E], s: usize, h: usize, dh: usize) -> Vec<E> {
    let d = h * dh;
    let mut out = vec![E::ZERO; s * d];
    for head in 0..h {
        for i in 0..s {
            out[(head * s + i) * dh..(head * s + i + 1) * dh]
                .copy_from_slice(&x[i * d + head * dh..i * d + (head + 1) * dh]);
        }
    }
    out
}

fn merge_heads<E: Element>(x: &[E], s: usize, h: usize, dh: usize) -> Vec<E> {
    let d = h * dh;
    let mut out = vec![E::ZERO; s * d];
    for head in 0..h {
        for i in 0..s {
            out[i * d + head * dh..i * d + (head + 1) * dh]
                .copy_from_slice(&x[(head * s + i) * dh..(head * s + i + 1) * dh]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_physical_layers: layers,
            max_context: 32,
            norm_eps: 1e-5,
            tied_embedding: false,
        }
    }

    #[test]
    fn schedule_0_0_applies_layer_twice() {
        let model = Model::<f64>::init(tiny_config(1), &RunRng::new(5)).unwrap();
        let tokens = [1u32, 4, 2, 9];
        let sched = schedule_from_descriptor("custom:[0,0]", 1).unwrap();
        let (logits, _) = model.forward(&tokens, &sched, false).unwrap();

        let x0 = model.embed_tokens(&tokens).unwrap();
        let a1 = model.apply_layer(0, &x0).unwrap();
        let a2 = model.apply_layer(0, &a1.out).unwrap();
        let manual = model.logits_from_residual(&a2.out).unwrap();
        assert!(logits.bits_eq(&manual));
    }

    #[test]
    fn standard_equals_loop_times_one() {
        let model = Model::<f32>::init(tiny_config(3), &RunRng::new(6)).unwrap();
        let tokens = [0u32, 3, 7, 1, 2];
        let std = schedule_from_descriptor("3", 3).unwrap();
        let loop1 = schedule_from_descriptor("3x1", 3).unwrap();
        let (a, _) = model.forward(&tokens, &std, false).unwrap();
        let (b, _) = model.forward(&tokens, &loop1, false).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn forward_rejects_bad_tokens_and_length() {
        let model = Model::<f32>::init(tiny_config(1), &RunRng::new(7)).unwrap();
        let sched = model.standard_schedule();
        assert!(model.forward(&[10, 11], &sched, false).is_err()); // 11 >= vocab
        let long = vec![0u32; 33];
        assert!(model.forward(&long, &sched, false).is_err());
    }

    #[test]
    fn trace_additivity_holds() {
        let model = Model::<f64>::init(tiny_config(2), &RunRng::new(8)).unwrap();
        let sched = model.standard_schedule();
        let (_, trace) = model.forward(&[1, 2, 3, 4, 5], &sched, true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.layers.len(), 2);
        for tl in &trace.layers {
            let mut recon = tl.residual_in.clone();
            let d = recon.data_mut();
            for (i, v) in d.iter_mut().enumerate() {
                *v += tl.attn_out.data()[i] + tl.mlp_out.data()[i];
            }
            assert!(recon.max_abs_diff(&tl.residual_out) <= 1e-10);
        }
    }

    #[test]
    fn causality_is_bitwise() {
        let model = Model::<f32>::init(tiny_config(2), &RunRng::new(9)).unwrap();
        let sched = schedule_from_descriptor("2x2", 2).unwrap();
        let a_tokens = [5u32, 1, 8, 2, 7, 3];
        let mut b_tokens = a_tokens;
        b_tokens[4] = 9;
        b_tokens[5] = 0;
        let (la, _) = model.forward(&a_tokens, &sched, false).unwrap();
        let (lb, _) = model.forward(&b_tokens, &sched, false).unwrap();
        let v = model.config().vocab_size;
        // Positions 0..=3 must be unchanged bit for bit.
        for pos in 0..4 {
            for j in 0..v {
                assert_eq!(
                    la.data()[pos * v + j].to_bits(),
                    lb.data()[pos * v + j].to_bits(),
                    "position {} leaked future info",
                    pos
                );
            }
        }
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let model = Model::<f64>::init(tiny_config(2), &RunRng::new(10)).unwrap();
        let sched = schedule_from_descriptor("custom:[0,1,0]", 2).unwrap();
        let tokens = [1u32, 2, 3];
        let (plain, _) = model.forward(&tokens, &sched, false).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let (lv, _) = model
            .forward_tape(&mut tape, &vars, &tokens, &sched, false)
            .unwrap();
        assert!(tape.value(lv).bits_eq(&plain));
    }

    #[test]
    fn untie_preserves_function() {
        let model = Model::<f64>::init(tiny_config(2), &RunRng::new(11)).unwrap();
        let sched = schedule_from_descriptor("2x3", 2).unwrap();
        let tokens = [4u32, 2, 0, 6];
        let (tied_logits, _) = model.forward(&tokens, &sched, false).unwrap();
        let (untied, std) = model.untie(&sched).unwrap();
        assert_eq!(untied.config().n_physical_layers, 6);
        let (untied_logits, _) = untied.forward(&tokens, &std, false).unwrap();
        assert!(tied_logits.bits_eq(&untied_logits));
    }

    #[test]
    fn unique_params_ignore_schedule() {
        let model = Model::<f32>::init(tiny_config(4), &RunRng::new(12)).unwrap();
        let n = model.unique_param_count();
        // The same-count claim of looped models: schedule never changes it.
        assert_eq!(n, model.unique_param_count());
        let per_layer = (4 * 8 * 8 + 2 * 8 * 16 + 4 * 8) as u64;
        let expected = (11 * 8) as u64 + 4 * per_layer + 2 * 8 + (8 * 11) as u64;
        assert_eq!(n, expected);
    }

    #[test]
    fn tied_embedding_flag_removes_head() {
        let mut cfg = tiny_config(1);
        cfg.tied_embedding = true;
        let model = Model::<f32>::init(cfg, &RunRng::new(13)).unwrap();
        assert!(model.lm_head.is_none());
        let sched = model.standard_schedule();
        let (logits, _) = model.forward(&[1, 2], &sched, false).unwrap();
        assert_eq!(logits.shape(), &[2, 11]);
    }
}
