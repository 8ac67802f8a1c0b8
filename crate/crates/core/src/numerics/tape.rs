//! Reverse-mode autodiff over tensor ops.
//!
//! A `Tape` records every primitive in execution order; `backward` walks the
//! record once in reverse, accumulating gradients into per-node buffers in a
//! fixed order, so a fixed-seed run is bitwise reproducible. Using one leaf
//! at several points in the graph sums the gradients of all its uses, which
//! is exactly the weight-tying contract for looped schedules.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::element::Element;
use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<E: Element> {
    Leaf,
    Embed {
        table: usize,
        tokens: Arc<Vec<u32>>,
    },
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        dims: (usize, usize, usize),
    },
    Bmm {
        a: usize,
        b: usize,
        tb: bool,
        alpha: E,
        dims: (usize, usize, usize, usize), // h, m, k, n
    },
    SplitHeads {
        x: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        heads: usize,
    },
    Rope {
        x: usize,
        cos: Arc<Vec<E>>,
        sin: Arc<Vec<E>>,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: E,
    },
    Gelu {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: Vec<(E, E)>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    CausalSoftmax {
        x: usize,
        heads: usize,
    },
    /// Mean next-token cross entropy over selected rows; caches the row
    /// softmax for backward.
    CrossEntropy {
        logits: usize,
        targets: Arc<Vec<u32>>,
        mask: Option<Arc<Vec<bool>>>,
        probs: Vec<E>,
        n_selected: usize,
    },
    /// Mean soft-target cross entropy (targets are constant probabilities).
    SoftCrossEntropy {
        logits: usize,
        targets: Tensor<E>,
        probs: Vec<E>,
    },
    Sum {
        x: usize,
    },
}

struct Node<E: Element> {
    op: Op<E>,
    value: Tensor<E>,
    needs_grad: bool,
}

pub struct Tape<E: Element> {
    id: u64,
    nodes: Vec<Node<E>>,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Grads<E: Element> {
    tape: u64,
    by_node: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, var: Var) -> Option<&Tensor<E>> {
        assert_eq!(var.tape, self.tape, "grad lookup from another tape");
        self.by_node.get(var.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<E>> {
        assert_eq!(var.tape, self.tape, "grad lookup from another tape");
        self.by_node.get_mut(var.idx).and_then(|g| g.take())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input (data, frozen activations).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        assert_eq!(var.tape, self.id, "var from another tape");
        &self.nodes[var.idx].value
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id {
            return Err(Error::Tape("var does not belong to this tape".into()));
        }
        Ok(var.idx)
    }

    fn emit(&mut self, op: Op<E>, shape: Vec<usize>, data: Vec<E>, needs: bool, name: &str) -> Result<Var> {
        let value = Tensor::from_parts(shape, data);
        value.check_finite(name)?;
        Ok(self.push(op, value, needs))
    }

    // ── Ops ─────────────────────────────────────────────────────────

    /// Row gather: `out[i, :] = table[tokens[i], :]`.
    pub fn embed(&mut self, table: Var, tokens: &[u32]) -> Result<Var> {
        let ti = self.check(table)?;
        let t = &self.nodes[ti].value;
        let (rows, d) = as_2d(t.shape())?;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            if tok as usize >= rows {
                return Err(Error::shape(format!(
                    "token id {} out of vocab range {}",
                    tok, rows
                )));
            }
            data.extend_from_slice(&t.data()[tok as usize * d..(tok as usize + 1) * d]);
        }
        let needs = self.nodes[ti].needs_grad;
        self.emit(
            Op::Embed {
                table: ti,
                tokens: Arc::new(tokens.to_vec()),
            },
            vec![tokens.len(), d],
            data,
            needs,
            "embed",
        )
    }

    /// 2-D matmul with logical transpose flags.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (asp, bsp) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        let (ar, ac) = as_2d(asp)?;
        let (br, bc) = as_2d(bsp)?;
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?} (ta={}) x {:?} (tb={})",
                asp, ta, bsp, tb
            )));
        }
        let out = kernels::matmul(
            self.nodes[ai].value.data(),
            self.nodes[bi].value.data(),
            m,
            k1,
            n,
            ta,
            tb,
        );
        let needs = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        self.emit(
            Op::MatMul {
                a: ai,
                b: bi,
                ta,
                tb,
                dims: (m, k1, n),
            },
            vec![m, n],
            out,
            needs,
            "matmul",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched matmul over the leading dim: `alpha * [h,m,k] @ [h,k,n]`,
    /// or `alpha * [h,m,k] @ [h,n,k]^T` when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool, alpha: E) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let asp = self.nodes[ai].value.shape().to_vec();
        let bsp = self.nodes[bi].value.shape().to_vec();
        if asp.len() != 3 || bsp.len() != 3 || asp[0] != bsp[0] {
            return Err(Error::shape(format!("bmm expects [h,m,k]/[h,*,*]: {:?} x {:?}", asp, bsp)));
        }
        let (h, m, k) = (asp[0], asp[1], asp[2]);
        let n = if tb { bsp[1] } else { bsp[2] };
        let kb = if tb { bsp[2] } else { bsp[1] };
        if kb != k {
            return Err(Error::shape(format!("bmm inner dims differ: {:?} x {:?}", asp, bsp)));
        }
        let out = kernels::bmm(
            self.nodes[ai].value.data(),
            self.nodes[bi].value.data(),
            h,
            m,
            k,
            n,
            tb,
            alpha,
        );
        let needs = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        self.emit(
            Op::Bmm {
                a: ai,
                b: bi,
                tb,
                alpha,
                dims: (h, m, k, n),
            },
            vec![h, m, n],
            out,
            needs,
            "bmm",
        )
    }

    /// `[s, h*dh] -> [h, s, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let (s, d) = as_2d(self.nodes[xi].value.shape())?;
        if d % heads != 0 {
            return Err(Error::shape(format!("width {} not divisible by {} heads", d, heads)));
        }
        let dh = d / heads;
        let xd = self.nodes[xi].value.data();
        let mut out = vec![E::ZERO; s * d];
        for h in 0..heads {
            for i in 0..s {
                let src = &xd[i * d + h * dh..i * d + (h + 1) * dh];
                out[(h * s + i) * dh..(h * s + i + 1) * dh].copy_from_slice(src);
            }
        }
        let needs = self.nodes[xi].needs_grad;
        self.emit(Op::SplitHeads { x: xi, heads }, vec![heads, s, dh], out, needs, "split_heads")
    }

    /// `[h, s, dh] -> [s, h*dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let sp = self.nodes[xi].value.shape().to_vec();
        if sp.len() != 3 {
            return Err(Error::shape(format!("merge_heads expects [h,s,dh], got {:?}", sp)));
        }
        let (heads, s, dh) = (sp[0], sp[1], sp[2]);
        let xd = self.nodes[xi].value.data();
        let mut out = vec![E::ZERO; heads * s * dh];
        for h in 0..heads {
            for i in 0..s {
                let src = &xd[(h * s + i) * dh..(h * s + i + 1) * dh];
                out[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh].copy_from_slice(src);
            }
        }
        let needs = self.nodes[xi].needs_grad;
        self.emit(Op::MergeHeads { x: xi, heads }, vec![s, heads * dh], out, needs, "merge_heads")
    }

    /// Rotary position embedding on `[h, s, dh]`.
    pub fn rope(&mut self, x: Var, cos: &Arc<Vec<E>>, sin: &Arc<Vec<E>>) -> Result<Var> {
        let xi = self.check(x)?;
        let sp = self.nodes[xi].value.shape().to_vec();
        if sp.len() != 3 || sp[2] % 2 != 0 {
            return Err(Error::shape(format!("rope expects [h,s,even dh], got {:?}", sp)));
        }
        let (h, s, dh) = (sp[0], sp[1], sp[2]);
        if cos.len() < s * dh / 2 {
            return Err(Error::shape(format!(
                "rope table covers {} positions, need {}",
                cos.len() / (dh / 2),
                s
            )));
        }
        let out = kernels::rope_apply(self.nodes[xi].value.data(), h, s, dh, cos, sin, false);
        let needs = self.nodes[xi].needs_grad;
        self.emit(
            Op::Rope {
                x: xi,
                cos: Arc::clone(cos),
                sin: Arc::clone(sin),
            },
            sp,
            out,
            needs,
            "rope",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(Error::shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.nodes[ai].value.shape(),
                self.nodes[bi].value.shape()
            )));
        }
        let out: Vec<E> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        let needs = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        self.emit(Op::Add { a: ai, b: bi }, shape, out, needs, "add")
    }

    /// Broadcast-add a `[d]` bias to each row of `[rows, d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(bias)?);
        let (rows, d) = as_2d(self.nodes[xi].value.shape())?;
        if self.nodes[bi].value.shape() != [d] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match row width {}",
                self.nodes[bi].value.shape(),
                d
            )));
        }
        let bd = self.nodes[bi].value.data();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let xr = &self.nodes[xi].value.data()[r * d..(r + 1) * d];
            out.extend(xr.iter().zip(bd).map(|(&x, &b)| x + b));
        }
        let needs = self.nodes[xi].needs_grad || self.nodes[bi].needs_grad;
        self.emit(Op::AddBias { x: xi, bias: bi }, vec![rows, d], out, needs, "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(Error::shape("mul shapes differ"));
        }
        let out: Vec<E> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        let needs = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        self.emit(Op::Mul { a: ai, b: bi }, shape, out, needs, "mul")
    }

    pub fn scale(&mut self, x: Var, c: E) -> Result<Var> {
        let xi = self.check(x)?;
        let out: Vec<E> = self.nodes[xi].value.data().iter().map(|&v| v * c).collect();
        let shape = self.nodes[xi].value.shape().to_vec();
        let needs = self.nodes[xi].needs_grad;
        self.emit(Op::Scale { x: xi, c }, shape, out, needs, "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::gelu(self.nodes[xi].value.data());
        let shape = self.nodes[xi].value.shape().to_vec();
        let needs = self.nodes[xi].needs_grad;
        self.emit(Op::Gelu { x: xi }, shape, out, needs, "gelu")
    }

    /// Pre-sublayer normalization over the last dim of `[rows, d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: E) -> Result<Var> {
        if eps.to_f64() <= 0.0 {
            return Err(Error::config("layer_norm eps must be > 0"));
        }
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (rows, d) = as_2d(self.nodes[xi].value.shape())?;
        if d == 0 {
            return Err(Error::shape("layer_norm over empty feature dim"));
        }
        if self.nodes[gi].value.shape() != [d] || self.nodes[bi].value.shape() != [d] {
            return Err(Error::shape("layer_norm gamma/beta must be [d]"));
        }
        let (out, cache) = kernels::layer_norm(
            self.nodes[xi].value.data(),
            self.nodes[gi].value.data(),
            self.nodes[bi].value.data(),
            eps,
            rows,
            d,
        );
        let needs =
            self.nodes[xi].needs_grad || self.nodes[gi].needs_grad || self.nodes[bi].needs_grad;
        self.emit(
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                cache,
            },
            vec![rows, d],
            out,
            needs,
            "layer_norm",
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(format!(
                "softmax axis {} invalid for shape {:?}",
                axis, shape
            )));
        }
        let out = kernels::softmax_axis(self.nodes[xi].value.data(), &shape, axis);
        let needs = self.nodes[xi].needs_grad;
        self.emit(Op::Softmax { x: xi, axis }, shape, out, needs, "softmax")
    }

    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let sp = self.nodes[xi].value.shape().to_vec();
        if sp.len() != 3 || sp[1] != sp[2] {
            return Err(Error::shape(format!("causal_softmax expects [h,s,s], got {:?}", sp)));
        }
        let (h, s) = (sp[0], sp[1]);
        let out = kernels::causal_softmax(self.nodes[xi].value.data(), h, s);
        let needs = self.nodes[xi].needs_grad;
        self.emit(Op::CausalSoftmax { x: xi, heads: h }, sp, out, needs, "causal_softmax")
    }

    /// Mean cross entropy of `[rows, vocab]` logits against integer
    /// targets, optionally restricted to masked rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let li = self.check(logits)?;
        let (rows, vocab) = as_2d(self.nodes[li].value.shape())?;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "targets len {} != rows {}",
                targets.len(),
                rows
            )));
        }
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(Error::shape("mask length mismatch"));
            }
        }
        let selected: Vec<usize> = (0..rows)
            .filter(|&r| mask.map_or(true, |m| m[r]))
            .collect();
        if selected.is_empty() {
            return Err(Error::shape("cross_entropy with no selected rows"));
        }
        let probs = kernels::softmax_axis(self.nodes[li].value.data(), &[rows, vocab], 1);
        let mut loss = E::ZERO;
        for &r in &selected {
            let t = targets[r] as usize;
            if t >= vocab {
                return Err(Error::shape(format!("target {} out of vocab {}", t, vocab)));
            }
            loss += -probs[r * vocab + t].ln();
        }
        loss /= E::from_f64(selected.len() as f64);
        let needs = self.nodes[li].needs_grad;
        self.emit(
            Op::CrossEntropy {
                logits: li,
                targets: Arc::new(targets.to_vec()),
                mask: mask.map(|m| Arc::new(m.to_vec())),
                probs,
                n_selected: selected.len(),
            },
            vec![],
            vec![loss],
            needs,
            "cross_entropy",
        )
    }

    /// Mean cross entropy against constant soft targets (per-row
    /// probability vectors). Minimizing this minimizes
    /// `KL(targets || softmax(logits))` up to the constant target entropy.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<E>) -> Result<Var> {
        let li = self.check(logits)?;
        let (rows, vocab) = as_2d(self.nodes[li].value.shape())?;
        if targets.shape() != [rows, vocab] {
            return Err(Error::shape(format!(
                "soft targets shape {:?} != logits {:?}",
                targets.shape(),
                self.nodes[li].value.shape()
            )));
        }
        let probs = kernels::softmax_axis(self.nodes[li].value.data(), &[rows, vocab], 1);
        let logits_data = self.nodes[li].value.data();
        let mut loss = E::ZERO;
        for r in 0..rows {
            let lsm = kernels::log_softmax_row(&logits_data[r * vocab..(r + 1) * vocab]);
            for (j, l) in lsm.iter().enumerate() {
                loss += -targets.data()[r * vocab + j] * *l;
            }
        }
        loss /= E::from_f64(rows as f64);
        let needs = self.nodes[li].needs_grad;
        self.emit(
            Op::SoftCrossEntropy {
                logits: li,
                targets: targets.clone(),
                probs,
            },
            vec![],
            vec![loss],
            needs,
            "soft_cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s: E = self.nodes[xi].value.data().iter().copied().sum();
        let needs = self.nodes[xi].needs_grad;
        self.emit(Op::Sum { x: xi }, vec![], vec![s], needs, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, E::ONE / E::from_f64(n as f64))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; returns gradients for every node
    /// that needed them (leaves included).
    pub fn backward(&self, loss: Var) -> Result<Grads<E>> {
        let li = self.check(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![E::ONE]);

        for idx in (0..=li).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads)?;
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let by_node = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    let t = Tensor::from_parts(self.nodes[i].value.shape().to_vec(), data);
                    t.check_finite("gradient").map(|_| t)
                })
                .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Grads {
            tape: self.id,
            by_node,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<E>>], idx: usize, update: impl FnOnce(&mut [E])) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let buf = grads[idx].get_or_insert_with(|| vec![E::ZERO; self.nodes[idx].value.numel()]);
        update(buf);
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, g: &[E], grads: &mut Vec<Option<Vec<E>>>) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Embed { table, tokens } => {
                let d = self.nodes[idx].value.shape()[1];
                self.accumulate(grads, *table, |buf| {
                    for (i, &tok) in tokens.iter().enumerate() {
                        let dst = &mut buf[tok as usize * d..(tok as usize + 1) * d];
                        for (o, &x) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *o += x;
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb, dims } => {
                let (m, k, n) = *dims;
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(grads, *a, |buf| {
                    // dA_logical = G @ B_logical^T, then transpose to storage if ta.
                    if !ta {
                        gemm_grad(buf, g, bd, m, n, k, false, !*tb);
                    } else {
                        // stored A is [k, m]: dA_stored = B_logical @ G^T
                        gemm_grad(buf, bd, g, k, n, m, *tb, true);
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    if !tb {
                        // dB_logical = A_logical^T @ G
                        gemm_grad(buf, ad, g, k, m, n, !*ta, false);
                    } else {
                        // stored B is [n, k]: dB_stored = G^T @ A_logical
                        gemm_grad(buf, g, ad, n, m, k, true, *ta);
                    }
                });
            }
            Op::Bmm { a, b, tb, alpha, dims } => {
                let (h, m, k, n) = *dims;
                let alpha = *alpha;
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(grads, *a, |buf| {
                    for head in 0..h {
                        let gh = &g[head * m * n..(head + 1) * m * n];
                        let bh = if *tb {
                            &bd[head * n * k..(head + 1) * n * k]
                        } else {
                            &bd[head * k * n..(head + 1) * k * n]
                        };
                        gemm_grad_scaled(&mut buf[head * m * k..(head + 1) * m * k], alpha, gh, bh, m, n, k, false, !*tb);
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for head in 0..h {
                        let gh = &g[head * m * n..(head + 1) * m * n];
                        let ah = &ad[head * m * k..(head + 1) * m * k];
                        if !tb {
                            gemm_grad_scaled(&mut buf[head * k * n..(head + 1) * k * n], alpha, ah, gh, k, m, n, true, false);
                        } else {
                            // stored [n, k]: dB_stored = alpha * G^T @ A
                            gemm_grad_scaled(&mut buf[head * n * k..(head + 1) * n * k], alpha, gh, ah, n, m, k, true, false);
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let sp = self.nodes[idx].value.shape();
                let (h, s, dh) = (sp[0], sp[1], sp[2]);
                debug_assert_eq!(h, *heads);
                self.accumulate(grads, *x, |buf| {
                    for head in 0..h {
                        for i in 0..s {
                            let src = &g[(head * s + i) * dh..(head * s + i + 1) * dh];
                            let dst = &mut buf[i * h * dh + head * dh..i * h * dh + (head + 1) * dh];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let sp = self.nodes[idx].value.shape();
                let (s, d) = (sp[0], sp[1]);
                let h = *heads;
                let dh = d / h;
                self.accumulate(grads, *x, |buf| {
                    for head in 0..h {
                        for i in 0..s {
                            let src = &g[i * d + head * dh..i * d + (head + 1) * dh];
                            let dst = &mut buf[(head * s + i) * dh..(head * s + i + 1) * dh];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::Rope { x, cos, sin } => {
                let sp = self.nodes[idx].value.shape();
                let (h, s, dh) = (sp[0], sp[1], sp[2]);
                let dx = kernels::rope_apply(g, h, s, dh, cos, sin, true);
                self.accumulate(grads, *x, |buf| {
                    for (o, &v) in buf.iter_mut().zip(&dx) {
                        *o += v;
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let (rows, d) = as_2d(self.nodes[idx].value.shape()).unwrap();
                self.accumulate(grads, *x, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                self.accumulate(grads, *bias, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(grads, *a, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v * c;
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = self.nodes[*x].value.data();
                self.accumulate(grads, *x, |buf| {
                    E::gelu_grad_slice(buf, g, xd);
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (rows, d) = as_2d(self.nodes[idx].value.shape()).unwrap();
                let xd = self.nodes[*x].value.data();
                let gd = self.nodes[*gamma].value.data();
                let inv_d = E::ONE / E::from_f64(d as f64);
                self.accumulate(grads, *gamma, |buf| {
                    for r in 0..rows {
                        let (mu, rstd) = cache[r];
                        for j in 0..d {
                            buf[j] += g[r * d + j] * ((xd[r * d + j] - mu) * rstd);
                        }
                    }
                });
                self.accumulate(grads, *beta, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
                self.accumulate(grads, *x, |buf| {
                    for r in 0..rows {
                        let (mu, rstd) = cache[r];
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xd[r * d..(r + 1) * d];
                        let mut mean_q = E::ZERO;
                        let mut mean_qx = E::ZERO;
                        for j in 0..d {
                            let q = gr[j] * gd[j];
                            let xh = (xr[j] - mu) * rstd;
                            mean_q += q;
                            mean_qx += q * xh;
                        }
                        mean_q *= inv_d;
                        mean_qx *= inv_d;
                        let dst = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            let q = gr[j] * gd[j];
                            let xh = (xr[j] - mu) * rstd;
                            dst[j] += rstd * (q - mean_q - xh * mean_qx);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = self.nodes[idx].value.shape().to_vec();
                let p = self.nodes[idx].value.data();
                let extent = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                self.accumulate(grads, *x, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * extent * inner + i;
                            let dot = if inner == 1 {
                                E::dot_slice(&p[base..base + extent], &g[base..base + extent])
                            } else {
                                let mut acc = E::ZERO;
                                for j in 0..extent {
                                    acc += p[base + j * inner] * g[base + j * inner];
                                }
                                acc
                            };
                            for j in 0..extent {
                                let pi = p[base + j * inner];
                                buf[base + j * inner] += pi * (g[base + j * inner] - dot);
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax { x, heads } => {
                let s = self.nodes[idx].value.shape()[1];
                let p = self.nodes[idx].value.data();
                let h = *heads;
                self.accumulate(grads, *x, |buf| {
                    for head in 0..h {
                        for i in 0..s {
                            let base = (head * s + i) * s;
                            let dot = E::dot_slice(&p[base..base + i + 1], &g[base..base + i + 1]);
                            for j in 0..=i {
                                buf[base + j] += p[base + j] * (g[base + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                n_selected,
            } => {
                let (rows, vocab) = as_2d(self.nodes[*logits].value.shape()).unwrap();
                let w = g[0] / E::from_f64(*n_selected as f64);
                self.accumulate(grads, *logits, |buf| {
                    for r in 0..rows {
                        if mask.as_ref().map_or(false, |m| !m[r]) {
                            continue;
                        }
                        let t = targets[r] as usize;
                        for j in 0..vocab {
                            let delta = if j == t { E::ONE } else { E::ZERO };
                            buf[r * vocab + j] += w * (probs[r * vocab + j] - delta);
                        }
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (rows, vocab) = as_2d(self.nodes[*logits].value.shape()).unwrap();
                let w = g[0] / E::from_f64(rows as f64);
                let td = targets.data();
                self.accumulate(grads, *logits, |buf| {
                    for i in 0..rows * vocab {
                        buf[i] += w * (probs[i] - td[i]);
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                self.accumulate(grads, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
        }
        Ok(())
    }
}

/// `c += a @ b` with logical transpose flags (accumulating).
fn gemm_grad<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    kernels::gemm_into(c, E::ONE, E::ONE, a, b, m, k, n, ta, tb);
}

/// `c += alpha * a @ b` with logical transpose flags (accumulating).
#[allow(clippy::too_many_arguments)]
fn gemm_grad_scaled<E: Element>(
    c: &mut [E],
    alpha: E,
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    kernels::gemm_into(c, E::ONE, alpha, a, b, m, k, n, ta, tb);
}

fn as_2d(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(format!("expected 2-D tensor, got {:?}", other))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(t2(&[3], &[1.0, -2.0, 0.5]));
        // sum only works on any shape; use via Sum op
        let loss = tape.sum(w).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let gw = grads.take(w).unwrap();
        assert_eq!(gw.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2w() {
        let mut tape = Tape::new();
        let w = tape.leaf(t2(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let gw = grads.take(w).unwrap();
        assert_eq!(gw.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        // d/dA sum(A@B) = ones([m,n]) @ B^T
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2(&[2, 2], &[0.5, 0.3, 0.7, 0.1]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let ga = grads.take(a).unwrap();
        // ones @ B^T: each row = [0.5+0.3, 0.7+0.1] = [0.8, 0.8]
        for &v in ga.data() {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_leaf_accumulates_both_uses() {
        // loss = sum(w) + sum(w) -> grad = 2
        let mut tape = Tape::new();
        let w = tape.leaf(t2(&[2], &[3.0, 4.0]));
        let s1 = tape.sum(w).unwrap();
        let s2 = tape.sum(w).unwrap();
        let tot = tape.add(s1, s2);
        // Add requires same shape; scalars are [] so this works.
        let loss = tot.unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(w).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(t2(&[2], &[1.0, 2.0]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut t1 = Tape::<f64>::new();
        let mut t2_ = Tape::<f64>::new();
        let w = t1.leaf(Tensor::scalar(1.0));
        let _ = t2_.leaf(Tensor::scalar(2.0));
        assert!(t2_.backward(w).is_err());
    }

    #[test]
    fn cross_entropy_matches_manual() {
        // Two rows, vocab 3, uniform logits: loss = ln 3.
        let mut tape = Tape::new();
        let l = tape.leaf(t2(&[2, 3], &[0.0; 6]));
        let loss = tape.cross_entropy(l, &[0, 2], None).unwrap();
        let v = tape.value(loss).scalar_value().unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_mask_limits_rows() {
        let mut tape = Tape::new();
        let l = tape.leaf(t2(&[2, 2], &[0.0, 10.0, 0.0, 0.0]));
        // Only row 1 selected; uniform row -> ln 2.
        let loss = tape
            .cross_entropy(l, &[0, 0], Some(&[false, true]))
            .unwrap();
        let v = tape.value(loss).scalar_value().unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nan_in_op_output_aborts() {
        let mut tape = Tape::new();
        let big = tape.leaf(t2(&[1], &[1e308]));
        // 1e308 * 10 overflows to inf -> op must error, not propagate.
        assert!(tape.scale(big, 10.0).is_err());
    }
}
