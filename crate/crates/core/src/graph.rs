//! Reverse-mode automatic differentiation over tensor operations.
//!
//! A [`Graph`] is a tape of tensor-valued nodes built once per forward
//! pass. Operations append a node holding the result plus a closure that
//! distributes the incoming gradient to the operation's inputs. Nodes only
//! ever reference earlier nodes, so the tape is acyclic by construction and
//! a single reverse sweep computes all gradients.
//!
//! The scope is deliberately narrow: exactly the primitives these layers
//! need, no control flow, no higher-order gradients.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor, &mut Grads)>;

struct Node {
    value: Rc<Tensor>,
    back: Option<BackFn>,
}

/// Gradient slots indexed by node id. Slots for interior nodes are freed as
/// soon as they have been propagated; leaf slots survive the sweep.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub(crate) fn accum(&mut self, id: usize, contrib: Tensor) {
        match &mut self.slots[id] {
            Some(g) => {
                g.add_assign(&contrib).expect("gradient shape mismatch");
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn value_rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every operation funnels through here: non-finite outputs are an
    /// error state, reported with the operation name.
    fn push(&mut self, op: &'static str, value: Tensor, back: Option<BackFn>) -> Result<Var> {
        value.ensure_finite(op)?;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Rc::new(value),
            back,
        });
        Ok(Var(id))
    }

    /// Leaf node that does not receive gradients of its own (inputs,
    /// targets, schedule constants).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, None)
    }

    /// Named leaf node for a learnable tensor. Repeated calls with the same
    /// name return the same node, so gradient contributions from every use
    /// site accumulate into one slot.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.push("param", value.clone(), None)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Reverse sweep from a scalar loss. Returns a gradient slot per node;
    /// parameters not reachable from the loss keep an empty slot, which
    /// readers interpret as an exact zero.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads = Grads {
            slots: vec![None; self.nodes.len()],
        };
        grads.accum(loss.0, Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if self.nodes[id].back.is_some() {
                if let Some(g) = grads.slots[id].take() {
                    (self.nodes[id].back.as_ref().unwrap())(&g, &mut grads);
                }
            }
        }
        Ok(grads)
    }

    pub(crate) fn push_custom(
        &mut self,
        op: &'static str,
        value: Tensor,
        back: BackFn,
    ) -> Result<Var> {
        self.push(op, value, Some(back))
    }

    // ------------------------------------------------------------------
    // Elementwise and shape ops
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push(
            "add",
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(a.0, g.clone());
                grads.accum(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        self.push(
            "sub",
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(a.0, g.clone());
                grads.accum(b.0, g.scale(-1.0));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value_rc(a);
        let vb = self.value_rc(b);
        let y = va.mul(&vb)?;
        self.push(
            "mul",
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(a.0, g.mul(&vb).unwrap());
                grads.accum(b.0, g.mul(&va).unwrap());
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let y = self.value(a).scale(c);
        self.push(
            "scale",
            y,
            Some(Box::new(move |g, grads| grads.accum(a.0, g.scale(c)))),
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let y = self.value(a).map(|v| v + c);
        self.push(
            "add_const",
            y,
            Some(Box::new(move |g, grads| grads.accum(a.0, g.clone()))),
        )
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Var> {
        let va = self.value_rc(a);
        let y = va.map(f);
        self.push(
            op,
            y,
            Some(Box::new(move |g, grads| {
                let mut dx = va.map(&df);
                for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                    *d *= gv;
                }
                grads.accum(a.0, dx);
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, nn::silu, nn::silu_grad)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, nn::gelu, nn::gelu_grad)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, nn::softplus, nn::sigmoid)
    }

    /// `y = -exp(x)`; used to map unconstrained logs to strictly negative
    /// state-transition entries. `dy/dx = y`.
    pub fn neg_exp(&mut self, a: Var) -> Result<Var> {
        let va = self.value_rc(a);
        let y = va.map(|v| -v.exp());
        let yv = Rc::new(y.clone());
        self.push(
            "neg_exp",
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(a.0, g.mul(&yv).unwrap());
            })),
        )
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value_rc(a);
        let vb = self.value_rc(b);
        let y = va.matmul(&vb)?;
        self.push(
            "matmul",
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(a.0, g.matmul_nt(&vb).unwrap());
                grads.accum(b.0, va.matmul_tn(g).unwrap());
            })),
        )
    }

    /// Broadcast a length-D row vector over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let vx = self.value(x);
        let vr = self.value(row);
        let d = vx.row_len();
        if vr.numel() != d {
            return Err(Error::shape(
                "add_row",
                format!("row {} vs width {}", vr.numel(), d),
            ));
        }
        let mut y = vx.clone();
        for chunk in y.data_mut().chunks_mut(d) {
            for (v, &b) in chunk.iter_mut().zip(vr.data()) {
                *v += b;
            }
        }
        self.push(
            "add_row",
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(x.0, g.clone());
                let d = g.row_len();
                let mut dr = Tensor::zeros(&[d]);
                for chunk in g.data().chunks(d) {
                    for (s, &gv) in dr.data_mut().iter_mut().zip(chunk) {
                        *s += gv;
                    }
                }
                grads.accum(row.0, dr);
            })),
        )
    }

    /// `linear(x, w, b)` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ------------------------------------------------------------------
    // Normalization and shaping
    // ------------------------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let y = nn::softmax(self.value(a))?;
        let yv = Rc::new(y.clone());
        self.push(
            "softmax",
            y,
            Some(Box::new(move |g, grads| {
                let w = yv.row_len();
                let mut dx = g.mul(&yv).unwrap();
                for (drow, yrow) in dx.data_mut().chunks_mut(w).zip(yv.data().chunks(w)) {
                    let s: f64 = drow.iter().sum();
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d -= s * y;
                    }
                }
                grads.accum(a.0, dx);
            })),
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value_rc(x);
        let vg = self.value_rc(gain);
        let y = nn::layer_norm(&vx, &vg, self.value(bias), eps)?;
        // Save per-row inverse std and the normalized values for backward.
        let d = vx.row_len();
        let r = vx.rows();
        let mut inv_std = Vec::with_capacity(r);
        let mut normed = Tensor::zeros(&[r, d]);
        for i in 0..r {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                normed.data_mut()[i * d + j] = (v - mean) * inv;
            }
        }
        self.push(
            "layer_norm",
            y,
            Some(Box::new(move |g, grads| {
                let mut dx = Tensor::zeros(&[r, d]);
                let mut dgain = Tensor::zeros(&[d]);
                let mut dbias = Tensor::zeros(&[d]);
                for i in 0..r {
                    let grow = g.row(i);
                    let nrow = normed.row(i);
                    for j in 0..d {
                        dgain.data_mut()[j] += grow[j] * nrow[j];
                        dbias.data_mut()[j] += grow[j];
                    }
                    // dL/dx̂ = g ⊙ gain, then the standard layer-norm pullback.
                    let dxhat: Vec<f64> = (0..d).map(|j| grow[j] * vg.data()[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_n =
                        dxhat.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx.data_mut()[i * d + j] =
                            inv_std[i] * (dxhat[j] - mean_dxhat - nrow[j] * mean_dxhat_n);
                    }
                }
                grads.accum(x.0, dx);
                grads.accum(gain.0, dgain);
                grads.accum(bias.0, dbias);
            })),
        )
    }

    pub fn conv1d_causal(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let vx = self.value_rc(x);
        let vk = self.value_rc(kernel);
        let y = nn::conv1d_causal(&vx, &vk)?;
        self.push(
            "conv1d_causal",
            y,
            Some(Box::new(move |g, grads| {
                let (t_len, d) = (vx.shape()[0], vx.shape()[1]);
                let width = vk.shape()[0];
                let mut dx = Tensor::zeros(&[t_len, d]);
                let mut dk = Tensor::zeros(&[width, d]);
                for t in 0..t_len {
                    let grow = g.row(t);
                    for w in 0..width.min(t + 1) {
                        let xrow = vx.row(t - w);
                        let krow = vk.row(w);
                        let dxrow = &mut dx.data_mut()[(t - w) * d..(t - w + 1) * d];
                        for j in 0..d {
                            dxrow[j] += grow[j] * krow[j];
                        }
                        let dkrow = &mut dk.data_mut()[w * d..(w + 1) * d];
                        for j in 0..d {
                            dkrow[j] += grow[j] * xrow[j];
                        }
                    }
                }
                grads.accum(x.0, dx);
                grads.accum(kernel.0, dk);
            })),
        )
    }

    pub fn flip_rows(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).flip_rows();
        self.push(
            "flip_rows",
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(x.0, g.flip_rows());
            })),
        )
    }

    pub fn slice_rows(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let vx = self.value(x);
        let y = vx.slice_rows(lo, hi)?;
        let full_shape = vx.shape().to_vec();
        self.push(
            "slice_rows",
            y,
            Some(Box::new(move |g, grads| {
                let mut dx = Tensor::zeros(&full_shape);
                let w = dx.row_len();
                dx.data_mut()[lo * w..hi * w].copy_from_slice(g.data());
                grads.accum(x.0, dx);
            })),
        )
    }

    /// Mean over the first axis: `[P,D] -> [1,D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (p, d) = (vx.rows(), vx.row_len());
        if p == 0 {
            return Err(Error::invalid("mean_rows", "no rows"));
        }
        let mut y = Tensor::zeros(&[1, d]);
        for row in vx.data().chunks(d) {
            for (s, &v) in y.data_mut().iter_mut().zip(row) {
                *s += v;
            }
        }
        let inv = 1.0 / p as f64;
        for v in y.data_mut() {
            *v *= inv;
        }
        self.push(
            "mean_rows",
            y,
            Some(Box::new(move |g, grads| {
                let mut dx = Tensor::zeros(&[p, d]);
                for chunk in dx.data_mut().chunks_mut(d) {
                    for (dv, &gv) in chunk.iter_mut().zip(g.data()) {
                        *dv = gv * inv;
                    }
                }
                grads.accum(x.0, dx);
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let y = Tensor::scalar(vx.sum());
        self.push(
            "sum_all",
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(x.0, Tensor::full(&shape, g.item()));
            })),
        )
    }

    /// Elementwise division by a scalar node.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let vx = self.value_rc(x);
        let vs = self.value(s);
        if vs.numel() != 1 {
            return Err(Error::invalid("div_scalar", "divisor must be scalar"));
        }
        let sv = vs.item();
        let y = vx.scale(1.0 / sv);
        self.push(
            "div_scalar",
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(x.0, g.scale(1.0 / sv));
                let ds = -g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum::<f64>()
                    / (sv * sv);
                grads.accum(s.0, Tensor::scalar(ds));
            })),
        )
    }

    // ------------------------------------------------------------------
    // Losses
    // ------------------------------------------------------------------

    /// Mean squared error against a fixed target.
    pub fn mse_to(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let vp = self.value_rc(pred);
        let diff = vp.sub(target)?;
        let n = diff.numel() as f64;
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
        let diff = Rc::new(diff);
        self.push(
            "mse_to",
            Tensor::scalar(loss),
            Some(Box::new(move |g, grads| {
                let c = 2.0 * g.item() / n;
                grads.accum(pred.0, diff.scale(c));
            })),
        )
    }

    /// `KL(p ‖ Uniform(E)) = Σ_e p_e · ln(p_e · E)` with `0·ln 0 := 0`.
    /// `p` must be a distribution over the last axis of a `[1,E]` node.
    pub fn kl_to_uniform(&mut self, p: Var) -> Result<Var> {
        let vp = self.value_rc(p);
        let e = vp.numel() as f64;
        if vp.numel() == 0 {
            return Err(Error::invalid("kl_to_uniform", "empty distribution"));
        }
        let kl: f64 = vp
            .data()
            .iter()
            .map(|&pe| if pe > 0.0 { pe * (pe * e).ln() } else { 0.0 })
            .sum();
        self.push(
            "kl_to_uniform",
            Tensor::scalar(kl),
            Some(Box::new(move |g, grads| {
                let g0 = g.item();
                let dp = vp.map(|pe| if pe > 0.0 { g0 * ((pe * e).ln() + 1.0) } else { 0.0 });
                grads.accum(p.0, dp);
            })),
        )
    }

    // ------------------------------------------------------------------
    // Expert-bank indexing
    // ------------------------------------------------------------------

    /// Select expert `e` from a `[E,D,N]` bank, yielding `[D,N]`. The index
    /// is data-dependent but fixed for the life of the graph; gradient
    /// flows only into the selected slice.
    pub fn select_expert(&mut self, bank: Var, e: usize) -> Result<Var> {
        let vb = self.value(bank);
        if vb.shape().len() != 3 {
            return Err(Error::shape("select_expert", "bank must be [E,D,N]"));
        }
        let (n_e, d, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        if e >= n_e {
            return Err(Error::invalid(
                "select_expert",
                format!("index {} out of {} experts", e, n_e),
            ));
        }
        let w = d * n;
        let y = Tensor::new(vec![d, n], vb.data()[e * w..(e + 1) * w].to_vec())?;
        self.push(
            "select_expert",
            y,
            Some(Box::new(move |g, grads| {
                let mut db = Tensor::zeros(&[n_e, d, n]);
                db.data_mut()[e * w..(e + 1) * w].copy_from_slice(g.data());
                grads.accum(bank.0, db);
            })),
        )
    }

    /// Straight-through expert selection: forward returns `bank[e]` exactly
    /// like [`Graph::select_expert`], but the backward pass additionally
    /// treats the selection as the soft mixture `Σ_e γ_e · bank[e]`, so the
    /// gating vector receives a gradient from the reconstruction path.
    pub fn select_expert_straight_through(
        &mut self,
        bank: Var,
        gamma: Var,
        e: usize,
    ) -> Result<Var> {
        let vb = self.value_rc(bank);
        if vb.shape().len() != 3 {
            return Err(Error::shape("select_expert_st", "bank must be [E,D,N]"));
        }
        let (n_e, d, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        if self.value(gamma).numel() != n_e {
            return Err(Error::shape("select_expert_st", "gamma length vs bank"));
        }
        if e >= n_e {
            return Err(Error::invalid("select_expert_st", "index out of range"));
        }
        let w = d * n;
        let y = Tensor::new(vec![d, n], vb.data()[e * w..(e + 1) * w].to_vec())?;
        self.push(
            "select_expert_st",
            y,
            Some(Box::new(move |g, grads| {
                let mut db = Tensor::zeros(&[n_e, d, n]);
                db.data_mut()[e * w..(e + 1) * w].copy_from_slice(g.data());
                grads.accum(bank.0, db);
                let mut dgamma = Tensor::zeros(&[1, n_e]);
                for j in 0..n_e {
                    let slice = &vb.data()[j * w..(j + 1) * w];
                    dgamma.data_mut()[j] = g.data().iter().zip(slice).map(|(&a, &b)| a * b).sum();
                }
                grads.accum(gamma.0, dgamma);
            })),
        )
    }
}
