//! Tape-based reverse-mode differentiation over [`Tensor`] values.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, BatchNormSaved, ConvGeom};
use super::params::ParamStore;
use super::tensor::{Real, Shape5, Tensor};
use crate::error::{arg_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Forward-pass behaviour switch (batch norm statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    /// Eval-mode batch norm: `gamma * (x - mean) * inv_std + beta`.
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Upsample2 {
        x: Var,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    StraightThrough {
        x: Var,
    },
    Gather {
        table: Var,
        idx: Vec<u32>,
    },
    SqDist {
        a: Var,
        b: Var,
        denom: f64,
    },
    SoftplusMean {
        x: Var,
        sign: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// A single forward recording that can be differentiated once.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    frozen_prefixes: Vec<String>,
    buffer_updates: Vec<(String, Tensor<T>)>,
    mode: Mode,
    consumed: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen_prefixes: Vec::new(),
            buffer_updates: Vec::new(),
            mode,
            consumed: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches the mode for layers recorded from now on.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Parameters under `prefix` enter this graph as constants.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(alloc::format!(
                "non-finite value produced by node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape5 {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Records an input; `requires_grad` asks for its gradient after backward.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(t, requires_grad, Op::Leaf)
    }

    /// A constant copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.push(t, false, Op::Leaf)
    }

    /// Looks up (once per graph) the named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let frozen = self.frozen_prefixes.iter().any(|f| name.starts_with(f.as_str()));
        let v = self.push(p.tensor.clone(), p.trainable && !frozen, Op::Leaf)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn queue_buffer_update(&mut self, name: String, t: Tensor<T>) {
        self.buffer_updates.push((name, t));
    }

    /// Running-statistic updates produced by training-mode forwards.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        core::mem::take(&mut self.buffer_updates)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv3d(self.value(x), self.value(w), bias.as_deref(), geom)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, ng, Op::Conv { x, w, b, geom })
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let c = self.shape(x).c();
        if self.value(gamma).data().len() != c || self.value(beta).data().len() != c {
            return Err(arg_err!("batch norm over {c} channels given mismatched affine params"));
        }
        let (out, saved) = kernels::batch_norm_train(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps);
        let stats = (saved.mean.clone(), saved.var_unbiased.clone());
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(out, ng, Op::BatchNorm { x, gamma, beta, saved })?;
        Ok((v, stats.0, stats.1))
    }

    pub fn frozen_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let c = self.shape(x).c();
        if mean.len() != c || var.len() != c || self.value(gamma).data().len() != c {
            return Err(arg_err!("batch norm over {c} channels given mismatched statistics"));
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / libm::sqrt(v.f64() + eps))).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let scale: Vec<T> = (0..c).map(|i| g[i] * inv_std[i]).collect();
        let shift: Vec<T> = (0..c).map(|i| bt[i] - scale[i] * mean[i]).collect();
        let out = kernels::channel_affine(self.value(x), &scale, &shift);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            ng,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let out = kernels::leaky_relu(self.value(x).data(), slope);
        let t = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(x);
        self.push(t, ng, Op::LeakyRelu { x, slope })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(arg_err!("add shape mismatch {:?} vs {:?}", self.shape(a).0, self.shape(b).0));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, ng, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(x);
        self.push(t, ng, Op::Scale { x, s })
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample2(self.value(x));
        let ng = self.ng(x);
        self.push(out, ng, Op::Upsample2 { x })
    }

    pub fn max_pool(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let (out, arg) = kernels::max_pool(self.value(x), geom)?;
        let ng = self.ng(x);
        self.push(out, ng, Op::MaxPool { x, arg })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (out, probs) = kernels::attention(self.value(q), self.value(k), self.value(v))?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, ng, Op::Attention { q, k, v, probs })
    }

    /// Forward value `replacement`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<T>) -> Result<Var> {
        if replacement.shape() != self.shape(x) {
            return Err(arg_err!("straight-through replacement shape mismatch"));
        }
        let ng = self.ng(x);
        self.push(replacement, ng, Op::StraightThrough { x })
    }

    /// Looks up rows of a `(K, d, 1, 1, 1)` table into an `(N, d, D, H, W)` volume.
    ///
    /// `idx` holds one row index per output position in `(n, z, y, x)` order.
    pub fn gather(&mut self, table: Var, idx: Vec<u32>, out_shape: Shape5) -> Result<Var> {
        let ts = self.shape(table);
        let (k, d) = (ts.n(), ts.c());
        if ts.plane() != 1 || out_shape.c() != d || idx.len() != out_shape.n() * out_shape.plane() {
            return Err(arg_err!("gather shape mismatch: table {:?}, output {:?}", ts.0, out_shape.0));
        }
        if let Some(bad) = idx.iter().find(|&&i| i as usize >= k) {
            return Err(arg_err!("gather index {bad} out of range {k}"));
        }
        let p = out_shape.plane();
        let tab = self.value(table).data();
        let mut out = vec![T::zero(); out_shape.numel()];
        for (pos, &row) in idx.iter().enumerate() {
            let (n, s) = (pos / p, pos % p);
            for c in 0..d {
                out[(n * d + c) * p + s] = tab[row as usize * d + c];
            }
        }
        let t = Tensor::new(out_shape, out)?;
        let ng = self.ng(table);
        self.push(t, ng, Op::Gather { table, idx })
    }

    /// `sum((a - b)^2) / denom` as a scalar node.
    pub fn sq_dist(&mut self, a: Var, b: Var, denom: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(arg_err!("squared distance shape mismatch {:?} vs {:?}", self.shape(a).0, self.shape(b).0));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = (x - y).f64();
                d * d
            })
            .sum();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(T::of(s / denom)), ng, Op::SqDist { a, b, denom })
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.shape(a).numel() as f64;
        self.sq_dist(a, b, n)
    }

    /// `mean(softplus(sign * x))`.
    pub fn softplus_mean(&mut self, x: Var, sign: f64) -> Result<Var> {
        let d = self.value(x).data();
        let s: f64 = d.iter().map(|v| softplus(sign * v.f64())).sum::<f64>() / d.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::of(s)), ng, Op::SoftplusMean { x, sign })
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Backpropagates from a scalar node seeded with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss).numel() != 1 {
            return Err(arg_err!("backward from a non-scalar node; use backward_seeded"));
        }
        self.backward_seeded(&[(loss, vec![T::one()])])
    }

    /// Backpropagates several seed gradients at once (they are summed).
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<T>)]) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph".to_string()));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward without a recorded graph".to_string()));
        }
        for (v, g) in seeds {
            if g.len() != self.shape(*v).numel() {
                return Err(arg_err!("seed gradient length {} vs node size {}", g.len(), self.shape(*v).numel()));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite seed gradient".to_string()));
            }
            self.accumulate(*v, g.clone());
        }
        self.consumed = true;
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=last).rev() {
            let Some(gout) = self.nodes[i].grad.clone() else { continue };
            let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op, gout)?;
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, op: &Op<T>, gout: Vec<T>) -> Result<()> {
        let out_shape = self.nodes[i].value.shape();
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let go = Tensor::new(out_shape, gout)?;
                if self.ng(*x) {
                    let gi = kernels::conv3d_grad_input(&go, self.value(*w), self.shape(*x), *geom);
                    self.accumulate(*x, gi.into_data());
                }
                if self.ng(*w) || b.is_some_and(|b| self.ng(b)) {
                    let (gw, gb) = kernels::conv3d_grad_params(&go, self.value(*x), self.shape(*w), *geom);
                    self.accumulate(*w, gw.into_data());
                    if let Some(b) = b {
                        self.accumulate(*b, gb);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let gm = self.value(*gamma).data().to_vec();
                let (dx, dg, db) = kernels::batch_norm_train_backward(&gout, out_shape, &gm, saved);
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dg);
                self.accumulate(*beta, db);
            }
            Op::FrozenNorm { x, gamma, beta, mean, inv_std } => {
                let (c, p) = (out_shape.c(), out_shape.plane());
                let gm = self.value(*gamma).data().to_vec();
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); gout.len()];
                let mut dg = vec![0.0f64; c];
                let mut db = vec![0.0f64; c];
                for (blk, (gch, xch)) in gout.chunks(p).zip(xv.chunks(p)).enumerate() {
                    let ch = blk % c;
                    let k = gm[ch] * inv_std[ch];
                    for (j, (&g, &xx)) in gch.iter().zip(xch).enumerate() {
                        dx[blk * p + j] = g * k;
                        dg[ch] += (g * (xx - mean[ch]) * inv_std[ch]).f64();
                        db[ch] += g.f64();
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dg.into_iter().map(T::of).collect());
                self.accumulate(*beta, db.into_iter().map(T::of).collect());
            }
            Op::LeakyRelu { x, slope } => {
                let gi = kernels::leaky_relu_backward(self.value(*x).data(), &gout, *slope);
                self.accumulate(*x, gi);
            }
            Op::Add { a, b } => {
                self.accumulate(*b, gout.clone());
                self.accumulate(*a, gout);
            }
            Op::Scale { x, s } => {
                let gi = gout.iter().map(|&g| g * *s).collect();
                self.accumulate(*x, gi);
            }
            Op::Upsample2 { x } => {
                let go = Tensor::new(out_shape, gout)?;
                let gi = kernels::upsample2_backward(&go, self.shape(*x));
                self.accumulate(*x, gi);
            }
            Op::MaxPool { x, arg } => {
                let go = Tensor::new(out_shape, gout)?;
                let gi = kernels::max_pool_backward(&go, arg, self.shape(*x));
                self.accumulate(*x, gi);
            }
            Op::Attention { q, k, v, probs } => {
                let (dq, dk, dv) =
                    kernels::attention_backward(&gout, self.value(*q), self.value(*k), self.value(*v), probs);
                self.accumulate(*q, dq);
                self.accumulate(*k, dk);
                self.accumulate(*v, dv);
            }
            Op::StraightThrough { x } => self.accumulate(*x, gout),
            Op::Gather { table, idx } => {
                let ts = self.shape(*table);
                let d = ts.c();
                let p = out_shape.plane();
                let mut gt = vec![0.0f64; ts.numel()];
                for (pos, &row) in idx.iter().enumerate() {
                    let (n, s) = (pos / p, pos % p);
                    for c in 0..d {
                        gt[row as usize * d + c] += gout[(n * d + c) * p + s].f64();
                    }
                }
                self.accumulate(*table, gt.into_iter().map(T::of).collect());
            }
            Op::SqDist { a, b, denom } => {
                let g = gout[0].f64() * 2.0 / denom;
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| (x - y).f64() * g)
                    .collect();
                if self.ng(*a) {
                    self.accumulate(*a, diff.iter().map(|&v| T::of(v)).collect());
                }
                if self.ng(*b) {
                    self.accumulate(*b, diff.iter().map(|&v| T::of(-v)).collect());
                }
            }
            Op::SoftplusMean { x, sign } => {
                let d = self.value(*x).data();
                let k = gout[0].f64() / d.len() as f64;
                let gi = d.iter().map(|v| T::of(k * sign * sigmoid(sign * v.f64()))).collect();
                self.accumulate(*x, gi);
            }
        }
        Ok(())
    }

    /// Gradients of every tracked parameter, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }
}
