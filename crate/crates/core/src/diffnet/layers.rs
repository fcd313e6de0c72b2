//! The layer catalogue used to assemble encoders, decoders and discriminators.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, Var};
use super::kernels::ConvGeom;
use super::params::ParamStore;
use super::tensor::{Real, Shape5, Tensor};
use crate::error::{arg_err, Result};

/// Negative-side slope of the leaky rectifier used by every activation.
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One layer of a network, with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// 3D cross-correlation with bias.
    Conv3 {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Stride-2 3×3×3 conv, batch norm, activation.
    DownBlock { cin: usize, cout: usize },
    /// 2× nearest upsample, 3×3×3 conv, batch norm, activation.
    UpBlock { cin: usize, cout: usize },
    /// Two conv/norm/activation stages plus an additive skip (1×1×1 conv when
    /// channel counts differ).
    ResidualBlock { cin: usize, cout: usize },
    /// Dot-product self-attention over all positions, added back to the input.
    NonLocalBlock { channels: usize, inner: usize },
    BatchNorm { channels: usize },
    /// Leaky rectifier with slope [`LEAKY_SLOPE`].
    Activation,
    /// Non-learnable max pooling.
    MaxFilter { kernel: usize, stride: usize, pad: usize },
}

impl LayerSpec {
    pub fn conv(cin: usize, cout: usize, kernel: usize) -> Self {
        LayerSpec::Conv3 {
            cin,
            cout,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3 { .. } => "conv3",
            LayerSpec::DownBlock { .. } => "down_block",
            LayerSpec::UpBlock { .. } => "up_block",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::NonLocalBlock { .. } => "nonlocal_block",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Activation => "activation",
            LayerSpec::MaxFilter { .. } => "max_filter",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, what: &str| {
            if v == 0 {
                Err(arg_err!("{} needs positive {}", self.kind_name(), what))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv3 {
                cin,
                cout,
                kernel,
                stride,
                pad,
            } => {
                pos(cin, "cin")?;
                pos(cout, "cout")?;
                pos(kernel, "kernel")?;
                pos(stride, "stride")?;
                if stride == 1 && pad == kernel / 2 && kernel % 2 == 0 {
                    return Err(arg_err!("same-padding conv needs an odd kernel, got {kernel}"));
                }
                Ok(())
            }
            LayerSpec::DownBlock { cin, cout }
            | LayerSpec::UpBlock { cin, cout }
            | LayerSpec::ResidualBlock { cin, cout } => {
                pos(cin, "cin")?;
                pos(cout, "cout")
            }
            LayerSpec::NonLocalBlock { channels, inner } => {
                pos(channels, "channels")?;
                pos(inner, "inner channels")
            }
            LayerSpec::BatchNorm { channels } => pos(channels, "channels"),
            LayerSpec::Activation => Ok(()),
            LayerSpec::MaxFilter { kernel, stride, .. } => {
                pos(kernel, "kernel")?;
                pos(stride, "stride")
            }
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, s: Shape5) -> Result<Shape5> {
        self.validate()?;
        let need = |c: usize| {
            if s.c() != c {
                Err(arg_err!("{} expects {} channels, got {}", self.kind_name(), c, s.c()))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv3 {
                cin,
                cout,
                kernel,
                stride,
                pad,
            } => {
                need(cin)?;
                let sp = ConvGeom::new(kernel, stride, pad).out_spatial(s.spatial())?;
                Ok(Shape5::new(s.n(), cout, sp[0], sp[1], sp[2]))
            }
            LayerSpec::DownBlock { cin, cout } => {
                need(cin)?;
                let sp = ConvGeom::new(3, 2, 1).out_spatial(s.spatial())?;
                Ok(Shape5::new(s.n(), cout, sp[0], sp[1], sp[2]))
            }
            LayerSpec::UpBlock { cin, cout } => {
                need(cin)?;
                let [d, h, w] = s.spatial();
                Ok(Shape5::new(s.n(), cout, 2 * d, 2 * h, 2 * w))
            }
            LayerSpec::ResidualBlock { cin, cout } => {
                need(cin)?;
                Ok(s.with_channels(cout))
            }
            LayerSpec::NonLocalBlock { channels, .. } | LayerSpec::BatchNorm { channels } => {
                need(channels)?;
                Ok(s)
            }
            LayerSpec::Activation => Ok(s),
            LayerSpec::MaxFilter { kernel, stride, pad } => {
                let sp = ConvGeom::new(kernel, stride, pad).out_spatial(s.spatial())?;
                Ok(Shape5::new(s.n(), s.c(), sp[0], sp[1], sp[2]))
            }
        }
    }

    /// Adds this layer's parameters (and buffers) under `prefix`.
    pub fn init_params<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.validate()?;
        match *self {
            LayerSpec::Conv3 { cin, cout, kernel, .. } => init_conv(store, prefix, cin, cout, kernel, rng),
            LayerSpec::DownBlock { cin, cout } | LayerSpec::UpBlock { cin, cout } => {
                init_conv(store, &format!("{prefix}.conv"), cin, cout, 3, rng)?;
                init_norm(store, &format!("{prefix}.norm"), cout)
            }
            LayerSpec::ResidualBlock { cin, cout } => {
                init_conv(store, &format!("{prefix}.conv1"), cin, cout, 3, rng)?;
                init_norm(store, &format!("{prefix}.norm1"), cout)?;
                init_conv(store, &format!("{prefix}.conv2"), cout, cout, 3, rng)?;
                init_norm(store, &format!("{prefix}.norm2"), cout)?;
                if cin != cout {
                    init_conv(store, &format!("{prefix}.skip"), cin, cout, 1, rng)?;
                }
                Ok(())
            }
            LayerSpec::NonLocalBlock { channels, inner } => {
                for part in ["query", "key", "value"] {
                    init_conv(store, &format!("{prefix}.{part}"), channels, inner, 1, rng)?;
                }
                init_conv(store, &format!("{prefix}.proj"), inner, channels, 1, rng)
            }
            LayerSpec::BatchNorm { channels } => init_norm(store, prefix, channels),
            LayerSpec::Activation | LayerSpec::MaxFilter { .. } => Ok(()),
        }
    }

    /// Records this layer's forward pass on `g`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, store: &ParamStore<T>, prefix: &str) -> Result<Var> {
        self.output_shape(g.shape(x))?;
        match *self {
            LayerSpec::Conv3 {
                kernel, stride, pad, ..
            } => conv(g, x, store, prefix, ConvGeom::new(kernel, stride, pad)),
            LayerSpec::DownBlock { .. } => {
                let h = conv(g, x, store, &format!("{prefix}.conv"), ConvGeom::new(3, 2, 1))?;
                let h = norm(g, h, store, &format!("{prefix}.norm"))?;
                act(g, h)
            }
            LayerSpec::UpBlock { .. } => {
                let u = g.upsample2(x)?;
                let h = conv(g, u, store, &format!("{prefix}.conv"), ConvGeom::same(3))?;
                let h = norm(g, h, store, &format!("{prefix}.norm"))?;
                act(g, h)
            }
            LayerSpec::ResidualBlock { cin, cout } => {
                let h = conv(g, x, store, &format!("{prefix}.conv1"), ConvGeom::same(3))?;
                let h = norm(g, h, store, &format!("{prefix}.norm1"))?;
                let h = act(g, h)?;
                let h = conv(g, h, store, &format!("{prefix}.conv2"), ConvGeom::same(3))?;
                let h = norm(g, h, store, &format!("{prefix}.norm2"))?;
                let h = act(g, h)?;
                let skip = if cin != cout {
                    conv(g, x, store, &format!("{prefix}.skip"), ConvGeom::same(1))?
                } else {
                    x
                };
                g.add(skip, h)
            }
            LayerSpec::NonLocalBlock { .. } => {
                let q = conv(g, x, store, &format!("{prefix}.query"), ConvGeom::same(1))?;
                let k = conv(g, x, store, &format!("{prefix}.key"), ConvGeom::same(1))?;
                let v = conv(g, x, store, &format!("{prefix}.value"), ConvGeom::same(1))?;
                let a = g.attention(q, k, v)?;
                let o = conv(g, a, store, &format!("{prefix}.proj"), ConvGeom::same(1))?;
                g.add(x, o)
            }
            LayerSpec::BatchNorm { .. } => norm(g, x, store, prefix),
            LayerSpec::Activation => act(g, x),
            LayerSpec::MaxFilter { kernel, stride, pad } => g.max_pool(x, ConvGeom::new(kernel, stride, pad)),
        }
    }
}

fn init_conv<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let fan_in = cin * k * k * k;
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let shape = Shape5::new(cout, cin, k, k, k);
    let w: Vec<T> = (0..shape.numel()).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    store.insert(&format!("{prefix}.weight"), Tensor::new(shape, w)?, true)?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(Shape5::new(cout, 1, 1, 1, 1)), true)
}

fn init_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    let s = Shape5::new(c, 1, 1, 1, 1);
    store.insert(&format!("{prefix}.gamma"), Tensor::full(s, T::one()), true)?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(s), true)?;
    store.insert_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(s))?;
    store.insert_buffer(&format!("{prefix}.running_var"), Tensor::full(s, T::one()))
}

fn conv<T: Real>(g: &mut Graph<T>, x: Var, store: &ParamStore<T>, prefix: &str, geom: ConvGeom) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.conv3d(x, w, Some(b), geom)
}

fn norm<T: Real>(g: &mut Graph<T>, x: Var, store: &ParamStore<T>, prefix: &str) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let mean_name: String = format!("{prefix}.running_mean");
    let var_name: String = format!("{prefix}.running_var");
    match g.mode() {
        Mode::Train => {
            let (out, mean, var) = g.batch_norm(x, gamma, beta, BN_EPS)?;
            let rm = store.buffer(&mean_name)?;
            let rv = store.buffer(&var_name)?;
            let blend = |old: &Tensor<T>, new: &[f64]| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, n)| T::of((1.0 - BN_MOMENTUM) * o.f64() + BN_MOMENTUM * n))
                    .collect();
                Tensor::new(old.shape(), data)
            };
            let nm = blend(rm, &mean)?;
            let nv = blend(rv, &var)?;
            g.queue_buffer_update(mean_name, nm);
            g.queue_buffer_update(var_name, nv);
            Ok(out)
        }
        Mode::Eval => {
            let rm = store.buffer(&mean_name)?.data().to_vec();
            let rv = store.buffer(&var_name)?.data().to_vec();
            g.frozen_norm(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }
}

fn act<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.leaky_relu(x, T::of(LEAKY_SLOPE))
}

/// An ordered list of named layers applied in sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequential {
    pub prefix: String,
    pub layers: Vec<LayerSpec>,
}

impl Sequential {
    pub fn new(prefix: &str, layers: Vec<LayerSpec>) -> Self {
        Sequential {
            prefix: prefix.into(),
            layers,
        }
    }

    pub fn layer_prefix(&self, i: usize) -> String {
        format!("{}.{}", self.prefix, i)
    }

    pub fn output_shape(&self, mut s: Shape5) -> Result<Shape5> {
        for l in &self.layers {
            s = l.output_shape(s)?;
        }
        Ok(s)
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            l.init_params(&self.layer_prefix(i), store, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, store: &ParamStore<T>) -> Result<Var> {
        self.forward_split(g, x, store).map(|(out, _)| out)
    }

    /// Like [`Sequential::forward`] but also returns the input of the last layer.
    pub fn forward_split<T: Real>(&self, g: &mut Graph<T>, x: Var, store: &ParamStore<T>) -> Result<(Var, Var)> {
        let mut h = x;
        let mut before_last = x;
        for (i, l) in self.layers.iter().enumerate() {
            before_last = h;
            h = l.forward(g, h, store, &self.layer_prefix(i))?;
        }
        Ok((h, before_last))
    }
}
