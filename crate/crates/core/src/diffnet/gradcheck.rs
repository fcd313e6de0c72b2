//! Central finite-difference checks of layer gradients in f64.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{init_params, Graph, LayerSpec, Mode, ParamStore, Sequential, Shape5, Tensor};
use crate::error::Result;

/// Tolerances and sampling for [`check_layer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub trials: usize,
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute slack for derivatives that are exactly zero, where the
    /// central difference only sees rounding noise.
    pub abs_floor: f64,
    /// Coordinates probed per tensor per trial.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            trials: 20,
            step: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            probes: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Largest relative error among derivatives big enough for the relative
    /// test to dominate the absolute floor.
    pub max_rel_err: f64,
    /// Largest absolute error among the remaining, near-zero derivatives.
    pub max_abs_err_small: f64,
    /// Up to the first few mismatches, for diagnostics.
    pub failures: Vec<String>,
    pub mismatches: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.checked > 0
    }
}

impl GradCheck {
    fn compare(&self, rep: &mut GradReport, what: &dyn Fn() -> String, analytic: f64, numeric: f64) {
        rep.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        let err = (analytic - numeric).abs();
        if scale * self.rel_tol >= self.abs_floor {
            rep.max_rel_err = rep.max_rel_err.max(err / scale);
        } else {
            rep.max_abs_err_small = rep.max_abs_err_small.max(err);
        }
        if err > self.rel_tol * scale + self.abs_floor {
            rep.mismatches += 1;
            if rep.failures.len() < 5 {
                rep.failures.push(format!("{}: analytic {analytic} numeric {numeric}", what()));
            }
        }
    }
}

fn objective(net: &Sequential, store: &ParamStore<f64>, x: &Tensor<f64>, r: &[f64]) -> Result<f64> {
    let mut g = Graph::new(Mode::Train);
    let xv = g.input(x.clone(), false)?;
    let y = net.forward(&mut g, xv, store)?;
    Ok(g.value(y).data().iter().zip(r).map(|(a, b)| a * b).sum())
}

/// Checks input and parameter gradients of `sum(layer(x) * r)` for random
/// inputs, perturbed parameters and random projections `r`.
///
/// With `avoid_zero`, inputs are drawn with magnitude at least 0.05 so a
/// rectifier kink never falls within one finite-difference step.
pub fn check_layer(layer: &LayerSpec, input: Shape5, avoid_zero: bool, cfg: &GradCheck) -> Result<GradReport> {
    let net = Sequential::new("net", vec![*layer]);
    let out_shape = net.output_shape(input)?;
    let mut rep = GradReport::default();
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial as u64));
        let mut store: ParamStore<f64> = init_params(&[&net], cfg.seed ^ trial as u64)?;
        let names: Vec<String> = store.names().into_iter().map(String::from).collect();
        for name in &names {
            for v in store.tensor_mut(name)?.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let xdata: Vec<f64> = (0..input.numel())
            .map(|_| {
                if avoid_zero {
                    let m = rng.gen_range(0.05..1.0);
                    if rng.gen_bool(0.5) { m } else { -m }
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        let x = Tensor::new(input, xdata)?;
        let r: Vec<f64> = (0..out_shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new(Mode::Train);
        let xv = g.input(x.clone(), true)?;
        let y = net.forward(&mut g, xv, &store)?;
        g.backward_seeded(&[(y, r.clone())])?;
        let gx = g.grad(xv).map(|s| s.to_vec()).unwrap_or_default();
        let gp: BTreeMap<String, Vec<f64>> = g.param_grads();
        if gp.len() != names.len() || gx.len() != x.data().len() {
            rep.mismatches += 1;
            rep.failures.push(format!("trial {trial}: missing gradients"));
            continue;
        }

        let h = cfg.step;
        for _ in 0..cfg.probes {
            let i = rng.gen_range(0..x.data().len());
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (objective(&net, &store, &xp, &r)? - objective(&net, &store, &xm, &r)?) / (2.0 * h);
            cfg.compare(&mut rep, &|| format!("trial {trial} input[{i}]"), gx[i], num);
        }
        for (name, grad) in &gp {
            for _ in 0..cfg.probes {
                let i = rng.gen_range(0..grad.len());
                let mut sp = store.clone();
                sp.tensor_mut(name)?.data_mut()[i] += h;
                let mut sm = store.clone();
                sm.tensor_mut(name)?.data_mut()[i] -= h;
                let num = (objective(&net, &sp, &x, &r)? - objective(&net, &sm, &x, &r)?) / (2.0 * h);
                cfg.compare(&mut rep, &|| format!("trial {trial} {name}[{i}]"), grad[i], num);
            }
        }
    }
    Ok(rep)
}

/// One representative configuration of every layer kind, with the input
/// shape it is checked on and whether inputs must avoid zero.
pub fn layer_suite() -> Vec<(&'static str, LayerSpec, Shape5, bool)> {
    vec![
        ("conv3", LayerSpec::conv(2, 3, 3), Shape5::new(2, 2, 4, 4, 4), false),
        (
            "conv3_strided",
            LayerSpec::Conv3 { cin: 2, cout: 2, kernel: 2, stride: 2, pad: 0 },
            Shape5::new(1, 2, 4, 4, 4),
            false,
        ),
        ("down_block", LayerSpec::DownBlock { cin: 2, cout: 3 }, Shape5::new(2, 2, 4, 4, 4), false),
        ("up_block", LayerSpec::UpBlock { cin: 3, cout: 2 }, Shape5::new(2, 3, 2, 2, 2), false),
        ("residual_block", LayerSpec::ResidualBlock { cin: 2, cout: 3 }, Shape5::new(2, 2, 3, 3, 3), false),
        ("residual_block_identity", LayerSpec::ResidualBlock { cin: 2, cout: 2 }, Shape5::new(2, 2, 3, 3, 3), false),
        ("non_local_block", LayerSpec::NonLocalBlock { channels: 3, inner: 2 }, Shape5::new(2, 3, 2, 3, 2), false),
        ("batch_norm", LayerSpec::BatchNorm { channels: 3 }, Shape5::new(2, 3, 3, 3, 3), false),
        ("activation", LayerSpec::Activation, Shape5::new(2, 2, 3, 3, 3), true),
        ("max_filter", LayerSpec::MaxFilter { kernel: 3, stride: 1, pad: 1 }, Shape5::new(1, 2, 4, 4, 4), false),
        ("max_pool", LayerSpec::MaxFilter { kernel: 2, stride: 2, pad: 0 }, Shape5::new(2, 1, 4, 4, 4), false),
    ]
}
