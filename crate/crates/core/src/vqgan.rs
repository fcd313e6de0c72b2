//! VQ-GAN assembly: encoder, codebook quantiser, decoder, patch
//! discriminator, and the loss terms that train them.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffnet::{
    kernels, ConvGeom, Graph, LayerSpec, Mode, ParamStore, Real, Sequential, Shape5, Tensor, Var,
};
use crate::error::{arg_err, Error, Result};
use crate::volume::Dims;

pub const ENCODER: &str = "enc";
pub const DECODER: &str = "dec";
pub const DISCRIMINATOR: &str = "disc";
/// Parameter name of the `(K, d, 1, 1, 1)` codebook table.
pub const CODEBOOK: &str = "codebook.embedding";

/// Upper clamp on the adaptive adversarial weight.
pub const LAMBDA_MAX: f64 = 1e4;
pub const LAMBDA_DELTA: f64 = 1e-6;
/// Fixed factor in the adaptive weight.
pub const LAMBDA_SCALE: f64 = 0.8;

/// Width and depth knobs from which a [`ModelSpec`] is built.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Cubic model input edge.
    pub input: usize,
    /// Output channels of each encoder down block (one halving each).
    pub enc_channels: Vec<usize>,
    /// Channels of the residual and attention blocks at latent resolution.
    pub latent_channels: usize,
    /// Output channels of each decoder up block.
    pub dec_channels: Vec<usize>,
    pub embed_dim: usize,
    pub codebook_size: usize,
    pub disc_channels: usize,
    pub beta: f64,
}

impl ArchConfig {
    /// Desk-scale network for 32³ inputs with an 8³ latent grid.
    pub fn desk() -> Self {
        ArchConfig {
            input: 32,
            enc_channels: vec![8, 32],
            latent_channels: 32,
            dec_channels: vec![8, 4],
            embed_dim: 16,
            codebook_size: 256,
            disc_channels: 8,
            beta: 0.25,
        }
    }

    /// Full-size network: 64³ inputs, 8³ latent grid, `K = 256`, `d = 64`.
    pub fn full() -> Self {
        ArchConfig {
            input: 64,
            enc_channels: vec![32, 64, 128],
            latent_channels: 128,
            dec_channels: vec![64, 32, 16],
            embed_dim: 64,
            codebook_size: 256,
            disc_channels: 32,
            beta: 0.25,
        }
    }
}

/// Layer lists of every sub-network plus quantiser settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input: Dims,
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub discriminator: Sequential,
    pub codebook_size: usize,
    pub embed_dim: usize,
    pub beta: f64,
}

impl ModelSpec {
    pub fn from_arch(a: &ArchConfig) -> Result<Self> {
        if a.enc_channels.is_empty() || a.enc_channels.len() != a.dec_channels.len() {
            return Err(arg_err!("encoder and decoder need the same nonzero number of resolution stages"));
        }
        let mut enc = Vec::new();
        let mut c = 1;
        for &co in &a.enc_channels {
            enc.push(LayerSpec::DownBlock { cin: c, cout: co });
            c = co;
        }
        let lc = a.latent_channels;
        enc.push(LayerSpec::ResidualBlock { cin: c, cout: lc });
        enc.push(LayerSpec::NonLocalBlock {
            channels: lc,
            inner: (lc / 2).max(1),
        });
        enc.push(LayerSpec::conv(lc, a.embed_dim, 1));

        let mut dec = vec![
            LayerSpec::conv(a.embed_dim, lc, 3),
            LayerSpec::ResidualBlock { cin: lc, cout: lc },
            LayerSpec::NonLocalBlock {
                channels: lc,
                inner: (lc / 2).max(1),
            },
        ];
        let mut c = lc;
        for &co in &a.dec_channels {
            dec.push(LayerSpec::UpBlock { cin: c, cout: co });
            c = co;
        }
        dec.push(LayerSpec::conv(c, 1, 3));

        let f = a.disc_channels;
        let disc = vec![
            LayerSpec::Conv3 {
                cin: 1,
                cout: f,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            LayerSpec::Activation,
            LayerSpec::DownBlock { cin: f, cout: 2 * f },
            LayerSpec::DownBlock { cin: 2 * f, cout: 4 * f },
            LayerSpec::conv(4 * f, 1, 3),
        ];
        let spec = ModelSpec {
            input: Dims::cube(a.input),
            encoder: Sequential::new(ENCODER, enc),
            decoder: Sequential::new(DECODER, dec),
            discriminator: Sequential::new(DISCRIMINATOR, disc),
            codebook_size: a.codebook_size,
            embed_dim: a.embed_dim,
            beta: a.beta,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_shape(&self, n: usize) -> Shape5 {
        Shape5::new(n, 1, self.input.d, self.input.h, self.input.w)
    }

    pub fn latent_shape(&self, n: usize) -> Result<Shape5> {
        self.encoder.output_shape(self.input_shape(n))
    }

    pub fn patch_shape(&self, n: usize) -> Result<Shape5> {
        self.discriminator.output_shape(self.input_shape(n))
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(arg_err!("codebook needs at least two vectors"));
        }
        if !(self.beta > 0.0) {
            return Err(arg_err!("commitment weight must be positive"));
        }
        let latent = self.latent_shape(1)?;
        if latent.c() != self.embed_dim {
            return Err(arg_err!("encoder emits {} channels, codebook dim is {}", latent.c(), self.embed_dim));
        }
        let out = self.decoder.output_shape(latent)?;
        if out != self.input_shape(1) {
            return Err(arg_err!("decoder output {:?} does not match input {:?}", out.0, self.input_shape(1).0));
        }
        if !matches!(self.decoder.layers.last(), Some(LayerSpec::Conv3 { .. })) {
            return Err(arg_err!("decoder must end in a plain conv layer"));
        }
        let patches = self.patch_shape(1)?;
        if patches.c() != 1 || patches.plane() == 0 {
            return Err(arg_err!("discriminator must emit a one-channel patch grid"));
        }
        Ok(())
    }

    /// Geometry of the decoder's final conv (the balancing layer).
    pub fn last_layer(&self) -> (alloc::string::String, ConvGeom, Shape5) {
        let i = self.decoder.layers.len() - 1;
        match self.decoder.layers[i] {
            LayerSpec::Conv3 {
                cin,
                cout,
                kernel,
                stride,
                pad,
            } => (
                alloc::format!("{}.weight", self.decoder.layer_prefix(i)),
                ConvGeom::new(kernel, stride, pad),
                Shape5::new(cout, cin, kernel, kernel, kernel),
            ),
            _ => unreachable!("validated at construction"),
        }
    }

    /// Fresh parameters for every sub-network and the codebook.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        use rand::{Rng, SeedableRng};
        let mut store = crate::diffnet::init_params(&[&self.encoder, &self.decoder, &self.discriminator], seed)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE_B00C);
        let k = self.codebook_size;
        let bound = 1.0 / k as f64;
        let table = (0..k * self.embed_dim)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        store.insert(CODEBOOK, Tensor::new(Shape5::new(k, self.embed_dim, 1, 1, 1), table)?, true)?;
        Ok(store)
    }
}

/// A view of `K` embedding vectors of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<'a, T> {
    pub vectors: &'a [T],
    pub k: usize,
    pub d: usize,
    pub beta: f64,
}

impl<'a, T: Real> Codebook<'a, T> {
    pub fn new(vectors: &'a [T], d: usize, beta: f64) -> Result<Self> {
        if d == 0 || !vectors.len().is_multiple_of(d) || vectors.len() / d < 2 {
            return Err(arg_err!("codebook of {} values cannot hold ≥2 vectors of dim {d}", vectors.len()));
        }
        if !(beta > 0.0) {
            return Err(arg_err!("commitment weight must be positive"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite codebook entry".into()));
        }
        Ok(Codebook {
            vectors,
            k: vectors.len() / d,
            d,
            beta,
        })
    }

    pub fn from_store(store: &'a ParamStore<T>, spec: &ModelSpec) -> Result<Self> {
        Self::new(store.tensor(CODEBOOK)?.data(), spec.embed_dim, spec.beta)
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    /// Index of the nearest vector to `z` (first index wins ties).
    pub fn nearest(&self, z: &[T]) -> u32 {
        let mut best = f64::INFINITY;
        let mut bi = 0;
        for k in 0..self.k {
            let dist: f64 = self
                .row(k)
                .iter()
                .zip(z)
                .map(|(e, v)| {
                    let t = (e.f64()) - v.f64();
                    t * t
                })
                .sum();
            if dist < best {
                best = dist;
                bi = k;
            }
        }
        bi as u32
    }
}

/// Snaps each spatial position's channel vector to its nearest codebook entry.
/// Returns the quantised tensor and one index per `(n, z, y, x)` position.
pub fn quantize<T: Real>(z_e: &Tensor<T>, cb: &Codebook<'_, T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = z_e.shape();
    if s.c() != cb.d {
        return Err(arg_err!("latent has {} channels, codebook dim is {}", s.c(), cb.d));
    }
    let (n, d, p) = (s.n(), s.c(), s.plane());
    let mut out = vec![T::zero(); s.numel()];
    let mut idx = Vec::with_capacity(n * p);
    let mut v = vec![T::zero(); d];
    for b in 0..n {
        for pos in 0..p {
            for c in 0..d {
                v[c] = z_e.data()[(b * d + c) * p + pos];
            }
            let k = cb.nearest(&v);
            idx.push(k);
            for (c, &e) in cb.row(k as usize).iter().enumerate() {
                out[(b * d + c) * p + pos] = e;
            }
        }
    }
    Ok((Tensor::new(s, out)?, idx))
}

/// Handles produced by [`generator_forward`].
#[derive(Debug, Clone)]
pub struct GenOutputs {
    pub x_hat: Var,
    /// Input to the decoder's last conv.
    pub last_input: Var,
    pub z_e: Var,
    /// Straight-through quantised latent.
    pub z_q: Var,
    pub indices: Vec<u32>,
}

/// Encoder → quantiser → decoder. The decoder runs in `decoder_mode`, the
/// encoder in the graph's current mode.
pub fn generator_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    spec: &ModelSpec,
    store: &ParamStore<T>,
    decoder_mode: Mode,
) -> Result<GenOutputs> {
    let s = g.shape(x);
    if s.c() != 1 || s.spatial() != spec.input.as_array() {
        return Err(arg_err!("generator input {:?} does not match model input {:?}", s.0, spec.input));
    }
    let z_e = spec.encoder.forward(g, x, store)?;
    let cb = Codebook::from_store(store, spec)?;
    let (zq, indices) = quantize(g.value(z_e), &cb)?;
    let z_q = g.straight_through(z_e, zq)?;
    let enc_mode = g.mode();
    g.set_mode(decoder_mode);
    let res = spec.decoder.forward_split(g, z_q, store);
    g.set_mode(enc_mode);
    let (x_hat, last_input) = res?;
    Ok(GenOutputs {
        x_hat,
        last_input,
        z_e,
        z_q,
        indices,
    })
}

/// Patch logits of the discriminator.
pub fn discriminator_forward<T: Real>(g: &mut Graph<T>, x: Var, spec: &ModelSpec, store: &ParamStore<T>) -> Result<Var> {
    let s = g.shape(x);
    if s.c() != 1 || s.spatial() != spec.input.as_array() {
        return Err(arg_err!("discriminator input {:?} does not match model input {:?}", s.0, spec.input));
    }
    spec.discriminator.forward(g, x, store)
}

/// Codebook and commitment terms. The first moves only the codebook, the
/// second (already scaled by β) only the encoder; both average squared
/// distances over latent positions.
pub fn vq_loss<T: Real>(g: &mut Graph<T>, out: &GenOutputs, spec: &ModelSpec, store: &ParamStore<T>) -> Result<(Var, Var)> {
    let table = g.param(store, CODEBOOK)?;
    let shape = g.shape(out.z_e);
    let e = g.gather(table, out.indices.clone(), shape)?;
    let positions = (shape.n() * shape.plane()) as f64;
    let ze_const = g.detach(out.z_e)?;
    let e_const = g.detach(e)?;
    let codebook_term = g.sq_dist(ze_const, e, positions)?;
    let commit = g.sq_dist(out.z_e, e_const, positions)?;
    let commit_term = g.scale(commit, T::of(spec.beta))?;
    Ok((codebook_term, commit_term))
}

/// Mean squared reconstruction error.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, x_hat: Var, x: Var) -> Result<Var> {
    g.mse(x_hat, x)
}

/// `mean(softplus(-logit))`, i.e. `-mean(log σ(logit))` on generated patches.
pub fn generator_adv_loss<T: Real>(g: &mut Graph<T>, fake_logits: Var) -> Result<Var> {
    g.softplus_mean(fake_logits, -1.0)
}

/// Binary cross-entropy with real patches labelled 1 and fake patches 0.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let r = g.softplus_mean(real_logits, -1.0)?;
    let f = g.softplus_mean(fake_logits, 1.0)?;
    g.add(r, f)
}

/// Adaptive adversarial weight `0.8 · ‖∇recon‖ / (‖∇adv‖ + δ)`, both
/// gradients taken at the decoder's last layer, clamped to `[0, 1e4]`.
pub fn lambda_balance<T: Real>(grad_recon: &[T], grad_adv: &[T], delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(arg_err!("δ must be positive"));
    }
    let norm = |g: &[T]| libm::sqrt(g.iter().map(|v| v.f64() * v.f64()).sum::<f64>());
    let (r, a) = (norm(grad_recon), norm(grad_adv));
    if !r.is_finite() || !a.is_finite() {
        return Err(Error::Numeric("non-finite gradient in adversarial balancing".into()));
    }
    Ok((LAMBDA_SCALE * r / (a + delta)).clamp(0.0, LAMBDA_MAX))
}

/// Gradient of the decoder's last conv weight given a gradient at `x_hat`.
pub fn last_layer_grad<T: Real>(g: &Graph<T>, out: &GenOutputs, spec: &ModelSpec, grad_x_hat: &[T]) -> Result<Vec<T>> {
    let (_, geom, wshape) = spec.last_layer();
    let go = Tensor::new(g.shape(out.x_hat), grad_x_hat.to_vec())?;
    let (gw, _) = kernels::conv3d_grad_params(&go, g.value(out.last_input), wshape, geom);
    Ok(gw.into_data())
}

/// Eval-mode reconstruction of a batch of model-sized inputs.
pub fn reconstruct_eval<T: Real>(spec: &ModelSpec, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.input(x.clone(), false)?;
    let out = generator_forward(&mut g, xi, spec, store, Mode::Eval)?;
    Ok(g.value(out.x_hat).clone())
}

/// Eval-mode codebook indices of a batch of model-sized inputs.
pub fn encode_indices<T: Real>(spec: &ModelSpec, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<u32>> {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.input(x.clone(), false)?;
    let z = spec.encoder.forward(&mut g, xi, store)?;
    let cb = Codebook::from_store(store, spec)?;
    Ok(quantize(g.value(z), &cb)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_and_ties() {
        let cb = Codebook::new(&[0.0f64, 0.0, 1.0, 1.0], 2, 0.25).unwrap();
        assert_eq!(cb.nearest(&[0.2, 0.1]), 0);
        assert_eq!(cb.nearest(&[1.0, 1.0]), 1);
        let four = [0.0f64, 0.0, -1.0, 0.0, 5.0, 5.0, 1.0, 0.0];
        let cb = Codebook::new(&four, 2, 0.25).unwrap();
        assert_eq!(cb.nearest(&[0.0, 0.0]), 0);
        let cb = Codebook::new(&four[2..], 2, 0.25).unwrap();
        // equidistant between rows 0 (-1,0) and 2 (1,0): lowest index wins
        assert_eq!(cb.nearest(&[0.0, 0.0]), 0);
    }

    #[test]
    fn codebook_validation() {
        assert!(Codebook::new(&[0.0f64, 1.0], 2, 0.25).is_err());
        assert!(Codebook::new(&[0.0f64, 1.0, 2.0, 3.0], 2, 0.0).is_err());
        assert!(Codebook::new(&[0.0f64, f64::NAN, 2.0, 3.0], 2, 0.25).is_err());
    }

    #[test]
    fn quantize_rejects_wrong_dim() {
        let cb = Codebook::new(&[0.0f64, 0.0, 1.0, 1.0], 2, 0.25).unwrap();
        let z = Tensor::<f64>::zeros(Shape5::new(1, 3, 1, 1, 1));
        assert!(quantize(&z, &cb).is_err());
    }

    #[test]
    fn lambda_cases() {
        let l = lambda_balance(&[0.8f64], &[0.2], 1e-12).unwrap();
        assert!((l - 3.2).abs() < 1e-9);
        assert_eq!(lambda_balance(&[0.0f64; 3], &[1.0, 2.0, 3.0], 1e-6).unwrap(), 0.0);
        assert_eq!(lambda_balance(&[1.0f64], &[0.0], 1e-6).unwrap(), LAMBDA_MAX);
        assert!(lambda_balance(&[f64::NAN], &[0.0], 1e-6).is_err());
    }

    #[test]
    fn specs_validate() {
        let d = ModelSpec::from_arch(&ArchConfig::desk()).unwrap();
        assert_eq!(d.latent_shape(1).unwrap(), Shape5::new(1, 16, 8, 8, 8));
        assert_eq!(d.patch_shape(1).unwrap(), Shape5::new(1, 1, 4, 4, 4));
        let f = ModelSpec::from_arch(&ArchConfig::full()).unwrap();
        assert_eq!(f.latent_shape(1).unwrap(), Shape5::new(1, 64, 8, 8, 8));
        assert_eq!(f.patch_shape(1).unwrap(), Shape5::new(1, 1, 8, 8, 8));
        let bad = ArchConfig { dec_channels: vec![8], ..ArchConfig::desk() };
        assert!(ModelSpec::from_arch(&bad).is_err());
    }
}
