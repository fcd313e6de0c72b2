//! Two-stage training: stage 1 fits the whole VQ-GAN on healthy volumes,
//! stage 2 retrains only the encoder to fill masked-out anatomy.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffnet::{Graph, Mode, ParamStore, Real, Tensor};
use crate::error::{arg_err, Error, Result};
use crate::preprocess::{mask_apply, pad_to, random_crop_with, random_cubes_into, teeth_mask, MaskParams};
use crate::volume::{Dims, VolumeGrid, VolumeKind};
use crate::vqgan::{
    discriminator_forward, discriminator_loss, generator_adv_loss, generator_forward, lambda_balance,
    last_layer_grad, vq_loss, ArchConfig, ModelSpec, CODEBOOK, DECODER, DISCRIMINATOR, ENCODER, LAMBDA_DELTA,
};

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameter groups that stage 2 may hold fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FreezeGroup {
    Encoder,
    Codebook,
    Decoder,
    Discriminator,
}

impl FreezeGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            FreezeGroup::Encoder => "enc.",
            FreezeGroup::Codebook => "codebook.",
            FreezeGroup::Decoder => "dec.",
            FreezeGroup::Discriminator => "disc.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FreezeGroup::Encoder => ENCODER,
            FreezeGroup::Codebook => "codebook",
            FreezeGroup::Decoder => DECODER,
            FreezeGroup::Discriminator => DISCRIMINATOR,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "enc" | "encoder" => FreezeGroup::Encoder,
            "codebook" => FreezeGroup::Codebook,
            "dec" | "decoder" => FreezeGroup::Decoder,
            "disc" | "discriminator" => FreezeGroup::Discriminator,
            _ => return Err(arg_err!("unknown parameter group {s:?}")),
        })
    }
}

/// How stage 2 hides anatomy from the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Teeth mask with probability `teeth_mask_prob`, random cubes otherwise,
    /// drawn per sample.
    Mixed,
    TeethOnly,
    CubesOnly,
    /// No masking: stage 2 becomes encoder fine-tuning.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
    /// First epoch (0-based) with the adversarial term; `None` means 10% of
    /// the stage's epochs, `Some(usize::MAX)` disables it.
    pub disc_start_epoch: Option<usize>,
    pub freeze: Vec<FreezeGroup>,
    pub mask: MaskParams,
    pub mask_policy: MaskPolicy,
    pub teeth_mask_prob: f64,
    /// Re-initialise the encoder at the start of stage 2 instead of
    /// warm-starting from stage 1.
    pub fresh_encoder: bool,
    /// Seed the codebook from encoder outputs on the first batch.
    pub codebook_from_data: bool,
    pub adam: AdamParams,
    /// From this epoch of each stage on, the learning rate is multiplied by
    /// `lr_decay_factor`. `None` keeps it constant.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 8,
            epochs_stage1: 300,
            epochs_stage2: 100,
            seed: 0,
            disc_start_epoch: None,
            freeze: vec![FreezeGroup::Codebook, FreezeGroup::Decoder],
            mask: MaskParams::default(),
            mask_policy: MaskPolicy::Mixed,
            teeth_mask_prob: 0.5,
            fresh_encoder: false,
            codebook_from_data: true,
            adam: AdamParams::default(),
            lr_decay_epoch: None,
            lr_decay_factor: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(arg_err!("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(arg_err!("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.teeth_mask_prob) {
            return Err(arg_err!("teeth mask probability {} outside [0, 1]", self.teeth_mask_prob));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(arg_err!("learning-rate decay factor must lie in (0, 1]"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(arg_err!("invalid Adam hyperparameters {a:?}"));
        }
        self.mask.validate()
    }

    pub fn disc_start(&self, stage_epochs: usize) -> usize {
        self.disc_start_epoch.unwrap_or(stage_epochs / 10)
    }

    /// Learning rate for a 0-based epoch within a stage.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(e) if epoch >= e => self.learning_rate * self.lr_decay_factor,
            _ => self.learning_rate,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

/// One bias-corrected Adam step over every trainable parameter in `grads`.
/// Frozen parameters and names absent from `grads` are left alone. Any
/// non-finite gradient aborts the step before anything is modified.
pub fn adam_update(
    store: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    for (name, g) in grads {
        let p = store.get(name)?;
        if g.len() != p.tensor.data().len() {
            return Err(arg_err!("gradient for {name} has {} values, parameter has {}", g.len(), p.tensor.data().len()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(alloc::format!("non-finite gradient for {name}; step skipped")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(hp.beta1, t as f64);
    let c2 = 1.0 - libm::pow(hp.beta2, t as f64);
    for (name, g) in grads {
        if !store.get(name)?.trainable {
            continue;
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let w = store.tensor_mut(name)?.data_mut();
        for i in 0..g.len() {
            let gi = g[i] as f64;
            let mi = hp.beta1 * m[i] as f64 + (1.0 - hp.beta1) * gi;
            let vi = hp.beta2 * v[i] as f64 + (1.0 - hp.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = lr * (mi / c1) / (libm::sqrt(vi / c2) + hp.eps);
            w[i] = (w[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLosses {
    pub epoch: usize,
    pub recon: f64,
    pub vq: f64,
    pub adv: f64,
    pub lambda: f64,
    pub disc: f64,
}

/// Exact position of the trainer's random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub arch: ArchConfig,
    pub params: ParamStore<f32>,
    pub gen_opt: AdamState,
    pub disc_opt: AdamState,
    pub rng: RngState,
    pub epochs_done: usize,
    pub losses: Vec<EpochLosses>,
    /// Free-form `key=value` configuration snapshot.
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::from_arch(&self.arch)
    }
}

/// Training state for one stage; each call to [`Trainer::epoch`] is one pass
/// over the dataset. A failed epoch leaves the parameters as of the last
/// successful optimiser step.
pub struct Trainer {
    spec: ModelSpec,
    arch: ArchConfig,
    cfg: TrainConfig,
    stage: u8,
    store: ParamStore<f32>,
    gen_opt: AdamState,
    disc_opt: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
    losses: Vec<EpochLosses>,
    needs_codebook_init: bool,
}

impl Trainer {
    pub fn stage1(arch: &ArchConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = ModelSpec::from_arch(arch)?;
        let store = spec.init_params(cfg.seed)?;
        Ok(Trainer {
            spec,
            arch: arch.clone(),
            cfg: cfg.clone(),
            stage: 1,
            store,
            gen_opt: AdamState::default(),
            disc_opt: AdamState::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0001),
            epoch: 0,
            losses: Vec::new(),
            needs_codebook_init: cfg.codebook_from_data,
        })
    }

    pub fn stage2(ckpt1: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ckpt1.stage != 1 {
            return Err(Error::State(alloc::format!("stage 2 needs a stage-1 checkpoint, got stage {}", ckpt1.stage)));
        }
        let spec = ckpt1.spec()?;
        let mut store = ckpt1.params.clone();
        if cfg.fresh_encoder {
            let fresh = crate::diffnet::init_params::<f32>(&[&spec.encoder], cfg.seed ^ 0xE7C0_DE02)?;
            for (name, p) in fresh.params() {
                *store.tensor_mut(name)? = p.tensor.clone();
            }
            for (name, b) in fresh.buffers() {
                store.set_buffer(name, b.clone())?;
            }
        }
        for g in &cfg.freeze {
            store.set_trainable(g.prefix(), false);
        }
        Ok(Trainer {
            spec,
            arch: ckpt1.arch.clone(),
            cfg: cfg.clone(),
            stage: 2,
            store,
            gen_opt: AdamState::default(),
            disc_opt: ckpt1.disc_opt.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0002),
            epoch: 0,
            losses: Vec::new(),
            needs_codebook_init: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn losses(&self) -> &[EpochLosses] {
        &self.losses
    }

    fn stage_epochs(&self) -> usize {
        if self.stage == 1 {
            self.cfg.epochs_stage1
        } else {
            self.cfg.epochs_stage2
        }
    }

    fn frozen(&self, g: FreezeGroup) -> bool {
        self.stage == 2 && self.cfg.freeze.contains(&g)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            arch: self.arch.clone(),
            params: self.store.clone(),
            gen_opt: self.gen_opt.clone(),
            disc_opt: self.disc_opt.clone(),
            rng: RngState::capture(&self.rng),
            epochs_done: self.epoch,
            losses: self.losses.clone(),
            meta: Vec::new(),
        }
    }

    /// One pass over `data` (normalised scalar volumes at least model-sized
    /// after padding).
    pub fn epoch(&mut self, data: &[VolumeGrid]) -> Result<EpochLosses> {
        if data.is_empty() {
            return Err(arg_err!("empty training set"));
        }
        if let Some(v) = data.iter().find(|v| v.kind() != VolumeKind::Scalar) {
            return Err(arg_err!("training volumes must be scalar, got {:?}", v.kind()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let adversarial = self.epoch >= self.cfg.disc_start(self.stage_epochs());
        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (input, target) = self.assemble(data, chunk)?;
            if self.needs_codebook_init {
                self.init_codebook(&input)?;
                self.needs_codebook_init = false;
            }
            let r = self.step(input, target, adversarial)?;
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
            steps += 1;
        }
        let n = steps as f64;
        let l = EpochLosses {
            epoch: self.epoch,
            recon: sums[0] / n,
            vq: sums[1] / n,
            adv: sums[2] / n,
            lambda: sums[3] / n,
            disc: sums[4] / n,
        };
        self.epoch += 1;
        self.losses.push(l);
        Ok(l)
    }

    /// Input and target batches; they differ only in stage 2.
    fn assemble(&mut self, data: &[VolumeGrid], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let size = self.spec.input;
        let mut inputs = Vec::with_capacity(idx.len() * size.len());
        let mut targets = Vec::with_capacity(idx.len() * size.len());
        for &i in idx {
            let v = &data[i];
            let d = v.dims();
            let padded;
            let src = if d.fits(size) {
                v
            } else {
                let t = Dims::new(d.d.max(size.d), d.h.max(size.h), d.w.max(size.w));
                padded = pad_to(v, t, 0.0)?;
                &padded
            };
            let (x, _) = random_crop_with(src, size, &mut self.rng)?;
            let masked = if self.stage == 2 { self.mask_for(&x)? } else { None };
            match masked {
                Some(xm) => inputs.extend_from_slice(xm.scalars()?),
                None => inputs.extend_from_slice(x.scalars()?),
            }
            targets.extend_from_slice(x.scalars()?);
        }
        let shape = self.spec.input_shape(idx.len());
        Ok((Tensor::new(shape, inputs)?, Tensor::new(shape, targets)?))
    }

    fn mask_for(&mut self, x: &VolumeGrid) -> Result<Option<VolumeGrid>> {
        let p = &self.cfg.mask;
        let teeth = match self.cfg.mask_policy {
            MaskPolicy::None => return Ok(None),
            MaskPolicy::TeethOnly => true,
            MaskPolicy::CubesOnly => false,
            MaskPolicy::Mixed => self.rng.gen_bool(self.cfg.teeth_mask_prob),
        };
        let m = if teeth {
            teeth_mask(x, p)?
        } else {
            let mut bits = vec![0u8; x.dims().len()];
            random_cubes_into(&mut bits, x.dims(), p, &mut self.rng)?;
            VolumeGrid::mask(x.dims(), x.spacing(), bits)?
        };
        Ok(Some(mask_apply(x, &m, p.mask_fill)?))
    }

    /// Replaces the codebook with encoder outputs drawn from one batch.
    fn init_codebook(&mut self, input: &Tensor<f32>) -> Result<()> {
        let mut g = Graph::new(Mode::Train);
        let x = g.input(input.clone(), false)?;
        let z = self.spec.encoder.forward(&mut g, x, &self.store)?;
        let zt = g.value(z);
        let (n, d, p) = (zt.shape().n(), zt.shape().c(), zt.shape().plane());
        let k = self.spec.codebook_size;
        let table = self.store.tensor_mut(CODEBOOK)?.data_mut();
        for row in 0..k {
            let b = self.rng.gen_range(0..n);
            let pos = self.rng.gen_range(0..p);
            for c in 0..d {
                let jitter = self.rng.gen_range(-1e-3f32..1e-3);
                table[row * d + c] = zt.data()[(b * d + c) * p + pos] + jitter;
            }
        }
        Ok(())
    }

    /// Generator update followed by a discriminator update. Returns
    /// `[recon, vq, adv, lambda, disc]`.
    fn step(&mut self, input: Tensor<f32>, target: Tensor<f32>, adversarial: bool) -> Result<[f64; 5]> {
        let spec = &self.spec;
        let mut g = Graph::new(Mode::Train);
        g.freeze_prefix(FreezeGroup::Discriminator.prefix());
        for grp in [FreezeGroup::Encoder, FreezeGroup::Codebook, FreezeGroup::Decoder] {
            if self.frozen(grp) {
                g.freeze_prefix(grp.prefix());
            }
        }
        let dec_mode = if self.frozen(FreezeGroup::Decoder) { Mode::Eval } else { Mode::Train };
        let x = g.input(input, false)?;
        let out = generator_forward(&mut g, x, spec, &self.store, dec_mode)?;
        let (cb_term, commit_term) = vq_loss(&mut g, &out, spec, &self.store)?;
        let x_hat = g.value(out.x_hat).clone();
        let numel = x_hat.data().len() as f64;
        let mut recon = 0.0;
        let mut seed: Vec<f32> = Vec::with_capacity(x_hat.data().len());
        for (a, b) in x_hat.data().iter().zip(target.data()) {
            let diff = *a as f64 - *b as f64;
            recon += diff * diff;
            seed.push((2.0 * diff / numel) as f32);
        }
        recon /= numel;
        let vq = g.value(cb_term).item() as f64 + g.value(commit_term).item() as f64;

        let (mut adv, mut lambda, mut disc) = (0.0, 0.0, 0.0);
        if adversarial {
            let mut dg = Graph::new(Mode::Train);
            dg.freeze_prefix(FreezeGroup::Discriminator.prefix());
            let xh = dg.input(x_hat.clone(), true)?;
            let logits = discriminator_forward(&mut dg, xh, spec, &self.store)?;
            let adv_loss = generator_adv_loss(&mut dg, logits)?;
            dg.backward(adv_loss)?;
            adv = dg.value(adv_loss).item() as f64;
            let g_adv = dg.grad(xh).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; seed.len()]);
            // G_L may be frozen in stage 2; its gradient is still defined.
            let wr = last_layer_grad(&g, &out, spec, &seed)?;
            let wa = last_layer_grad(&g, &out, spec, &g_adv)?;
            lambda = lambda_balance(&wr, &wa, LAMBDA_DELTA)?;
            for (s, a) in seed.iter_mut().zip(&g_adv) {
                *s += (lambda * *a as f64) as f32;
            }
        }
        g.backward_seeded(&[(out.x_hat, seed), (cb_term, vec![1.0]), (commit_term, vec![1.0])])?;
        let grads = g.param_grads();
        let updates = g.take_buffer_updates();
        adam_update(&mut self.store, &grads, &mut self.gen_opt, self.cfg.lr_at(self.epoch), self.cfg.adam)?;
        for (name, t) in updates {
            self.store.set_buffer(&name, t)?;
        }

        if adversarial && !self.frozen(FreezeGroup::Discriminator) {
            let mut dg = Graph::new(Mode::Train);
            let real = dg.input(target, false)?;
            let fake = dg.input(x_hat, false)?;
            let lr = discriminator_forward(&mut dg, real, spec, &self.store)?;
            let lf = discriminator_forward(&mut dg, fake, spec, &self.store)?;
            let loss = discriminator_loss(&mut dg, lr, lf)?;
            dg.backward(loss)?;
            disc = dg.value(loss).item() as f64;
            let grads = dg.param_grads();
            let updates = dg.take_buffer_updates();
            adam_update(&mut self.store, &grads, &mut self.disc_opt, self.cfg.lr_at(self.epoch), self.cfg.adam)?;
            for (name, t) in updates {
                self.store.set_buffer(&name, t)?;
            }
        }
        let out = [recon, vq, adv, lambda, disc];
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite loss".to_string()));
        }
        Ok(out)
    }
}

/// Runs stage 1 for `cfg.epochs_stage1` epochs, calling `observe` after each.
pub fn train_stage1(
    data: &[VolumeGrid],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&EpochLosses, &ParamStore<f32>),
) -> Result<Checkpoint> {
    let mut t = Trainer::stage1(arch, cfg)?;
    for _ in 0..cfg.epochs_stage1 {
        let l = t.epoch(data)?;
        observe(&l, t.params());
    }
    Ok(t.checkpoint())
}

/// Runs stage 2 from a stage-1 checkpoint for `cfg.epochs_stage2` epochs.
pub fn train_stage2(
    ckpt1: &Checkpoint,
    data: &[VolumeGrid],
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&EpochLosses, &ParamStore<f32>),
) -> Result<Checkpoint> {
    let mut t = Trainer::stage2(ckpt1, cfg)?;
    for _ in 0..cfg.epochs_stage2 {
        let l = t.epoch(data)?;
        observe(&l, t.params());
    }
    Ok(t.checkpoint())
}

/// Bit pattern of every tensor under `prefix`, for freeze checks.
pub fn snapshot_bits<T: Real>(store: &ParamStore<T>, prefix: &str) -> Vec<(String, Vec<u64>)> {
    store
        .params()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, p)| (n.to_string(), p.tensor.data().iter().map(|v| v.f64().to_bits()).collect()))
        .chain(
            store
                .buffers()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, b)| (n.to_string(), b.data().iter().map(|v| v.f64().to_bits()).collect())),
        )
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Shape5;

    fn one_param(v: f32, trainable: bool) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(Shape5::new(1, 1, 1, 1, 1), vec![v]).unwrap(), trainable)
            .unwrap();
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = one_param(1.0, true);
        let mut st = AdamState::default();
        let grads = BTreeMap::from([("w".to_string(), vec![1.0f32])]);
        adam_update(&mut s, &grads, &mut st, 3e-4, AdamParams::default()).unwrap();
        let w = s.tensor("w").unwrap().data()[0] as f64;
        assert!((w - (1.0 - 3e-4)).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_grad_and_frozen() {
        let zero = BTreeMap::from([("w".to_string(), vec![0.0f32])]);
        let mut s = one_param(2.0, true);
        let mut st = AdamState::default();
        adam_update(&mut s, &zero, &mut st, 0.1, AdamParams::default()).unwrap();
        assert_eq!(s.tensor("w").unwrap().data()[0], 2.0);

        adam_update(&mut s, &BTreeMap::from([("w".to_string(), vec![1.0f32])]), &mut st, 0.1, AdamParams::default()).unwrap();
        let (m1, v1) = (st.m["w"][0], st.v["w"][0]);
        adam_update(&mut s, &zero, &mut st, 0.1, AdamParams::default()).unwrap();
        assert!((st.m["w"][0] - 0.9 * m1).abs() < 1e-7);
        assert!((st.v["w"][0] - 0.999 * v1).abs() < 1e-9);

        let mut f = one_param(2.0, false);
        adam_update(&mut f, &BTreeMap::from([("w".to_string(), vec![5.0f32])]), &mut AdamState::default(), 0.1, AdamParams::default()).unwrap();
        assert_eq!(f.tensor("w").unwrap().data()[0], 2.0);
    }

    #[test]
    fn adam_rejects_nan_without_change() {
        let mut s = one_param(2.0, true);
        let mut st = AdamState::default();
        let r = adam_update(&mut s, &BTreeMap::from([("w".to_string(), vec![f32::NAN])]), &mut st, 0.1, AdamParams::default());
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(s.tensor("w").unwrap().data()[0], 2.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = r.gen();
        let s = RngState::capture(&r);
        let mut q = s.restore();
        assert_eq!(r.gen::<u64>(), q.gen::<u64>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().disc_start(300), 30);
        let c = TrainConfig { learning_rate: 1e-3, lr_decay_epoch: Some(5), lr_decay_factor: 0.1, ..Default::default() };
        assert_eq!((c.lr_at(4), c.lr_at(5)), (1e-3, 1e-3 * 0.1));
        assert!(TrainConfig { lr_decay_factor: 0.0, ..Default::default() }.validate().is_err());
    }
}
