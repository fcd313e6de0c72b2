//! Sliding-window reconstruction, subject-level anomaly scores, and
//! voxel-level anomaly maps from dual reconstruction.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffnet::{ParamStore, Tensor};
use crate::error::{arg_err, Result};
use crate::morphology::{filter_f32, filter_u8, MorphOp};
use crate::preprocess::{crop, sliding_window_offsets};
use crate::trainer::Checkpoint;
use crate::volume::{Dims, VolumeGrid, VolumeKind};
use crate::vqgan::{reconstruct_eval, ModelSpec};

/// Which pair of volumes an anomaly score compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Stage-2 reconstruction against stage-1 reconstruction.
    DualRecon,
    /// Stage-2 reconstruction against the input itself.
    InputVsRecon,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::DualRecon => "dual_recon",
            ScoreMode::InputVsRecon => "input_vs_recon",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dual_recon" => Ok(ScoreMode::DualRecon),
            "input_vs_recon" => Ok(ScoreMode::InputVsRecon),
            _ => Err(arg_err!("unknown score mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub diff_threshold: f32,
    pub erosion_radius: usize,
    pub dilation_radius: usize,
    pub mode: ScoreMode,
    /// Count surviving voxels instead of summing their errors.
    pub count: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            diff_threshold: 0.05,
            erosion_radius: 1,
            dilation_radius: 2,
            mode: ScoreMode::DualRecon,
            count: false,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.diff_threshold >= 0.0) || !self.diff_threshold.is_finite() {
            return Err(arg_err!("difference threshold must be finite and ≥ 0"));
        }
        Ok(())
    }

    /// Orders `(input, stage-1 recon, stage-2 recon)` into `(ref, other)`.
    pub fn pair<'a>(&self, x: &'a VolumeGrid, g1: &'a VolumeGrid, g2: &'a VolumeGrid) -> (&'a VolumeGrid, &'a VolumeGrid) {
        match self.mode {
            ScoreMode::DualRecon => (g2, g1),
            ScoreMode::InputVsRecon => (g2, x),
        }
    }
}

/// Anything that maps one model-sized window to its reconstruction.
pub trait Reconstructor {
    fn window(&self) -> Dims;
    fn reconstruct_window(&self, x: &[f32]) -> Result<Vec<f32>>;
}

/// Returns windows unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityStub {
    pub window: Dims,
}

impl Reconstructor for IdentityStub {
    fn window(&self) -> Dims {
        self.window
    }

    fn reconstruct_window(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(x.to_vec())
    }
}

/// Eval-mode generator from a trained checkpoint.
#[derive(Debug, Clone)]
pub struct ModelReconstructor {
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
}

impl ModelReconstructor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(ModelReconstructor {
            spec: ckpt.spec()?,
            params: ckpt.params.clone(),
        })
    }
}

impl Reconstructor for ModelReconstructor {
    fn window(&self) -> Dims {
        self.spec.input
    }

    fn reconstruct_window(&self, x: &[f32]) -> Result<Vec<f32>> {
        let t = Tensor::new(self.spec.input_shape(1), x.to_vec())?;
        Ok(reconstruct_eval(&self.spec, &self.params, &t)?.into_data())
    }
}

/// Averages window reconstructions over every covering window, visiting
/// offsets in lexicographic order.
pub fn reconstruct(model: &dyn Reconstructor, x: &VolumeGrid, stride: usize) -> Result<VolumeGrid> {
    if x.kind() != VolumeKind::Scalar {
        return Err(arg_err!("reconstruction needs a scalar volume, got {:?}", x.kind()));
    }
    let dims = x.dims();
    let window = model.window();
    let offsets = sliding_window_offsets(dims, window, stride)?;
    let mut sum = vec![0.0f64; dims.len()];
    let mut count = vec![0u32; dims.len()];
    for off in offsets {
        let w = crop(x, off, window)?;
        let y = model.reconstruct_window(w.scalars()?)?;
        if y.len() != window.len() {
            return Err(arg_err!("reconstructor returned {} values for a {:?} window", y.len(), window));
        }
        for (i, v) in y.into_iter().enumerate() {
            let [z, r, c] = window.coords(i);
            let j = dims.index(z + off[0], r + off[1], c + off[2]);
            sum[j] += v as f64;
            count[j] += 1;
        }
    }
    let data = sum.iter().zip(&count).map(|(s, &n)| (s / n as f64) as f32).collect();
    VolumeGrid::scalar(dims, x.spacing(), data)
}

fn scalar_pair<'a>(a: &'a VolumeGrid, b: &'a VolumeGrid) -> Result<(&'a [f32], &'a [f32])> {
    a.ensure_same_dims(b)?;
    Ok((a.scalars()?, b.scalars()?))
}

/// Voxels whose absolute difference exceeds the threshold and survive binary
/// erosion, together with the difference values.
fn surviving(reference: &VolumeGrid, other: &VolumeGrid, cfg: &ScoreConfig) -> Result<(Vec<f32>, Vec<u8>)> {
    cfg.validate()?;
    let (a, b) = scalar_pair(reference, other)?;
    let diff: Vec<f32> = a.iter().zip(b).map(|(p, q)| (p - q).abs()).collect();
    let bin: Vec<u8> = diff.iter().map(|&d| (d > cfg.diff_threshold) as u8).collect();
    let kept = filter_u8(&bin, reference.dims(), MorphOp::Erode, cfg.erosion_radius);
    Ok((diff, kept))
}

/// Sum of L1 differences over voxels that pass the threshold and erosion
/// (or their count when `cfg.count` is set).
pub fn anomaly_score(reference: &VolumeGrid, other: &VolumeGrid, cfg: &ScoreConfig) -> Result<f64> {
    let (diff, kept) = surviving(reference, other, cfg)?;
    Ok(diff
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k != 0)
        .map(|(&d, _)| if cfg.count { 1.0 } else { d as f64 })
        .fold(0.0, |a, b| a + b))
}

/// Squared difference, grey-scale opening (erode then dilate), then a final
/// binarisation at `cfg.diff_threshold`.
pub fn anomaly_map(recon2: &VolumeGrid, recon1: &VolumeGrid, cfg: &ScoreConfig) -> Result<VolumeGrid> {
    cfg.validate()?;
    let (a, b) = scalar_pair(recon2, recon1)?;
    let dims = recon2.dims();
    let d: Vec<f32> = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).collect();
    let e = filter_f32(&d, dims, MorphOp::Erode, cfg.erosion_radius);
    let o = filter_f32(&e, dims, MorphOp::Dilate, cfg.dilation_radius);
    let bits = o.iter().map(|&v| (v > cfg.diff_threshold) as u8).collect();
    VolumeGrid::mask(dims, recon2.spacing(), bits)
}

/// Sørensen–Dice overlap of two masks; two empty masks score 1.
pub fn dice(a: &VolumeGrid, b: &VolumeGrid) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (p, q) = (a.mask_bits()?, b.mask_bits()?);
    let inter = p.iter().zip(q).filter(|(x, y)| **x != 0 && **y != 0).count();
    let total = p.iter().filter(|&&x| x != 0).count() + q.iter().filter(|&&x| x != 0).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}
