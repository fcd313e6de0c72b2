//! Deterministic tensorisation steps between label volumes and model input.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::morphology::{filter_u8, MorphOp};
use crate::volume::{Dims, VolumeGrid, Voxels};

/// Masking hyperparameters for the second training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    /// Normalised intensity strictly above which a voxel counts as tooth/canal.
    pub teeth_threshold: f32,
    /// Odd max-filter kernel width applied to the tooth indicator.
    pub dilate_kernel: usize,
    /// Inclusive range for the number of random cubes.
    pub cube_count: (usize, usize),
    /// Inclusive range for random cube side lengths, in voxels.
    pub cube_size: (usize, usize),
    /// Value written into masked voxels.
    pub mask_fill: f32,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            teeth_threshold: 0.75,
            dilate_kernel: 5,
            cube_count: (1, 4),
            cube_size: (4, 16),
            mask_fill: 0.0,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.teeth_threshold > 0.0 && self.teeth_threshold < 1.0) {
            return Err(arg_err!("teeth threshold {} outside (0, 1)", self.teeth_threshold));
        }
        if self.dilate_kernel == 0 || self.dilate_kernel.is_multiple_of(2) {
            return Err(arg_err!("dilation kernel must be odd and positive, got {}", self.dilate_kernel));
        }
        if self.cube_count.0 > self.cube_count.1 {
            return Err(arg_err!("empty cube count range {:?}", self.cube_count));
        }
        if self.cube_size.0 == 0 || self.cube_size.0 > self.cube_size.1 {
            return Err(arg_err!("invalid cube size range {:?}", self.cube_size));
        }
        if !self.mask_fill.is_finite() {
            return Err(arg_err!("mask fill must be finite"));
        }
        Ok(())
    }
}

/// Maps label `l > 0` to `(l + 5) / 10` and keeps background at zero.
pub fn normalize_labels(labels: &VolumeGrid) -> Result<VolumeGrid> {
    let data = labels
        .labels()?
        .iter()
        .map(|&l| normalize_label(l))
        .collect();
    VolumeGrid::scalar(labels.dims(), labels.spacing(), data)
}

#[inline]
pub fn normalize_label(l: u8) -> f32 {
    if l == 0 {
        0.0
    } else {
        (l as f32 + 5.0) / 10.0
    }
}

/// Tooth/canal indicator (`x > threshold`) dilated by a zero-padded max filter.
pub fn teeth_mask(x: &VolumeGrid, p: &MaskParams) -> Result<VolumeGrid> {
    p.validate()?;
    let ind: Vec<u8> = x.scalars()?.iter().map(|&v| (v > p.teeth_threshold) as u8).collect();
    let m = filter_u8(&ind, x.dims(), MorphOp::Dilate, p.dilate_kernel / 2);
    VolumeGrid::mask(x.dims(), x.spacing(), m)
}

/// Replaces masked voxels with `fill`; `fill = 0` is the product `x * (1 - m)`.
pub fn mask_apply(x: &VolumeGrid, m: &VolumeGrid, fill: f32) -> Result<VolumeGrid> {
    x.ensure_same_dims(m)?;
    let out = x
        .scalars()?
        .iter()
        .zip(m.mask_bits()?)
        .map(|(&v, &b)| if b == 1 { fill } else { v })
        .collect();
    VolumeGrid::scalar(x.dims(), x.spacing(), out)
}

/// Sets an axis-aligned cube of side `side` with its low corner at `corner`.
pub fn fill_cube(mask: &mut [u8], dims: Dims, corner: [usize; 3], side: usize) -> Result<()> {
    let c = corner;
    if c[0] + side > dims.d || c[1] + side > dims.h || c[2] + side > dims.w {
        return Err(arg_err!("cube at {:?} of side {} leaves dims {:?}", c, side, dims));
    }
    for z in c[0]..c[0] + side {
        for y in c[1]..c[1] + side {
            let row = dims.index(z, y, c[2]);
            mask[row..row + side].fill(1);
        }
    }
    Ok(())
}

/// Union of a random number of random cubes, all fully inside `dims`.
pub fn random_cube_mask(dims: Dims, p: &MaskParams, seed: u64) -> Result<VolumeGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0u8; dims.len()];
    random_cubes_into(&mut mask, dims, p, &mut rng)?;
    VolumeGrid::mask(dims, [1.0; 3], mask)
}

pub(crate) fn random_cubes_into(mask: &mut [u8], dims: Dims, p: &MaskParams, rng: &mut ChaCha8Rng) -> Result<()> {
    p.validate()?;
    let smallest = dims.d.min(dims.h).min(dims.w);
    if p.cube_size.1 > smallest {
        return Err(arg_err!(
            "cube side up to {} cannot fit dims {:?}",
            p.cube_size.1,
            dims
        ));
    }
    let n = rng.gen_range(p.cube_count.0..=p.cube_count.1);
    for _ in 0..n {
        let side = rng.gen_range(p.cube_size.0..=p.cube_size.1);
        let corner = [
            rng.gen_range(0..=dims.d - side),
            rng.gen_range(0..=dims.h - side),
            rng.gen_range(0..=dims.w - side),
        ];
        fill_cube(mask, dims, corner, side)?;
    }
    Ok(())
}

fn check_fill(x: &VolumeGrid, fill: f32) -> Result<()> {
    let ok = match x.voxels() {
        Voxels::Scalar(_) => fill.is_finite(),
        Voxels::Label(_) | Voxels::Mask(_) => (0.0..=255.0).contains(&fill) && fill.fract() == 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(arg_err!("pad fill {fill} is not valid for a {:?} volume", x.kind()))
    }
}

/// Centres `x` inside a larger `target` grid (extra voxel of an odd surplus
/// goes after), filling the margin with `fill`.
pub fn pad_to(x: &VolumeGrid, target: Dims, fill: f32) -> Result<VolumeGrid> {
    let src = x.dims();
    if !target.fits(src) {
        return Err(arg_err!("pad target {:?} smaller than dims {:?}", target, src));
    }
    let before = [
        (target.d - src.d) / 2,
        (target.h - src.h) / 2,
        (target.w - src.w) / 2,
    ];
    check_fill(x, fill)?;
    let inside = |i: usize| -> Option<usize> {
        let [z, y, xx] = target.coords(i);
        let (z, y, xx) = (z.checked_sub(before[0])?, y.checked_sub(before[1])?, xx.checked_sub(before[2])?);
        (z < src.d && y < src.h && xx < src.w).then(|| src.index(z, y, xx))
    };
    let voxels = match x.voxels() {
        Voxels::Scalar(v) => Voxels::Scalar((0..target.len()).map(|i| inside(i).map_or(fill, |j| v[j])).collect()),
        Voxels::Label(v) => Voxels::Label((0..target.len()).map(|i| inside(i).map_or(fill as u8, |j| v[j])).collect()),
        Voxels::Mask(v) => Voxels::Mask((0..target.len()).map(|i| inside(i).map_or(fill as u8, |j| v[j])).collect()),
    };
    VolumeGrid::new(target, x.spacing(), voxels)
}

/// Contiguous sub-volume of `size` starting at `offset`.
pub fn crop(x: &VolumeGrid, offset: [usize; 3], size: Dims) -> Result<VolumeGrid> {
    let src = x.dims();
    if offset[0] + size.d > src.d || offset[1] + size.h > src.h || offset[2] + size.w > src.w {
        return Err(arg_err!("crop {:?} at {:?} exceeds dims {:?}", size, offset, src));
    }
    let idx = (0..size.len()).map(|i| {
        let [z, y, xx] = size.coords(i);
        src.index(z + offset[0], y + offset[1], xx + offset[2])
    });
    Ok(x.gather(size, x.spacing(), idx))
}

/// Crop at a uniformly random valid offset drawn from `seed`.
pub fn random_crop(x: &VolumeGrid, size: Dims, seed: u64) -> Result<VolumeGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, _) = random_crop_with(x, size, &mut rng)?;
    Ok(out)
}

pub(crate) fn random_crop_with(x: &VolumeGrid, size: Dims, rng: &mut ChaCha8Rng) -> Result<(VolumeGrid, [usize; 3])> {
    let src = x.dims();
    if !src.fits(size) {
        return Err(arg_err!("crop size {:?} exceeds dims {:?}", size, src));
    }
    let off = [
        rng.gen_range(0..=src.d - size.d),
        rng.gen_range(0..=src.h - size.h),
        rng.gen_range(0..=src.w - size.w),
    ];
    Ok((crop(x, off, size)?, off))
}

/// Window offsets on a `stride` lattice plus one flush with the far edge of
/// each axis, in lexicographic `(z, y, x)` order.
pub fn sliding_window_offsets(dims: Dims, window: Dims, stride: usize) -> Result<Vec<[usize; 3]>> {
    if stride == 0 {
        return Err(arg_err!("stride must be at least 1"));
    }
    if !dims.fits(window) || window.is_empty() {
        return Err(arg_err!("window {:?} does not fit dims {:?}", window, dims));
    }
    if stride > window.d.min(window.h).min(window.w) {
        return Err(arg_err!("stride {stride} exceeds window {:?} and would leave gaps", window));
    }
    let axis = |len: usize, win: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + win <= len).collect();
        if *v.last().expect("offset 0 always fits") + win < len {
            v.push(len - win);
        }
        v
    };
    let (zs, ys, xs) = (axis(dims.d, window.d), axis(dims.h, window.h), axis(dims.w, window.w));
    let mut out = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}
