//! Dense voxel volumes and nearest-neighbour resampling.
//!
//! All volumes share one layout: `(D, H, W)` dimensions stored row-major with
//! `W` varying fastest.

use alloc::vec::Vec;

use crate::error::{arg_err, Result};

/// Voxel counts along the `(D, H, W)` axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Dims { d: n, h: n, w: n }
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        [z, y, x]
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn contains(&self, z: isize, y: isize, x: isize) -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < self.d
            && (y as usize) < self.h
            && (x as usize) < self.w
    }

    /// True when `other` fits inside `self` on every axis.
    pub fn fits(&self, other: Dims) -> bool {
        other.d <= self.d && other.h <= self.h && other.w <= self.w
    }
}

impl From<[usize; 3]> for Dims {
    fn from(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }
}

/// What the voxel values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VolumeKind {
    /// Categorical anatomy codes `0..=5`.
    Label,
    /// Finite real values.
    Scalar,
    /// Binary `{0, 1}` values.
    Mask,
}

impl VolumeKind {
    pub const fn code(self) -> u8 {
        match self {
            VolumeKind::Label => 0,
            VolumeKind::Scalar => 1,
            VolumeKind::Mask => 2,
        }
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(VolumeKind::Label),
            1 => Some(VolumeKind::Scalar),
            2 => Some(VolumeKind::Mask),
            _ => None,
        }
    }
}

/// Largest anatomy code a label volume may hold.
pub const MAX_LABEL: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum Voxels {
    Label(Vec<u8>),
    Scalar(Vec<f32>),
    Mask(Vec<u8>),
}

impl Voxels {
    pub fn len(&self) -> usize {
        match self {
            Voxels::Label(v) | Voxels::Mask(v) => v.len(),
            Voxels::Scalar(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> VolumeKind {
        match self {
            Voxels::Label(_) => VolumeKind::Label,
            Voxels::Scalar(_) => VolumeKind::Scalar,
            Voxels::Mask(_) => VolumeKind::Mask,
        }
    }
}

/// A dense 3D voxel grid with physical spacing (millimetres per voxel).
///
/// Construction validates every invariant, so a `VolumeGrid` in hand is
/// always well-formed: the voxel count matches the dimensions, spacings are
/// strictly positive, labels lie in `0..=5`, masks in `{0, 1}` and scalars
/// are finite. Spacing is stored x-first, `(sx, sy, sz)`, i.e. for the
/// `(W, H, D)` axes.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: Dims,
    spacing: [f32; 3],
    voxels: Voxels,
}

impl VolumeGrid {
    pub fn new(dims: Dims, spacing: [f32; 3], voxels: Voxels) -> Result<Self> {
        if voxels.len() != dims.len() {
            return Err(arg_err!(
                "voxel count {} does not match dims {:?}",
                voxels.len(),
                dims
            ));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(arg_err!("spacing must be strictly positive, got {:?}", spacing));
        }
        match &voxels {
            Voxels::Label(v) => {
                if let Some(bad) = v.iter().find(|&&l| l > MAX_LABEL) {
                    return Err(arg_err!("label value {} outside 0..=5", bad));
                }
            }
            Voxels::Mask(v) => {
                if let Some(bad) = v.iter().find(|&&m| m > 1) {
                    return Err(arg_err!("mask value {} outside {{0,1}}", bad));
                }
            }
            Voxels::Scalar(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(arg_err!("scalar volume holds a non-finite value"));
                }
            }
        }
        Ok(VolumeGrid { dims, spacing, voxels })
    }

    pub fn label(dims: Dims, spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(dims, spacing, Voxels::Label(data))
    }

    pub fn scalar(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, Voxels::Scalar(data))
    }

    pub fn mask(dims: Dims, spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(dims, spacing, Voxels::Mask(data))
    }

    /// All-zero volume of the given kind.
    pub fn zeros(dims: Dims, spacing: [f32; 3], kind: VolumeKind) -> Result<Self> {
        let n = dims.len();
        let voxels = match kind {
            VolumeKind::Label => Voxels::Label(alloc::vec![0; n]),
            VolumeKind::Scalar => Voxels::Scalar(alloc::vec![0.0; n]),
            VolumeKind::Mask => Voxels::Mask(alloc::vec![0; n]),
        };
        Self::new(dims, spacing, voxels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.voxels.kind()
    }

    pub fn voxels(&self) -> &Voxels {
        &self.voxels
    }

    pub fn into_voxels(self) -> Voxels {
        self.voxels
    }

    /// Label or mask bytes.
    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.voxels {
            Voxels::Label(v) | Voxels::Mask(v) => Some(v),
            Voxels::Scalar(_) => None,
        }
    }

    pub fn labels(&self) -> Result<&[u8]> {
        match &self.voxels {
            Voxels::Label(v) => Ok(v),
            other => Err(arg_err!("expected a label volume, got {:?}", other.kind())),
        }
    }

    pub fn scalars(&self) -> Result<&[f32]> {
        match &self.voxels {
            Voxels::Scalar(v) => Ok(v),
            other => Err(arg_err!("expected a scalar volume, got {:?}", other.kind())),
        }
    }

    pub fn mask_bits(&self) -> Result<&[u8]> {
        match &self.voxels {
            Voxels::Mask(v) => Ok(v),
            other => Err(arg_err!("expected a mask volume, got {:?}", other.kind())),
        }
    }

    /// Voxel values widened to `f32`, whatever the kind.
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.voxels {
            Voxels::Label(v) | Voxels::Mask(v) => v.iter().map(|&b| b as f32).collect(),
            Voxels::Scalar(v) => v.clone(),
        }
    }

    /// Value at `(z, y, x)` widened to `f32`.
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        let i = self.dims.index(z, y, x);
        match &self.voxels {
            Voxels::Label(v) | Voxels::Mask(v) => v[i] as f32,
            Voxels::Scalar(v) => v[i],
        }
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        match &self.voxels {
            Voxels::Label(v) | Voxels::Mask(v) => v.iter().filter(|&&b| b != 0).count(),
            Voxels::Scalar(v) => v.iter().filter(|&&x| x != 0.0).count(),
        }
    }

    pub(crate) fn ensure_same_dims(&self, other: &VolumeGrid) -> Result<()> {
        if self.dims != other.dims {
            return Err(arg_err!(
                "dimension mismatch: {:?} vs {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(())
    }

    /// Builds a new volume of the same kind by gathering voxel indices from `self`.
    pub(crate) fn gather(&self, dims: Dims, spacing: [f32; 3], src: impl Iterator<Item = usize>) -> VolumeGrid {
        let voxels = match &self.voxels {
            Voxels::Label(v) => Voxels::Label(src.map(|i| v[i]).collect()),
            Voxels::Mask(v) => Voxels::Mask(src.map(|i| v[i]).collect()),
            Voxels::Scalar(v) => Voxels::Scalar(src.map(|i| v[i]).collect()),
        };
        VolumeGrid { dims, spacing, voxels }
    }
}

/// Subsamples by an integer factor per axis, taking the corner voxel of each block.
///
/// Output dims are `floor(dims / factor)` and spacing is multiplied by the
/// factor. Values are copied, never blended, so label volumes stay categorical.
pub fn resample_nearest(vol: &VolumeGrid, factor: [usize; 3]) -> Result<VolumeGrid> {
    if factor.contains(&0) {
        return Err(arg_err!("resample factor must be positive, got {:?}", factor));
    }
    let src = vol.dims();
    let out = Dims::new(src.d / factor[0], src.h / factor[1], src.w / factor[2]);
    if out.is_empty() {
        return Err(arg_err!(
            "factor {:?} leaves no voxels of dims {:?}",
            factor,
            src
        ));
    }
    let sp = vol.spacing();
    let spacing = [
        sp[0] * factor[2] as f32,
        sp[1] * factor[1] as f32,
        sp[2] * factor[0] as f32,
    ];
    let idx = (0..out.len()).map(|i| {
        let [z, y, x] = out.coords(i);
        src.index(z * factor[0], y * factor[1], x * factor[2])
    });
    Ok(vol.gather(out, spacing, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_bad_label() {
        let e = VolumeGrid::label(Dims::cube(1), [1.0; 3], vec![7]);
        assert!(e.is_err());
    }

    #[test]
    fn rejects_nonpositive_spacing() {
        assert!(VolumeGrid::mask(Dims::cube(1), [1.0, 0.0, 1.0], vec![1]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(VolumeGrid::scalar(Dims::cube(2), [1.0; 3], vec![0.0; 7]).is_err());
    }

    #[test]
    fn resample_identity() {
        let v = VolumeGrid::label(Dims::new(2, 3, 4), [0.5; 3], (0..24).map(|i| (i % 6) as u8).collect()).unwrap();
        assert_eq!(resample_nearest(&v, [1, 1, 1]).unwrap(), v);
    }

    #[test]
    fn resample_takes_block_corners() {
        let dims = Dims::cube(4);
        let data: Vec<u8> = (0..64).map(|i| (i % 6) as u8).collect();
        let v = VolumeGrid::label(dims, [1.0; 3], data.clone()).unwrap();
        let r = resample_nearest(&v, [2, 2, 2]).unwrap();
        assert_eq!(r.dims(), Dims::cube(2));
        let got = r.labels().unwrap();
        let mut k = 0;
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(got[k], data[(2 * z * 4 + 2 * y) * 4 + 2 * x]);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn resample_scales_spacing() {
        let v = VolumeGrid::zeros(Dims::cube(16), [0.25; 3], VolumeKind::Label).unwrap();
        let r = resample_nearest(&v, [8, 8, 8]).unwrap();
        assert_eq!(r.spacing(), [2.0, 2.0, 2.0]);
        assert_eq!(r.dims(), Dims::cube(2));
    }

    #[test]
    fn resample_floor_dims_and_zero_factor() {
        let v = VolumeGrid::zeros(Dims::new(5, 7, 3), [1.0; 3], VolumeKind::Mask).unwrap();
        assert_eq!(resample_nearest(&v, [2, 3, 1]).unwrap().dims(), Dims::new(2, 2, 3));
        assert!(resample_nearest(&v, [0, 1, 1]).is_err());
        assert!(resample_nearest(&v, [6, 1, 1]).is_err());
    }
}
