//! Grey-scale and binary morphology over cubic (Chebyshev) neighbourhoods.

use alloc::vec::Vec;

use crate::error::Result;
use crate::volume::{Dims, VolumeGrid, Voxels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MorphOp {
    /// Min-filter; out-of-range neighbours are ignored (edge replication).
    Erode,
    /// Max-filter; out-of-range neighbours count as zero.
    Dilate,
}

/// Min- or max-filter over the Chebyshev ball of `radius`, applied along
/// each axis in turn (the cube is separable).
pub fn filter_f32(data: &[f32], dims: Dims, op: MorphOp, radius: usize) -> Vec<f32> {
    let mut cur = data.to_vec();
    if radius == 0 {
        return cur;
    }
    let strides = [dims.h * dims.w, dims.w, 1];
    let lens = [dims.d, dims.h, dims.w];
    let mut line = Vec::new();
    for axis in 0..3 {
        let (len, stride) = (lens[axis], strides[axis]);
        let mut next = cur.clone();
        for start in line_starts(dims, axis) {
            line.clear();
            line.extend((0..len).map(|i| cur[start + i * stride]));
            for i in 0..len {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(len - 1);
                let crosses = i < radius || i + radius >= len;
                let w = &line[lo..=hi];
                let v = match op {
                    MorphOp::Erode => w.iter().copied().fold(f32::INFINITY, f32::min),
                    MorphOp::Dilate => {
                        let m = w.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        if crosses {
                            m.max(0.0)
                        } else {
                            m
                        }
                    }
                };
                next[start + i * stride] = v;
            }
        }
        cur = next;
    }
    cur
}

/// Byte (mask) flavour of [`filter_f32`].
pub fn filter_u8(data: &[u8], dims: Dims, op: MorphOp, radius: usize) -> Vec<u8> {
    let f: Vec<f32> = data.iter().map(|&b| b as f32).collect();
    filter_f32(&f, dims, op, radius).into_iter().map(|v| v as u8).collect()
}

fn line_starts(dims: Dims, axis: usize) -> impl Iterator<Item = usize> {
    let [d, h, w] = dims.as_array();
    let (a, b) = match axis {
        0 => (h, w),
        1 => (d, w),
        _ => (d, h),
    };
    (0..a * b).map(move |i| {
        let (p, q) = (i / b, i % b);
        match axis {
            0 => dims.index(0, p, q),
            1 => dims.index(p, 0, q),
            _ => dims.index(p, q, 0),
        }
    })
}

/// Erosion or dilation of a mask or scalar volume. Label volumes are rejected.
pub fn morph_filter(x: &VolumeGrid, op: MorphOp, radius: usize) -> Result<VolumeGrid> {
    let dims = x.dims();
    let voxels = match x.voxels() {
        Voxels::Mask(m) => Voxels::Mask(filter_u8(m, dims, op, radius)),
        Voxels::Scalar(s) => Voxels::Scalar(filter_f32(s, dims, op, radius)),
        Voxels::Label(_) => {
            return Err(crate::error::arg_err!("morphology is defined on mask and scalar volumes"));
        }
    };
    VolumeGrid::new(dims, x.spacing(), voxels)
}
