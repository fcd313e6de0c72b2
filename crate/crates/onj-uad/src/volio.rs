//! Binary volume files: an 84-byte little-endian header followed by the
//! row-major voxel payload.

use std::path::Path;

use onj_core::{Dims, VolumeGrid, VolumeKind, Voxels};

use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 8] = b"ONJVOL01";
pub const HEADER_LEN: usize = 84;

pub fn encode_volume(vol: &VolumeGrid) -> Vec<u8> {
    let dims = vol.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + dims.len() * 4);
    out.extend_from_slice(MAGIC);
    for n in [dims.d, dims.h, dims.w] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in vol.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(vol.kind().code());
    out.resize(HEADER_LEN, 0);
    match vol.voxels() {
        Voxels::Label(v) | Voxels::Mask(v) => out.extend_from_slice(v),
        Voxels::Scalar(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<VolumeGrid> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a volume file (bad magic)"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated volume header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = Dims::new(u32_at(8), u32_at(12), u32_at(16));
    let spacing = [f32_at(20), f32_at(24), f32_at(28)];
    let kind = VolumeKind::from_code(bytes[32]).ok_or_else(|| Error::format(path, format!("unknown kind code {}", bytes[32])))?;
    if bytes[33..HEADER_LEN].iter().any(|&b| b != 0) {
        return Err(Error::format(path, "nonzero header padding"));
    }
    let width = if kind == VolumeKind::Scalar { 4 } else { 1 };
    let need = dims
        .d
        .checked_mul(dims.h)
        .and_then(|n| n.checked_mul(dims.w))
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < need {
        let e = std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated voxel payload");
        return Err(Error::io(path, e));
    }
    if payload.len() > need {
        return Err(Error::format(path, "trailing bytes after voxel payload"));
    }
    let voxels = match kind {
        VolumeKind::Label => Voxels::Label(payload.to_vec()),
        VolumeKind::Mask => Voxels::Mask(payload.to_vec()),
        VolumeKind::Scalar => Voxels::Scalar(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    VolumeGrid::new(dims, spacing, voxels).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_volume(vol: &VolumeGrid, path: &Path) -> Result<()> {
    write_file(path, &encode_volume(vol))
}

pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    decode_volume(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_layout() {
        let v = VolumeGrid::scalar(Dims::cube(2), [1.0, 2.0, 3.0], vec![0.6; 8]).unwrap();
        let b = encode_volume(&v);
        assert_eq!(b.len(), 84 + 32);
        assert_eq!(&b[..8], b"ONJVOL01");
        assert_eq!(b[32], 1);
        assert_eq!(&b[84..88], &0.6f32.to_le_bytes());
        assert_eq!(decode_volume(&b, Path::new("x")).unwrap(), v);
    }

    #[test]
    fn minimal_mask() {
        let v = VolumeGrid::mask(Dims::cube(1), [1.0; 3], vec![1]).unwrap();
        let b = encode_volume(&v);
        assert_eq!(&b[84..], &[1u8]);
    }

    #[test]
    fn rejects_bad_files() {
        let v = VolumeGrid::label(Dims::cube(3), [1.0; 3], vec![2; 27]).unwrap();
        let mut b = encode_volume(&v);
        assert!(matches!(decode_volume(b"XXXXXXXX", Path::new("x")), Err(Error::Format { .. })));
        b.pop();
        assert!(matches!(decode_volume(&b, Path::new("x")), Err(Error::Io { .. })));
        let mut bad = encode_volume(&v);
        bad[84] = 7;
        assert!(matches!(decode_volume(&bad, Path::new("x")), Err(Error::Format { .. })));
        let mut kind = encode_volume(&v);
        kind[32] = 9;
        assert!(matches!(decode_volume(&kind, Path::new("x")), Err(Error::Format { .. })));
    }
}
