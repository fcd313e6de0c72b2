//! Binary STL output.

use std::path::Path;

use onj_core::postproc::TriangleMesh;

use crate::error::{read_file, write_file, Error, Result};

pub const HEADER_TAG: &[u8] = b"onj-uad";

/// One facet as stored on disk: normal then three vertices.
pub type Facet = [[f32; 3]; 4];

pub fn encode_stl(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = vec![0u8; 80];
    out[..HEADER_TAG.len()].copy_from_slice(HEADER_TAG);
    out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for (t, n) in mesh.triangles.iter().zip(&mesh.normals) {
        let corners = t.map(|i| mesh.vertices[i as usize]);
        for p in std::iter::once(n).chain(corners.iter()) {
            for c in p {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

pub fn decode_stl(bytes: &[u8], path: &Path) -> Result<Vec<Facet>> {
    if bytes.len() < 84 {
        return Err(Error::format(path, "STL shorter than its header"));
    }
    let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    if bytes.len() != 84 + 50 * n {
        return Err(Error::format(path, format!("STL declares {n} triangles but has {} bytes", bytes.len())));
    }
    Ok(bytes[84..]
        .chunks_exact(50)
        .map(|rec| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
            std::array::from_fn(|p| std::array::from_fn(|c| f(3 * p + c)))
        })
        .collect())
}

pub fn write_stl(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    write_file(path, &encode_stl(mesh))
}

pub fn read_stl(path: &Path) -> Result<Vec<Facet>> {
    decode_stl(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mesh_is_bare_header() {
        let b = encode_stl(&TriangleMesh::default());
        assert_eq!(b.len(), 84);
        assert_eq!(&b[..7], b"onj-uad");
        assert!(b[7..84].iter().all(|&x| x == 0));
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut b = encode_stl(&TriangleMesh::default());
        b[80] = 1;
        assert!(decode_stl(&b, Path::new("m.stl")).is_err());
    }
}
