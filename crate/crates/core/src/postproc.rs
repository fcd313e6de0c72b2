//! From a dual-reconstruction difference map to per-region surface meshes:
//! thresholding, component labelling, anatomy and soft-tissue filtering,
//! directional growth, and marching cubes.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::volume::{Dims, VolumeGrid, VolumeKind};

pub use crate::morphology::{morph_filter, MorphOp};

/// Voxelwise squared difference.
pub fn difference_map(g2: &VolumeGrid, g1: &VolumeGrid) -> Result<VolumeGrid> {
    g2.ensure_same_dims(g1)?;
    let data = g2
        .scalars()?
        .iter()
        .zip(g1.scalars()?)
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    VolumeGrid::scalar(g2.dims(), g2.spacing(), data)
}

/// `x > tau` as a mask.
pub fn threshold_map(x: &VolumeGrid, tau: f32) -> Result<VolumeGrid> {
    if !(tau >= 0.0) {
        return Err(arg_err!("threshold must be ≥ 0, got {tau}"));
    }
    let bits = x.scalars()?.iter().map(|&v| (v > tau) as u8).collect();
    VolumeGrid::mask(x.dims(), x.spacing(), bits)
}

/// `m ∧ ¬soft`.
pub fn subtract_soft_tissue(m: &VolumeGrid, soft: &VolumeGrid) -> Result<VolumeGrid> {
    m.ensure_same_dims(soft)?;
    let bits = m
        .mask_bits()?
        .iter()
        .zip(soft.mask_bits()?)
        .map(|(&a, &s)| (a != 0 && s == 0) as u8)
        .collect();
    VolumeGrid::mask(m.dims(), m.spacing(), bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(arg_err!("connectivity must be 6 or 26, got {n}")),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }

    fn offsets(self) -> Vec<[isize; 3]> {
        let mut v = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let ok = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if ok {
                        v.push([dz, dy, dx]);
                    }
                }
            }
        }
        v
    }
}

/// A connected set of voxels, sorted in `(z, y, x)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub id: usize,
    pub voxels: Vec<[usize; 3]>,
    /// Inclusive `(min, max)` corners.
    pub bbox: ([usize; 3], [usize; 3]),
}

impl Region {
    pub fn new(id: usize, mut voxels: Vec<[usize; 3]>) -> Result<Self> {
        if voxels.is_empty() {
            return Err(arg_err!("region {id} has no voxels"));
        }
        voxels.sort_unstable();
        voxels.dedup();
        let mut lo = voxels[0];
        let mut hi = voxels[0];
        for v in &voxels {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Ok(Region { id, voxels, bbox: (lo, hi) })
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Mean voxel coordinate.
    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for v in &self.voxels {
            for a in 0..3 {
                c[a] += v[a] as f64;
            }
        }
        c.map(|s| s / self.voxels.len() as f64)
    }

    /// The region as a mask over `dims`.
    pub fn to_mask(&self, dims: Dims, spacing: [f32; 3]) -> Result<VolumeGrid> {
        let mut bits = vec![0u8; dims.len()];
        for &[z, y, x] in &self.voxels {
            if z >= dims.d || y >= dims.h || x >= dims.w {
                return Err(arg_err!("region voxel {:?} outside {:?}", [z, y, x], dims));
            }
            bits[dims.index(z, y, x)] = 1;
        }
        VolumeGrid::mask(dims, spacing, bits)
    }
}

/// Maximal connected regions of `m`. Ids start at 1 and follow the order of
/// each region's lexicographically smallest voxel.
pub fn connected_components(m: &VolumeGrid, conn: Connectivity) -> Result<Vec<Region>> {
    let bits = m.mask_bits()?;
    let dims = m.dims();
    let offs = conn.offsets();
    let mut seen = vec![false; dims.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..dims.len() {
        if bits[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut voxels = Vec::new();
        while let Some(i) = stack.pop() {
            let c = dims.coords(i);
            voxels.push(c);
            for o in &offs {
                let (z, y, x) = (c[0] as isize + o[0], c[1] as isize + o[1], c[2] as isize + o[2]);
                if dims.contains(z, y, x) {
                    let j = dims.index(z as usize, y as usize, x as usize);
                    if bits[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(Region::new(out.len() + 1, voxels)?);
    }
    Ok(out)
}

/// Fraction of the region's voxels that are nonzero in `anatomy`.
pub fn overlap_fraction(r: &Region, anatomy: &VolumeGrid) -> Result<f64> {
    let dims = anatomy.dims();
    let mut hit = 0usize;
    for &[z, y, x] in &r.voxels {
        if z >= dims.d || y >= dims.h || x >= dims.w {
            return Err(arg_err!("region voxel {:?} outside {:?}", [z, y, x], dims));
        }
        if anatomy.get(z, y, x) != 0.0 {
            hit += 1;
        }
    }
    Ok(hit as f64 / r.len() as f64)
}

/// Drops regions whose overlap with present anatomy exceeds `tau`.
pub fn filter_regions_by_overlap(regions: &[Region], anatomy: &VolumeGrid, tau: f64) -> Result<Vec<Region>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(arg_err!("overlap threshold {tau} outside [0, 1]"));
    }
    let mut kept = Vec::new();
    for r in regions {
        if overlap_fraction(r, anatomy)? <= tau {
            kept.push(r.clone());
        }
    }
    Ok(kept)
}

/// Signed axis along which regions grow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Direction {
    /// 0 = z, 1 = y, 2 = x.
    pub axis: usize,
    pub positive: bool,
}

impl Direction {
    pub const PLUS_Z: Direction = Direction { axis: 0, positive: true };

    pub fn parse(s: &str) -> Result<Self> {
        let (sign, axis) = s.split_at(s.len().min(1));
        let positive = match sign {
            "+" => true,
            "-" => false,
            _ => return Err(arg_err!("direction {s:?} must look like +z or -x")),
        };
        let axis = match axis {
            "z" => 0,
            "y" => 1,
            "x" => 2,
            _ => return Err(arg_err!("direction {s:?} must look like +z or -x")),
        };
        Ok(Direction { axis, positive })
    }

    pub fn name(self) -> &'static str {
        match (self.positive, self.axis) {
            (true, 0) => "+z",
            (false, 0) => "-z",
            (true, 1) => "+y",
            (false, 1) => "-y",
            (true, _) => "+x",
            (false, _) => "-x",
        }
    }
}

/// `iters` rounds of one-voxel shifts along `dir`, keeping only shifted voxels
/// where `allowed` is set.
pub fn grow_region(r: &Region, allowed: &VolumeGrid, dir: Direction, iters: usize) -> Result<Region> {
    if dir.axis > 2 {
        return Err(arg_err!("axis {} out of range", dir.axis));
    }
    let dims = allowed.dims();
    let ok = allowed.mask_bits()?;
    let mut member = vec![false; dims.len()];
    let mut voxels = r.voxels.clone();
    for &[z, y, x] in &voxels {
        if z >= dims.d || y >= dims.h || x >= dims.w {
            return Err(arg_err!("region voxel {:?} outside {:?}", [z, y, x], dims));
        }
        member[dims.index(z, y, x)] = true;
    }
    let mut frontier = voxels.clone();
    let lens = dims.as_array();
    for _ in 0..iters {
        let mut next = Vec::new();
        for v in &frontier {
            let mut c = *v;
            if dir.positive {
                if c[dir.axis] + 1 >= lens[dir.axis] {
                    continue;
                }
                c[dir.axis] += 1;
            } else {
                if c[dir.axis] == 0 {
                    continue;
                }
                c[dir.axis] -= 1;
            }
            let i = dims.index(c[0], c[1], c[2]);
            if ok[i] != 0 && !member[i] {
                member[i] = true;
                next.push(c);
            }
        }
        if next.is_empty() {
            break;
        }
        voxels.extend_from_slice(&next);
        frontier = next;
    }
    Region::new(r.id, voxels)
}

// ---------------------------------------------------------------------------
// Marching cubes
//
// Corner `i` of a cell sits at offset (x, y, z) = (i & 1, i >> 1 & 1, i >> 2 & 1).
// The triangle table is derived from one rule applied to each cell face:
// walking the face's corners counter-clockwise as seen from outside, each run
// of inside corners contributes one segment from the edge where the run
// starts to the edge where it ends. Diagonal inside corners therefore stay
// separate, neighbouring cells agree on every shared face, and the segments
// of a cell chain into closed loops. Each loop is fan-triangulated from a
// corner whose diagonals avoid the cell faces.

const CELL_EDGES: [[usize; 2]; 12] = [
    [0, 1], [2, 3], [4, 5], [6, 7],
    [0, 2], [1, 3], [4, 6], [5, 7],
    [0, 4], [1, 5], [2, 6], [3, 7],
];

/// Face corners, counter-clockwise seen from outside the cell.
const CELL_FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2], [1, 3, 7, 5],
    [0, 1, 5, 4], [2, 6, 7, 3],
    [0, 2, 3, 1], [4, 5, 7, 6],
];

const MAX_CELL_TRIANGLES: usize = 12;
const NO_EDGE: u8 = u8::MAX;

const fn edge_between(a: usize, b: usize) -> usize {
    let mut e = 0;
    while e < 12 {
        let [p, q] = CELL_EDGES[e];
        if (p == a && q == b) || (p == b && q == a) {
            return e;
        }
        e += 1;
    }
    panic!("corners are not adjacent");
}

const fn inside(case: usize, corner: usize) -> bool {
    (case >> corner) & 1 == 1
}

const fn on_common_face(a: usize, b: usize) -> bool {
    let mut f = 0;
    while f < 6 {
        let face = CELL_FACES[f];
        let (mut has_a, mut has_b) = (false, false);
        let mut i = 0;
        while i < 4 {
            let e = edge_between(face[i], face[(i + 1) % 4]);
            has_a |= e == a;
            has_b |= e == b;
            i += 1;
        }
        if has_a && has_b {
            return true;
        }
        f += 1;
    }
    false
}

/// First loop position whose fan diagonals all run through the cell interior.
/// A diagonal lying on a face could be chosen by the neighbouring cell too,
/// giving an edge shared by four triangles.
const fn fan_root(lp: &[usize; 12], len: usize) -> usize {
    let mut r = 0;
    while r < len {
        let mut ok = true;
        let mut k = 2;
        while k + 1 < len {
            if on_common_face(lp[r], lp[(r + k) % len]) {
                ok = false;
            }
            k += 1;
        }
        if ok {
            return r;
        }
        r += 1;
    }
    panic!("no interior fan root");
}

const fn cell_triangles(case: usize) -> [u8; 3 * MAX_CELL_TRIANGLES] {
    // next[e] = edge at the end of the segment starting at e
    let mut next = [NO_EDGE; 12];
    let mut f = 0;
    while f < 6 {
        let face = CELL_FACES[f];
        let mut i = 0;
        while i < 4 {
            let prev = (i + 3) % 4;
            if inside(case, face[i]) && !inside(case, face[prev]) {
                let mut j = i;
                while inside(case, face[(j + 1) % 4]) {
                    j = (j + 1) % 4;
                }
                let start = edge_between(face[prev], face[i]);
                let end = edge_between(face[j], face[(j + 1) % 4]);
                next[start] = end as u8;
            }
            i += 1;
        }
        f += 1;
    }
    let mut out = [NO_EDGE; 3 * MAX_CELL_TRIANGLES];
    let mut n = 0;
    let mut used = [false; 12];
    let mut s = 0;
    while s < 12 {
        if next[s] != NO_EDGE && !used[s] {
            let mut lp = [0usize; 12];
            let mut len = 0;
            let mut e = s;
            while !used[e] {
                used[e] = true;
                lp[len] = e;
                len += 1;
                e = next[e] as usize;
            }
            let r = fan_root(&lp, len);
            let mut k = 1;
            while k + 1 < len {
                out[3 * n] = lp[r] as u8;
                out[3 * n + 1] = lp[(r + k) % len] as u8;
                out[3 * n + 2] = lp[(r + k + 1) % len] as u8;
                n += 1;
                k += 1;
            }
        }
        s += 1;
    }
    out
}

const fn build_table() -> [[u8; 3 * MAX_CELL_TRIANGLES]; 256] {
    let mut t = [[NO_EDGE; 3 * MAX_CELL_TRIANGLES]; 256];
    let mut c = 0;
    while c < 256 {
        t[c] = cell_triangles(c);
        c += 1;
    }
    t
}

/// Triangles of each of the 256 inside/outside corner patterns, as triples of
/// cell-edge indices terminated by `u8::MAX`.
pub static TRIANGLE_TABLE: [[u8; 3 * MAX_CELL_TRIANGLES]; 256] = build_table();

/// Indexed triangle mesh in millimetres.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Vec<[f32; 3]>,
}

/// Edge-incidence summary of a mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshAudit {
    pub edges: usize,
    /// Undirected edges not used by exactly two triangles.
    pub bad_edges: usize,
    /// Directed edges used twice (inconsistent winding).
    pub flipped_edges: usize,
    pub euler: i64,
}

impl MeshAudit {
    pub fn watertight(&self) -> bool {
        self.bad_edges == 0 && self.flipped_edges == 0
    }
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn audit(&self) -> MeshAudit {
        let mut undirected: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        let mut directed: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *undirected.entry((a.min(b), a.max(b))).or_default() += 1;
                *directed.entry((a, b)).or_default() += 1;
            }
        }
        let used: BTreeMap<u32, ()> = self.triangles.iter().flatten().map(|&v| (v, ())).collect();
        MeshAudit {
            edges: undirected.len(),
            bad_edges: undirected.values().filter(|&&n| n != 2).count(),
            flipped_edges: directed.values().filter(|&&n| n > 1).count(),
            euler: used.len() as i64 - undirected.len() as i64 + self.triangles.len() as i64,
        }
    }

    /// Appends a triangle, deriving its unit normal from the winding.
    fn push(&mut self, t: [u32; 3]) {
        let p = t.map(|i| self.vertices[i as usize].map(f64::from));
        let u = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
        let v = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
        let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        let len = libm::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
        let n = if len > 0.0 { n.map(|c| (c / len) as f32) } else { [0.0, 0.0, 1.0] };
        self.triangles.push(t);
        self.normals.push(n);
    }
}

/// Iso-surface of `vol` at `iso` with outward-facing triangles. The volume is
/// treated as surrounded by one voxel of zeros so every surface closes.
/// Masks place vertices at edge midpoints; scalar volumes interpolate.
/// Vertex `(x, y, z)` is the `(w, h, d)` voxel position times
/// `spacing = (sx, sy, sz)`.
pub fn marching_cubes(vol: &VolumeGrid, iso: f32, spacing: [f32; 3]) -> Result<TriangleMesh> {
    if !(iso >= 0.0) || !iso.is_finite() {
        return Err(arg_err!("iso level must be finite and ≥ 0, got {iso}"));
    }
    let midpoint = match vol.kind() {
        VolumeKind::Mask => true,
        VolumeKind::Scalar => false,
        VolumeKind::Label => return Err(arg_err!("marching cubes needs a mask or scalar volume")),
    };
    let src = vol.dims();
    let dims = Dims::new(src.d + 2, src.h + 2, src.w + 2);
    let mut field = vec![0.0f32; dims.len()];
    for i in 0..src.len() {
        let [z, y, x] = src.coords(i);
        field[dims.index(z + 1, y + 1, x + 1)] = vol.get(z, y, x);
    }
    let corner_index = |cz: usize, cy: usize, cx: usize, c: usize| {
        dims.index(cz + (c >> 2 & 1), cy + (c >> 1 & 1), cx + (c & 1))
    };

    let mut mesh = TriangleMesh::default();
    let mut vertex_of: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for cz in 0..dims.d - 1 {
        for cy in 0..dims.h - 1 {
            for cx in 0..dims.w - 1 {
                let mut case = 0usize;
                for c in 0..8 {
                    if field[corner_index(cz, cy, cx, c)] > iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLE_TABLE[case];
                let mut k = 0;
                while k < row.len() && row[k] != NO_EDGE {
                    let mut tri = [0u32; 3];
                    for (slot, &e) in tri.iter_mut().zip(&row[k..k + 3]) {
                        let [a, b] = CELL_EDGES[e as usize];
                        let (ia, ib) = (corner_index(cz, cy, cx, a), corner_index(cz, cy, cx, b));
                        let axis = match e / 4 {
                            0 => 2,
                            1 => 1,
                            _ => 0,
                        };
                        let key = (ia.min(ib), axis);
                        *slot = *vertex_of.entry(key).or_insert_with(|| {
                            let t = if midpoint {
                                0.5
                            } else {
                                let (va, vb) = (field[ia], field[ib]);
                                ((iso - va) / (vb - va)).clamp(1e-3, 1.0 - 1e-3)
                            };
                            let pa = dims.coords(ia).map(|c| c as f32);
                            let pb = dims.coords(ib).map(|c| c as f32);
                            let p: [f32; 3] = core::array::from_fn(|q| pa[q] + t * (pb[q] - pa[q]) - 1.0);
                            mesh.vertices.push([p[2] * spacing[0], p[1] * spacing[1], p[0] * spacing[2]]);
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.push(tri);
                    k += 3;
                }
            }
        }
    }
    Ok(mesh)
}
