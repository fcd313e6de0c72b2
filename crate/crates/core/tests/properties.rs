//! Property tests of the volume, morphology, geometry and quantisation code
//! against direct, deliberately naive oracles.

use std::collections::{BTreeMap, BTreeSet};

use onj_core::anomaly::{anomaly_score, ScoreConfig};
use onj_core::diffnet::{Shape5, Tensor};
use onj_core::morphology::{filter_f32, MorphOp};
use onj_core::postproc::{
    connected_components, difference_map, grow_region, marching_cubes, subtract_soft_tissue, threshold_map,
    Connectivity, Direction, Region,
};
use onj_core::preprocess::{mask_apply, sliding_window_offsets};
use onj_core::vqgan::{quantize, Codebook};
use onj_core::{resample_nearest, Dims, VolumeGrid};
use proptest::prelude::*;

const SP: [f32; 3] = [1.0, 1.0, 1.0];

fn dims_strategy(max: usize) -> impl Strategy<Value = Dims> {
    (1..=max, 1..=max, 1..=max).prop_map(|(d, h, w)| Dims::new(d, h, w))
}

fn mask_strategy(max: usize) -> impl Strategy<Value = VolumeGrid> {
    dims_strategy(max).prop_flat_map(|d| {
        proptest::collection::vec(proptest::bool::weighted(0.35), d.len())
            .prop_map(move |b| VolumeGrid::mask(d, SP, b.into_iter().map(u8::from).collect()).unwrap())
    })
}

fn scalar_strategy(max: usize) -> impl Strategy<Value = VolumeGrid> {
    dims_strategy(max).prop_flat_map(|d| {
        proptest::collection::vec(-2.0f32..2.0, d.len()).prop_map(move |v| VolumeGrid::scalar(d, SP, v).unwrap())
    })
}

fn pair_strategy(max: usize) -> impl Strategy<Value = (VolumeGrid, VolumeGrid)> {
    dims_strategy(max).prop_flat_map(|d| {
        (proptest::collection::vec(0.0f32..1.0, d.len()), proptest::collection::vec(0.0f32..1.0, d.len()))
            .prop_map(move |(a, b)| (VolumeGrid::scalar(d, SP, a).unwrap(), VolumeGrid::scalar(d, SP, b).unwrap()))
    })
}

/// Direct neighbourhood scan: erosion ignores outside voxels, dilation
/// treats them as zero.
fn naive_filter(data: &[f32], dims: Dims, op: MorphOp, r: usize) -> Vec<f32> {
    let r = r as isize;
    (0..dims.len())
        .map(|i| {
            let [z, y, x] = dims.coords(i).map(|v| v as isize);
            let mut acc = match op {
                MorphOp::Erode => f32::INFINITY,
                MorphOp::Dilate => f32::NEG_INFINITY,
            };
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (a, b, c) = (z + dz, y + dy, x + dx);
                        let v = if dims.contains(a, b, c) {
                            Some(data[dims.index(a as usize, b as usize, c as usize)])
                        } else {
                            None
                        };
                        acc = match (op, v) {
                            (MorphOp::Erode, Some(v)) => acc.min(v),
                            (MorphOp::Erode, None) => acc,
                            (MorphOp::Dilate, v) => acc.max(v.unwrap_or(0.0)),
                        };
                    }
                }
            }
            acc
        })
        .collect()
}

/// Breadth-first labelling with an explicit neighbour test.
fn flood_fill(bits: &[u8], dims: Dims, full: bool) -> Vec<BTreeSet<[usize; 3]>> {
    let adjacent = |a: [usize; 3], b: [usize; 3]| {
        let d: Vec<usize> = (0..3).map(|k| a[k].abs_diff(b[k])).collect();
        if d.iter().any(|&v| v > 1) {
            return false;
        }
        let s: usize = d.iter().sum();
        s > 0 && (full || s == 1)
    };
    let on: Vec<[usize; 3]> = (0..dims.len()).filter(|&i| bits[i] != 0).map(|i| dims.coords(i)).collect();
    let mut label: BTreeMap<[usize; 3], usize> = BTreeMap::new();
    let mut out = Vec::new();
    for &seed in &on {
        if label.contains_key(&seed) {
            continue;
        }
        let id = out.len();
        let mut comp = BTreeSet::new();
        let mut queue = std::collections::VecDeque::from([seed]);
        label.insert(seed, id);
        while let Some(p) = queue.pop_front() {
            comp.insert(p);
            for &q in &on {
                if !label.contains_key(&q) && adjacent(p, q) {
                    label.insert(q, id);
                    queue.push_back(q);
                }
            }
        }
        out.push(comp);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn morphology_matches_naive_filter(v in scalar_strategy(8), r in 0usize..3, erode in any::<bool>()) {
        let op = if erode { MorphOp::Erode } else { MorphOp::Dilate };
        let got = filter_f32(v.scalars().unwrap(), v.dims(), op, r);
        let want = naive_filter(v.scalars().unwrap(), v.dims(), op, r);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn binary_morphology_duality(m in mask_strategy(8), r in 0usize..3) {
        // erode(m) == not dilate(not m), with the complement's outside taken as 1
        // for erosion's edge replication: compare only where the dilation
        // window stays inside the volume.
        let d = m.dims();
        let bits: Vec<f32> = m.mask_bits().unwrap().iter().map(|&b| b as f32).collect();
        let not: Vec<f32> = bits.iter().map(|b| 1.0 - b).collect();
        let e = filter_f32(&bits, d, MorphOp::Erode, r);
        let dn = filter_f32(&not, d, MorphOp::Dilate, r);
        let ri = r as isize;
        for i in 0..d.len() {
            let [z, y, x] = d.coords(i).map(|v| v as isize);
            let inside = d.contains(z - ri, y - ri, x - ri) && d.contains(z + ri, y + ri, x + ri);
            if inside {
                prop_assert_eq!(e[i], 1.0 - dn[i]);
            }
        }
    }

    #[test]
    fn closing_is_extensive(m in mask_strategy(8), r in 0usize..3) {
        let bits: Vec<f32> = m.mask_bits().unwrap().iter().map(|&b| b as f32).collect();
        let closed = filter_f32(&filter_f32(&bits, m.dims(), MorphOp::Dilate, r), m.dims(), MorphOp::Erode, r);
        for (c, b) in closed.iter().zip(&bits) {
            prop_assert!(c >= b);
        }
    }

    #[test]
    fn components_match_flood_fill(m in mask_strategy(8), full in any::<bool>()) {
        let conn = if full { Connectivity::TwentySix } else { Connectivity::Six };
        let regions = connected_components(&m, conn).unwrap();
        let got: Vec<BTreeSet<[usize; 3]>> = regions.iter().map(|r| r.voxels.iter().copied().collect()).collect();
        let want = flood_fill(m.mask_bits().unwrap(), m.dims(), full);
        prop_assert_eq!(&got, &want);
        for (k, r) in regions.iter().enumerate() {
            prop_assert_eq!(r.id, k + 1);
        }
    }

    #[test]
    fn quantize_matches_exhaustive_search(
        k in 2usize..9, d in 1usize..5, n in 1usize..3, p in 1usize..4, seed in any::<u64>()
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let book: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shape = Shape5::new(n, d, p, 1, 1);
        let z: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let cb = Codebook::new(&book, d, 0.25).unwrap();
        let (zq, idx) = quantize(&Tensor::new(shape, z.clone()).unwrap(), &cb).unwrap();
        for b in 0..n {
            for s in 0..p {
                let v: Vec<f64> = (0..d).map(|c| z[(b * d + c) * p + s]).collect();
                let mut best = (f64::INFINITY, 0);
                for j in 0..k {
                    let dist: f64 = (0..d).map(|c| (v[c] - book[j * d + c]).powi(2)).sum();
                    if dist < best.0 {
                        best = (dist, j);
                    }
                }
                prop_assert_eq!(idx[b * p + s] as usize, best.1);
                for c in 0..d {
                    prop_assert_eq!(zq.data()[(b * d + c) * p + s], book[best.1 * d + c]);
                }
            }
        }
    }

    #[test]
    fn mask_apply_replaces_exactly_masked_voxels(x in scalar_strategy(6), fill in -1.0f32..1.0, seed in any::<u64>()) {
        let bits: Vec<u8> = (0..x.dims().len()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        let m = VolumeGrid::mask(x.dims(), SP, bits.clone()).unwrap();
        let y = mask_apply(&x, &m, fill).unwrap();
        for i in 0..bits.len() {
            let want = if bits[i] == 1 { fill } else { x.scalars().unwrap()[i] };
            prop_assert_eq!(y.scalars().unwrap()[i], want);
        }
    }

    #[test]
    fn difference_threshold_and_subtraction_are_elementwise((a, b) in pair_strategy(6), tau in 0.0f32..0.5) {
        let dm = difference_map(&a, &b).unwrap();
        let (av, bv) = (a.scalars().unwrap(), b.scalars().unwrap());
        for i in 0..av.len() {
            prop_assert_eq!(dm.scalars().unwrap()[i], (av[i] - bv[i]) * (av[i] - bv[i]));
        }
        let t = threshold_map(&dm, tau).unwrap();
        let soft = threshold_map(&a, 0.5).unwrap();
        let s = subtract_soft_tissue(&t, &soft).unwrap();
        for i in 0..av.len() {
            let ti = dm.scalars().unwrap()[i] > tau;
            prop_assert_eq!(t.mask_bits().unwrap()[i] == 1, ti);
            prop_assert_eq!(s.mask_bits().unwrap()[i] == 1, ti && av[i] <= 0.5);
        }
    }

    #[test]
    fn anomaly_score_symmetric_and_monotone((a, b) in pair_strategy(7), extra in any::<u64>()) {
        let cfg = ScoreConfig::default();
        let s_ab = anomaly_score(&a, &b, &cfg).unwrap();
        prop_assert_eq!(s_ab, anomaly_score(&b, &a, &cfg).unwrap());
        // Raising the difference at some voxels never lowers the score.
        let mut bigger = b.scalars().unwrap().to_vec();
        for (i, v) in bigger.iter_mut().enumerate() {
            if (extra >> (i % 64)) & 1 == 1 {
                let av = a.scalars().unwrap()[i];
                *v = if *v >= av { *v + 1.0 } else { *v - 1.0 };
            }
        }
        let b2 = VolumeGrid::scalar(b.dims(), SP, bigger).unwrap();
        prop_assert!(anomaly_score(&a, &b2, &cfg).unwrap() >= s_ab);
    }

    #[test]
    fn meshes_of_random_masks_are_watertight(m in mask_strategy(6)) {
        let mesh = marching_cubes(&m, 0.5, [0.5, 1.0, 2.0]).unwrap();
        let audit = mesh.audit();
        prop_assert_eq!(audit.bad_edges, 0);
        prop_assert_eq!(audit.flipped_edges, 0);
        for n in &mesh.normals {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            prop_assert!((len - 1.0).abs() < 1e-5);
        }
        for t in &mesh.triangles {
            prop_assert!(t.iter().all(|&i| (i as usize) < mesh.vertices.len()));
        }
    }

    #[test]
    fn growth_stays_in_allowed_space_and_connected(m in mask_strategy(6), iters in 0usize..4, axis in 0usize..3, pos in any::<bool>()) {
        let d = m.dims();
        let seed = Region::new(1, vec![[d.d / 2, d.h / 2, d.w / 2]]).unwrap();
        let allowed = m.mask_bits().unwrap();
        let g = grow_region(&seed, &m, Direction { axis, positive: pos }, iters).unwrap();
        prop_assert!(g.voxels.contains(&seed.voxels[0]));
        prop_assert!(g.len() <= 1 + iters);
        for v in &g.voxels {
            if *v != seed.voxels[0] {
                prop_assert_eq!(allowed[d.index(v[0], v[1], v[2])], 1);
            }
            // Everything lies on the seed's line along the growth axis.
            for k in 0..3 {
                if k != axis {
                    prop_assert_eq!(v[k], seed.voxels[0][k]);
                }
            }
        }
    }

    #[test]
    fn nearest_resampling_takes_block_corners(v in scalar_strategy(8), f in (1usize..4, 1usize..4, 1usize..4)) {
        let f = [f.0, f.1, f.2];
        let src = v.dims();
        let Ok(r) = resample_nearest(&v, f) else {
            prop_assert!(src.d < f[0] || src.h < f[1] || src.w < f[2]);
            return Ok(());
        };
        let dst = r.dims();
        prop_assert_eq!(dst, Dims::new(src.d / f[0], src.h / f[1], src.w / f[2]));
        for i in 0..dst.len() {
            let [z, y, x] = dst.coords(i);
            prop_assert_eq!(r.scalars().unwrap()[i], v.get(z * f[0], y * f[1], x * f[2]));
        }
        prop_assert_eq!(r.spacing(), [f[2] as f32, f[1] as f32, f[0] as f32]);
    }

    #[test]
    fn window_offsets_cover_every_voxel(d in dims_strategy(12), win in 1usize..6, stride in 1usize..6) {
        let w = Dims::new(win.min(d.d), win.min(d.h), win.min(d.w));
        let min_side = w.d.min(w.h).min(w.w);
        if stride > min_side {
            prop_assert!(sliding_window_offsets(d, w, stride).is_err());
            return Ok(());
        }
        let offs = sliding_window_offsets(d, w, stride).unwrap();
        let mut cover = vec![0u32; d.len()];
        for o in &offs {
            for i in 0..w.len() {
                let [z, y, x] = w.coords(i);
                cover[d.index(o[0] + z, o[1] + y, o[2] + x)] += 1;
            }
        }
        prop_assert!(cover.iter().all(|&c| c > 0));
        let mut sorted = offs.clone();
        sorted.sort();
        prop_assert_eq!(sorted, offs);
    }
}
