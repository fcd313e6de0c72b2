//! Procedural healthy jaw label volumes and simulated bone/tooth loss.
//!
//! Orientation: axis `D` (z) points superior, so the mandible sits low, the
//! upper skull slab high, and the lower and upper teeth between them with an
//! occlusal gap. The dental arch is a half-ellipse in the `(H, W)` plane that
//! opens towards low `y`.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use libm::{cos, sin, sqrt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::volume::{Dims, VolumeGrid};

pub const BACKGROUND: u8 = 0;
pub const UPPER_SKULL: u8 = 1;
pub const MANDIBLE: u8 = 2;
pub const UPPER_TEETH: u8 = 3;
pub const LOWER_TEETH: u8 = 4;
pub const CANAL: u8 = 5;

/// Parameters of one synthetic subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub seed: u64,
    /// Isotropic voxel size used to convert the millimetre radii.
    pub voxel_mm: f32,
    pub arch_radius_mm: f32,
    /// Teeth per arch.
    pub tooth_count: usize,
    pub tooth_radius_mm: f32,
    pub canal_radius_mm: f32,
    /// Scales every random perturbation; `0` makes the output seed-independent.
    pub jitter: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims::cube(32),
            seed: 0,
            voxel_mm: 2.0,
            arch_radius_mm: 18.0,
            tooth_count: 6,
            tooth_radius_mm: 3.0,
            canal_radius_mm: 2.2,
            jitter: 0.5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tooth_count == 0 {
            return Err(arg_err!("tooth_count must be at least 1"));
        }
        let radii = [self.voxel_mm, self.arch_radius_mm, self.tooth_radius_mm, self.canal_radius_mm];
        if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(arg_err!("voxel size and radii must be positive"));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(arg_err!("jitter {} outside [0, 1]", self.jitter));
        }
        Ok(())
    }
}

/// Concrete per-subject geometry in voxel units, after jitter.
#[derive(Debug, Clone, PartialEq)]
struct Anatomy {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    bone_half_width: f64,
    mandible_half_height: f64,
    mandible_z: f64,
    canal_radius: f64,
    canal_z: f64,
    tooth_radius: Vec<f64>,
    tooth_half_height: f64,
    lower_tooth_z: f64,
    upper_tooth_z: f64,
    slab_bottom: f64,
    slab_top: f64,
    tooth_angles: Vec<f64>,
}

impl Anatomy {
    fn sample(spec: &PhantomSpec) -> Result<Anatomy> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let j = spec.jitter as f64;
        let mut u = move || j * rng.gen_range(-1.0..=1.0);
        let mm = spec.voxel_mm as f64;
        let [d, h, w] = spec.dims.as_array().map(|v| v as f64);
        let r = spec.arch_radius_mm as f64 / mm * (1.0 + 0.06 * u());
        let aspect = 1.0 + 0.06 * u();
        let (ry, rx) = (r * aspect, r / aspect);
        let bone_half_width = 0.25 * r * (1.0 + 0.1 * u());
        let mandible_half_height = 0.3 * r * (1.0 + 0.1 * u());
        let canal_radius = spec.canal_radius_mm as f64 / mm * (1.0 + 0.05 * u());
        let tooth_base = spec.tooth_radius_mm as f64 / mm * (1.0 + 0.06 * u());
        let n = spec.tooth_count;
        let tooth_radius: Vec<f64> = (0..n).map(|_| tooth_base * (1.0 + 0.04 * u())).collect();
        let tooth_half_height = 1.5 * tooth_base;
        let slab_thickness = 1.2 * mandible_half_height * (1.0 + 0.1 * u());
        let gap = 1.6;
        let tooth_angles: Vec<f64> = (0..n)
            .map(|i| core::f64::consts::PI * (i as f64 + 0.5) / n as f64)
            .collect();

        // Stack the structures bottom-up, then centre the stack in z.
        let mandible_z = mandible_half_height;
        let lower_tooth_z = mandible_z + mandible_half_height + 0.5 * tooth_half_height;
        let upper_tooth_z = lower_tooth_z + 2.0 * tooth_half_height + gap;
        let slab_bottom = upper_tooth_z + 0.5 * tooth_half_height;
        let slab_top = slab_bottom + slab_thickness;
        let shift = (d - 1.0 - slab_top) / 2.0 + 0.5 * u();
        let cy = 0.35 * h + 0.5 * u();
        let cx = (w - 1.0) / 2.0 + 0.5 * u();

        // Neighbouring teeth must stay disjoint along the arch.
        let spacing = core::f64::consts::PI * 0.5 * (rx + ry) / n as f64;
        let widest = tooth_radius.iter().copied().fold(0.0, f64::max);
        if spacing < 2.0 * widest + 1.0 {
            return Err(arg_err!(
                "{} teeth of radius {:.2} vox do not fit an arch of radius {:.2} vox",
                n,
                widest,
                r
            ));
        }
        if canal_radius + 0.5 >= bone_half_width.min(mandible_half_height) {
            return Err(arg_err!("canal radius {:.2} vox does not fit inside the mandible", canal_radius));
        }
        let a = Anatomy {
            cy,
            cx,
            ry,
            rx,
            bone_half_width,
            mandible_half_height,
            mandible_z: mandible_z + shift,
            canal_radius,
            canal_z: mandible_z + shift - 0.2 * mandible_half_height,
            tooth_radius,
            tooth_half_height,
            lower_tooth_z: lower_tooth_z + shift,
            upper_tooth_z: upper_tooth_z + shift,
            slab_bottom: slab_bottom + shift,
            slab_top: slab_top + shift,
            tooth_angles,
        };
        let outer = bone_half_width + 0.5;
        let fits = a.mandible_z - mandible_half_height >= 1.0
            && a.slab_top <= d - 2.0
            && cy - outer >= 1.0
            && cy + ry + outer <= h - 2.0
            && cx - rx - outer >= 1.0
            && cx + rx + outer <= w - 2.0;
        if !fits {
            return Err(arg_err!("anatomy does not fit inside dims {:?}", spec.dims));
        }
        Ok(a)
    }

    /// Signed in-plane distance (voxels) from the arch curve, and whether the
    /// point lies on the open (anterior) half.
    fn arch_offset(&self, y: f64, x: f64) -> (f64, bool) {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        let rn = sqrt(dy * dy + dx * dx);
        ((rn - 1.0) * 0.5 * (self.ry + self.rx), y >= self.cy)
    }

    fn label_at(&self, z: f64, y: f64, x: f64) -> u8 {
        let (off, front) = self.arch_offset(y, x);
        for (i, &theta) in self.tooth_angles.iter().enumerate() {
            let ty = self.cy + self.ry * sin(theta);
            let tx = self.cx + self.rx * cos(theta);
            let rt = self.tooth_radius[i];
            let planar = ((y - ty) * (y - ty) + (x - tx) * (x - tx)) / (rt * rt);
            let hh = self.tooth_half_height;
            if planar + ((z - self.lower_tooth_z) / hh) * ((z - self.lower_tooth_z) / hh) <= 1.0 {
                return LOWER_TEETH;
            }
            if planar + ((z - self.upper_tooth_z) / hh) * ((z - self.upper_tooth_z) / hh) <= 1.0 {
                return UPPER_TEETH;
            }
        }
        if front {
            let cz = (z - self.canal_z) / self.canal_radius;
            let co = off / self.canal_radius;
            if cz * cz + co * co <= 1.0 {
                return CANAL;
            }
            let mz = (z - self.mandible_z) / self.mandible_half_height;
            let mo = off / self.bone_half_width;
            if mz * mz + mo * mo <= 1.0 {
                return MANDIBLE;
            }
        }
        let outer = 1.0 + self.bone_half_width / (0.5 * (self.ry + self.rx));
        let (dy, dx) = ((y - self.cy) / (self.ry * outer), (x - self.cx) / (self.rx * outer));
        let in_palate = dy * dy + dx * dx <= 1.0 && y >= self.cy - self.bone_half_width;
        if in_palate && z >= self.slab_bottom && z <= self.slab_top {
            return UPPER_SKULL;
        }
        BACKGROUND
    }
}

/// Generates a healthy subject holding all six labels.
pub fn generate_healthy(spec: &PhantomSpec) -> Result<VolumeGrid> {
    let a = Anatomy::sample(spec)?;
    let dims = spec.dims;
    let data = (0..dims.len())
        .map(|i| {
            let [z, y, x] = dims.coords(i);
            a.label_at(z as f64, y as f64, x as f64)
        })
        .collect();
    let mm = spec.voxel_mm;
    VolumeGrid::label(dims, [mm, mm, mm], data)
}

/// Soft tissue around the dental arch: a band just outside the bone and
/// teeth, from the bottom of the mandible to the top of the upper teeth.
pub fn generate_soft_tissue(spec: &PhantomSpec, thickness_vox: f64) -> Result<VolumeGrid> {
    let a = Anatomy::sample(spec)?;
    let dims = spec.dims;
    let lo = a.mandible_z - a.mandible_half_height;
    let hi = a.upper_tooth_z + a.tooth_half_height;
    let inner = a.bone_half_width + 1.0;
    let data = (0..dims.len())
        .map(|i| {
            let [z, y, x] = dims.coords(i);
            let (off, front) = a.arch_offset(y as f64, x as f64);
            let zf = z as f64;
            let band = off >= inner && off <= inner + thickness_vox;
            (front && band && zf >= lo && zf <= hi && a.label_at(zf, y as f64, x as f64) == BACKGROUND) as u8
        })
        .collect();
    let mm = spec.voxel_mm;
    VolumeGrid::mask(dims, [mm, mm, mm], data)
}

/// Voxel centre `(z, y, x)` and radius that place a lesion across the lower
/// tooth `tooth` and the bone below it.
pub fn lesion_site(spec: &PhantomSpec, tooth: usize) -> Result<[usize; 3]> {
    let a = Anatomy::sample(spec)?;
    let theta = *a
        .tooth_angles
        .get(tooth)
        .ok_or_else(|| arg_err!("tooth index {tooth} out of range"))?;
    let z = 0.5 * (a.mandible_z + a.lower_tooth_z);
    let y = a.cy + a.ry * sin(theta);
    let x = a.cx + a.rx * cos(theta);
    Ok([z, y, x].map(|v| libm::round(v).max(0.0) as usize))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LesionShape {
    Sphere,
    Box,
}

/// A simulated region of necrotic bone/tooth loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionSpec {
    pub center: [usize; 3],
    pub radius_vox: usize,
    pub shape: LesionShape,
    /// Labels erased inside the lesion; a subset of `{2, 3, 4, 5}`.
    pub targets: BTreeSet<u8>,
}

impl LesionSpec {
    pub fn new(center: [usize; 3], radius_vox: usize, shape: LesionShape, targets: &[u8]) -> Self {
        LesionSpec {
            center,
            radius_vox,
            shape,
            targets: targets.iter().copied().collect(),
        }
    }

    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        let d: [i64; 3] = core::array::from_fn(|k| p[k] as i64 - self.center[k] as i64);
        let r = self.radius_vox as i64;
        match self.shape {
            LesionShape::Sphere => d.iter().map(|v| v * v).sum::<i64>() <= r * r,
            LesionShape::Box => d.iter().map(|v| v.abs()).max().unwrap_or(0) <= r,
        }
    }
}

/// Erases `lesion.targets` inside the lesion; returns the lesioned volume and
/// the ground-truth mask of erased voxels.
pub fn simulate_onj(healthy: &VolumeGrid, lesion: &LesionSpec) -> Result<(VolumeGrid, VolumeGrid)> {
    let labels = healthy.labels()?;
    let dims = healthy.dims();
    let c = lesion.center;
    if c[0] >= dims.d || c[1] >= dims.h || c[2] >= dims.w {
        return Err(arg_err!("lesion centre {:?} outside dims {:?}", c, dims));
    }
    if lesion.radius_vox == 0 {
        return Err(arg_err!("lesion radius must be at least 1"));
    }
    if let Some(t) = lesion.targets.iter().find(|&&t| !(MANDIBLE..=CANAL).contains(&t)) {
        return Err(arg_err!("lesion target label {t} not in {{2,3,4,5}}"));
    }
    let mut out = labels.to_vec();
    let mut mask = vec![0u8; dims.len()];
    let r = lesion.radius_vox;
    let lo = c.map(|v| v.saturating_sub(r));
    let hi = [
        (c[0] + r).min(dims.d - 1),
        (c[1] + r).min(dims.h - 1),
        (c[2] + r).min(dims.w - 1),
    ];
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let i = dims.index(z, y, x);
                if lesion.targets.contains(&out[i]) && lesion.contains(z, y, x) {
                    out[i] = BACKGROUND;
                    mask[i] = 1;
                }
            }
        }
    }
    Ok((
        VolumeGrid::label(dims, healthy.spacing(), out)?,
        VolumeGrid::mask(dims, healthy.spacing(), mask)?,
    ))
}

/// Clears everything above slice `keep_below` (exclusive), imitating a scan
/// whose field of view cuts off the upper skull.
pub fn truncate_fov(labels: &VolumeGrid, keep_below: usize) -> Result<VolumeGrid> {
    let dims = labels.dims();
    let plane = dims.h * dims.w;
    let mut data = labels.labels()?.to_vec();
    let from = keep_below.min(dims.d) * plane;
    data[from..].fill(BACKGROUND);
    VolumeGrid::label(dims, labels.spacing(), data)
}
