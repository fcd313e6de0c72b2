//! Sectioned `key = value` pipeline configuration.
//!
//! Keys before the first section header are global (`seed`, `work_dir`).
//! Lines starting with `#` are comments. Unknown sections or keys, repeated
//! keys and malformed values are errors carrying the line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use onj_core::anomaly::ScoreConfig;
use onj_core::phantom::{LesionShape, PhantomSpec};
use onj_core::postproc::{Connectivity, Direction};
use onj_core::trainer::{FreezeGroup, MaskPolicy, TrainConfig};
use onj_core::vqgan::ArchConfig;
use onj_core::Dims;

use crate::error::{read_file, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSection {
    pub train_count: usize,
    pub test_count: usize,
    pub dims: usize,
    pub voxel_mm: f32,
    pub arch_radius_mm: f32,
    pub tooth_count: usize,
    pub tooth_radius_mm: f32,
    pub canal_radius_mm: f32,
    pub jitter: f32,
    pub lesion_radius: usize,
    pub lesion_shape: LesionShape,
    pub lesion_targets: Vec<u8>,
    /// Thickness of the generated soft-tissue band, in voxels.
    pub soft_tissue_vox: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomSpec::default();
        PhantomSection {
            train_count: 64,
            test_count: 16,
            dims: p.dims.d,
            voxel_mm: p.voxel_mm,
            arch_radius_mm: p.arch_radius_mm,
            tooth_count: p.tooth_count,
            tooth_radius_mm: p.tooth_radius_mm,
            canal_radius_mm: p.canal_radius_mm,
            jitter: p.jitter,
            lesion_radius: 4,
            lesion_shape: LesionShape::Sphere,
            lesion_targets: vec![2, 4, 5],
            soft_tissue_vox: 2.0,
        }
    }
}

impl PhantomSection {
    pub fn spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: Dims::cube(self.dims),
            seed,
            voxel_mm: self.voxel_mm,
            arch_radius_mm: self.arch_radius_mm,
            tooth_count: self.tooth_count,
            tooth_radius_mm: self.tooth_radius_mm,
            canal_radius_mm: self.canal_radius_mm,
            jitter: self.jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostSection {
    pub connectivity: Connectivity,
    pub overlap_tau: f64,
    pub grow_direction: Direction,
    pub grow_iters: usize,
    pub soft_tissue: bool,
    pub iso: f32,
}

impl Default for PostSection {
    fn default() -> Self {
        PostSection {
            connectivity: Connectivity::TwentySix,
            overlap_tau: 0.5,
            grow_direction: Direction::PLUS_Z,
            grow_iters: 2,
            soft_tissue: true,
            iso: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    pub phantom: PhantomSection,
    /// Sliding-window stride used at inference.
    pub stride: usize,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub anomaly: ScoreConfig,
    pub postproc: PostSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.mask.cube_size = (2, 8);
        PipelineConfig {
            seed: 0,
            work_dir: PathBuf::from("run"),
            phantom: PhantomSection::default(),
            stride: 16,
            model: ArchConfig::desk(),
            train,
            anomaly: ScoreConfig::default(),
            postproc: PostSection::default(),
        }
    }
}

pub const SECTIONS: [&str; 6] = ["phantom", "preprocess", "model", "train", "anomaly", "postproc"];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn core_err(e: onj_core::Error) -> String {
    e.to_string()
}

impl PipelineConfig {
    /// Applies one setting; `section` is empty for global keys.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        match (section, key) {
            ("", "seed") => {
                self.seed = parse(v)?;
                self.train.seed = self.seed;
            }
            ("", "work_dir") => self.work_dir = PathBuf::from(v),

            ("phantom", "train_count") => self.phantom.train_count = parse(v)?,
            ("phantom", "test_count") => self.phantom.test_count = parse(v)?,
            ("phantom", "dims") => self.phantom.dims = parse(v)?,
            ("phantom", "voxel_mm") => self.phantom.voxel_mm = parse(v)?,
            ("phantom", "arch_radius_mm") => self.phantom.arch_radius_mm = parse(v)?,
            ("phantom", "tooth_count") => self.phantom.tooth_count = parse(v)?,
            ("phantom", "tooth_radius_mm") => self.phantom.tooth_radius_mm = parse(v)?,
            ("phantom", "canal_radius_mm") => self.phantom.canal_radius_mm = parse(v)?,
            ("phantom", "jitter") => self.phantom.jitter = parse(v)?,
            ("phantom", "lesion_radius") => self.phantom.lesion_radius = parse(v)?,
            ("phantom", "lesion_shape") => {
                self.phantom.lesion_shape = match v {
                    "sphere" => LesionShape::Sphere,
                    "box" => LesionShape::Box,
                    _ => return Err(format!("lesion shape must be sphere or box, got {v:?}")),
                }
            }
            ("phantom", "lesion_targets") => self.phantom.lesion_targets = parse_list(v)?,
            ("phantom", "soft_tissue_vox") => self.phantom.soft_tissue_vox = parse(v)?,

            ("preprocess", "teeth_threshold") => self.train.mask.teeth_threshold = parse(v)?,
            ("preprocess", "dilate_kernel") => self.train.mask.dilate_kernel = parse(v)?,
            ("preprocess", "cube_count_min") => self.train.mask.cube_count.0 = parse(v)?,
            ("preprocess", "cube_count_max") => self.train.mask.cube_count.1 = parse(v)?,
            ("preprocess", "cube_size_min") => self.train.mask.cube_size.0 = parse(v)?,
            ("preprocess", "cube_size_max") => self.train.mask.cube_size.1 = parse(v)?,
            ("preprocess", "mask_fill") => self.train.mask.mask_fill = parse(v)?,
            ("preprocess", "stride") => self.stride = parse(v)?,

            ("model", "input") => self.model.input = parse(v)?,
            ("model", "enc_channels") => self.model.enc_channels = parse_list(v)?,
            ("model", "latent_channels") => self.model.latent_channels = parse(v)?,
            ("model", "dec_channels") => self.model.dec_channels = parse_list(v)?,
            ("model", "embed_dim") => self.model.embed_dim = parse(v)?,
            ("model", "codebook_size") => self.model.codebook_size = parse(v)?,
            ("model", "disc_channels") => self.model.disc_channels = parse(v)?,
            ("model", "beta") => self.model.beta = parse(v)?,

            ("train", "learning_rate") => self.train.learning_rate = parse(v)?,
            ("train", "batch_size") => self.train.batch_size = parse(v)?,
            ("train", "epochs_stage1") => self.train.epochs_stage1 = parse(v)?,
            ("train", "epochs_stage2") => self.train.epochs_stage2 = parse(v)?,
            ("train", "disc_start_epoch") => {
                self.train.disc_start_epoch = match v {
                    "auto" => None,
                    "never" => Some(usize::MAX),
                    n => Some(parse(n)?),
                }
            }
            ("train", "freeze") => {
                self.train.freeze = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| FreezeGroup::parse(s).map_err(core_err))
                    .collect::<std::result::Result<_, _>>()?
            }
            ("train", "mask_policy") => {
                self.train.mask_policy = match v {
                    "mixed" => MaskPolicy::Mixed,
                    "teeth" => MaskPolicy::TeethOnly,
                    "cubes" => MaskPolicy::CubesOnly,
                    "none" => MaskPolicy::None,
                    _ => return Err(format!("mask policy must be mixed, teeth, cubes or none, got {v:?}")),
                }
            }
            ("train", "teeth_mask_prob") => self.train.teeth_mask_prob = parse(v)?,
            ("train", "fresh_encoder") => self.train.fresh_encoder = parse_bool(v)?,
            ("train", "codebook_from_data") => self.train.codebook_from_data = parse_bool(v)?,
            ("train", "adam_beta1") => self.train.adam.beta1 = parse(v)?,
            ("train", "adam_beta2") => self.train.adam.beta2 = parse(v)?,
            ("train", "adam_eps") => self.train.adam.eps = parse(v)?,
            ("train", "lr_decay_epoch") => {
                self.train.lr_decay_epoch = match v {
                    "none" => None,
                    n => Some(parse(n)?),
                }
            }
            ("train", "lr_decay_factor") => self.train.lr_decay_factor = parse(v)?,

            ("anomaly", "diff_threshold") => self.anomaly.diff_threshold = parse(v)?,
            ("anomaly", "erosion_radius") => self.anomaly.erosion_radius = parse(v)?,
            ("anomaly", "dilation_radius") => self.anomaly.dilation_radius = parse(v)?,
            ("anomaly", "count") => self.anomaly.count = parse_bool(v)?,

            ("postproc", "connectivity") => self.postproc.connectivity = Connectivity::from_count(parse(v)?).map_err(core_err)?,
            ("postproc", "overlap_tau") => self.postproc.overlap_tau = parse(v)?,
            ("postproc", "grow_direction") => self.postproc.grow_direction = Direction::parse(v).map_err(core_err)?,
            ("postproc", "grow_iters") => self.postproc.grow_iters = parse(v)?,
            ("postproc", "soft_tissue") => self.postproc.soft_tissue = parse_bool(v)?,
            ("postproc", "iso") => self.postproc.iso = parse(v)?,

            ("", k) => return Err(format!("unknown global key {k:?}")),
            (s, _) if !SECTIONS.contains(&s) => return Err(format!("unknown section [{s}]")),
            (s, k) => return Err(format!("unknown key {k:?} in [{s}]")),
        }
        Ok(())
    }

    /// Every setting as `(section, key, value)`, in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let p = &self.phantom;
        let m = &self.train.mask;
        let a = &self.model;
        let t = &self.train;
        let s = &self.anomaly;
        let q = &self.postproc;
        let shape = match p.lesion_shape {
            LesionShape::Sphere => "sphere",
            LesionShape::Box => "box",
        };
        let disc = match t.disc_start_epoch {
            None => "auto".to_string(),
            Some(usize::MAX) => "never".to_string(),
            Some(n) => n.to_string(),
        };
        let policy = match t.mask_policy {
            MaskPolicy::Mixed => "mixed",
            MaskPolicy::TeethOnly => "teeth",
            MaskPolicy::CubesOnly => "cubes",
            MaskPolicy::None => "none",
        };
        let freeze: Vec<&str> = t.freeze.iter().map(|g| g.name()).collect();
        vec![
            ("", "seed", self.seed.to_string()),
            ("", "work_dir", self.work_dir.display().to_string()),
            ("phantom", "train_count", p.train_count.to_string()),
            ("phantom", "test_count", p.test_count.to_string()),
            ("phantom", "dims", p.dims.to_string()),
            ("phantom", "voxel_mm", p.voxel_mm.to_string()),
            ("phantom", "arch_radius_mm", p.arch_radius_mm.to_string()),
            ("phantom", "tooth_count", p.tooth_count.to_string()),
            ("phantom", "tooth_radius_mm", p.tooth_radius_mm.to_string()),
            ("phantom", "canal_radius_mm", p.canal_radius_mm.to_string()),
            ("phantom", "jitter", p.jitter.to_string()),
            ("phantom", "lesion_radius", p.lesion_radius.to_string()),
            ("phantom", "lesion_shape", shape.to_string()),
            ("phantom", "lesion_targets", join(&p.lesion_targets)),
            ("phantom", "soft_tissue_vox", p.soft_tissue_vox.to_string()),
            ("preprocess", "teeth_threshold", m.teeth_threshold.to_string()),
            ("preprocess", "dilate_kernel", m.dilate_kernel.to_string()),
            ("preprocess", "cube_count_min", m.cube_count.0.to_string()),
            ("preprocess", "cube_count_max", m.cube_count.1.to_string()),
            ("preprocess", "cube_size_min", m.cube_size.0.to_string()),
            ("preprocess", "cube_size_max", m.cube_size.1.to_string()),
            ("preprocess", "mask_fill", m.mask_fill.to_string()),
            ("preprocess", "stride", self.stride.to_string()),
            ("model", "input", a.input.to_string()),
            ("model", "enc_channels", join(&a.enc_channels)),
            ("model", "latent_channels", a.latent_channels.to_string()),
            ("model", "dec_channels", join(&a.dec_channels)),
            ("model", "embed_dim", a.embed_dim.to_string()),
            ("model", "codebook_size", a.codebook_size.to_string()),
            ("model", "disc_channels", a.disc_channels.to_string()),
            ("model", "beta", a.beta.to_string()),
            ("train", "learning_rate", t.learning_rate.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "epochs_stage1", t.epochs_stage1.to_string()),
            ("train", "epochs_stage2", t.epochs_stage2.to_string()),
            ("train", "disc_start_epoch", disc),
            ("train", "freeze", freeze.join(",")),
            ("train", "mask_policy", policy.to_string()),
            ("train", "teeth_mask_prob", t.teeth_mask_prob.to_string()),
            ("train", "fresh_encoder", t.fresh_encoder.to_string()),
            ("train", "codebook_from_data", t.codebook_from_data.to_string()),
            ("train", "adam_beta1", t.adam.beta1.to_string()),
            ("train", "adam_beta2", t.adam.beta2.to_string()),
            ("train", "adam_eps", t.adam.eps.to_string()),
            ("train", "lr_decay_epoch", t.lr_decay_epoch.map_or("none".to_string(), |e| e.to_string())),
            ("train", "lr_decay_factor", t.lr_decay_factor.to_string()),
            ("anomaly", "diff_threshold", s.diff_threshold.to_string()),
            ("anomaly", "erosion_radius", s.erosion_radius.to_string()),
            ("anomaly", "dilation_radius", s.dilation_radius.to_string()),
            ("anomaly", "count", s.count.to_string()),
            ("postproc", "connectivity", q.connectivity.count().to_string()),
            ("postproc", "overlap_tau", q.overlap_tau.to_string()),
            ("postproc", "grow_direction", q.grow_direction.name().to_string()),
            ("postproc", "grow_iters", q.grow_iters.to_string()),
            ("postproc", "soft_tissue", q.soft_tissue.to_string()),
            ("postproc", "iso", q.iso.to_string()),
        ]
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (sec, key, val) in self.entries() {
            if sec != current {
                writeln!(out, "\n[{sec}]").unwrap();
                current = sec;
            }
            writeln!(out, "{key} = {val}").unwrap();
        }
        out
    }

    /// Checks cross-field constraints once all settings are applied.
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.train.validate().map_err(core_err)?;
        self.anomaly.validate().map_err(core_err)?;
        self.phantom.spec(0).validate().map_err(core_err)?;
        onj_core::vqgan::ModelSpec::from_arch(&self.model).map_err(core_err)?;
        if self.model.input > self.phantom.dims {
            return Err(format!("model input {} exceeds phantom dims {}", self.model.input, self.phantom.dims));
        }
        if self.stride == 0 {
            return Err("stride must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.postproc.overlap_tau) {
            return Err("overlap_tau must lie in [0, 1]".into());
        }
        if self.phantom.train_count == 0 || self.phantom.test_count == 0 {
            return Err("train_count and test_count must be positive".into());
        }
        Ok(())
    }

    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut section = String::new();
        let mut seen = std::collections::BTreeSet::new();
        let err = |line: usize, msg: String| Error::Config { path: path.to_path_buf(), line, msg };
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(n, "unterminated section header".into()))?.trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(n, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(n, format!("expected `key = value`, got {line:?}")))?;
            let k = k.trim();
            if !seen.insert((section.clone(), k.to_string())) {
                return Err(err(n, format!("duplicate key {k:?}")));
            }
            cfg.set(&section, k, v).map_err(|m| err(n, m))?;
        }
        cfg.validate().map_err(|m| err(0, m))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        Self::parse_str(&text, path)
    }

    /// Applies `section.key=value` overrides (a bare `key=value` is global).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for (i, o) in overrides.iter().enumerate() {
            let err = |msg: String| Error::Config { path: PathBuf::from("--set"), line: i + 1, msg };
            let (k, v) = o.split_once('=').ok_or_else(|| err(format!("override {o:?} is not key=value")))?;
            let (sec, key) = k.trim().split_once('.').unwrap_or(("", k.trim()));
            self.set(sec, key, v).map_err(|m| err(format!("{}: {m}", k.trim())))?;
        }
        self.validate().map_err(|m| Error::Config { path: PathBuf::from("--set"), line: 0, msg: m })
    }

    /// `section.key=value` lines used in records and checkpoint metadata.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        self.entries()
            .into_iter()
            .map(|(s, k, v)| (if s.is_empty() { k.to_string() } else { format!("{s}.{k}") }, v))
            .collect()
    }
}

/// Model-section keys as metadata pairs, for checkpoints.
pub fn arch_meta(a: &ArchConfig) -> Vec<(String, String)> {
    let cfg = PipelineConfig { model: a.clone(), ..Default::default() };
    cfg.entries()
        .into_iter()
        .filter(|(s, _, _)| *s == "model")
        .map(|(s, k, v)| (format!("{s}.{k}"), v))
        .collect()
}

/// Rebuilds an architecture from `model.*` metadata pairs.
pub fn arch_from_meta(meta: &[(String, String)]) -> std::result::Result<ArchConfig, String> {
    let mut cfg = PipelineConfig::default();
    let mut found = 0;
    for (k, v) in meta {
        if let Some(key) = k.strip_prefix("model.") {
            cfg.set("model", key, v)?;
            found += 1;
        }
    }
    if found == 0 {
        return Err("no model.* entries".into());
    }
    Ok(cfg.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = PipelineConfig::default();
        c.set("train", "disc_start_epoch", "never").unwrap();
        c.set("postproc", "grow_direction", "-y").unwrap();
        c.set("train", "lr_decay_epoch", "7").unwrap();
        c.set("train", "lr_decay_factor", "0.25").unwrap();
        let back = PipelineConfig::parse_str(&c.to_text(), Path::new("c.cfg")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "seed = 1\n\n[train]\nlearning_rate = 1e-3\nbogus = 2\n";
        match PipelineConfig::parse_str(text, Path::new("c.cfg")) {
            Err(Error::Config { line, msg, .. }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("bogus"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
        let bad = "[nope]\n";
        assert!(matches!(PipelineConfig::parse_str(bad, Path::new("c")), Err(Error::Config { line: 1, .. })));
        let dup = "[train]\nbatch_size = 2\nbatch_size = 3\n";
        assert!(matches!(PipelineConfig::parse_str(dup, Path::new("c")), Err(Error::Config { line: 3, .. })));
        let val = "[train]\nbatch_size = many\n";
        assert!(matches!(PipelineConfig::parse_str(val, Path::new("c")), Err(Error::Config { line: 2, .. })));
    }

    #[test]
    fn overrides() {
        let mut c = PipelineConfig::default();
        c.apply_overrides(&["train.batch_size=3".into(), "seed=9".into()]).unwrap();
        assert_eq!(c.train.batch_size, 3);
        assert_eq!(c.train.seed, 9);
        assert!(c.apply_overrides(&["train.nope=1".into()]).is_err());
    }

    #[test]
    fn arch_metadata_round_trip() {
        let a = ArchConfig::full();
        assert_eq!(arch_from_meta(&arch_meta(&a)).unwrap(), a);
    }
}
