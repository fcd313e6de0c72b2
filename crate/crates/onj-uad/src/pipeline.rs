//! Command implementations over a work directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use onj_core::anomaly::{anomaly_map, anomaly_score, dice, reconstruct, ModelReconstructor, ScoreConfig, ScoreMode};
use onj_core::phantom::{generate_healthy, generate_soft_tissue, lesion_site, simulate_onj, LesionSpec};
use onj_core::postproc::{
    connected_components, filter_regions_by_overlap, grow_region, marching_cubes, overlap_fraction,
    subtract_soft_tissue,
};
use onj_core::preprocess::{normalize_labels, pad_to};
use onj_core::trainer::{Checkpoint, EpochLosses, Trainer};
use onj_core::{Dims, VolumeGrid};

use crate::ckpt::{read_checkpoint, write_checkpoint};
use crate::config::PipelineConfig;
use crate::error::{write_file, Error, Result};
use crate::manifest::{read_manifest, resolve, write_manifest, Entry};
use crate::record::Record;
use crate::stl::write_stl;
use crate::volio::read_volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Train1,
    Train2,
    Reconstruct,
    Score,
    Segment,
    Export,
    All,
}

impl Command {
    pub const STEPS: [Command; 7] = [
        Command::Gen,
        Command::Train1,
        Command::Train2,
        Command::Reconstruct,
        Command::Score,
        Command::Segment,
        Command::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train1 => "train1",
            Command::Train2 => "train2",
            Command::Reconstruct => "reconstruct",
            Command::Score => "score",
            Command::Segment => "segment",
            Command::Export => "export",
            Command::All => "all",
        }
    }
}

/// Subject seed from the global seed, split index and subject index.
pub fn subject_seed(seed: u64, split: u64, i: u64) -> u64 {
    let mut z = seed ^ split.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed layout of every artifact below the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("data/train.manifest")
    }
    pub fn healthy_manifest(&self) -> PathBuf {
        self.root.join("data/test_healthy.manifest")
    }
    pub fn lesioned_manifest(&self) -> PathBuf {
        self.root.join("data/test_lesioned.manifest")
    }
    pub fn stage_ckpt(&self, stage: u8) -> PathBuf {
        self.root.join(format!("ckpt/stage{stage}.ckpt"))
    }
    pub fn loss_log(&self, stage: u8) -> PathBuf {
        self.root.join(format!("logs/stage{stage}_loss.csv"))
    }
    pub fn recon(&self, id: &str, stage: u8) -> PathBuf {
        self.root.join(format!("recon/{id}_g{stage}.vol"))
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("reports/scores.txt")
    }
    pub fn dice(&self) -> PathBuf {
        self.root.join("reports/dice.txt")
    }
    pub fn seg_map(&self, id: &str) -> PathBuf {
        self.root.join(format!("seg/{id}_map.vol"))
    }
    pub fn stl_dir(&self, id: &str) -> PathBuf {
        self.root.join(format!("stl/{id}"))
    }
    pub fn record(&self, cmd: Command) -> PathBuf {
        self.root.join(format!("records/{}.txt", cmd.name()))
    }
}

/// Sibling file of a subject volume, e.g. `<id>_soft.vol`.
fn companion(vol: &Path, suffix: &str) -> PathBuf {
    let stem = vol.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    vol.with_file_name(format!("{stem}_{suffix}.vol"))
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Missing { artifact: path.to_path_buf(), command })
    }
}

/// A test subject with its resolved files.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub labels: PathBuf,
    pub lesioned: bool,
}

impl Subject {
    pub fn soft(&self) -> PathBuf {
        companion(&self.labels, "soft")
    }
    pub fn lesion(&self) -> PathBuf {
        companion(&self.labels, "lesion")
    }
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    /// Worker cap for per-subject reconstruction.
    pub threads: usize,
    pub verbose: bool,
}

impl Pipeline {
    /// `base` is the directory a relative `work_dir` is resolved against.
    pub fn new(cfg: PipelineConfig, base: &Path) -> Self {
        let root = base.join(&cfg.work_dir);
        Pipeline { cfg, layout: Layout { root }, threads: 1, verbose: false }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn run(&self, cmd: Command) -> Result<()> {
        if cmd == Command::All {
            let mut all = Record::new(Command::All.name(), &self.cfg);
            for step in Command::STEPS {
                let r = self.run_step(step)?;
                all.extend(&r);
            }
            return all.write(&self.layout.record(Command::All), &self.layout.root);
        }
        self.run_step(cmd).map(|_| ())
    }

    fn run_step(&self, cmd: Command) -> Result<Record> {
        self.log(format!("== {}", cmd.name()));
        let mut rec = Record::new(cmd.name(), &self.cfg);
        match cmd {
            Command::Gen => self.gen(&mut rec)?,
            Command::Train1 => self.train1(&mut rec)?,
            Command::Train2 => self.train2(&mut rec)?,
            Command::Reconstruct => self.reconstruct(&mut rec)?,
            Command::Score => self.score(&mut rec)?,
            Command::Segment => self.segment(&mut rec)?,
            Command::Export => self.export(&mut rec)?,
            Command::All => unreachable!("expanded by run"),
        }
        rec.write(&self.layout.record(cmd), &self.layout.root)?;
        Ok(rec)
    }

    fn gen(&self, rec: &mut Record) -> Result<()> {
        let p = &self.cfg.phantom;
        let data = self.layout.root.join("data");
        let mut train = Vec::new();
        for i in 0..p.train_count {
            let seed = subject_seed(self.cfg.seed, 0, i as u64);
            let id = format!("train_{i:03}");
            let rel = PathBuf::from(format!("train/{id}.vol"));
            let vol = generate_healthy(&p.spec(seed))?;
            rec.volume(&data.join(&rel), &vol)?;
            train.push(Entry { id, seed, path: rel });
        }
        write_manifest(&train, &self.layout.train_manifest())?;
        rec.file(&self.layout.train_manifest())?;

        for (split, name, prefix) in [(1u64, "test_healthy", "healthy"), (2, "test_lesioned", "lesioned")] {
            let mut entries = Vec::new();
            for i in 0..p.test_count {
                let seed = subject_seed(self.cfg.seed, split, i as u64);
                let spec = p.spec(seed);
                let id = format!("{prefix}_{i:03}");
                let rel = PathBuf::from(format!("{name}/{id}.vol"));
                let path = data.join(&rel);
                let healthy = generate_healthy(&spec)?;
                if split == 2 {
                    let tooth = (subject_seed(seed, 3, 0) % spec.tooth_count as u64) as usize;
                    let centre = lesion_site(&spec, tooth)?;
                    let lesion = LesionSpec::new(centre, p.lesion_radius, p.lesion_shape, &p.lesion_targets);
                    let (vol, mask) = simulate_onj(&healthy, &lesion)?;
                    rec.volume(&path, &vol)?;
                    rec.volume(&companion(&path, "lesion"), &mask)?;
                } else {
                    rec.volume(&path, &healthy)?;
                }
                let soft = generate_soft_tissue(&spec, p.soft_tissue_vox)?;
                rec.volume(&companion(&path, "soft"), &soft)?;
                entries.push(Entry { id, seed, path: rel });
            }
            let m = data.join(format!("{name}.manifest"));
            write_manifest(&entries, &m)?;
            rec.file(&m)?;
        }
        self.log(format!("generated {} training and {} test subjects", p.train_count, 2 * p.test_count));
        Ok(())
    }

    /// Normalised training volumes, padded up to the model window if needed.
    fn training_set(&self) -> Result<Vec<VolumeGrid>> {
        let m = self.layout.train_manifest();
        require(&m, "gen")?;
        let window = Dims::cube(self.cfg.model.input);
        read_manifest(&m)?
            .iter()
            .map(|e| {
                let x = normalize_labels(&read_volume(&resolve(&m, e))?)?;
                self.fit(&x, window)
            })
            .collect()
    }

    fn fit(&self, x: &VolumeGrid, window: Dims) -> Result<VolumeGrid> {
        let d = x.dims();
        let target = Dims::new(d.d.max(window.d), d.h.max(window.h), d.w.max(window.w));
        if target == d {
            Ok(x.clone())
        } else {
            Ok(pad_to(x, target, 0.0)?)
        }
    }

    fn train(&self, stage: u8, rec: &mut Record) -> Result<()> {
        let data = self.training_set()?;
        let cfg = &self.cfg.train;
        let (mut trainer, epochs) = if stage == 1 {
            (Trainer::stage1(&self.cfg.model, cfg)?, cfg.epochs_stage1)
        } else {
            let c1 = self.layout.stage_ckpt(1);
            require(&c1, "train1")?;
            (Trainer::stage2(&read_checkpoint(&c1)?, cfg)?, cfg.epochs_stage2)
        };
        let mut csv = String::from("epoch,recon,vq,adv,lambda,disc\n");
        for _ in 0..epochs {
            let l = trainer.epoch(&data)?;
            self.log(format!(
                "stage {stage} epoch {} recon {:.5} vq {:.5} adv {:.4} lambda {:.3e} disc {:.4}",
                l.epoch, l.recon, l.vq, l.adv, l.lambda, l.disc
            ));
            csv_line(&mut csv, &l);
        }
        let mut ckpt = trainer.checkpoint();
        ckpt.meta = self.cfg.snapshot();
        let path = self.layout.stage_ckpt(stage);
        write_checkpoint(&ckpt, &path)?;
        read_checkpoint(&path)?;
        rec.file(&path)?;
        let log = self.layout.loss_log(stage);
        write_file(&log, csv.as_bytes())?;
        rec.file(&log)?;
        Ok(())
    }

    fn train1(&self, rec: &mut Record) -> Result<()> {
        self.train(1, rec)
    }

    fn train2(&self, rec: &mut Record) -> Result<()> {
        require(&self.layout.stage_ckpt(1), "train1")?;
        self.train(2, rec)
    }

    /// Healthy then lesioned test subjects, each in manifest order.
    pub fn test_subjects(&self) -> Result<Vec<Subject>> {
        let mut out = Vec::new();
        for (m, lesioned) in [(self.layout.healthy_manifest(), false), (self.layout.lesioned_manifest(), true)] {
            require(&m, "gen")?;
            for e in read_manifest(&m)? {
                out.push(Subject { labels: resolve(&m, &e), id: e.id, lesioned });
            }
        }
        Ok(out)
    }

    fn load_model(&self, stage: u8) -> Result<ModelReconstructor> {
        let path = self.layout.stage_ckpt(stage);
        require(&path, if stage == 1 { "train1" } else { "train2" })?;
        let ckpt: Checkpoint = read_checkpoint(&path)?;
        Ok(ModelReconstructor::from_checkpoint(&ckpt)?)
    }

    /// Normalised input of a subject.
    fn input(&self, s: &Subject) -> Result<VolumeGrid> {
        Ok(normalize_labels(&read_volume(&s.labels)?)?)
    }

    fn reconstruct(&self, rec: &mut Record) -> Result<()> {
        let subjects = self.test_subjects()?;
        let g1 = self.load_model(1)?;
        let g2 = self.load_model(2)?;
        let stride = self.cfg.stride;
        let work = |s: &Subject| -> Result<(VolumeGrid, VolumeGrid)> {
            let x = self.input(s)?;
            let padded = self.fit(&x, g1.spec.input)?;
            let back = |v: VolumeGrid| -> Result<VolumeGrid> {
                if v.dims() == x.dims() {
                    Ok(v)
                } else {
                    Ok(onj_core::preprocess::crop(&v, [0, 0, 0], x.dims())?)
                }
            };
            Ok((back(reconstruct(&g1, &padded, stride)?)?, back(reconstruct(&g2, &padded, stride)?)?))
        };
        let results = parallel_map(&subjects, self.threads, work);
        for (s, r) in subjects.iter().zip(results) {
            let (r1, r2) = r?;
            rec.volume(&self.layout.recon(&s.id, 1), &r1)?;
            rec.volume(&self.layout.recon(&s.id, 2), &r2)?;
        }
        self.log(format!("reconstructed {} subjects", subjects.len()));
        Ok(())
    }

    fn recons(&self, s: &Subject) -> Result<(VolumeGrid, VolumeGrid)> {
        let p1 = self.layout.recon(&s.id, 1);
        let p2 = self.layout.recon(&s.id, 2);
        require(&p1, "reconstruct")?;
        require(&p2, "reconstruct")?;
        Ok((read_volume(&p1)?, read_volume(&p2)?))
    }

    fn score(&self, rec: &mut Record) -> Result<()> {
        let subjects = self.test_subjects()?;
        let mut lines = [String::new(), String::new()];
        for s in &subjects {
            let x = self.input(s)?;
            let (g1, g2) = self.recons(s)?;
            for (k, mode) in [ScoreMode::DualRecon, ScoreMode::InputVsRecon].into_iter().enumerate() {
                let cfg = ScoreConfig { mode, ..self.cfg.anomaly };
                let (a, b) = cfg.pair(&x, &g1, &g2);
                let v = anomaly_score(a, b, &cfg)?;
                writeln!(lines[k], "{} {} {}", s.id, mode.name(), v).unwrap();
            }
        }
        let path = self.layout.scores();
        write_file(&path, lines.concat().as_bytes())?;
        rec.file(&path)?;
        Ok(())
    }

    fn segment(&self, rec: &mut Record) -> Result<()> {
        let subjects = self.test_subjects()?;
        let mut report = String::new();
        let mut total = 0.0;
        let mut n = 0usize;
        for s in &subjects {
            let (g1, g2) = self.recons(s)?;
            let map = anomaly_map(&g2, &g1, &self.cfg.anomaly)?;
            rec.volume(&self.layout.seg_map(&s.id), &map)?;
            if s.lesioned {
                let truth = read_volume(&s.lesion())?;
                let d = dice(&map, &truth)?;
                writeln!(report, "{} {d}", s.id).unwrap();
                total += d;
                n += 1;
            }
        }
        if n > 0 {
            writeln!(report, "mean {}", total / n as f64).unwrap();
        }
        let path = self.layout.dice();
        write_file(&path, report.as_bytes())?;
        rec.file(&path)?;
        Ok(())
    }

    fn export(&self, rec: &mut Record) -> Result<()> {
        let pc = &self.cfg.postproc;
        for s in self.test_subjects()? {
            let map_path = self.layout.seg_map(&s.id);
            require(&map_path, "segment")?;
            let map = read_volume(&map_path)?;
            let labels = read_volume(&s.labels)?;
            let lab = labels.labels()?;
            let bits = |f: &dyn Fn(u8) -> bool| VolumeGrid::mask(labels.dims(), labels.spacing(), lab.iter().map(|&l| f(l) as u8).collect());
            let anatomy = bits(&|l| l != 0)?;
            let empty = bits(&|l| l == 0)?;
            let soft = if pc.soft_tissue { Some(read_volume(&s.soft())?) } else { None };

            let regions = connected_components(&map, pc.connectivity)?;
            let kept = filter_regions_by_overlap(&regions, &anatomy, pc.overlap_tau)?;
            let dir = self.layout.stl_dir(&s.id);
            let mut report = String::new();
            for r in &regions {
                let (lo, hi) = r.bbox;
                let head = format!("{} {} {},{},{}-{},{},{}", r.id, r.len(), lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]);
                let frac = overlap_fraction(r, &anatomy)?;
                if !kept.iter().any(|k| k.id == r.id) {
                    writeln!(report, "{head} removed overlap={frac:.4}>{}", pc.overlap_tau).unwrap();
                    continue;
                }
                let grown = grow_region(r, &empty, pc.grow_direction, pc.grow_iters)?;
                let mut mask = grown.to_mask(labels.dims(), labels.spacing())?;
                if let Some(soft) = &soft {
                    mask = subtract_soft_tissue(&mask, soft)?;
                }
                if mask.count_nonzero() == 0 {
                    writeln!(report, "{head} removed empty_after_soft_tissue").unwrap();
                    continue;
                }
                let mesh = marching_cubes(&mask, pc.iso, labels.spacing())?;
                let path = dir.join(format!("region_{}.stl", r.id));
                write_stl(&mesh, &path)?;
                crate::stl::read_stl(&path)?;
                rec.file(&path)?;
                writeln!(report, "{head} kept overlap={frac:.4} grown={} triangles={}", grown.len(), mesh.triangles.len()).unwrap();
            }
            let path = dir.join("regions.txt");
            write_file(&path, report.as_bytes())?;
            rec.file(&path)?;
        }
        Ok(())
    }
}

fn csv_line(out: &mut String, l: &EpochLosses) {
    writeln!(out, "{},{},{},{},{},{}", l.epoch, l.recon, l.vq, l.adv, l.lambda, l.disc).unwrap();
}

/// Maps `f` over `items` on up to `threads` scoped workers; output order
/// matches input order regardless of scheduling.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_seeds_differ_by_split_and_index() {
        let a = subject_seed(1, 0, 0);
        assert_ne!(a, subject_seed(1, 0, 1));
        assert_ne!(a, subject_seed(1, 1, 0));
        assert_ne!(a, subject_seed(2, 0, 0));
        assert_eq!(a, subject_seed(1, 0, 0));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<u32> = (0..17).collect();
        for t in [1, 2, 3, 8, 40] {
            assert_eq!(parallel_map(&v, t, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn companion_names() {
        assert_eq!(companion(Path::new("a/b/x_001.vol"), "soft"), PathBuf::from("a/b/x_001_soft.vol"));
    }
}
