//! Binary checkpoint format.
//!
//! `ONJCKPT1`, u32 version, u8 stage, a UTF-8 `key=value` metadata block
//! (u32 length prefixed), then tensor records, then a sha256 digest of all
//! preceding bytes. Integers and floats are little-endian.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use onj_core::diffnet::{ParamStore, Shape5, Tensor};
use onj_core::trainer::{AdamState, Checkpoint, EpochLosses, RngState};

use crate::config::{arch_from_meta, arch_meta};
use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 8] = b"ONJCKPT1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

const KIND_PARAM: u8 = 0;
const KIND_FROZEN: u8 = 1;
const KIND_BUFFER: u8 = 2;
const KIND_GEN_M: u8 = 3;
const KIND_GEN_V: u8 = 4;
const KIND_DISC_M: u8 = 5;
const KIND_DISC_V: u8 = 6;

fn put_record(out: &mut Vec<u8>, kind: u8, name: &str, shape: [usize; 5], data: &[f32]) {
    out.push(kind);
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    for s in shape {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut meta = String::new();
    for (k, v) in arch_meta(&c.arch) {
        writeln!(meta, "{k}={v}").unwrap();
    }
    writeln!(meta, "epochs_done={}", c.epochs_done).unwrap();
    writeln!(meta, "rng.seed={}", hex(&c.rng.seed)).unwrap();
    writeln!(meta, "rng.stream={}", c.rng.stream).unwrap();
    writeln!(meta, "rng.word_pos={}", c.rng.word_pos).unwrap();
    writeln!(meta, "opt.gen_step={}", c.gen_opt.step).unwrap();
    writeln!(meta, "opt.disc_step={}", c.disc_opt.step).unwrap();
    for (i, l) in c.losses.iter().enumerate() {
        // `{:?}` on f64 prints the shortest string that parses back exactly.
        writeln!(meta, "loss.{i}={},{:?},{:?},{:?},{:?},{:?}", l.epoch, l.recon, l.vq, l.adv, l.lambda, l.disc).unwrap();
    }
    for (k, v) in &c.meta {
        writeln!(meta, "config.{k}={v}").unwrap();
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(c.stage);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());

    let mut records = Vec::new();
    let mut count = 0u32;
    for (name, p) in c.params.params() {
        let kind = if p.trainable { KIND_PARAM } else { KIND_FROZEN };
        put_record(&mut records, kind, name, p.tensor.shape().0, p.tensor.data());
        count += 1;
    }
    for (name, t) in c.params.buffers() {
        put_record(&mut records, KIND_BUFFER, name, t.shape().0, t.data());
        count += 1;
    }
    for (opt, km, kv) in [(&c.gen_opt, KIND_GEN_M, KIND_GEN_V), (&c.disc_opt, KIND_DISC_M, KIND_DISC_V)] {
        for (kind, map) in [(km, &opt.m), (kv, &opt.v)] {
            for (name, v) in map {
                put_record(&mut records, kind, name, [v.len(), 1, 1, 1, 1], v);
                count += 1;
            }
        }
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&records);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, "checkpoint record runs past the end"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < MAGIC.len() + 4 + 1 + 4 + 4 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic or too short)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checkpoint digest mismatch (file is corrupt)".into()));
    }
    let mut r = Reader { buf: body, pos: 8, path };
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let stage = r.u8()?;
    let meta_len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("metadata is not UTF-8".into()))?;

    let mut pairs = Vec::new();
    for line in meta.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad metadata line {line:?}")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let get = |k: &str| pairs.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str()).ok_or_else(|| bad(format!("metadata key {k} missing")));
    let num = |k: &str| -> Result<u128> { get(k)?.parse().map_err(|_| bad(format!("metadata key {k} is not a number"))) };

    let arch = arch_from_meta(&pairs).map_err(|m| bad(format!("model metadata: {m}")))?;
    let seed: [u8; 32] = unhex(get("rng.seed")?)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("rng.seed is not 32 hex bytes".into()))?;
    let rng = RngState { seed, stream: num("rng.stream")? as u64, word_pos: num("rng.word_pos")? };
    let mut gen_opt = AdamState { step: num("opt.gen_step")? as u64, ..Default::default() };
    let mut disc_opt = AdamState { step: num("opt.disc_step")? as u64, ..Default::default() };
    let mut losses = Vec::new();
    let mut config = Vec::new();
    for (k, v) in &pairs {
        if k.starts_with("loss.") {
            let f: Vec<&str> = v.split(',').collect();
            let parse_err = || bad(format!("bad loss record {k}={v}"));
            if f.len() != 6 {
                return Err(parse_err());
            }
            let x = |i: usize| f[i].parse::<f64>().map_err(|_| parse_err());
            losses.push(EpochLosses {
                epoch: f[0].parse().map_err(|_| parse_err())?,
                recon: x(1)?,
                vq: x(2)?,
                adv: x(3)?,
                lambda: x(4)?,
                disc: x(5)?,
            });
        } else if let Some(key) = k.strip_prefix("config.") {
            config.push((key.to_string(), v.clone()));
        }
    }

    let mut params = ParamStore::new();
    let count = r.u32()?;
    for _ in 0..count {
        let kind = r.u8()?;
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("tensor name is not UTF-8".into()))?.to_string();
        let mut shape = [0usize; 5];
        for s in &mut shape {
            *s = r.u32()? as usize;
        }
        let n = r.u64()? as usize;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large".into()))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = || Tensor::new(Shape5(shape), data.clone()).map_err(|e| bad(format!("tensor {name}: {e}")));
        match kind {
            KIND_PARAM | KIND_FROZEN => params.insert(&name, tensor()?, kind == KIND_PARAM).map_err(|e| bad(e.to_string()))?,
            KIND_BUFFER => params.insert_buffer(&name, tensor()?).map_err(|e| bad(e.to_string()))?,
            KIND_GEN_M => drop(gen_opt.m.insert(name, data)),
            KIND_GEN_V => drop(gen_opt.v.insert(name, data)),
            KIND_DISC_M => drop(disc_opt.m.insert(name, data)),
            KIND_DISC_V => drop(disc_opt.v.insert(name, data)),
            k => return Err(bad(format!("unknown record kind {k}"))),
        }
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes after tensor records".into()));
    }
    Ok(Checkpoint {
        stage,
        arch,
        params,
        gen_opt,
        disc_opt,
        rng,
        epochs_done: num("epochs_done")? as usize,
        losses,
        meta: config,
    })
}

pub fn write_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(c))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use onj_core::trainer::{TrainConfig, Trainer};
    use onj_core::vqgan::ArchConfig;

    fn tiny() -> Checkpoint {
        let arch = ArchConfig {
            input: 8,
            enc_channels: vec![2],
            latent_channels: 4,
            dec_channels: vec![2],
            embed_dim: 2,
            codebook_size: 4,
            disc_channels: 2,
            beta: 0.25,
        };
        let t = Trainer::stage1(&arch, &TrainConfig { seed: 3, ..Default::default() }).unwrap();
        let mut c = t.checkpoint();
        c.gen_opt.step = 7;
        c.gen_opt.m.insert("enc.0.w".into(), vec![1.0, -2.5]);
        c.gen_opt.v.insert("enc.0.w".into(), vec![0.5, 0.25]);
        c.losses.push(EpochLosses { epoch: 0, recon: 0.1, vq: 1.0 / 3.0, adv: 0.0, lambda: 1e-7, disc: 0.69 });
        c.meta.push(("train.learning_rate".into(), "0.001".into()));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = tiny();
        let bytes = encode_checkpoint(&c);
        let back = decode_checkpoint(&bytes, Path::new("t.ckpt")).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_checkpoint(&tiny());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes, Path::new("t")), Err(Error::Format { .. })));
        let bytes = encode_checkpoint(&tiny());
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("t")), Err(Error::Format { .. })));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad_magic, Path::new("t")), Err(Error::Format { .. })));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode_checkpoint(&tiny());
        bytes[8] = 2;
        let n = bytes.len() - DIGEST_LEN;
        let d = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&d);
        let e = decode_checkpoint(&bytes, Path::new("t")).unwrap_err();
        assert!(e.to_string().contains("version 2"), "{e}");
    }
}
