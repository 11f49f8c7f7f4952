use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::SnState;
use crate::error::{Error, Result};
use crate::losses::Phase;
use crate::nets::{ModelBundle, NetworkConfig};
use crate::training::adam::{AdamParams, SideOptimizer};

/// Binary snapshot layout: 4-byte magic, u32 version, then length-prefixed
/// named f32 tensors (u32 name length, UTF-8 name, u32 rank, u32 dims,
/// little-endian f32 data) until end of file. Counters and hashes ride
/// along as u32 bit patterns inside f32 slots.
const MAGIC: &[u8; 4] = b"LADN";
const VERSION: u32 = 1;

/// Everything outside the tensors that a resumed run needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    /// Next epoch to run (checkpoints sit on epoch boundaries).
    pub epoch: u64,
    pub global_step: u64,
    pub phase: Phase,
    pub seed: u64,
    /// SHA-256 of the canonical run-config JSON; a resume refuses a
    /// checkpoint whose hash disagrees with the active config.
    pub config_hash: [u8; 32],
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub bundle: ModelBundle<f32>,
    pub opt_g: SideOptimizer<f32>,
    pub opt_d: SideOptimizer<f32>,
    pub meta: CheckpointMeta,
}

fn split_u64(x: u64) -> [u32; 2] {
    [(x & 0xffff_ffff) as u32, (x >> 32) as u32]
}

fn join_u64(lo: u32, hi: u32) -> u64 {
    (lo as u64) | ((hi as u64) << 32)
}

fn write_record<W: Write>(w: &mut W, name: &str, dims: &[usize], data: &[f32]) -> std::io::Result<()> {
    let numel: usize = dims.iter().product();
    debug_assert_eq!(numel, data.len());
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn bits_record<W: Write>(w: &mut W, name: &str, words: &[u32]) -> std::io::Result<()> {
    let data: Vec<f32> = words.iter().map(|&x| f32::from_bits(x)).collect();
    write_record(w, name, &[words.len()], &data)
}

fn optimizer_records<W: Write>(
    w: &mut W,
    tag: &str,
    opt: &SideOptimizer<f32>,
) -> std::io::Result<()> {
    for (name, m) in &opt.m {
        write_record(w, &format!("{}.m.{}", tag, name), &[m.len()], m)?;
    }
    for (name, v) in &opt.v {
        write_record(w, &format!("{}.v.{}", tag, name), &[v.len()], v)?;
    }
    Ok(())
}

/// Writes the snapshot atomically (temp file + rename): every parameter in
/// registration order with its power-iteration vectors, both optimizers'
/// moments, then the counters, seed, and config hash.
pub fn save_checkpoint(
    path: &Path,
    bundle: &ModelBundle<f32>,
    opt_g: &SideOptimizer<f32>,
    opt_d: &SideOptimizer<f32>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(&tmp, e);
    let file = fs::File::create(&tmp).map_err(io)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for entry in bundle.store.entries() {
            write_record(&mut w, &entry.name, &entry.shape, &entry.data)?;
            if let Some(sn) = &entry.sn {
                write_record(&mut w, &format!("{}.sn_u", entry.name), &[sn.u.len()], &sn.u)?;
                write_record(&mut w, &format!("{}.sn_v", entry.name), &[sn.v.len()], &sn.v)?;
            }
        }
        optimizer_records(&mut w, "adam_g", opt_g)?;
        optimizer_records(&mut w, "adam_d", opt_d)?;
        let [e0, e1] = split_u64(meta.epoch);
        let [s0, s1] = split_u64(meta.global_step);
        let [g0, g1] = split_u64(opt_g.t);
        let [d0, d1] = split_u64(opt_d.t);
        bits_record(
            &mut w,
            "meta.counters",
            &[e0, e1, s0, s1, g0, g1, d0, d1, meta.phase.tag() as u32, 0],
        )?;
        let [l0, l1] = split_u64(meta.seed);
        bits_record(&mut w, "meta.seed", &[l0, l1])?;
        let hash_words: Vec<u32> = meta
            .config_hash
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        bits_record(&mut w, "meta.config_hash", &hash_words)?;
        w.flush()
    })()
    .map_err(io)?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct RecordReader<R: Read> {
    inner: R,
}

impl<R: Read> RecordReader<R> {
    fn read_u32(&mut self) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => Ok(Some(u32::from_le_bytes(buf))),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(Error::Checkpoint(format!("read failed: {}", e))),
        }
    }

    fn need_u32(&mut self, what: &str) -> Result<u32> {
        self.read_u32()?
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {}", what)))
    }

    /// None at a clean end of file; an error mid-record.
    fn next(&mut self) -> Result<Option<(String, Vec<usize>, Vec<f32>)>> {
        let name_len = match self.read_u32()? {
            None => return Ok(None),
            Some(n) => n as usize,
        };
        if name_len == 0 || name_len > 4096 {
            return Err(Error::Checkpoint(format!("implausible record name length {}", name_len)));
        }
        let mut name_bytes = vec![0u8; name_len];
        self.inner
            .read_exact(&mut name_bytes)
            .map_err(|_| Error::Checkpoint("truncated file while reading a record name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("record name is not valid UTF-8".into()))?;
        let rank = self.need_u32(&format!("rank of '{}'", name))? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("record '{}' has implausible rank {}", name, rank)));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = self.need_u32(&format!("shape of '{}'", name))? as usize;
            numel = numel.checked_mul(d).filter(|&n| n <= (1 << 31)).ok_or_else(|| {
                Error::Checkpoint(format!("record '{}' has an implausible element count", name))
            })?;
            dims.push(d);
        }
        let mut raw = vec![0u8; numel * 4];
        self.inner
            .read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated data in record '{}'", name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Some((name, dims, data)))
    }
}

fn take_bits(records: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: &str, len: usize) -> Result<Vec<u32>> {
    let pos = records
        .iter()
        .position(|(n, _, _)| n == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing record '{}'", name)))?;
    let (_, dims, data) = records.swap_remove(pos);
    if dims != [len] {
        return Err(Error::Checkpoint(format!("record '{}' has shape {:?}, expected [{}]", name, dims, len)));
    }
    Ok(data.iter().map(|x| x.to_bits()).collect())
}

/// Reads a snapshot back against a freshly shaped model: every expected
/// tensor must be present with its exact shape, and nothing else may
/// remain. Optimizer hyperparameters come from the run config (the hash
/// check ties the two together); only their state lives in the file.
pub fn load_checkpoint(path: &Path, net: &NetworkConfig, hp: AdamParams) -> Result<LoadedCheckpoint> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = RecordReader { inner: std::io::BufReader::new(file) };

    let mut magic = [0u8; 4];
    r.inner
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for the magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}, expected {:?}", magic, MAGIC)));
    }
    let version = r.need_u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}, expected {}", version, VERSION)));
    }

    let mut records: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    while let Some(rec) = r.next()? {
        records.push(rec);
    }

    let mut bundle: ModelBundle<f32> = ModelBundle::new(net.clone())?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let pos = records
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", name)))?;
        let (_, dims, data) = records.swap_remove(pos);
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?}, model expects {:?}",
                name, dims, shape
            )));
        }
        Ok(data)
    };
    for entry in bundle.store.entries_mut() {
        entry.data = take(&entry.name, &entry.shape)?;
        if let Some(sn) = &mut entry.sn {
            let u = take(&format!("{}.sn_u", entry.name), &[sn.u.len()])?;
            let v = take(&format!("{}.sn_v", entry.name), &[sn.v.len()])?;
            *sn = SnState { u, v };
        }
    }

    let counters = take_bits(&mut records, "meta.counters", 10)?;
    let seed_words = take_bits(&mut records, "meta.seed", 2)?;
    let hash_words = take_bits(&mut records, "meta.config_hash", 8)?;
    let phase = match counters[8] {
        1 => Phase::One,
        2 => Phase::Two,
        other => return Err(Error::Checkpoint(format!("unknown phase tag {}", other))),
    };
    let mut config_hash = [0u8; 32];
    for (chunk, word) in config_hash.chunks_exact_mut(4).zip(&hash_words) {
        chunk.copy_from_slice(&word.to_be_bytes());
    }

    let mut opt_g = SideOptimizer::new(hp);
    let mut opt_d = SideOptimizer::new(hp);
    opt_g.t = join_u64(counters[4], counters[5]);
    opt_d.t = join_u64(counters[6], counters[7]);
    for (name, dims, data) in records {
        let (tag, rest) = match name.split_once('.') {
            Some(("adam_g", rest)) => (&mut opt_g, rest),
            Some(("adam_d", rest)) => (&mut opt_d, rest),
            _ => return Err(Error::Checkpoint(format!("unknown record '{}'", name))),
        };
        let (kind, param) = rest
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("unknown record '{}'", name)))?;
        let entry = bundle
            .store
            .entry(param)
            .map_err(|_| Error::Checkpoint(format!("record '{}' refers to an unknown parameter", name)))?;
        if dims != [entry.numel()] {
            return Err(Error::Checkpoint(format!(
                "record '{}' has shape {:?}, parameter holds {} elements",
                name,
                dims,
                entry.numel()
            )));
        }
        let map = match kind {
            "m" => &mut tag.m,
            "v" => &mut tag.v,
            _ => return Err(Error::Checkpoint(format!("unknown record '{}'", name))),
        };
        if map.insert(param.to_string(), data).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record '{}'", name)));
        }
    }

    Ok(LoadedCheckpoint {
        bundle,
        opt_g,
        opt_d,
        meta: CheckpointMeta {
            epoch: join_u64(counters[0], counters[1]),
            global_step: join_u64(counters[2], counters[3]),
            phase,
            seed: join_u64(seed_words[0], seed_words[1]),
            config_hash,
        },
    })
}
