//! Binary checkpoints.
//!
//! Layout (little-endian): `b"SRUX"`, `u32` version, `u32` length + the
//! canonical config text, then records until end of file, each
//! `u32` name length, name bytes, `u32` rank, `rank x u32` dims and the
//! values as `f32`. Optimizer state uses names prefixed `opt.`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::optim::RAdam;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"SRUX";
pub const VERSION: u32 = 1;
const MAX_NAME: u32 = 4096;

/// Raw decoded file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse_text(&self.config_text)
    }

    /// Rebuilds the model described by the stored config and fills in the
    /// stored weights.
    pub fn model<E: Element>(&self) -> Result<Model<E>> {
        let cfg = self.config()?;
        let mut model = build_model::<E>(&cfg.model, 0)?;
        let mut values = Vec::with_capacity(model.params().len());
        for p in model.params() {
            let t = self
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", p.name)))?;
            values.push(t.cast());
        }
        let expected = model.params().len();
        let stored = self
            .tensors
            .iter()
            .filter(|(n, _)| is_model_tensor(n))
            .count();
        if stored != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {stored} model tensors, config implies {expected}"
            )));
        }
        model.load_values(values)?;
        Ok(model)
    }

    /// Optimizer state for `model`, if it was saved.
    pub fn optimizer<E: Element>(&self, model: &Model<E>) -> Result<Option<RAdam<E>>> {
        let Some(step) = self.get("opt.step") else {
            return Ok(None);
        };
        let mut opt = RAdam::new(model.params());
        opt.step = step.data().first().copied().unwrap_or(0.0) as u64;
        for (i, p) in model.params().iter().enumerate() {
            for (slot, prefix) in [(&mut opt.m[i], "opt.m."), (&mut opt.s[i], "opt.s.")] {
                let name = format!("{prefix}{}", p.name);
                let t = self
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} vs {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                *slot = t.cast();
            }
        }
        Ok(Some(opt))
    }
}

fn is_model_tensor(name: &str) -> bool {
    !name.starts_with("opt.") && !name.starts_with("vocab.")
}

/// Assembles the records for a model, optional optimizer state and extra
/// named tensors.
pub fn records<E: Element>(
    model: &Model<E>,
    opt: Option<&RAdam<E>>,
    extra: &[(String, Tensor<f32>)],
) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.cast()))
        .collect();
    if let Some(opt) = opt {
        out.push(("opt.step".into(), Tensor::full([1], opt.step as f32)));
        for (p, m) in model.params().iter().zip(&opt.m) {
            out.push((format!("opt.m.{}", p.name), m.cast()));
        }
        for (p, s) in model.params().iter().zip(&opt.s) {
            out.push((format!("opt.s.{}", p.name), s.cast()));
        }
    }
    out.extend(extra.iter().cloned());
    out
}

pub fn write_to(
    w: &mut impl Write,
    config_text: &str,
    tensors: &[(String, Tensor<f32>)],
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config_text.len() as u32).to_le_bytes())?;
    w.write_all(config_text.as_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place, so an
/// interrupted save never clobbers the previous checkpoint.
pub fn save(path: &Path, cfg: &RunConfig, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, &cfg.to_text(), tensors)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads the next record's name length, or `None` at a clean end of file.
fn read_record_start(r: &mut impl Read) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut b[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Checkpoint("truncated record header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Checkpoint(e.to_string())),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn read_string(r: &mut impl Read, len: u32, what: &str) -> Result<String> {
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated {what}")))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
}

pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = read_u32(r, "config length")?;
    let config_text = read_string(r, cfg_len, "config block")?;
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    while let Some(name_len) = read_record_start(r)? {
        if name_len == 0 || name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!(
                "implausible name length {name_len}"
            )));
        }
        let name = read_string(r, name_len, "tensor name")?;
        let rank = read_u32(r, "rank")?;
        if !(1..=3).contains(&rank) {
            return Err(Error::Checkpoint(format!(
                "{name}: rank {rank} not in 1..=3"
            )));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(read_u32(r, "dimension")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 34))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: implausible dims {dims:?}")))?;
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::Checkpoint(format!("{name}: data shorter than dims {dims:?} imply"))
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
        tensors.push((name, Tensor::new(dims, data)?));
    }
    Ok(Checkpoint {
        config_text,
        tensors,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut BufReader::new(file))
}
