//! Binary checkpoints: named f64 tensors behind an `LGAN` header.
//!
//! Layout, all little-endian: magic `LGAN`, `u32` version, `u32` tensor
//! count, then per tensor a `u32` name length, the UTF-8 name, a `u32` rank,
//! `rank` extents as `u64`, and the row-major `f64` data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{LocalGenerator, Parameterization};
use crate::nets::{Activation, Mlp, ParamMap};
use crate::semisup::ClassifierModel;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LGAN";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &ParamMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(Error::Truncated {
            expected: usize::MAX,
            actual: self.bytes.len(),
        })?;
        let s = self.bytes.get(self.at..end).ok_or(Error::Truncated {
            expected: end,
            actual: self.bytes.len(),
        })?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamMap> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(Error::BadCheckpointMagic { found: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut out = ParamMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::invalid("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::invalid(format!("tensor {name:?} is too large")))?;
        let data = r.take(n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
        let t = Tensor::new(shape, data)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::DuplicateName(name));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::invalid(format!("{} trailing bytes after last tensor", bytes.len() - r.at)));
    }
    Ok(out)
}

pub fn save_tensors(tensors: &ParamMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<ParamMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Everything a run leaves behind. Any part may be absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelBundle {
    pub generator: Option<LocalGenerator>,
    pub discriminator: Option<Mlp>,
    pub classifier: Option<ClassifierModel>,
    /// Training points, used as base points by the CLI.
    pub points: Option<Tensor>,
}

fn codes(acts: &[Activation]) -> Tensor {
    Tensor::vector(acts.iter().map(|a| a.code() as f64).collect())
}

fn activations(t: &Tensor) -> Result<Vec<Activation>> {
    t.data()
        .iter()
        .map(|&c| Activation::from_code(c as u8).filter(|_| c.fract() == 0.0).ok_or_else(|| Error::invalid(format!("bad activation code {c}"))))
        .collect()
}

fn put(map: &mut ParamMap, prefix: &str, params: ParamMap) {
    for (k, v) in params {
        map.insert(format!("{prefix}{k}"), v);
    }
}

fn section(map: &ParamMap, prefix: &str) -> ParamMap {
    map.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

fn need<'a>(map: &'a ParamMap, name: &str) -> Result<&'a Tensor> {
    map.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

impl ModelBundle {
    pub fn to_tensors(&self) -> ParamMap {
        let mut m = ParamMap::new();
        if let Some(g) = &self.generator {
            m.insert(
                "generator.meta".into(),
                Tensor::vector(vec![g.ambient_dim() as f64, g.coord_dim() as f64, g.parameterization().code() as f64]),
            );
            m.insert("generator.activations".into(), codes(&g.core().activations()));
            put(&mut m, "generator.core.", g.core().params());
        }
        if let Some(d) = &self.discriminator {
            m.insert("discriminator.activations".into(), codes(&d.activations()));
            put(&mut m, "discriminator.net.", d.params());
        }
        if let Some(c) = &self.classifier {
            m.insert("classifier.meta".into(), Tensor::vector(vec![c.classes() as f64]));
            m.insert("classifier.activations".into(), codes(&c.trunk().activations()));
            put(&mut m, "classifier.params.", c.params());
        }
        if let Some(p) = &self.points {
            m.insert("data.points".into(), p.clone());
        }
        m
    }

    pub fn from_tensors(map: &ParamMap) -> Result<Self> {
        let generator = match map.get("generator.meta") {
            None => None,
            Some(meta) => {
                let meta = meta.data();
                if meta.len() != 3 {
                    return Err(Error::invalid("generator.meta must hold three values"));
                }
                let acts = activations(need(map, "generator.activations")?)?;
                let p = Parameterization::from_code(meta[2] as u8)
                    .ok_or_else(|| Error::invalid(format!("bad parameterization code {}", meta[2])))?;
                let core = Mlp::from_params(&section(map, "generator.core."), &acts)?;
                Some(LocalGenerator::with_parameterization(core, meta[0] as usize, meta[1] as usize, p)?)
            }
        };
        let discriminator = match map.get("discriminator.activations") {
            None => None,
            Some(a) => Some(Mlp::from_params(&section(map, "discriminator.net."), &activations(a)?)?),
        };
        let classifier = match map.get("classifier.meta") {
            None => None,
            Some(meta) => {
                let acts = activations(need(map, "classifier.activations")?)?;
                Some(ClassifierModel::from_params(&section(map, "classifier.params."), &acts, meta.item() as usize)?)
            }
        };
        Ok(ModelBundle {
            generator,
            discriminator,
            classifier,
            points: map.get("data.points").cloned(),
        })
    }
}

pub fn save_checkpoint(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    save_tensors(&bundle.to_tensors(), path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle> {
    ModelBundle::from_tensors(&load_tensors(path)?)
}
