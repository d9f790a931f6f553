//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "2SGA"  u32 version
//! u32 entry count
//! per entry: u32 name length, UTF-8 name, u32 rank, rank × u64 extents
//! per entry, in manifest order: row-major f64 data
//! u32 length, UTF-8 JSON of the ModelConfig
//! ```
//!
//! Partition masks are stored as `graph.head.mask{k}` / `graph.body.mask{k}`.
//! Entries are written in name order, so identical models give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::Tensor;
use crate::train::TrainedModel;

pub const MAGIC: &[u8; 4] = b"2SGA";
pub const FORMAT_VERSION: u32 = 1;

const HEAD_MASK: &str = "graph.head.mask";
const BODY_MASK: &str = "graph.body.mask";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn entries(model: &TrainedModel) -> BTreeMap<String, &Tensor> {
    let mut out: BTreeMap<String, &Tensor> = model.params.iter().map(|(k, v)| (k.clone(), v)).collect();
    for (k, m) in model.head_graph.masks.iter().enumerate() {
        out.insert(format!("{HEAD_MASK}{k}"), m);
    }
    for (k, m) in model.body_graph.masks.iter().enumerate() {
        out.insert(format!("{BODY_MASK}{k}"), m);
    }
    out
}

pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let entries = entries(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in entries.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_string(&model.config)
        .map_err(|e| Error::ModelFile(format!("cannot serialise config: {e}")))?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::ModelFile(format!("truncated file: {what} at byte {} needs {n} bytes", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Header check and manifest, without the tensor data.
pub fn read_manifest(bytes: &[u8]) -> Result<(Vec<ManifestEntry>, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| Error::Version {
        found: "truncated header".into(),
        expected: format!("2SGA v{FORMAT_VERSION}"),
    })?;
    if magic != MAGIC {
        return Err(Error::Version {
            found: format!("magic {:?}", String::from_utf8_lossy(magic)),
            expected: format!("2SGA v{FORMAT_VERSION}"),
        });
    }
    let version = r.u32("version").map_err(|_| Error::Version {
        found: "truncated header".into(),
        expected: format!("2SGA v{FORMAT_VERSION}"),
    })?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: format!("v{version}"),
            expected: format!("v{FORMAT_VERSION}"),
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::ModelFile("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        manifest.push(ManifestEntry { name, shape });
    }
    Ok((manifest, r.pos))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let (manifest, offset) = read_manifest(bytes)?;
    let mut r = Reader { buf: bytes, pos: offset };
    let mut tensors = BTreeMap::new();
    for e in &manifest {
        let n: usize = e.shape.iter().product();
        let raw = r.take(n * 8, &format!("data of `{}`", e.name))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|_| Error::ModelFile(format!("bad shape for `{}`", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::ModelFile(format!("duplicate entry `{}`", e.name)));
        }
    }
    let len = r.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(r.take(len, "metadata")?)
        .map_err(|_| Error::ModelFile("metadata is not UTF-8".into()))?;
    if r.pos != bytes.len() {
        return Err(Error::ModelFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let config: ModelConfig =
        serde_json::from_str(meta).map_err(|e| Error::ModelFile(format!("bad config record: {e}")))?;

    // A fresh model fixes the expected names and shapes.
    let mut model = TrainedModel::init(config)?;
    let mut take = |name: &str, expected: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::ModelFile(format!("missing entry `{name}`")))?;
        if t.shape() != expected {
            return Err(Error::ModelFile(format!(
                "shape inconsistency for `{name}`: file {:?}, config implies {expected:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for (name, p) in model.params.iter_mut() {
        *p = take(name, p.shape())?;
    }
    for (prefix, graph) in [(HEAD_MASK, &mut model.head_graph), (BODY_MASK, &mut model.body_graph)] {
        for (k, m) in graph.masks.iter_mut().enumerate() {
            *m = take(&format!("{prefix}{k}"), m.shape())?;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::ModelFile(format!("unexpected entry `{extra}`")));
    }
    Ok(model)
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
