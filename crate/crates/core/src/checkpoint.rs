//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "USAIDCKP"  u32 version=1  u32 tensor_count
//! per tensor: u16 name_len, name bytes, u8 rank, rank × u32 dims,
//!             prod(dims) × f32 payload
//! u32 meta_len, meta.json bytes
//! ```
//!
//! The meta document carries a SHA-256 of every tensor payload and of the
//! whole tensor section; both are verified on load.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::tensor::Conv3x3;
use crate::usa::UsaModule;

pub const MAGIC: &[u8; 8] = b"USAIDCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let t = Self {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        t
    }

    fn payload(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub meta: Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::param(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.shape.len())
            .map_err(|_| Error::param(format!("rank too large for {}", t.name)))?;
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::shape(
                format!("tensor {}", t.name),
                &t.shape,
                t.data.len(),
            ));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| Error::param("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.payload());
    }
    Ok(out)
}

fn hashes(tensors: &[NamedTensor], section: &[u8]) -> (Value, String) {
    let per: Map<String, Value> = tensors
        .iter()
        .map(|t| {
            (
                t.name.clone(),
                Value::String(hex::encode(Sha256::digest(t.payload()))),
            )
        })
        .collect();
    (Value::Object(per), hex::encode(Sha256::digest(section)))
}

/// Serializes tensors plus a meta document. `meta` must be a JSON object (or
/// null); format version and content hashes are added to it.
pub fn encode_checkpoint(tensors: &[NamedTensor], meta: &Value) -> Result<Vec<u8>> {
    let mut names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::param("tensor names must be unique"));
    }
    let section = encode_tensors(tensors)?;
    let mut meta = match meta {
        Value::Object(m) => m.clone(),
        Value::Null => Map::new(),
        _ => return Err(Error::param("checkpoint meta must be a JSON object")),
    };
    let (per, all) = hashes(tensors, &section);
    meta.insert("format_version".into(), json!(FORMAT_VERSION));
    meta.insert("tensor_hashes".into(), per);
    meta.insert("content_hash".into(), Value::String(all));
    let meta_bytes = serde_json::to_vec(&Value::Object(meta))?;

    let mut out = Vec::with_capacity(16 + section.len() + meta_bytes.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&section);
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Corruption("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")? as usize;
    let section_start = r.pos;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corruption(format!("tensor {name} too large")))?;
        let data = r
            .take(n, &format!("payload of {name}"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    let section = &buf[section_start..r.pos];
    let meta_len = r.u32("meta length")? as usize;
    let meta: Value = serde_json::from_slice(r.take(meta_len, "meta")?)
        .map_err(|e| Error::Corruption(format!("meta is not valid JSON: {e}")))?;
    if r.pos != buf.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after meta",
            buf.len() - r.pos
        )));
    }
    let (per, all) = hashes(&tensors, section);
    if meta.get("content_hash") != Some(&Value::String(all)) {
        return Err(Error::Corruption("content hash mismatch".into()));
    }
    if meta.get("tensor_hashes") != Some(&per) {
        return Err(Error::Corruption("tensor hash mismatch".into()));
    }
    Ok(Checkpoint { tensors, meta })
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[NamedTensor], meta: &Value) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(tensors, meta)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn conv_tensors(prefix: &str, conv: &Conv3x3<f32>) -> [NamedTensor; 2] {
    [
        NamedTensor::new(
            format!("{prefix}.weight"),
            conv.weight_shape().to_vec(),
            conv.weight.clone(),
        ),
        NamedTensor::new(
            format!("{prefix}.bias"),
            vec![conv.out_channels],
            conv.bias.clone(),
        ),
    ]
}

pub fn denoiser_tensors(d: &Denoiser<f32>) -> Vec<NamedTensor> {
    d.layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| conv_tensors(&format!("denoiser.conv{i}"), l))
        .collect()
}

pub fn usa_tensors(u: &UsaModule<f32>) -> Vec<NamedTensor> {
    let mut v = Vec::with_capacity(6);
    v.extend(conv_tensors("usa.embed.conv1", &u.embedding.conv1));
    v.extend(conv_tensors("usa.embed.conv2", &u.embedding.conv2));
    v.extend(conv_tensors("usa.head", &u.head.conv));
    v
}

/// Rebuilds a denoiser from `denoiser.conv{i}.{weight,bias}` tensors.
pub fn denoiser_from_tensors(tensors: &[NamedTensor]) -> Result<Denoiser<f32>> {
    let mut layers = Vec::new();
    loop {
        let i = layers.len();
        let Some(w) = tensors.iter().find(|t| t.name == format!("denoiser.conv{i}.weight")) else {
            break;
        };
        let b = tensors
            .iter()
            .find(|t| t.name == format!("denoiser.conv{i}.bias"))
            .ok_or_else(|| Error::Corruption(format!("missing denoiser.conv{i}.bias")))?;
        let [kh, kw, cin, cout] = w.shape[..] else {
            return Err(Error::shape(format!("denoiser.conv{i}.weight"), "rank 4", &w.shape));
        };
        if kh != 3 || kw != 3 || b.shape != [cout] {
            return Err(Error::shape(
                format!("denoiser.conv{i}"),
                format!("[3, 3, {cin}, {cout}] and [{cout}]"),
                (&w.shape, &b.shape),
            ));
        }
        layers.push(Conv3x3 {
            in_channels: cin,
            out_channels: cout,
            stride: 1,
            weight: w.data.clone(),
            bias: b.data.clone(),
        });
    }
    if layers.len() < 2 {
        return Err(Error::Corruption("checkpoint holds no denoiser (need >= 2 layers)".into()));
    }
    for pair in layers.windows(2) {
        if pair[0].out_channels != pair[1].in_channels {
            return Err(Error::shape("denoiser layer chain", pair[0].out_channels, pair[1].in_channels));
        }
    }
    if layers[0].in_channels != layers.last().expect("non-empty").out_channels {
        return Err(Error::shape("denoiser channels", layers[0].in_channels, layers.last().unwrap().out_channels));
    }
    Ok(Denoiser {
        layers,
        linear: false,
    })
}

/// Hex SHA-256 over the given tensors, used to prove frozen parts unchanged.
pub fn content_hash(tensors: &[NamedTensor]) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(t.name.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(t.payload());
    }
    hex::encode(h.finalize())
}
