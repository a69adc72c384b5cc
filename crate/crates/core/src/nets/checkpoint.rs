//! Self-describing binary container for network weights and training state.
//!
//! Layout: the 8-byte magic `TCGANCK1`, a little-endian `u64` header length,
//! a JSON header, then every tensor's values back to back in little-endian
//! order. Output bytes depend only on the contents.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Param, Visitor};
use crate::nets::{build_network, Network, NetworkSpec};
use crate::tensor::Scalar;

const MAGIC: &[u8; 8] = b"TCGANCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded container; values are widened to `f64`, which is lossless for
/// both supported dtypes.
#[derive(Debug, Clone)]
pub struct Container {
    pub dtype: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes atomically through a sibling temporary file.
pub fn write_container<T: Scalar>(
    path: &Path,
    meta: serde_json::Value,
    tensors: &[(String, Vec<usize>, &[T])],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(err(path, format!("tensor {name}: shape {shape:?} does not match data")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        meta,
        tensors: entries,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset * T::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, data) in tensors {
        for &v in data.iter() {
            v.write_le(&mut buf);
        }
    }
    let tmp = tmp_path(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err(path, "not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| err(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| err(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(err(path, format!("unsupported format version {}", header.format_version)));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(err(path, format!("unsupported dtype {other}"))),
    };
    let data = &bytes[body..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset * width;
        let end = start + n * width;
        if end > data.len() {
            return Err(err(path, format!("tensor {} runs past end of file", e.name)));
        }
        let vals: Vec<f64> = data[start..end]
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                }
            })
            .collect();
        if tensors.insert(e.name.clone(), (e.shape, vals)).is_some() {
            return Err(err(path, format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(Container {
        dtype: header.dtype,
        meta: header.meta,
        tensors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub spec: NetworkSpec,
    pub spec_hash: String,
    pub image_size: usize,
    /// Training stage that produced the weights.
    pub stage: String,
}

/// Every named tensor of a network, trainable or buffer, in visit order.
pub fn named_tensors<T: Scalar>(net: &mut Network<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
    let mut out = Vec::new();
    net.visit(&mut |name, _, p| out.push((name.to_string(), p.shape.clone(), p.value.clone())));
    out
}

pub fn save_network<T: Scalar>(path: &Path, net: &mut Network<T>, stage: &str) -> Result<()> {
    let (spec, size) = (net.spec().clone(), net.image_size());
    save_visited(path, &spec, size, stage, |f| net.visit(f))
}

/// Saves the tensors reachable through `visit` under the given spec.
pub fn save_visited<T: Scalar>(
    path: &Path,
    spec: &NetworkSpec,
    image_size: usize,
    stage: &str,
    visit: impl FnOnce(&mut Visitor<'_, T>),
) -> Result<()> {
    let meta = NetworkMeta {
        spec: spec.clone(),
        spec_hash: spec.spec_hash(image_size),
        image_size,
        stage: stage.to_string(),
    };
    let mut tensors = Vec::new();
    visit(&mut |name, _, p| tensors.push((name.to_string(), p.shape.clone(), p.value.clone())));
    let refs: Vec<_> = tensors
        .iter()
        .map(|(n, s, v)| (n.clone(), s.clone(), v.as_slice()))
        .collect();
    write_container(path, serde_json::to_value(meta)?, &refs)
}

/// Copies stored values into `visit`'s tensors; every tensor must be present
/// with the same shape and no stored tensor may be left over.
pub fn load_params<T: Scalar>(
    path: &Path,
    prefix: &str,
    tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param<T>)),
) -> Result<()> {
    let mut failure = None;
    visit(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match tensors.remove(&key) {
            Some((shape, vals)) if shape == p.shape => {
                p.value = vals.into_iter().map(T::of).collect();
            }
            Some((shape, _)) => {
                failure = Some(format!("tensor {key}: stored shape {shape:?}, expected {:?}", p.shape))
            }
            None => failure = Some(format!("missing tensor {key}")),
        }
    });
    match failure {
        Some(msg) => Err(err(path, msg)),
        None => Ok(()),
    }
}

pub fn load_network<T: Scalar>(path: &Path) -> Result<(Network<T>, NetworkMeta)> {
    let mut c = read_container(path)?;
    if c.dtype != T::DTYPE {
        return Err(err(path, format!("stored dtype {} but {} requested", c.dtype, T::DTYPE)));
    }
    let meta: NetworkMeta =
        serde_json::from_value(c.meta.clone()).map_err(|e| err(path, format!("bad network meta: {e}")))?;
    if meta.spec.spec_hash(meta.image_size) != meta.spec_hash {
        return Err(err(path, "spec hash does not match stored spec"));
    }
    let mut net = build_network::<T>(&meta.spec, meta.image_size, 0)?;
    load_params(path, "", &mut c.tensors, |f| net.visit(&mut |n, _, p| f(n, p)))?;
    if let Some(extra) = c.tensors.keys().next() {
        return Err(err(path, format!("unexpected tensor {extra}")));
    }
    Ok((net, meta))
}
