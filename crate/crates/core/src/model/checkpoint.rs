//! Checkpoint file: one UTF-8 JSON header line, then the raw little-endian
//! `f64` payload of every tensor in canonical order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use crate::tensor::Tensor;

const FORMAT: &str = "vaflab-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<Entry>,
    payload_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
}

pub fn write_checkpoint(params: &ModelParams, out: &mut impl Write) -> Result<()> {
    let mut offset = 0u64;
    let tensors = params
        .names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let e = Entry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config().clone(),
        tensors,
        payload_bytes: offset,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for t in params.tensors() {
        let mut buf = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: impl Read) -> Result<ModelParams> {
    let mut reader = BufReader::new(input);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Checkpoint("missing header line".into()));
    }
    line.pop();
    let header: Header = serde_json::from_slice(&line)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let layout = ModelParams::layout(&header.config);
    if layout.len() != header.tensors.len() {
        return Err(Error::Checkpoint("tensor manifest does not match the model layout".into()));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let start = usize::try_from(entry.offset).map_err(|_| Error::Checkpoint("offset overflow".into()))?;
        let end = start + 8 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{name} extends past the payload")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    ModelParams::from_tensors(header.config, tensors)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes)?;
    crate::report::write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    read_checkpoint(std::fs::File::open(path)?)
}
