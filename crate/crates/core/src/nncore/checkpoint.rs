//! Single-file checkpoint: magic `JST1`, a `u32` little-endian header length,
//! a UTF-8 header, then every parameter as little-endian `f32` in manifest order.
//!
//! Header layout:
//!
//! ```text
//! [config]
//! key=value
//! ...
//! [params]
//! name dim0 dim1 ...
//! ```

use std::io::{Read, Write};

use super::param::ParamSet;
use super::tensor::Tensor;
use super::NnError;

pub const MAGIC: &[u8; 4] = b"JST1";

/// Raw checkpoint contents before they are bound to a model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    /// `key=value` lines of the `[config]` section, in file order.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(
    out: &mut W,
    config: &[(String, String)],
    params: &ParamSet,
) -> Result<(), NnError> {
    let mut header = String::from("[config]\n");
    for (k, v) in config {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str("[params]\n");
    for p in params.iter() {
        header.push_str(&p.name);
        for d in p.value.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    let io = |e: std::io::Error| NnError::Checkpoint(e.to_string());
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(header.as_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(params.num_elements() * 4);
    for p in params.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io)
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<CheckpointData, NnError> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;

    let mut config = Vec::new();
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    let mut section = "";
    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            section = match line {
                "[config]" => "config",
                "[params]" => "params",
                _ => return Err(bad(&format!("unknown section {line}"))),
            };
            continue;
        }
        match section {
            "config" => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(&format!("bad config line `{line}`")))?;
                config.push((k.trim().to_string(), v.trim().to_string()));
            }
            "params" => {
                let mut parts = line.split_whitespace();
                let name = parts.next().ok_or_else(|| bad("empty manifest line"))?;
                let shape = parts
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad(&format!("bad shape for {name}")))?;
                manifest.push((name.to_string(), shape));
            }
            _ => return Err(bad("content before first section")),
        }
    }

    let mut offset = 8 + hlen;
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| bad(&format!("truncated data for {name} at byte {offset}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(CheckpointData { config, tensors })
}
