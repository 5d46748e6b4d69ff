//! Binary checkpoint format.
//!
//! Layout: an 8-byte magic string, a format version, a JSON metadata
//! header (network config plus optional training context), then named
//! parameter blocks with shape metadata and little-endian f32 payloads.
//! Saving and reloading an f32 network is bitwise lossless.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NetError, NetFloat, NetworkConfig, QNetwork};

const MAGIC: &[u8; 8] = b"HPFOLDQN";
const VERSION: u32 = 1;

/// Header metadata stored alongside the parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: NetworkConfig,
    /// Sequence the parameters were trained on, when known.
    #[serde(default)]
    pub sequence: Option<String>,
    /// Optimizer step counter at save time.
    #[serde(default)]
    pub train_step: u64,
}

/// Additional named block (optimizer moments and the like).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

/// Write the network parameters plus any extra blocks.
pub fn save_checkpoint<F: NetFloat>(
    path: &Path,
    net: &QNetwork<F>,
    meta: &CheckpointMeta,
    extras: &[ExtraBlock],
) -> Result<(), NetError> {
    if meta.config != *net.config() {
        return Err(NetError::Checkpoint(
            "metadata config does not match the network".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| NetError::Checkpoint(format!("metadata encoding: {e}")))?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(&meta_json)?;

    let block_count = net.layout.entries.len() + extras.len();
    w.write_all(&(block_count as u32).to_le_bytes())?;
    let params = net.params();
    for entry in &net.layout.entries {
        write_block_header(&mut w, &entry.name, entry.rows, entry.cols)?;
        for &v in &params[entry.offset..entry.offset + entry.len()] {
            let f: f32 = num_traits::cast(v).unwrap_or(f32::NAN);
            w.write_all(&f.to_le_bytes())?;
        }
    }
    for extra in extras {
        if extra.values.len() != extra.rows * extra.cols {
            return Err(NetError::Checkpoint(format!(
                "block {:?} shape mismatch",
                extra.name
            )));
        }
        write_block_header(&mut w, &extra.name, extra.rows, extra.cols)?;
        for &v in &extra.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_block_header<W: Write>(
    w: &mut W,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<(), NetError> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&2u32.to_le_bytes())?; // ndim, always 2 here
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    Ok(())
}

/// Load a checkpoint into an f32 network. Blocks that are not network
/// parameters (optimizer state) come back in the extras map.
#[allow(clippy::type_complexity)]
pub fn load_checkpoint(
    path: &Path,
) -> Result<(QNetwork<f32>, CheckpointMeta, BTreeMap<String, ExtraBlock>), NetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NetError::Checkpoint("bad magic string".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NetError::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| NetError::Checkpoint(format!("metadata decoding: {e}")))?;

    let mut net = QNetwork::<f32>::new(meta.config, 0)?;
    let mut filled = vec![false; net.layout.entries.len()];
    let mut extras = BTreeMap::new();

    let block_count = read_u32(&mut r)? as usize;
    for _ in 0..block_count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| NetError::Checkpoint("block name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)?;
        if ndim != 2 {
            return Err(NetError::Checkpoint(format!(
                "block {name:?}: unsupported ndim {ndim}"
            )));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| NetError::Checkpoint(format!("block {name:?}: shape overflow")))?;
        let mut values = vec![0f32; len];
        let mut buf = [0u8; 4];
        for v in &mut values {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }

        let layout = net.layout.clone();
        match layout.entries.iter().position(|e| e.name == name) {
            Some(id) => {
                let entry = &layout.entries[id];
                if entry.rows != rows || entry.cols != cols {
                    return Err(NetError::Checkpoint(format!(
                        "block {name:?}: shape ({rows}, {cols}) does not match expected ({}, {})",
                        entry.rows, entry.cols
                    )));
                }
                net.params_mut()[entry.offset..entry.offset + entry.len()]
                    .copy_from_slice(&values);
                filled[id] = true;
            }
            None => {
                extras.insert(
                    name.clone(),
                    ExtraBlock {
                        name,
                        rows,
                        cols,
                        values,
                    },
                );
            }
        }
    }

    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(NetError::Checkpoint(format!(
            "missing parameter block {:?}",
            net.layout.entries[missing].name
        )));
    }
    Ok((net, meta, extras))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NetError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NetError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
