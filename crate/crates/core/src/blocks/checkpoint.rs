//! Checkpoint files: a little-endian `u64` header length, a JSON header,
//! then one `CMRT` tensor record per named tensor. Offsets in the header are
//! relative to the first byte after the header.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_network, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    /// Whether every batch norm has running statistics worth using.
    stats_ready: bool,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

fn named_tensors(net: &Network) -> Vec<(String, &Tensor)> {
    let mut out = net.params();
    for (pre, bn) in net.norms() {
        out.push((format!("{pre}.run_mean"), &bn.running_mean));
        out.push((format!("{pre}.run_var"), &bn.running_var));
    }
    out
}

pub fn write_checkpoint(w: &mut impl Write, net: &Network) -> Result<()> {
    let tensors = named_tensors(net);
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                offset,
                shape: t.shape().to_vec(),
            };
            offset += io::encoded_len(t) as u64;
            e
        })
        .collect();
    let header = Header {
        config: net.config.clone(),
        stats_ready: net.norms().iter().all(|(_, bn)| bn.stats_ready),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        io::write_tensor(w, t)?;
    }
    Ok(())
}

fn bad(reason: String) -> Error {
    Error::Format {
        path: "<checkpoint>".into(),
        reason,
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Network> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut stored = HashMap::new();
    for e in &header.tensors {
        let start = usize::try_from(e.offset).map_err(|_| bad(format!("offset of {}", e.name)))?;
        let mut slice = payload
            .get(start..)
            .ok_or_else(|| bad(format!("offset of {} past end of file", e.name)))?;
        let t = io::read_tensor(&mut slice)?;
        if t.shape() != e.shape.as_slice() {
            return Err(bad(format!("{} record shape disagrees with the index", e.name)));
        }
        stored.insert(e.name.as_str(), t);
    }

    let mut net = build_network(&header.config, 0)?;
    let take = |stored: &mut HashMap<&str, Tensor>, name: &str, dst: &mut Tensor| -> Result<()> {
        let t = stored
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.shape() != dst.shape() {
            return Err(bad(format!(
                "{name} has shape {:?}, expected {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        Ok(())
    };
    for (name, dst) in net.params_mut() {
        take(&mut stored, &name, dst)?;
    }
    for (pre, bn) in net.norms_mut() {
        take(&mut stored, &format!("{pre}.run_mean"), &mut bn.running_mean)?;
        take(&mut stored, &format!("{pre}.run_var"), &mut bn.running_var)?;
        bn.stats_ready = header.stats_ready;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(net)
}

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, net)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        e => e,
    })
}
