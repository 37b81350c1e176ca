//! Versioned checkpoint bundles holding every learned objective.
//!
//! Layout: 8-byte magic, `u32` LE header length, JSON header, then for each
//! objective its online and target parameter files followed by the Adam
//! moments (`u64` step, `u64` length, `m` and `v` as `f64` LE). A trailing
//! `u32` CRC-32 covers every preceding byte.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LearnerError, QObjective};
use crate::neural::{read_parameters, write_parameters, AdamState};

pub const BUNDLE_MAGIC: &[u8; 8] = b"LXDBND01";
pub const BUNDLE_VERSION: u32 = 1;

const MAX_HEADER: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObjectiveMeta {
    name: String,
    gamma: f64,
    slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    steps: u64,
    objectives: Vec<ObjectiveMeta>,
    meta: serde_json::Value,
}

/// Loaded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub objectives: Vec<QObjective>,
    pub steps: u64,
    /// Free-form run description stored by the writer.
    pub meta: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> LearnerError {
    LearnerError::Checkpoint(msg.into())
}

pub fn write_bundle<W: Write>(w: &mut W, objectives: &[QObjective], steps: u64, meta: &serde_json::Value) -> Result<(), LearnerError> {
    let header = Header {
        version: BUNDLE_VERSION,
        steps,
        objectives: objectives.iter().map(|o| ObjectiveMeta { name: o.name.clone(), gamma: o.gamma, slack: o.slack }).collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for o in objectives {
        write_parameters(&mut buf, &o.net, &o.online)?;
        write_parameters(&mut buf, &o.net, &o.target)?;
        buf.extend_from_slice(&o.adam.t.to_le_bytes());
        buf.extend_from_slice(&(o.adam.m.len() as u64).to_le_bytes());
        for x in o.adam.m.iter().chain(&o.adam.v) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_bundle<R: Read>(r: &mut R) -> Result<Bundle, LearnerError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < BUNDLE_MAGIC.len() + 8 {
        return Err(bad("file too short"));
    }
    if &bytes[..8] != BUNDLE_MAGIC {
        return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8]))));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(bad("checksum mismatch"));
    }
    let mut cur = Cursor::new(&body[8..]);
    let mut u32b = [0u8; 4];
    cur.read_exact(&mut u32b)?;
    let hlen = u32::from_le_bytes(u32b);
    if hlen > MAX_HEADER {
        return Err(bad(format!("header length {hlen} too large")));
    }
    let mut json = vec![0u8; hlen as usize];
    cur.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.version != BUNDLE_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let mut objectives = Vec::with_capacity(header.objectives.len());
    let mut u64b = [0u8; 8];
    for meta in header.objectives {
        let (net, online) = read_parameters(&mut cur)?;
        let (net_t, target) = read_parameters(&mut cur)?;
        if net_t.spec() != net.spec() {
            return Err(bad(format!("{}: online and target specs differ", meta.name)));
        }
        cur.read_exact(&mut u64b)?;
        let t = u64::from_le_bytes(u64b);
        cur.read_exact(&mut u64b)?;
        let n = u64::from_le_bytes(u64b);
        if n != net.n_params() as u64 {
            return Err(bad(format!("{}: {n} optimizer moments, network has {}", meta.name, net.n_params())));
        }
        let mut moments = Vec::with_capacity(2 * net.n_params());
        for _ in 0..2 * n {
            cur.read_exact(&mut u64b)?;
            moments.push(f64::from_le_bytes(u64b));
        }
        let v = moments.split_off(net.n_params());
        let adam = AdamState { m: moments, v, t };
        objectives.push(QObjective { name: meta.name, net, online, target, adam, gamma: meta.gamma, slack: meta.slack });
    }
    if cur.position() as usize != body.len() - 8 {
        return Err(bad("trailing bytes after last objective"));
    }
    Ok(Bundle { objectives, steps: header.steps, meta: header.meta })
}

pub fn save_bundle(path: &Path, objectives: &[QObjective], steps: u64, meta: &serde_json::Value) -> Result<(), LearnerError> {
    let mut buf = Vec::new();
    write_bundle(&mut buf, objectives, steps, meta)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<Bundle, LearnerError> {
    let mut f = std::fs::File::open(path)?;
    read_bundle(&mut f)
}
