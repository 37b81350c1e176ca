//! Versioned binary parameter files.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON-encoded
//! [`NetworkSpec`], `u64` parameter count, then the parameters as `f64` LE.

use std::io::{Read, Write};

use super::{Network, NetworkSpec, NeuralError, Parameters};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LXDNET01";

const MAX_HEADER: u32 = 1 << 20;

pub fn write_parameters<W: Write>(w: &mut W, net: &Network, params: &Parameters) -> Result<(), NeuralError> {
    if params.len() != net.n_params() {
        return Err(NeuralError::Dimension(format!("{} parameters, network needs {}", params.len(), net.n_params())));
    }
    let header = serde_json::to_vec(net.spec()).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a parameter file, rebuilding the network from its stored spec.
pub fn read_parameters<R: Read>(r: &mut R) -> Result<(Network, Parameters), NeuralError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NeuralError::Checkpoint(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let hlen = u32::from_le_bytes(len4);
    if hlen > MAX_HEADER {
        return Err(NeuralError::Checkpoint(format!("header length {hlen} too large")));
    }
    let mut header = vec![0u8; hlen as usize];
    r.read_exact(&mut header)?;
    let spec: NetworkSpec = serde_json::from_slice(&header).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    let net = Network::new(spec)?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let n = u64::from_le_bytes(len8);
    if n != net.n_params() as u64 {
        return Err(NeuralError::Checkpoint(format!("{n} stored parameters, spec needs {}", net.n_params())));
    }
    let mut values = Vec::with_capacity(net.n_params());
    for _ in 0..n {
        r.read_exact(&mut len8)?;
        values.push(f64::from_le_bytes(len8));
    }
    Ok((net, Parameters { values }))
}
