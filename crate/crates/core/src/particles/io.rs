//! Ensemble snapshot format (all little-endian): magic `DDP1`, then `d`,
//! `M`, step `k` and seed as `u64`, then the `M d` coordinates as `f64`,
//! particle by particle.

use std::io::{Read, Write};

use super::ParticleEnsemble;
use crate::error::{Error, Result};

pub const PARTICLE_MAGIC: &[u8; 4] = b"DDP1";

pub fn write_snapshot(ensemble: &ParticleEnsemble, mut w: impl Write) -> Result<()> {
    w.write_all(PARTICLE_MAGIC)?;
    for v in [ensemble.dim(), ensemble.len(), ensemble.step()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&ensemble.seed().to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * ensemble.positions().len());
    for v in ensemble.positions() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated particle header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_snapshot(mut r: impl Read) -> Result<ParticleEnsemble> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing magic: {e}")))?;
    if &magic != PARTICLE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected DDP1")));
    }
    let d = read_u64(&mut r)? as usize;
    let m = read_u64(&mut r)? as usize;
    let k = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if Some(bytes.len()) != m.checked_mul(d).and_then(|n| n.checked_mul(8)) {
        return Err(Error::Format(format!(
            "expected {m} x {d} coordinates, found {} bytes",
            bytes.len()
        )));
    }
    let positions = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ParticleEnsemble::from_positions(d, k, seed, positions)
}
