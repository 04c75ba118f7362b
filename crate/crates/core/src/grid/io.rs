//! Grid file formats.
//!
//! Binary layout (all little-endian): magic `DDG1`, dimension as `u64`, then
//! per axis `lower: f64`, `upper: f64`, `cells: u64`, then every cell value
//! as `f64` in row-major order. CSV has one row per cell: center coordinates
//! followed by the value.

use std::io::{Read, Write};

use super::{GridDensity, GridSpec};
use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"DDG1";

pub fn write_binary(density: &GridDensity, mut w: impl Write) -> Result<()> {
    let spec = density.spec();
    w.write_all(GRID_MAGIC)?;
    w.write_all(&(spec.dim() as u64).to_le_bytes())?;
    for axis in 0..spec.dim() {
        w.write_all(&spec.lower()[axis].to_le_bytes())?;
        w.write_all(&spec.upper()[axis].to_le_bytes())?;
        w.write_all(&(spec.cells(axis) as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * density.values().len());
    for v in density.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated grid header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Reads a grid file. Values are taken as stored; only the structural
/// invariants of the grid are re-checked.
pub fn read_binary(mut r: impl Read) -> Result<GridDensity> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing magic: {e}")))?;
    if &magic != GRID_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected DDG1")));
    }
    let d = read_u64(&mut r)? as usize;
    if d == 0 || d > 2 {
        return Err(Error::Format(format!("unsupported grid dimension {d}")));
    }
    let (mut lower, mut upper, mut cells) = (vec![], vec![], vec![]);
    for _ in 0..d {
        lower.push(read_f64(&mut r)?);
        upper.push(read_f64(&mut r)?);
        cells.push(read_u64(&mut r)? as usize);
    }
    let spec = GridSpec::new(lower, upper, cells)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * spec.total_cells() {
        return Err(Error::Format(format!(
            "expected {} value bytes, found {}",
            8 * spec.total_cells(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(GridDensity::raw(spec, values))
}

pub fn write_csv(density: &GridDensity, mut w: impl Write) -> Result<()> {
    let spec = density.spec();
    let header: Vec<String> = (0..spec.dim()).map(|a| format!("x{a}")).collect();
    writeln!(w, "{},value", header.join(","))?;
    for (idx, v) in density.values().iter().enumerate() {
        let x = spec.center(idx);
        let coords: Vec<String> = x.iter().map(|c| format!("{c:e}")).collect();
        writeln!(w, "{},{v:e}", coords.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_layout_and_round_trip() {
        let spec = GridSpec::new(vec![-2.0, -1.0], vec![2.0, 3.0], vec![8, 4]).unwrap();
        let values = (0..32).map(|i| i as f64 / (496.0 * spec.cell_volume())).collect();
        let rho = GridDensity::from_values(spec.clone(), values).unwrap();
        let mut bytes = Vec::new();
        write_binary(&rho, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"DDG1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[12..20].try_into().unwrap()), -2.0);
        assert_eq!(bytes.len(), 4 + 8 + 2 * 24 + 8 * 32);
        let back = read_binary(bytes.as_slice()).unwrap();
        assert_eq!(back, rho);
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(matches!(read_binary(&b"XXXX"[..]), Err(Error::Format(_))));
        let spec = GridSpec::symmetric(1, 1.0, 4).unwrap();
        let rho = GridDensity::raw(spec, vec![0.5; 4]);
        let mut bytes = Vec::new();
        write_binary(&rho, &mut bytes).unwrap();
        bytes.pop();
        assert!(matches!(read_binary(bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let spec = GridSpec::symmetric(1, 1.0, 4).unwrap();
        let rho = GridDensity::raw(spec, vec![0.5; 4]);
        let mut out = Vec::new();
        write_csv(&rho, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "x0,value");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("-7.5e-1,5e-1"));
    }
}
