//! `GRD1` — the toolkit's little-endian binary format for grid fields.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size        content
//! 0       4           magic bytes "GRD1"
//! 4       4           u32 format version (currently 1)
//! 8       1           u8 ndim (1 or 2)
//! 9       1           u8 complex flag (0 = real payload, 1 = interleaved)
//! 10      4*ndim      u32 points per axis
//! ..      8*ndim      f64 period per axis
//! ..      8           f64 timestamp (simulation time of the snapshot)
//! ..      payload     row-major f64 values; (re, im) pairs when complex
//! ```
//!
//! The timestamp records *simulation* time so identical runs produce
//! identical bytes.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::grid::TorusGrid;

pub const MAGIC: &[u8; 4] = b"GRD1";
pub const VERSION: u32 = 1;

/// Serialize a field (with its snapshot time) to the wire format.
pub fn to_bytes(field: &Field, timestamp: f64) -> Vec<u8> {
    let grid = field.grid();
    let ndim = grid.ndim();
    let complex = !field.is_real();
    let mut out = Vec::with_capacity(26 + 12 * ndim + field.values().len() * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(ndim as u8);
    out.push(u8::from(complex));
    for &n in grid.dims() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &p in grid.periods() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&timestamp.to_le_bytes());
    for v in field.values() {
        out.extend_from_slice(&v.re.to_le_bytes());
        if complex {
            out.extend_from_slice(&v.im.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::GridFileDecode(format!(
                "truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decode the wire format; returns the field and its snapshot timestamp.
pub fn from_bytes(bytes: &[u8]) -> Result<(Field, f64)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::GridFileDecode(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CoreError::GridFileDecode(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let ndim = c.u8("ndim")? as usize;
    if !(1..=2).contains(&ndim) {
        return Err(CoreError::GridFileDecode(format!("bad ndim {ndim}")));
    }
    let complex_flag = c.u8("complex flag")?;
    if complex_flag > 1 {
        return Err(CoreError::GridFileDecode(format!(
            "bad complex flag {complex_flag}"
        )));
    }
    let complex = complex_flag == 1;
    let mut dims = Vec::with_capacity(ndim);
    for axis in 0..ndim {
        dims.push(c.u32(&format!("axis {axis} size"))? as usize);
    }
    let mut periods = Vec::with_capacity(ndim);
    for axis in 0..ndim {
        periods.push(c.f64(&format!("axis {axis} period"))?);
    }
    let timestamp = c.f64("timestamp")?;
    let grid = TorusGrid::new(&dims, &periods).map_err(|e| {
        CoreError::GridFileDecode(format!("invalid grid in header: {e}"))
    })?;
    let n = grid.len();
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let re = c.f64(&format!("value {i}"))?;
        let im = if complex {
            c.f64(&format!("value {i} (imag)"))?
        } else {
            0.0
        };
        values.push(Complex64::new(re, im));
    }
    if c.pos != bytes.len() {
        return Err(CoreError::GridFileDecode(format!(
            "{} trailing bytes after payload",
            bytes.len() - c.pos
        )));
    }
    let field = Field::from_values(&grid, values)?;
    Ok((field, timestamp))
}

/// Write a field to `path` in the wire format.
pub fn write_field(path: &Path, field: &Field, timestamp: f64) -> Result<()> {
    fs::write(path, to_bytes(field, timestamp))?;
    Ok(())
}

/// Read a field and its timestamp from `path`.
pub fn read_field(path: &Path) -> Result<(Field, f64)> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Convenience: the grid a file was written on.
pub fn read_grid(path: &Path) -> Result<Arc<TorusGrid>> {
    Ok(read_field(path)?.0.grid().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout_is_stable() {
        let grid = TorusGrid::new(&[4, 8], &[1.0, 2.0]).unwrap();
        let f = Field::constant(&grid, 1.5);
        let bytes = to_bytes(&f, 0.25);
        assert_eq!(&bytes[0..4], b"GRD1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 2); // ndim
        assert_eq!(bytes[9], 0); // real payload
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 8);
        assert_eq!(f64::from_le_bytes(bytes[18..26].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[26..34].try_into().unwrap()), 2.0);
        assert_eq!(f64::from_le_bytes(bytes[34..42].try_into().unwrap()), 0.25);
        assert_eq!(bytes.len(), 42 + 32 * 8);
    }

    #[test]
    fn rejects_corrupt_headers() {
        let grid = TorusGrid::new(&[4], &[1.0]).unwrap();
        let f = Field::constant(&grid, 1.0);
        let good = to_bytes(&f, 0.0);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(from_bytes(&bad_version).is_err());

        let truncated = &good[..good.len() - 3];
        assert!(from_bytes(truncated).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(from_bytes(&trailing).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn roundtrip_real_and_complex(seed in 0u64..500, complex in proptest::bool::ANY) {
            let grid = TorusGrid::new(&[8, 4], &[1.0, 0.5]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<Complex64> = (0..grid.len())
                .map(|_| Complex64::new(
                    rng.gen_range(-5.0..5.0),
                    if complex { rng.gen_range(-5.0..5.0) } else { 0.0 },
                ))
                .collect();
            let f = Field::from_values(&grid, values).unwrap();
            let t = rng.gen_range(0.0..10.0);
            let (back, t_back) = from_bytes(&to_bytes(&f, t)).unwrap();
            prop_assert_eq!(t_back.to_bits(), t.to_bits());
            prop_assert!(back.grid().same_as(f.grid()));
            for (a, b) in back.values().iter().zip(f.values()) {
                prop_assert_eq!(a.re.to_bits(), b.re.to_bits());
                prop_assert_eq!(a.im.to_bits(), b.im.to_bits());
            }
        }
    }
}
