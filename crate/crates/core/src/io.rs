//! Little-endian binary containers and CSV helpers.
//!
//! Every grid container starts with the same header: a 4-byte magic, a `u32`
//! format version, `u32` nx, ny, k_plus_1 and `f64` h, delta, x0, y0.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DriftError, Result};
use crate::grid::GridSpec;

pub const FORMAT_VERSION: u32 = 1;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn grid(&mut self, spec: &GridSpec) {
        self.u32(spec.nx as u32);
        self.u32(spec.ny as u32);
        self.u32((spec.k_steps + 1) as u32);
        self.f64(spec.h);
        self.f64(spec.delta);
        self.f64(spec.origin.0);
        self.f64(spec.origin.1);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn save(self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&self.buf)?;
        out.flush()?;
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    pub fn new(data: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if data.len() < 8 {
            return Err(DriftError::format(what, "truncated header"));
        }
        if &data[..4] != magic {
            return Err(DriftError::format(
                what,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&data[..4]),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let mut r = Reader { data, pos: 4, what };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(DriftError::format(what, format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(DriftError::format(
                self.what,
                format!(
                    "truncated payload: need {} bytes at offset {}, have {}",
                    n,
                    self.pos,
                    self.data.len() - self.pos
                ),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            DriftError::format(self.what, "dimension overflow")
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn grid(&mut self) -> Result<GridSpec> {
        let nx = self.u32()? as usize;
        let ny = self.u32()? as usize;
        let kp1 = self.u32()? as usize;
        let h = self.f64()?;
        let delta = self.f64()?;
        let x0 = self.f64()?;
        let y0 = self.f64()?;
        if kp1 == 0 {
            return Err(DriftError::format(self.what, "dimension mismatch: zero snapshots"));
        }
        let spec = GridSpec {
            nx,
            ny,
            h,
            delta,
            k_steps: kp1 - 1,
            origin: (x0, y0),
        };
        spec.validate()
            .map_err(|e| DriftError::format(self.what, format!("dimension mismatch: {e}")))?;
        Ok(spec)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(DriftError::format(
                self.what,
                format!("{} trailing bytes", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(DriftError::MissingFile(path.to_path_buf()));
    }
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    Ok(data)
}

/// Writes a `(K+1, ny, nx)` raster as CSV rows `t,row,col,<value_name>`.
pub fn write_raster_csv(
    path: &Path,
    spec: &GridSpec,
    values: &[f64],
    value_name: &str,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "t,row,col,{value_name}")?;
    let plane = spec.cells();
    for (t, slice) in values.chunks(plane).enumerate() {
        for row in 0..spec.ny {
            for col in 0..spec.nx {
                writeln!(out, "{},{},{},{}", t, row, col, slice[row * spec.nx + col])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
