//! Aligned multi-factor raster container and its on-disk format.
//!
//! A [`FeatureStack`] holds F factor layers on one H×W grid with a shared
//! nodata mask. On disk it is an FFSTACK file: the magic `FFSTACK1\n`, one
//! JSON header line, then F·H·W little-endian f32 values, layer-major,
//! row-major within each layer. Masked cells are stored as the header's
//! nodata sentinel in every layer; on load, any cell holding the sentinel
//! (bit-exact) in any layer is masked.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File magic, including the terminating newline.
pub const FFSTACK_MAGIC: &[u8] = b"FFSTACK1\n";

/// Default nodata sentinel: far outside any plausible factor range and
/// exactly representable, so bit-equality survives a round-trip.
pub const DEFAULT_NODATA: f32 = -1.0e30;

/// Reference grid resolution in meters.
pub const DEFAULT_CELL_SIZE: f64 = 12.5;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    width: usize,
    height: usize,
    cell_size: f64,
    nodata: f64,
    factors: Vec<String>,
}

/// F named factor layers on an aligned H×W grid with a shared nodata mask.
///
/// Immutable after construction; all statistics and windows exclude masked
/// cells (enforced by the consumers — the container guarantees unmasked
/// values are finite).
#[derive(Debug, Clone)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    cell_size: f64,
    nodata: f32,
    factors: Vec<String>,
    /// F·H·W values, layer-major, row-major within a layer.
    data: Vec<f32>,
    /// H·W flags, `true` = nodata.
    mask: Vec<bool>,
}

impl FeatureStack {
    /// Validates and assembles a stack. `data` is layer-major (F·H·W),
    /// `mask` is per-cell (H·W, `true` = nodata). Every unmasked value must
    /// be finite and factor names must be unique.
    pub fn new(
        width: usize,
        height: usize,
        cell_size: f64,
        nodata: f32,
        factors: Vec<String>,
        data: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<FeatureStack> {
        if width == 0 || height == 0 {
            return Err(Error::Value("stack dimensions must be positive".into()));
        }
        if factors.is_empty() {
            return Err(Error::Value("stack needs at least one factor layer".into()));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::Value(format!("cell_size must be positive, got {cell_size}")));
        }
        for (i, name) in factors.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Value(format!("factor {i} has an empty name")));
            }
            if factors[..i].contains(name) {
                return Err(Error::Value(format!("duplicate factor name {name:?}")));
            }
        }
        let cells = width * height;
        if data.len() != factors.len() * cells {
            return Err(Error::Dimension(format!(
                "stack data holds {} values, expected {}·{}·{} = {}",
                data.len(),
                factors.len(),
                height,
                width,
                factors.len() * cells
            )));
        }
        if mask.len() != cells {
            return Err(Error::Dimension(format!(
                "stack mask holds {} flags, expected {}",
                mask.len(),
                cells
            )));
        }
        for f in 0..factors.len() {
            for cell in 0..cells {
                if !mask[cell] && !data[f * cells + cell].is_finite() {
                    return Err(Error::Value(format!(
                        "non-finite unmasked value in factor {:?} at cell ({}, {})",
                        factors[f],
                        cell / width,
                        cell % width
                    )));
                }
            }
        }
        Ok(FeatureStack { width, height, cell_size, nodata, factors, data, mask })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn nodata(&self) -> f32 {
        self.nodata
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[String] {
        &self.factors
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f == name)
    }

    /// One factor layer as a row-major H·W slice.
    pub fn layer(&self, f: usize) -> &[f32] {
        let cells = self.width * self.height;
        &self.data[f * cells..(f + 1) * cells]
    }

    pub fn get(&self, f: usize, row: usize, col: usize) -> f32 {
        self.data[(f * self.height + row) * self.width + col]
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    /// Per-cell nodata flags, row-major.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Writes the stack in FFSTACK format. Masked cells are written as the
    /// nodata sentinel in every layer.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(FFSTACK_MAGIC)?;
        let header = Header {
            width: self.width,
            height: self.height,
            cell_size: self.cell_size,
            nodata: self.nodata as f64,
            factors: self.factors.clone(),
        };
        let line = serde_json::to_string(&header)
            .map_err(|e| Error::Format(format!("stack header serialization failed: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        let cells = self.width * self.height;
        for f in 0..self.factors.len() {
            for cell in 0..cells {
                let v = if self.mask[cell] { self.nodata } else { self.data[f * cells + cell] };
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an FFSTACK file written by [`FeatureStack::save`] (or any
    /// producer following the format). The payload must hold exactly
    /// F·H·W values; a cell is masked when any layer carries the header's
    /// nodata sentinel bit-exactly.
    pub fn load(path: &Path) -> Result<FeatureStack> {
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; FFSTACK_MAGIC.len()];
        read_exact(&mut r, &mut magic, "magic")?;
        if magic != FFSTACK_MAGIC {
            return Err(Error::Format("not an FFSTACK file (bad magic)".into()));
        }

        let header: Header = {
            let mut line = Vec::new();
            let mut byte = [0u8; 1];
            loop {
                read_exact(&mut r, &mut byte, "header")?;
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
                if line.len() > 1 << 20 {
                    return Err(Error::Format("stack header exceeds 1 MiB".into()));
                }
            }
            serde_json::from_slice(&line)
                .map_err(|e| Error::Format(format!("bad stack header: {e}")))?
        };
        if header.width == 0 || header.height == 0 || header.factors.is_empty() {
            return Err(Error::Format(
                "stack header declares an empty grid or no factors".into(),
            ));
        }

        let cells = header.width * header.height;
        let total = header.factors.len() * cells;
        let mut payload = vec![0u8; total * 4];
        read_exact(&mut r, &mut payload, "payload")?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after stack payload".into()));
        }

        let nodata = header.nodata as f32;
        let mut data = Vec::with_capacity(total);
        for chunk in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let mut mask = vec![false; cells];
        for f in 0..header.factors.len() {
            for cell in 0..cells {
                if data[f * cells + cell].to_bits() == nodata.to_bits() {
                    mask[cell] = true;
                }
            }
        }
        for f in 0..header.factors.len() {
            for cell in 0..cells {
                if !mask[cell] && !data[f * cells + cell].is_finite() {
                    return Err(Error::Format(format!(
                        "non-finite unmasked value in factor {:?} at cell ({}, {})",
                        header.factors[f],
                        cell / header.width,
                        cell % header.width
                    )));
                }
            }
        }

        FeatureStack::new(
            header.width,
            header.height,
            header.cell_size,
            nodata,
            header.factors,
            data,
            mask,
        )
        .map_err(|e| Error::Format(format!("inconsistent stack file: {e}")))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("stack file truncated while reading {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stack() -> FeatureStack {
        // 2 factors on a 3×4 grid with one masked cell.
        let mut mask = vec![false; 12];
        mask[5] = true;
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        FeatureStack::new(
            4,
            3,
            DEFAULT_CELL_SIZE,
            DEFAULT_NODATA,
            vec!["alpha".into(), "beta".into()],
            data,
            mask,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_grids_and_mask() {
        let stack = sample_stack();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ffstack");
        stack.save(&path).unwrap();
        let loaded = FeatureStack::load(&path).unwrap();

        assert_eq!(loaded.width(), 4);
        assert_eq!(loaded.height(), 3);
        assert_eq!(loaded.cell_size(), DEFAULT_CELL_SIZE);
        assert_eq!(loaded.factors(), stack.factors());
        assert_eq!(loaded.mask(), stack.mask());
        // Unmasked cells round-trip bit-exactly; masked cells come back as
        // the sentinel in every layer.
        for f in 0..2 {
            for r in 0..3 {
                for c in 0..4 {
                    let expect =
                        if stack.is_masked(r, c) { DEFAULT_NODATA } else { stack.get(f, r, c) };
                    assert_eq!(loaded.get(f, r, c).to_bits(), expect.to_bits());
                }
            }
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let stack = sample_stack();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ffstack");
        stack.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = FeatureStack::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ffstack");
        std::fs::write(&path, b"NOTSTACK\n{}").unwrap();
        let err = FeatureStack::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn trailing_bytes_are_a_format_error() {
        let stack = sample_stack();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ffstack");
        stack.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        let err = FeatureStack::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn non_finite_unmasked_value_is_rejected() {
        let mut data = vec![0.0f32; 12];
        data[3] = f32::NAN;
        let err = FeatureStack::new(
            4,
            3,
            DEFAULT_CELL_SIZE,
            DEFAULT_NODATA,
            vec!["a".into()],
            data,
            vec![false; 12],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Value(_)), "{err}");

        // The same value under the mask is fine.
        let mut data = vec![0.0f32; 12];
        data[3] = f32::NAN;
        let mut mask = vec![false; 12];
        mask[3] = true;
        FeatureStack::new(
            4,
            3,
            DEFAULT_CELL_SIZE,
            DEFAULT_NODATA,
            vec!["a".into()],
            data,
            mask,
        )
        .unwrap();
    }

    #[test]
    fn duplicate_factor_names_are_rejected() {
        let err = FeatureStack::new(
            2,
            2,
            DEFAULT_CELL_SIZE,
            DEFAULT_NODATA,
            vec!["a".into(), "a".into()],
            vec![0.0; 8],
            vec![false; 4],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Value(_)), "{err}");
    }

    #[test]
    fn data_length_mismatch_is_rejected() {
        let err = FeatureStack::new(
            2,
            2,
            DEFAULT_CELL_SIZE,
            DEFAULT_NODATA,
            vec!["a".into()],
            vec![0.0; 5],
            vec![false; 4],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
    }
}
