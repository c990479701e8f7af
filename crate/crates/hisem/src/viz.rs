//! Binary portable-graymap (P5) dumps for heatmap inspection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{HisemError, Result};

/// Min-max normalizes `values` to 0..=255 and writes a P5 graymap.
/// A constant map writes all zeros.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(HisemError::InvalidArgument(format!(
            "pgm: {} values for a {width}x{height} map",
            values.len()
        )));
    }
    let io = |e| HisemError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| {
            if span == 0.0 {
                0
            } else {
                ((v - lo) / span * 255.0).round() as u8
            }
        })
        .collect();
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    write!(f, "P5\n{width} {height}\n255\n").map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.flush().map_err(io)
}
