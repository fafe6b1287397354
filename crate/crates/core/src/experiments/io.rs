//! Bit-exact file formats: binary rasters, 16-bit PGM previews and CSV
//! outputs.
//!
//! Raster container (images and sinograms share it):
//!
//! ```text
//! magic   8 bytes  "KEMRAST1"
//! width   u32 LE   (radial bins for sinograms)
//! height  u32 LE   (projection angles for sinograms)
//! pitch   f64 LE   pixel size / bin spacing in mm
//! elem    u8       element type tag (0 = f64 little-endian)
//! payload width*height f64 LE, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::projector::Sinogram;
use crate::recon::ReconTrace;

use super::metrics::MetricsReport;

const MAGIC: &[u8; 8] = b"KEMRAST1";
const ELEM_F64: u8 = 0;

fn write_raster(path: &Path, width: usize, height: usize, pitch: f64, values: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    w.write_all(&pitch.to_le_bytes())?;
    w.write_all(&[ELEM_F64])?;
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_raster(path: &Path) -> Result<(usize, usize, f64, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad raster magic", path.display())));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let width = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let height = u32::from_le_bytes(u32buf) as usize;
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut f64buf)?;
    let pitch = f64::from_le_bytes(f64buf);
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    if tag[0] != ELEM_F64 {
        return Err(Error::Format(format!(
            "{}: unsupported element tag {}",
            path.display(),
            tag[0]
        )));
    }
    let mut values = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        r.read_exact(&mut f64buf)?;
        values.push(f64::from_le_bytes(f64buf));
    }
    Ok((width, height, pitch, values))
}

pub fn write_image(image: &Image2D, path: &Path) -> Result<()> {
    write_raster(
        path,
        image.width(),
        image.height(),
        image.pixel_size_mm(),
        image.values(),
    )
}

pub fn read_image(path: &Path) -> Result<Image2D> {
    let (width, height, pitch, values) = read_raster(path)?;
    Image2D::new(width, height, pitch, values)
}

/// Sinograms are stored with dims swapped relative to images:
/// width = radial bins, height = angles, pitch = bin spacing.
pub fn write_sinogram(sino: &Sinogram, bin_spacing_mm: f64, path: &Path) -> Result<()> {
    write_raster(path, sino.n_bins(), sino.n_angles(), bin_spacing_mm, sino.values())
}

pub fn read_sinogram(path: &Path) -> Result<(Sinogram, f64)> {
    let (n_bins, n_angles, pitch, values) = read_raster(path)?;
    Ok((Sinogram::new(n_angles, n_bins, values)?, pitch))
}

/// 16-bit binary PGM, min-max scaled, for eyeballing results without any
/// external tooling.
pub fn write_image_pgm(image: &Image2D, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (lo, hi) = image
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", image.width(), image.height())?;
    for &v in image.values() {
        let scaled = ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16;
        // PGM payloads are big-endian.
        w.write_all(&scaled.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reconstruction trace: `iteration,loglik,snr_db` with a blank SNR column
/// when no truth was supplied.
pub fn write_trace_csv(trace: &ReconTrace, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,loglik,snr_db")?;
    for e in &trace.entries {
        match e.snr_db {
            Some(snr) => writeln!(w, "{},{},{}", e.iteration, e.loglik, snr)?,
            None => writeln!(w, "{},{},", e.iteration, e.loglik)?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Training loss trace: `iteration,loss`, zero-based iterations.
pub fn write_loss_trace_csv(losses: &[f64], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,loss")?;
    for (i, loss) in losses.iter().enumerate() {
        writeln!(w, "{i},{loss}")?;
    }
    w.flush()?;
    Ok(())
}

/// Final per-frame SNR table: `method,frame,snr_db`, zero-based frames.
pub fn write_metrics_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "method,frame,snr_db")?;
    for e in &report.entries {
        writeln!(w, "{},{},{}", e.method, e.frame, e.snr_db)?;
    }
    w.flush()?;
    Ok(())
}
