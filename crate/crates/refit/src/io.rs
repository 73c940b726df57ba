//! File formats: binary PGM (P5) / PPM (P6) with 8-bit clamping for
//! viewing, a lossless float raw sidecar for numerics, and the CSV writers
//! for traces, metrics and penalty landscapes.
//!
//! Raw sidecar layout: magic "RFL1", then height, width, channels as
//! little-endian u32, then height*width*channels f64 values (little-endian,
//! planar channel order).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{RefitError, Result};
use crate::field::ImageGrid;
use crate::solvers::TraceRow;

/// Writes P5 (1 channel) or P6 (3 channels), rounding and clamping to 8 bits.
pub fn write_image(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(RefitError::Format(format!("PGM/PPM supports 1 or 3 channels, got {c}")));
        }
    };
    write!(f, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let n = img.pixels();
    let mut row = Vec::with_capacity(n * img.channels);
    for p in 0..n {
        for c in 0..img.channels {
            let v = img.channel(c)[p].round().clamp(0.0, 255.0) as u8;
            row.push(v);
        }
    }
    f.write_all(&row)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let mut data = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut data)?;
    let mut pos = 0usize;
    let magic = next_token(&data, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(RefitError::Format(format!("unsupported magic {other:?}"))),
    };
    let width: usize = parse_token(&data, &mut pos)?;
    let height: usize = parse_token(&data, &mut pos)?;
    let maxval: usize = parse_token(&data, &mut pos)?;
    if maxval != 255 {
        return Err(RefitError::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    // Single whitespace byte after the header.
    pos += 1;
    let n = height * width;
    if data.len() < pos + n * channels {
        return Err(RefitError::Format("truncated pixel payload".into()));
    }
    let mut img = ImageGrid::zeros(height, width, channels);
    for p in 0..n {
        for c in 0..channels {
            img.channel_mut(c)[p] = data[pos + p * channels + c] as f64;
        }
    }
    Ok(img)
}

fn next_token(data: &[u8], pos: &mut usize) -> Result<String> {
    // Skip whitespace and '#' comments.
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(RefitError::Format("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

fn parse_token(data: &[u8], pos: &mut usize) -> Result<usize> {
    next_token(data, pos)?
        .parse()
        .map_err(|e| RefitError::Format(format!("bad header field: {e}")))
}

const RAW_MAGIC: &[u8; 4] = b"RFL1";

pub fn write_raw(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(RAW_MAGIC)?;
    for dim in [img.height as u32, img.width as u32, img.channels as u32] {
        f.write_all(&dim.to_le_bytes())?;
    }
    for v in &img.values {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<ImageGrid> {
    let mut data = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut data)?;
    if data.len() < 16 || &data[0..4] != RAW_MAGIC {
        return Err(RefitError::Format("not an RFL1 file".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(data[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (height, width, channels) = (dim(0), dim(1), dim(2));
    let n = height * width * channels;
    if data.len() != 16 + 8 * n {
        return Err(RefitError::Format(format!(
            "payload length mismatch: expected {} bytes, got {}",
            16 + 8 * n,
            data.len()
        )));
    }
    let values: Vec<f64> = data[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageGrid::from_values(height, width, channels, values)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Per-iteration solver trace.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "iter,fidelity_biased,fidelity_refit,objective_biased,support_size,psnr_biased,psnr_refit"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.iter,
            r.fidelity_biased,
            r.fidelity_refit,
            r.objective_biased,
            r.support_size,
            fmt_opt(r.psnr_biased),
            fmt_opt(r.psnr_refit)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub scenario: String,
    pub penalty: String,
    pub psnr_noisy: f64,
    pub psnr_biased: f64,
    pub psnr_refit: f64,
    pub fidelity_biased: f64,
    pub fidelity_refit: f64,
    pub support_size: usize,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "scenario,penalty,psnr_noisy,psnr_biased,psnr_refit,fidelity_biased,fidelity_refit,support_size"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.scenario,
            r.penalty,
            r.psnr_noisy,
            r.psnr_biased,
            r.psnr_refit,
            r.fidelity_biased,
            r.fidelity_refit,
            r.support_size
        )?;
    }
    Ok(())
}

/// Penalty landscape rows (theta, amplitude, value); indicator values are
/// written as the literal "inf".
pub fn write_landscape_csv(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "theta,amplitude,value")?;
    for (theta, a, v) in rows {
        writeln!(f, "{theta},{a},{v}")?;
    }
    Ok(())
}
