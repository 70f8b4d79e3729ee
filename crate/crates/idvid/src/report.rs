//! Report files: line-delimited records with an embedded meta header, CSV
//! tables with the same meta as a leading comment, and portable graymap
//! images for spectrum maps.

use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{IdvidError, Result};
use crate::tensor::Tensor;

/// Meta object embedded in every report: resolved config plus the artifact
/// version, so any report can be traced back to the exact run.
pub fn report_meta(resolved_config: Value) -> Value {
    serde_json::json!({
        "kind": "meta",
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "config": resolved_config,
    })
}

/// Write line-delimited records, meta first.
pub fn write_jsonl(path: &Path, meta: &Value, records: &[Value]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(meta)?);
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| IdvidError::io(path, e))
}

fn csv_quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Write a CSV table; the meta JSON rides in a single leading `#` comment.
pub fn write_csv(path: &Path, meta: &Value, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str("# ");
    out.push_str(&serde_json::to_string(meta)?);
    out.push('\n');
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(IdvidError::InternalConsistency(format!(
                "csv row has {} cells, header has {}",
                row.len(),
                header.len()
            )));
        }
        let cells: Vec<String> = row.iter().map(|c| csv_quote(c)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| IdvidError::io(path, e))
}

/// Write a single-channel map as an ASCII portable graymap, min-max scaled.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = map.shape();
    if h == 0 || w == 0 {
        return Err(IdvidError::InvalidArgument("empty map".into()));
    }
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| {
                let v = ((map.get(y, x) - lo) / span * 255.0).round() as i64;
                v.clamp(0, 255).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| IdvidError::io(path, e))
}

/// Write frames as a sequence of portable pixmaps next to each other.
pub fn write_ppm_sequence(dir: &Path, stem: &str, frames: &[Tensor], h: usize, w: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| IdvidError::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != (3, h * w) {
            return Err(IdvidError::InvalidArgument(format!(
                "frame {i} has shape {:?}, expected (3, {})",
                f.shape(),
                h * w
            )));
        }
        let path = dir.join(format!("{stem}-{i:03}.ppm"));
        let mut out = format!("P3\n{w} {h}\n255\n");
        for y in 0..h {
            let mut row = Vec::with_capacity(3 * w);
            for x in 0..w {
                for c in 0..3 {
                    let v = (f.get(c, y * w + x).clamp(0.0, 1.0) * 255.0).round() as u8;
                    row.push(v.to_string());
                }
            }
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        let mut file = std::fs::File::create(&path).map_err(|e| IdvidError::io(&path, e))?;
        file.write_all(out.as_bytes())
            .map_err(|e| IdvidError::io(&path, e))?;
    }
    Ok(())
}

/// Pack frames into a little-endian f32 tensor file: magic, dims, data.
/// Layout: "IDVF" | u32 version=1 | u32 t,h,w | per frame 3*h*w f32 values
/// in channel-major order.
pub fn write_video_tensor(path: &Path, frames: &[Tensor], h: usize, w: usize) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"IDVF");
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for f in frames {
        if f.shape() != (3, h * w) {
            return Err(IdvidError::InvalidArgument(format!(
                "frame shape {:?} does not match {}x{}",
                f.shape(),
                h,
                w
            )));
        }
        for &v in f.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| IdvidError::io(path, e))
}

/// Read a packed video tensor file back into frames.
pub fn read_video_tensor(path: &Path) -> Result<(Vec<Tensor>, usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| IdvidError::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != b"IDVF" {
        return Err(IdvidError::CorruptFile("bad video tensor header".into()));
    }
    let u32at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u32at(4) != 1 {
        return Err(IdvidError::CorruptFile("unsupported video tensor version".into()));
    }
    let (t, h, w) = (u32at(8), u32at(12), u32at(16));
    let need = 20 + t * 3 * h * w * 4;
    if bytes.len() != need {
        return Err(IdvidError::CorruptFile(format!(
            "video tensor file is {} bytes, expected {need}",
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(t);
    let mut off = 20;
    for _ in 0..t {
        let mut f = Tensor::zeros(3, h * w);
        for i in 0..3 * h * w {
            f.data_mut()[i] =
                f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
        frames.push(f);
    }
    Ok((frames, h, w))
}
