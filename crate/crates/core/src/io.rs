//! File helpers: atomic writes, PNG frame sequences and directory digests.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Quantize a [0, 1] value to 8 bits.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode one RGB (or grayscale) frame stored channel-major (c, h, w).
pub fn encode_png(frame: &[f32], c: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    if frame.len() != c * h * w {
        return Err(Error::Shape(format!(
            "frame of {} values for {c}x{h}x{w}",
            frame.len()
        )));
    }
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        other => return Err(Error::Image(format!("cannot store {other}-channel frames as PNG"))),
    };
    let mut data = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data.push(to_u8(frame[(ch * h + y) * w + x]));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

/// Decode a PNG written by [`encode_png`] into (c, h, w) values in [0, 1].
pub fn decode_png(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize, usize)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(e.to_string()))?;
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::Image(format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut frame = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                frame[(ch * h + y) * w + x] = buf[(y * w + x) * c + ch] as f32 / 255.0;
            }
        }
    }
    Ok((frame, c, h, w))
}

/// Write `frames` (f, c, h, w) as `frame_000.png`, `frame_001.png`, ...
pub fn write_frames(dir: &Path, frames: &[f32], f: usize, c: usize, h: usize, w: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let per = c * h * w;
    if frames.len() != f * per {
        return Err(Error::Shape(format!("{} values for {f} frames", frames.len())));
    }
    for i in 0..f {
        let png = encode_png(&frames[i * per..(i + 1) * per], c, h, w)?;
        write_atomic(&dir.join(format!("frame_{i:03}.png")), &png)?;
    }
    Ok(())
}

/// Read `f` frames written by [`write_frames`]; returns (values, c, h, w).
pub fn read_frames(dir: &Path, f: usize) -> Result<(Vec<f32>, usize, usize, usize)> {
    let mut out = Vec::new();
    let mut dims = (0, 0, 0);
    for i in 0..f {
        let p = dir.join(format!("frame_{i:03}.png"));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let (frame, c, h, w) = decode_png(&bytes)?;
        if i > 0 && dims != (c, h, w) {
            return Err(Error::Shape(format!("frame {i} in {} changes size", dir.display())));
        }
        dims = (c, h, w);
        out.extend(frame);
    }
    Ok((out, dims.0, dims.1, dims.2))
}

/// SHA-256 over the relative paths and contents of every file under `dir`,
/// visited in sorted order. Files for which `skip` returns true are ignored.
pub fn dir_digest(dir: &Path, skip: &dyn Fn(&Path) -> bool) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        if skip(&f) {
            continue;
        }
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        hasher.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_quantized_values() {
        let (c, h, w) = (3, 4, 5);
        let frame: Vec<f32> = (0..c * h * w).map(|i| ((i * 13) % 256) as f32 / 255.0).collect();
        let bytes = encode_png(&frame, c, h, w).unwrap();
        let (back, c2, h2, w2) = decode_png(&bytes).unwrap();
        assert_eq!((c2, h2, w2), (c, h, w));
        assert_eq!(back, frame);
    }

    #[test]
    fn digest_ignores_skipped_files() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(&dir.path().join("a.txt"), b"x").unwrap();
        let d1 = dir_digest(dir.path(), &|_| false).unwrap();
        write_atomic(&dir.path().join("sub/b.log"), b"y").unwrap();
        let d2 = dir_digest(dir.path(), &|p| p.extension().is_some_and(|e| e == "log")).unwrap();
        assert_eq!(d1, d2);
    }
}
