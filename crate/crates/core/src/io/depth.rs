use std::path::Path;

use image::{DynamicImage, ImageBuffer as RawBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use super::{atomic_write, read_bytes, read_json, write_json};
use crate::error::{Error, Result};
use crate::types::DepthMap;

/// JSON sidecar of a 16-bit depth PNG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPngSidecar {
    pub scale_m_per_unit: f64,
}

/// Reads `.pfm` files directly and `.png` files through their sidecar.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pfm") => read_pfm(path),
        Some(e) if e.eq_ignore_ascii_case("png") => read_depth_png16(path),
        _ => Err(Error::parse(path, "depth must be .pfm or .png")),
    }
}

/// Single-channel little-endian portable float map. Invalid pixels are
/// stored as 0.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    bytes.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let v = depth.get(x, y).unwrap_or(0.0) as f32;
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)
}

/// Non-finite or non-positive samples become invalid pixels.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    // Header: magic, width, height, scale; whitespace separated, then exactly
    // one whitespace byte before the raster.
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(Error::parse(path, format!("unsupported PFM magic {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, format!("bad PFM size {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3]
        .parse()
        .map_err(|_| Error::parse(path, format!("bad PFM scale {:?}", fields[3])))?;
    let little = scale < 0.0;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() < w * h * 4 {
        return Err(Error::parse(path, "truncated PFM raster"));
    }
    let mut values = vec![0.0f64; w * h];
    for (k, chunk) in raster.chunks_exact(4).take(w * h).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (x, row) = (k % w, k / w);
        values[(h - 1 - row) * w + x] = v as f64;
    }
    DepthMap::from_values(w, h, values)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// 16-bit PNG depth; value 0 marks invalid pixels. The sidecar sits next to
/// the PNG with a `.json` extension.
pub fn write_depth_png16(path: &Path, depth: &DepthMap, scale_m_per_unit: f64) -> Result<()> {
    if !(scale_m_per_unit > 0.0) {
        return Err(Error::Contract("depth PNG scale must be positive".into()));
    }
    let raw: Vec<u16> = (0..depth.len())
        .map(|i| {
            depth
                .at(i)
                .map_or(0, |d| (d / scale_m_per_unit).round().clamp(1.0, u16::MAX as f64) as u16)
        })
        .collect();
    let img: RawBuffer<Luma<u16>, Vec<u16>> = RawBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw).expect("sized buffer");
    let mut out = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageLuma16(img)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    atomic_write(path, &out.into_inner())?;
    write_json(&sidecar_path(path), &DepthPngSidecar { scale_m_per_unit })
}

pub fn read_depth_png16(path: &Path) -> Result<DepthMap> {
    let sidecar: DepthPngSidecar = read_json(&sidecar_path(path))?;
    let (w, h, raw) = super::read_label_map(path)?;
    DepthMap::from_values(w, h, raw.into_iter().map(|v| v as f64 * sidecar.scale_m_per_unit).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DepthMap {
        DepthMap::from_fn(4, 3, |x, y| (x != 2 || y != 1).then(|| 0.5 + 0.25 * (x + 4 * y) as f64)).unwrap()
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = sample();
        write_pfm(&p, &d).unwrap();
        assert_eq!(read_depth(&p).unwrap(), d);
    }

    #[test]
    fn png16_round_trip_at_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let d = sample();
        write_depth_png16(&p, &d, 0.001).unwrap();
        let back = read_depth(&p).unwrap();
        assert_eq!(back.valid(), d.valid());
        for (a, b) in back.depth().iter().zip(d.depth()) {
            assert!((a - b).abs() <= 0.0005 + 1e-12);
        }
    }

    #[test]
    fn rejects_unknown_extension() {
        assert!(read_depth(Path::new("x.exr")).is_err());
    }
}
