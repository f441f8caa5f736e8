use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer as RawBuffer, ImageFormat, Luma, RgbImage, RgbaImage};

use super::{atomic_write, read_bytes};
use crate::error::{Error, Result};
use crate::types::{ImageBuffer, InstanceMask};

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn encode(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|source| Error::Image {
        path: "<memory>".into(),
        source,
    })?;
    Ok(out.into_inner())
}

fn decode(bytes: &[u8], path: &Path) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit PNG encoding of an image (gray, RGB or RGBA by channel count).
pub fn encode_png_image(img: &ImageBuffer) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize(*v)).collect();
    let dynimg = match img.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("sized buffer")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("sized buffer")),
        _ => DynamicImage::ImageRgba8(RgbaImage::from_raw(w, h, bytes).expect("sized buffer")),
    };
    encode(dynimg)
}

/// Decodes an 8- or 16-bit PNG into `[0, 1]` values. Gray+alpha images are
/// read as gray.
pub fn decode_png_image(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let img = decode(bytes, path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let sixteen = color.bytes_per_pixel() / color.channel_count() == 2;
    let (channels, data): (usize, Vec<f64>) = match (color.channel_count(), sixteen) {
        (1 | 2, false) => (1, img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        (1 | 2, true) => (1, img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        (3, false) => (3, img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        (3, true) => (3, img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        (_, false) => (4, img.to_rgba8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        (_, true) => (4, img.to_rgba16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
    };
    ImageBuffer::new(w, h, channels, data)
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    decode_png_image(&read_bytes(path)?, path)
}

pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    atomic_write(path, &encode_png_image(img)?)
}

/// Single mask as an 8-bit PNG, set pixels 255.
pub fn write_binary_mask(path: &Path, mask: &InstanceMask) -> Result<()> {
    let bytes = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes).expect("sized buffer");
    atomic_write(path, &encode(DynamicImage::ImageLuma8(img))?)
}

/// Any non-zero pixel counts as set.
pub fn read_binary_mask(path: &Path, id: u32) -> Result<InstanceMask> {
    let img = decode(&read_bytes(path)?, path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    InstanceMask::new(id, w, h, img.into_raw().into_iter().map(|v| v != 0).collect())
}

/// Raw per-pixel integer values of a gray 8/16-bit PNG.
pub fn read_label_map(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let img = decode(&read_bytes(path)?, path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    // Raw values: `to_luma16` would rescale 8-bit labels by 257.
    let labels = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(u32::from).collect(),
        _ => return Err(Error::parse(path, "label map must be a single-channel PNG")),
    };
    Ok((w, h, labels))
}

/// Writes integer labels as 8-bit gray when they all fit, else 16-bit.
pub fn write_label_map(path: &Path, width: usize, height: usize, labels: &[u32]) -> Result<()> {
    let max = labels.iter().copied().max().unwrap_or(0);
    if max > u16::MAX as u32 {
        return Err(Error::Validation(format!("label {max} does not fit a 16-bit PNG")));
    }
    let dynimg = if max <= u8::MAX as u32 {
        DynamicImage::ImageLuma8(
            GrayImage::from_raw(width as u32, height as u32, labels.iter().map(|v| *v as u8).collect())
                .ok_or_else(|| Error::Contract("label buffer does not match dimensions".into()))?,
        )
    } else {
        let img: RawBuffer<Luma<u16>, Vec<u16>> =
            RawBuffer::from_raw(width as u32, height as u32, labels.iter().map(|v| *v as u16).collect())
                .ok_or_else(|| Error::Contract("label buffer does not match dimensions".into()))?;
        DynamicImage::ImageLuma16(img)
    };
    atomic_write(path, &encode(dynimg)?)
}

/// Instance masks from an indexed PNG (pixel value = instance id, 0 = none),
/// ordered by id.
pub fn read_indexed_masks(path: &Path) -> Result<Vec<InstanceMask>> {
    let (w, h, labels) = read_label_map(path)?;
    let mut by_id: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            by_id.entry(l).or_insert_with(|| vec![false; w * h])[i] = true;
        }
    }
    by_id.into_iter().map(|(id, bits)| InstanceMask::new(id, w, h, bits)).collect()
}

/// Flattens masks into one indexed PNG. Where masks overlap the later mask wins.
pub fn write_indexed_masks(path: &Path, width: usize, height: usize, masks: &[InstanceMask]) -> Result<()> {
    let mut labels = vec![0u32; width * height];
    for m in masks {
        if !m.same_size(width, height) {
            return Err(Error::Contract(format!(
                "mask {} is {}x{}, expected {width}x{height}",
                m.id(),
                m.width(),
                m.height()
            )));
        }
        if m.id() == 0 {
            return Err(Error::Validation("instance id 0 is reserved for background".into()));
        }
        for i in m.indices() {
            labels[i] = m.id();
        }
    }
    write_label_map(path, width, height, &labels)
}
