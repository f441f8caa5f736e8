//! File formats: PNG images and masks, depth maps (PFM or 16-bit PNG with a
//! JSON sidecar), ASCII OBJ/PLY meshes and PLY point clouds.

mod depth;
mod image_png;
mod mesh;

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use depth::{read_depth, read_depth_png16, read_pfm, write_depth_png16, write_pfm, DepthPngSidecar};
pub use image_png::{
    decode_png_image, encode_png_image, read_binary_mask, read_image, read_indexed_masks, read_label_map, write_binary_mask, write_image,
    write_indexed_masks, write_label_map,
};
pub use mesh::{read_mesh, read_obj, read_ply_mesh, read_ply_points, write_obj, write_ply_mesh, write_ply_points};

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}
