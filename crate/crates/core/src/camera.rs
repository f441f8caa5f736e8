//! Pinhole back-projection of depth maps.

use crate::error::{ensure, Result};
use crate::types::{CameraIntrinsics, DepthMap, InstanceMask, PointCloud, TriangleMesh, Vec3};

/// Back-projects every valid (and, if given, masked) pixel into camera
/// space: `p = D(u, v) * K^-1 * (u, v, 1)^T`.
///
/// Points are emitted in row-major pixel order.
pub fn unproject(depth: &DepthMap, mask: Option<&InstanceMask>, k: &CameraIntrinsics) -> Result<PointCloud> {
    ensure!(
        depth.same_size(k.width(), k.height()),
        Contract,
        "depth {}x{} does not match intrinsics {}x{}",
        depth.width(),
        depth.height(),
        k.width(),
        k.height()
    );
    if let Some(m) = mask {
        ensure!(
            m.same_size(depth.width(), depth.height()),
            Contract,
            "mask {}x{} does not match depth {}x{}",
            m.width(),
            m.height(),
            depth.width(),
            depth.height()
        );
    }
    let w = depth.width();
    let points: Vec<Vec3> = (0..depth.len())
        .filter(|&i| mask.is_none_or(|m| m.bits()[i]))
        .filter_map(|i| depth.at(i).map(|z| k.unproject_pixel((i % w) as f64, (i / w) as f64, z)))
        .collect();
    PointCloud::from_points(points)
}

/// Height-field mesh over the masked valid-depth pixels. Vertices sit on
/// pixel corners (depth averaged over the adjacent surface pixels), so the
/// projected outline coincides with the pixel outline of the region; each
/// pixel contributes two triangles facing the camera.
pub fn lift_surface(depth: &DepthMap, mask: Option<&InstanceMask>, k: &CameraIntrinsics) -> Result<TriangleMesh> {
    let cloud = unproject(depth, mask, k)?;
    ensure!(!cloud.is_empty(), Degenerate, "no masked pixel has valid depth");
    let (w, h) = (depth.width(), depth.height());
    let on = |x: usize, y: usize| depth.valid()[y * w + x] && mask.is_none_or(|m| m.contains(x, y));
    let cw = w + 1;
    let mut corner_index = vec![u32::MAX; cw * (h + 1)];
    let mut vertices = Vec::new();
    for j in 0..=h {
        for i in 0..=w {
            let (mut sum, mut n) = (0.0, 0usize);
            for (x, y) in [
                (i.wrapping_sub(1), j.wrapping_sub(1)),
                (i, j.wrapping_sub(1)),
                (i.wrapping_sub(1), j),
                (i, j),
            ] {
                if x < w && y < h && on(x, y) {
                    sum += depth.depth()[y * w + x];
                    n += 1;
                }
            }
            if n > 0 {
                corner_index[j * cw + i] = vertices.len() as u32;
                vertices.push(k.unproject_pixel(i as f64 - 0.5, j as f64 - 0.5, sum / n as f64));
            }
        }
    }
    let mut faces = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(x, y) {
                let c = |i: usize, j: usize| corner_index[j * cw + i];
                let (a, b, cc, d) = (c(x, y), c(x + 1, y), c(x + 1, y + 1), c(x, y + 1));
                faces.push([a, d, b]);
                faces.push([b, d, cc]);
            }
        }
    }
    TriangleMesh::new(vertices, faces, None)
}
