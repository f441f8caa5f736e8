//! Placing reconstructed instance meshes into the camera frame: scale from
//! depth, ICP against back-projected depth points, and silhouette-driven
//! pose refinement.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::unproject;
use crate::error::{ensure, Error, Result};
use crate::raycast::Bvh;
use crate::spatial::KdTree;
use crate::types::{
    rotation_from_axis_angle, CameraIntrinsics, DepthMap, InstanceMask, Mat3, PointCloud, RigidScaleTransform, TriangleMesh, Vec3,
};

/// Back-projected depth points of an instance.
pub fn reference_points(depth: &DepthMap, mask: &InstanceMask, k: &CameraIntrinsics) -> Result<PointCloud> {
    let cloud = unproject(depth, Some(mask), k)?;
    ensure!(
        cloud.len() >= 3,
        Degenerate,
        "instance {} has {} valid depth pixels, need at least 3",
        mask.id(),
        cloud.len()
    );
    Ok(cloud)
}

/// Extent of the two largest principal directions relative to the diagonal;
/// near zero for collinear clouds.
fn planar_spread(points: &[Vec3]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - c;
        a + d * d.transpose()
    }) / n;
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 {
        0.0
    } else {
        (ev[1].max(0.0) / ev[0]).sqrt()
    }
}

/// Ratio of bounding-box diagonals, `diag(reference) / diag(mesh_visible)`.
pub fn estimate_scale(mesh_visible: &PointCloud, reference: &PointCloud) -> Result<f64> {
    for (name, cloud) in [("visible mesh", mesh_visible), ("reference", reference)] {
        ensure!(cloud.len() >= 3, Degenerate, "{name} cloud has fewer than 3 points");
        ensure!(cloud.diagonal() > 0.0, Degenerate, "{name} cloud has zero extent");
        ensure!(planar_spread(cloud.points()) > 1e-9, Degenerate, "{name} cloud is collinear");
    }
    let s = reference.diagonal() / mesh_visible.diagonal();
    ensure!(s.is_finite() && s > 0.0, Degenerate, "scale ratio is not finite");
    Ok(s)
}

/// Sub-pixel sample offsets: the pixel centre first, then an R2 sequence.
pub fn pixel_sample_offsets(samples_per_pixel: usize) -> Vec<(f64, f64)> {
    const A1: f64 = 0.754_877_666_246_692_7;
    const A2: f64 = 0.569_840_290_998_053_2;
    (0..samples_per_pixel.max(1))
        .map(|j| {
            if j == 0 {
                (0.0, 0.0)
            } else {
                ((j as f64 * A1).fract() - 0.5, (j as f64 * A2).fract() - 0.5)
            }
        })
        .collect()
}

/// Nearest ray hits of the posed mesh for every pixel sample, in camera
/// space, ordered by pixel row, column, then sample.
pub fn visible_points(mesh: &TriangleMesh, pose: &RigidScaleTransform, k: &CameraIntrinsics, samples_per_pixel: usize) -> PointCloud {
    let bvh = Bvh::new(&mesh.transformed(pose));
    let offsets = pixel_sample_offsets(samples_per_pixel);
    let rows: Vec<Vec<Vec3>> = (0..k.height())
        .into_par_iter()
        .map(|v| {
            let mut out = Vec::new();
            for u in 0..k.width() {
                for &(du, dv) in &offsets {
                    let dir = k.ray(u as f64 + du, v as f64 + dv);
                    if let Some(hit) = bvh.intersect(&Vec3::zeros(), &dir, 1e-9) {
                        out.push(dir * hit.t);
                    }
                }
            }
            out
        })
        .collect();
    PointCloud::from_points(rows.into_iter().flatten().collect()).expect("finite hit points")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop when the inlier RMSE changes by less than this.
    pub tol: f64,
    pub min_points: usize,
    /// Correspondences farther than this multiple of the median are dropped.
    pub reject_factor: f64,
    /// Translate the source centroid onto the target centroid first.
    pub centroid_init: bool,
    /// Also try yaw offsets of ±45°, ±90° and 180° about the camera y axis.
    pub yaw_sweep: bool,
    /// Converged runs must end below this RMSE, relative to the smaller of
    /// the two cloud diagonals.
    pub fitness: f64,
    /// Converged runs must keep at least this fraction of source points as
    /// inliers.
    pub min_inlier_fraction: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            min_points: 10,
            reject_factor: 3.0,
            centroid_init: true,
            yaw_sweep: true,
            fitness: 0.05,
            min_inlier_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Rigid map from source to target (scale 1).
    pub transform: RigidScaleTransform,
    /// Inlier RMSE of `transform`.
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Least-squares rotation and translation taking `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Result<RigidScaleTransform> {
    ensure!(src.len() == dst.len() && !src.is_empty(), Contract, "kabsch needs paired points");
    let n = src.len() as f64;
    let cs = src.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let h = src
        .iter()
        .zip(dst)
        .fold(Mat3::zeros(), |a, (p, q)| a + (p - cs) * (q - cd).transpose());
    let svd = h.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Degenerate("correspondence SVD failed".into())),
    };
    let v = vt.transpose();
    let mut d = Mat3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    RigidScaleTransform::new_orthonormalized(1.0, r, cd - r * cs)
}

struct IcpRun {
    transform: RigidScaleTransform,
    rmse: f64,
    inlier_fraction: f64,
    iterations: usize,
    hit_tol: bool,
}

fn icp_from(source: &[Vec3], target: &[Vec3], tree: &KdTree, init: RigidScaleTransform, cfg: &IcpConfig) -> Result<IcpRun> {
    let mut current = init;
    let mut best: Option<(f64, f64, RigidScaleTransform)> = None;
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut hit_tol = false;
    loop {
        let moved: Vec<Vec3> = source.iter().map(|p| current.apply(p)).collect();
        let nn: Vec<(usize, f64)> = moved.par_iter().map(|p| tree.nearest(p).expect("non-empty target")).collect();
        let mut dists: Vec<f64> = nn.iter().map(|(_, d2)| d2.sqrt()).collect();
        let mid = dists.len() / 2;
        dists.select_nth_unstable_by(mid, f64::total_cmp);
        let cutoff = cfg.reject_factor * dists[mid];
        let (src, dst): (Vec<Vec3>, Vec<Vec3>) = moved
            .iter()
            .zip(&nn)
            .filter(|(_, (_, d2))| d2.sqrt() <= cutoff)
            .map(|(p, (j, _))| (*p, target[*j]))
            .unzip();
        let rmse = (src.iter().zip(&dst).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / src.len() as f64).sqrt();
        if best.is_none_or(|(b, _, _)| rmse < b) {
            best = Some((rmse, src.len() as f64 / source.len() as f64, current));
        }
        if (prev - rmse).abs() < cfg.tol || rmse == 0.0 {
            hit_tol = true;
            break;
        }
        if iterations >= cfg.max_iters || src.len() < 3 {
            break;
        }
        prev = rmse;
        iterations += 1;
        current = kabsch(&src, &dst)?.compose(&current);
    }
    let (rmse, inlier_fraction, transform) = best.expect("at least one evaluation");
    Ok(IcpRun {
        transform,
        rmse,
        inlier_fraction,
        iterations,
        hit_tol,
    })
}

fn yaw(angle_deg: f64) -> Mat3 {
    rotation_from_axis_angle(&(Vec3::y() * angle_deg.to_radians()))
}

/// Point-to-point ICP with nearest neighbours from a k-d tree. Scale stays 1.
pub fn icp_register(source: &PointCloud, target: &PointCloud, cfg: &IcpConfig) -> Result<IcpResult> {
    ensure!(
        source.len() >= cfg.min_points && target.len() >= cfg.min_points,
        Degenerate,
        "ICP needs at least {} points per cloud (got {} and {})",
        cfg.min_points,
        source.len(),
        target.len()
    );
    let tree = KdTree::new(target.points());
    let cs = source.centroid().expect("non-empty");
    let ct = target.centroid().expect("non-empty");
    let shift = if cfg.centroid_init { ct - cs } else { Vec3::zeros() };
    let angles: &[f64] = if cfg.yaw_sweep {
        &[0.0, 45.0, -45.0, 90.0, -90.0, 180.0]
    } else {
        &[0.0]
    };
    let tau = cfg.fitness * source.diagonal().min(target.diagonal());
    // Candidates are ranked over all source points with distances truncated
    // at `tau`; the inlier RMSE alone would favour runs that reject more.
    let score = |t: &RigidScaleTransform| -> f64 {
        source
            .points()
            .par_iter()
            .map(|p| tree.nearest(&t.apply(p)).map_or(tau * tau, |(_, d2)| d2.min(tau * tau)))
            .collect::<Vec<f64>>()
            .iter()
            .sum::<f64>()
    };
    let mut best: Option<(f64, IcpRun)> = None;
    for &a in angles {
        // Rotate about the source centroid, then apply the centroid shift.
        let r = yaw(a);
        let init = RigidScaleTransform::new(1.0, r, cs - r * cs + shift)?;
        let run = icp_from(source.points(), target.points(), &tree, init, cfg)?;
        let sc = score(&run.transform);
        if best.as_ref().is_none_or(|(b, _)| sc < *b) {
            best = Some((sc, run));
        }
    }
    let (_, run) = best.expect("at least one angle");
    let converged = run.hit_tol && run.rmse <= tau && run.inlier_fraction >= cfg.min_inlier_fraction;
    Ok(IcpResult {
        transform: run.transform,
        rmse: run.rmse,
        iterations: run.iterations,
        converged,
    })
}

/// Soft silhouette of a posed mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    pub width: usize,
    pub height: usize,
    /// Per-pixel occupancy in `[0, 1]`, row-major.
    pub occupancy: Vec<f64>,
    /// Pixel centres covered by a projected triangle.
    pub coverage: Vec<bool>,
}

const NEAR: f64 = 1e-6;

/// Kernel support in standard deviations; the mass beyond it is below 2e-9.
const GAUSS_REACH: f64 = 6.0;

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Renders the silhouette of `mesh` under `pose`. Coverage is tested at
/// pixel centres. With `softness > 0`, occupancy is the exact area of the
/// projected shape inside each pixel square, blurred as in
/// [`soft_mask_occupancy`]; it is continuous in the pose and equals the
/// mask version when the outline follows pixel boundaries. Faces with a vertex at or
/// behind the camera plane are dropped.
pub fn render_silhouette(mesh: &TriangleMesh, pose: &RigidScaleTransform, k: &CameraIntrinsics, softness: f64) -> Result<Silhouette> {
    ensure!(softness >= 0.0 && softness.is_finite(), Contract, "softness must be non-negative");
    let (w, h) = (k.width(), k.height());
    let cam: Vec<Vec3> = mesh.vertices().iter().map(|p| pose.apply(p)).collect();
    let proj: Vec<Option<(f64, f64)>> = cam.iter().map(|p| (p.z > NEAR).then(|| k.project(p)).flatten()).collect();

    let mut triangles = Vec::with_capacity(mesh.faces().len());
    let mut facing = Vec::with_capacity(mesh.faces().len());
    let mut coverage = vec![false; w * h];
    for f in mesh.faces() {
        let (Some(a), Some(b), Some(c)) = (proj[f[0] as usize], proj[f[1] as usize], proj[f[2] as usize]) else {
            continue;
        };
        let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        triangles.push([a, b, c]);
        facing.push(if area > 0.0 { 1i8 } else { -1 });
        let s = area.signum();
        let x0 = a.0.min(b.0).min(c.0).ceil().max(0.0);
        let x1 = a.0.max(b.0).max(c.0).floor().min(w as f64 - 1.0);
        let y0 = a.1.min(b.1).min(c.1).ceil().max(0.0);
        let y1 = a.1.max(b.1).max(c.1).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let edge = |p: (f64, f64), q: (f64, f64), x: f64, y: f64| s * ((q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0));
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let (fx, fy) = (x as f64, y as f64);
                if edge(a, b, fx, fy) >= 0.0 && edge(b, c, fx, fy) >= 0.0 && edge(c, a, fx, fy) >= 0.0 {
                    coverage[y * w + x] = true;
                }
            }
        }
    }

    let occupancy = if softness == 0.0 {
        coverage.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    } else {
        gaussian_blur(&area_coverage(&triangles, &facing, w, h), w, h, softness)
    };
    Ok(Silhouette {
        width: w,
        height: h,
        occupancy,
        coverage,
    })
}

/// Area of the triangle inside the axis-aligned box, by clipping.
fn clipped_area(t: &[(f64, f64); 3], x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    // A triangle clipped by four planes has at most seven vertices.
    let mut poly = [(0.0, 0.0); 8];
    let mut n = 3;
    poly[..3].copy_from_slice(t);
    let planes: [(bool, f64, f64); 4] = [(true, x0, 1.0), (true, x1, -1.0), (false, y0, 1.0), (false, y1, -1.0)];
    for (on_x, at, sign) in planes {
        let side = |p: (f64, f64)| sign * (if on_x { p.0 } else { p.1 } - at);
        let mut out = [(0.0, 0.0); 8];
        let mut m = 0;
        for i in 0..n {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out[m] = p;
                m += 1;
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let u = sp / (sp - sq);
                out[m] = (p.0 + u * (q.0 - p.0), p.1 + u * (q.1 - p.1));
                m += 1;
            }
        }
        if m < 3 {
            return 0.0;
        }
        poly = out;
        n = m;
    }
    0.5 * (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p.0 * q.1 - q.0 * p.1
        })
        .sum::<f64>()
        .abs()
}

/// Fraction of each pixel square covered by the projected shape: the
/// larger of the front- and back-facing layers, capped at 1.
fn area_coverage(triangles: &[[(f64, f64); 3]], facing: &[i8], w: usize, h: usize) -> Vec<f64> {
    let mut layers = [vec![0.0; w * h], vec![0.0; w * h]];
    for (t, &f) in triangles.iter().zip(facing) {
        let acc = &mut layers[(f > 0) as usize];
        let xs = t.iter().map(|p| p.0);
        let ys = t.iter().map(|p| p.1);
        let x_lo = (xs.clone().fold(f64::INFINITY, f64::min) + 0.5).floor().max(0.0);
        let x_hi = (xs.fold(f64::NEG_INFINITY, f64::max) + 0.5).floor().min(w as f64 - 1.0);
        let y_lo = (ys.clone().fold(f64::INFINITY, f64::min) + 0.5).floor().max(0.0);
        let y_hi = (ys.fold(f64::NEG_INFINITY, f64::max) + 0.5).floor().min(h as f64 - 1.0);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        // Pixel squares with all corners inside the triangle are fully covered.
        let s = if f > 0 { 1.0 } else { -1.0 };
        let inside = |x: f64, y: f64| {
            (0..3).all(|i| {
                let (p, q) = (t[i], t[(i + 1) % 3]);
                s * ((q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)) >= 0.0
            })
        };
        for y in y_lo as usize..=y_hi as usize {
            for x in x_lo as usize..=x_hi as usize {
                let (fx, fy) = (x as f64, y as f64);
                let full =
                    inside(fx - 0.5, fy - 0.5) && inside(fx + 0.5, fy - 0.5) && inside(fx - 0.5, fy + 0.5) && inside(fx + 0.5, fy + 0.5);
                acc[y * w + x] += if full {
                    1.0
                } else {
                    clipped_area(t, fx - 0.5, fx + 0.5, fy - 0.5, fy + 0.5)
                };
            }
        }
    }
    let [back, front] = layers;
    back.iter().zip(&front).map(|(b, f)| b.max(*f).min(1.0)).collect()
}

/// Separable Gaussian of standard deviation `sigma` pixels, each tap
/// integrating over one pixel square. Pixels beyond the border repeat the
/// nearest edge pixel. Only the window around non-zero input is computed.
fn gaussian_blur(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (GAUSS_REACH * sigma).ceil() as i64 + 1;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| normal_cdf((i as f64 + 0.5) / sigma) - normal_cdf((i as f64 - 0.5) / sigma))
        .collect();
    let mut out = vec![0.0; w * h];
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0, h, 0);
    for (i, v) in values.iter().enumerate() {
        if *v != 0.0 {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x0 > x1 {
        return out;
    }
    let ru = r as usize;
    let (x0, x1) = (x0.saturating_sub(ru), (x1 + ru).min(w - 1));
    let (y0, y1) = (y0.saturating_sub(ru), (y1 + ru).min(h - 1));
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;

    let mut tmp = vec![0.0; w * h];
    tmp[y0 * w..(y1 + 1) * w].par_chunks_mut(w).enumerate().for_each(|(j, row)| {
        let y = y0 + j;
        for x in x0..=x1 {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * values[y * w + clamp(x as i64 + k as i64 - r, w)];
            }
            row[x] = acc;
        }
    });
    out[y0 * w..(y1 + 1) * w].par_chunks_mut(w).enumerate().for_each(|(j, row)| {
        let y = y0 + j;
        for x in x0..=x1 {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * tmp[clamp(y as i64 + k as i64 - r, h) * w + x];
            }
            row[x] = acc.clamp(0.0, 1.0);
        }
    });
    out
}

/// Soft occupancy of a binary mask matching [`render_silhouette`]: the
/// union of the mask's pixel squares convolved with a Gaussian of standard
/// deviation `softness`.
pub fn soft_mask_occupancy(mask: &InstanceMask, softness: f64) -> Vec<f64> {
    let bits: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    if softness == 0.0 {
        return bits;
    }
    gaussian_blur(&bits, mask.width(), mask.height(), softness)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Standard deviation of the silhouette blur, in pixels.
    pub softness: f64,
    /// Blur of a first pass that widens the basin; ignored unless larger
    /// than `softness`. Images of 128 px and up run it at half resolution.
    pub coarse_softness: f64,
    /// The first pass also starts from the initial pose turned by this many
    /// degrees about each camera axis, both ways; the start whose result
    /// has the lowest loss wins. Zero disables.
    pub start_spread_deg: f64,
    pub max_iters: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
    /// Random re-initializations tried when the start pose misses the target.
    pub restarts: usize,
    pub seed: u64,
    /// Stop when an accepted step lowers the loss by less than this fraction.
    pub tol: f64,
    /// Silhouettes cannot tell size from distance. When set, the result is
    /// rescaled about the camera centre so the instance origin sits at this
    /// depth.
    pub depth_anchor: Option<f64>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            softness: 1.0,
            coarse_softness: 4.0,
            start_spread_deg: 15.0,
            max_iters: 60,
            fd_step: 1e-3,
            restarts: 3,
            seed: 0,
            tol: 1e-9,
            depth_anchor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseState {
    pub transform: RigidScaleTransform,
    /// Loss at the start and after every accepted step.
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

impl PoseState {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone)]
struct PoseObjective<'a> {
    mesh: &'a TriangleMesh,
    k: CameraIntrinsics,
    target: Vec<f64>,
    // Pixels that take part in the loss.
    used: Vec<bool>,
    norm: f64,
    softness: f64,
}

impl<'a> PoseObjective<'a> {
    /// `occupancy` is the unblurred target, one value in [0, 1] per pixel.
    fn new(mesh: &'a TriangleMesh, k: CameraIntrinsics, occupancy: &[f64], used: Vec<bool>, softness: f64) -> Self {
        let target = if softness > 0.0 {
            gaussian_blur(occupancy, k.width(), k.height(), softness)
        } else {
            occupancy.to_vec()
        };
        Self {
            mesh,
            k,
            target,
            used,
            norm: occupancy.iter().sum(),
            softness,
        }
    }

    /// The same loss on a grid of 2x2 pixel blocks.
    fn halved(mesh: &'a TriangleMesh, k: &CameraIntrinsics, occupancy: &[f64], used: &[bool], softness: f64) -> Result<Self> {
        let (w, h) = (k.width(), k.height());
        let (w2, h2) = (w / 2, h / 2);
        let k2 = CameraIntrinsics::new(k.fx() / 2.0, k.fy() / 2.0, (k.cx() - 0.5) / 2.0, (k.cy() - 0.5) / 2.0, w2, h2)?;
        let mut occ = vec![0.0; w2 * h2];
        let mut use2 = vec![false; w2 * h2];
        for y in 0..h2 {
            for x in 0..w2 {
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let i = (2 * y + dy) * w + 2 * x + dx;
                    occ[y * w2 + x] += occupancy[i] / 4.0;
                    use2[y * w2 + x] |= used[i];
                }
            }
        }
        Ok(Self::new(mesh, k2, &occ, use2, softness / 2.0))
    }

    fn pose(base: &RigidScaleTransform, theta: &[f64; 7]) -> Result<RigidScaleTransform> {
        let r = rotation_from_axis_angle(&Vec3::new(theta[4], theta[5], theta[6])) * base.rotation();
        RigidScaleTransform::new_orthonormalized(
            base.scale() * theta[3].exp(),
            r,
            base.translation() + Vec3::new(theta[0], theta[1], theta[2]),
        )
    }

    fn residuals(&self, pose: &RigidScaleTransform) -> Result<Vec<f64>> {
        let sil = render_silhouette(self.mesh, pose, &self.k, self.softness)?;
        let scale = self.norm.sqrt();
        Ok(sil
            .occupancy
            .iter()
            .zip(&self.target)
            .zip(&self.used)
            .map(|((o, t), &u)| if u { (o - t) / scale } else { 0.0 })
            .collect())
    }

    fn overlaps(&self, pose: &RigidScaleTransform) -> Result<bool> {
        let sil = render_silhouette(self.mesh, pose, &self.k, 0.0)?;
        Ok(sil
            .coverage
            .iter()
            .zip(&self.target)
            .zip(&self.used)
            .any(|((c, t), u)| *c && *t > 0.5 && *u))
    }
}

fn sq_norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn descend(objective: &PoseObjective, base: &RigidScaleTransform, cfg: &RefineConfig) -> Result<(RigidScaleTransform, Vec<f64>, bool)> {
    let base = *base;
    let mut theta = [0.0f64; 7];
    let mut pose = base;
    let mut r = objective.residuals(&pose)?;
    let mut loss = sq_norm(&r);
    let mut history = vec![loss];
    let mut lambda = 1.0;
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let t_scale = base.translation().norm().max(1e-3);
        let steps: [f64; 7] = std::array::from_fn(|i| match i {
            0..=2 => cfg.fd_step * t_scale,
            _ => cfg.fd_step,
        });
        let columns: Vec<Vec<f64>> = (0..7)
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>> {
                let mut plus = theta;
                let mut minus = theta;
                plus[i] += steps[i];
                minus[i] -= steps[i];
                let rp = objective.residuals(&PoseObjective::pose(&base, &plus)?)?;
                let rm = objective.residuals(&PoseObjective::pose(&base, &minus)?)?;
                Ok(rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * steps[i])).collect())
            })
            .collect::<Result<_>>()?;
        let mut jtj = DMatrix::<f64>::zeros(7, 7);
        let mut jtr = DVector::<f64>::zeros(7);
        for a in 0..7 {
            jtr[a] = columns[a].iter().zip(&r).map(|(j, e)| j * e).sum();
            for b in a..7 {
                let v: f64 = columns[a].iter().zip(&columns[b]).map(|(x, y)| x * y).sum();
                jtj[(a, b)] = v;
                jtj[(b, a)] = v;
            }
        }
        if jtr.norm() == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for d in 0..7 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 4.0;
                continue;
            };
            let cand_theta: [f64; 7] = std::array::from_fn(|i| theta[i] + delta[i]);
            let cand_pose = PoseObjective::pose(&base, &cand_theta)?;
            let cand_r = objective.residuals(&cand_pose)?;
            let cand_loss = sq_norm(&cand_r);
            if cand_loss < loss {
                let decrease = loss - cand_loss;
                theta = cand_theta;
                pose = cand_pose;
                r = cand_r;
                loss = cand_loss;
                history.push(loss);
                lambda = (lambda / 3.0).max(1e-9);
                accepted = true;
                if decrease <= cfg.tol * loss.max(f64::MIN_POSITIVE) {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No descent at any damping: a local minimum up to FD accuracy.
            converged = true;
        }
        if converged {
            break;
        }
    }

    Ok((pose, history, converged))
}

/// Minimizes the squared difference between the rendered soft silhouette
/// and the equally softened `target_mask`, summed over pixels and divided by
/// the target area. Parameters are translation, log-scale and a left
/// axis-angle rotation perturbation; Jacobians come from central finite
/// differences and damped Gauss-Newton steps are accepted only when the loss
/// drops.
pub fn refine_pose(
    mesh: &TriangleMesh,
    init: &RigidScaleTransform,
    target_mask: &InstanceMask,
    k: &CameraIntrinsics,
    cfg: &RefineConfig,
) -> Result<PoseState> {
    refine_pose_masked(mesh, init, target_mask, None, k, cfg)
}

/// As [`refine_pose`]; pixels set in `ignore` (for example occluders) do not
/// contribute to the loss.
pub fn refine_pose_masked(
    mesh: &TriangleMesh,
    init: &RigidScaleTransform,
    target_mask: &InstanceMask,
    ignore: Option<&InstanceMask>,
    k: &CameraIntrinsics,
    cfg: &RefineConfig,
) -> Result<PoseState> {
    let (w, h) = (k.width(), k.height());
    ensure!(
        target_mask.same_size(w, h),
        Contract,
        "target mask is {}x{}, camera is {w}x{h}",
        target_mask.width(),
        target_mask.height()
    );
    ensure!(!target_mask.is_empty(), Contract, "target mask is empty");
    ensure!(!mesh.is_empty(), Contract, "mesh has no faces");
    if let Some(m) = ignore {
        ensure!(m.same_size(w, h), Contract, "ignore mask does not match the camera");
    }
    let used: Vec<bool> = (0..w * h)
        .map(|i| target_mask.bits()[i] || !ignore.is_some_and(|m| m.bits()[i]))
        .collect();
    let occupancy: Vec<f64> = target_mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let objective = PoseObjective::new(mesh, *k, &occupancy, used.clone(), cfg.softness);

    let mut base = *init;
    if !objective.overlaps(&base)? {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let reach = base.translation().norm().max(1e-3);
        let mut found = false;
        for _ in 0..cfg.restarts {
            let dt = Vec3::from_fn(|_, _| rng.random_range(-0.15..0.15) * reach);
            let dw = Vec3::from_fn(|_, _| rng.random_range(-0.25..0.25));
            let cand = PoseObjective::pose(init, &[dt.x, dt.y, dt.z, 0.0, dw.x, dw.y, dw.z])?;
            if objective.overlaps(&cand)? {
                base = cand;
                found = true;
                break;
            }
        }
        if !found {
            let loss = sq_norm(&objective.residuals(init)?);
            return Err(Error::Optimization {
                message: format!("silhouette never overlaps the target after {} restarts", cfg.restarts),
                best_loss: loss,
            });
        }
    }

    let mut start = base;
    if cfg.coarse_softness > cfg.softness {
        let coarse = if w.min(h) >= 128 {
            PoseObjective::halved(mesh, k, &occupancy, &used, cfg.coarse_softness)?
        } else {
            PoseObjective::new(mesh, *k, &occupancy, used, cfg.coarse_softness)
        };
        let mut starts = vec![base];
        let spread = cfg.start_spread_deg.to_radians();
        if spread > 0.0 {
            for axis in 0..3 {
                for sign in [1.0, -1.0] {
                    let mut theta = [0.0; 7];
                    theta[4 + axis] = sign * spread;
                    starts.push(PoseObjective::pose(&base, &theta)?);
                }
            }
        }
        let ends = starts
            .par_iter()
            .map(|s| -> Result<(f64, RigidScaleTransform)> {
                let (p, _, _) = descend(&coarse, s, cfg)?;
                Ok((sq_norm(&objective.residuals(&p)?), p))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut best = sq_norm(&objective.residuals(&base)?);
        for (loss, p) in ends {
            if loss < best {
                best = loss;
                start = p;
            }
        }
    }
    let (mut pose, mut history, converged) = descend(&objective, &start, cfg)?;
    if start != base {
        history.insert(0, sq_norm(&objective.residuals(&base)?));
    }

    if let Some(anchor) = cfg.depth_anchor {
        ensure!(anchor > 0.0, Contract, "depth anchor must be positive");
        let z = pose.translation().z;
        if z > 0.0 {
            let f = anchor / z;
            pose = RigidScaleTransform::new(pose.scale() * f, *pose.rotation(), pose.translation() * f)?;
        }
    }
    Ok(PoseState {
        transform: pose,
        loss_history: history,
        converged,
    })
}

/// Result of [`place_instance`].
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    /// The instance mesh normalized to a unit bounding-box diagonal.
    pub local_mesh: TriangleMesh,
    pub pose: PoseState,
    pub icp: IcpResult,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementConfig {
    pub icp: IcpConfig,
    pub refine: RefineConfig,
    pub samples_per_pixel: usize,
    /// Run silhouette refinement after ICP.
    pub refine_silhouette: bool,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            icp: IcpConfig::default(),
            refine: RefineConfig::default(),
            samples_per_pixel: 1,
            refine_silhouette: true,
        }
    }
}

/// Full placement chain for one instance: normalize the mesh, estimate its
/// scale from depth, register visible points with ICP, then refine against
/// the instance mask with the ICP depth as anchor.
pub fn place_instance(
    mesh: &TriangleMesh,
    depth: &DepthMap,
    mask: &InstanceMask,
    ignore: Option<&InstanceMask>,
    k: &CameraIntrinsics,
    cfg: &PlacementConfig,
) -> Result<Placement> {
    let (local, _) = mesh.normalized_unit_diagonal()?;
    let reference = reference_points(depth, mask, k)?;
    let ref_centroid = reference.centroid().expect("non-empty");
    let mut pose = RigidScaleTransform::new(reference.diagonal(), Mat3::identity(), ref_centroid)?;
    let mut scale = pose.scale();
    let mut local_visible = PointCloud::from_points(Vec::new())?;
    // Visibility depends on the pose and the pose on the visible points; two
    // rounds settle the scale.
    for _ in 0..2 {
        let visible = visible_points(&local, &pose, k, cfg.samples_per_pixel);
        ensure!(
            visible.len() >= 3,
            Degenerate,
            "instance {} mesh is not visible from the camera",
            mask.id()
        );
        local_visible = visible.transformed(&pose.inverse());
        scale = estimate_scale(&local_visible, &reference)?;
        let c = local_visible.centroid().expect("non-empty");
        pose = RigidScaleTransform::new(scale, Mat3::identity(), ref_centroid - c * scale)?;
    }
    let source = local_visible.transformed(&pose);
    let icp = icp_register(&source, &reference, &cfg.icp)?;
    pose = icp.transform.compose(&pose);
    let state = if cfg.refine_silhouette {
        let refine = RefineConfig {
            depth_anchor: Some(pose.translation().z),
            ..cfg.refine.clone()
        };
        let mut s = refine_pose_masked(&local, &pose, mask, ignore, k, &refine)?;
        s.converged &= icp.converged;
        s
    } else {
        PoseState {
            transform: pose,
            loss_history: vec![icp.rmse],
            converged: icp.converged,
        }
    };
    Ok(Placement {
        local_mesh: local,
        pose: state,
        icp,
        scale,
    })
}

/// One posed instance handed to [`compose_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedInstance {
    pub instance_id: u32,
    pub mesh: TriangleMesh,
    pub pose: PoseState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub instance_id: u32,
    pub vertices: Range<usize>,
    pub faces: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedScene {
    pub mesh: TriangleMesh,
    /// Vertex and face ranges of each instance inside `mesh`; the background
    /// occupies everything before the first instance.
    pub provenance: Vec<Provenance>,
}

/// Concatenates the background and the posed instances. Instances whose
/// pose did not converge are refused unless `force` is set.
pub fn compose_scene(background: &TriangleMesh, instances: &[PlacedInstance], force: bool) -> Result<ComposedScene> {
    if !force {
        if let Some(bad) = instances.iter().find(|i| !i.pose.converged) {
            return Err(Error::NonConvergence(format!(
                "pose of instance {} did not converge (final loss {})",
                bad.instance_id,
                bad.pose.final_loss()
            )));
        }
    }
    let mut mesh = background.clone();
    let mut provenance = Vec::with_capacity(instances.len());
    for inst in instances {
        let (v0, f0) = (mesh.vertices().len(), mesh.faces().len());
        mesh.append(&inst.mesh.transformed(&inst.pose.transform));
        provenance.push(Provenance {
            instance_id: inst.instance_id,
            vertices: v0..mesh.vertices().len(),
            faces: f0..mesh.faces().len(),
        });
    }
    Ok(ComposedScene { mesh, provenance })
}

/// Similarity transform as stored in scene manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub s: f64,
    /// Row-major rotation matrix.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&RigidScaleTransform> for PoseRecord {
    fn from(p: &RigidScaleTransform) -> Self {
        let m = p.rotation();
        Self {
            s: p.scale(),
            r: std::array::from_fn(|i| m[(i / 3, i % 3)]),
            t: [p.translation().x, p.translation().y, p.translation().z],
        }
    }
}

impl TryFrom<&PoseRecord> for RigidScaleTransform {
    type Error = Error;

    fn try_from(p: &PoseRecord) -> Result<Self> {
        RigidScaleTransform::new(p.s, Mat3::from_row_slice(&p.r), Vec3::from(p.t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub instance_id: u32,
    pub mesh_path: String,
    pub pose: PoseRecord,
    pub converged: bool,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema_version: u32,
    pub instances: Vec<ManifestInstance>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{rotation_angle_between, rotation_from_axis_angle};

    fn cam(w: usize, h: usize, f: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
    }

    /// Axis-aligned cube `[-0.5, 0.5]^3` with outward-facing triangles.
    pub(crate) fn unit_cube() -> TriangleMesh {
        let v: Vec<Vec3> = (0..8)
            .map(|i| Vec3::new((i & 1) as f64 - 0.5, ((i >> 1) & 1) as f64 - 0.5, ((i >> 2) & 1) as f64 - 0.5))
            .collect();
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3], // z-
            [4, 5, 6],
            [5, 7, 6], // z+
            [0, 1, 4],
            [1, 5, 4], // y-
            [2, 6, 3],
            [3, 6, 7], // y+
            [0, 4, 2],
            [2, 4, 6], // x-
            [1, 3, 5],
            [3, 7, 5], // x+
        ];
        TriangleMesh::new(v, faces, None).unwrap()
    }

    fn square(half: f64, z: f64) -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vec3::new(-half, -half, z),
                Vec3::new(half, -half, z),
                Vec3::new(half, half, z),
                Vec3::new(-half, half, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn reference_points_needs_three() {
        let k = cam(4, 4, 10.0);
        let d = DepthMap::from_values(4, 4, vec![2.0; 16]).unwrap();
        let one = InstanceMask::from_fn(1, 4, 4, |x, y| x == 1 && y == 1);
        assert!(matches!(reference_points(&d, &one, &k), Err(Error::Degenerate(_))));
        let sq = InstanceMask::from_fn(1, 4, 4, |x, y| x < 2 && y < 2);
        let pc = reference_points(&d, &sq, &k).unwrap();
        assert!(pc.points().iter().all(|p| p.z == 2.0));
    }

    #[test]
    fn scale_is_diagonal_ratio() {
        let pts: Vec<Vec3> = (0..20).map(|i| Vec3::new((i % 5) as f64, (i / 5) as f64, (i % 3) as f64)).collect();
        let a = PointCloud::from_points(pts.clone()).unwrap();
        assert_eq!(estimate_scale(&a, &a).unwrap(), 1.0);
        let half = PointCloud::from_points(pts.iter().map(|p| p * 0.5).collect()).unwrap();
        assert!((estimate_scale(&half, &a).unwrap() - 2.0).abs() < 1e-12);
        let line = PointCloud::from_points((0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect()).unwrap();
        assert!(matches!(estimate_scale(&line, &a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn front_facing_square_hit_count() {
        // Square of side 1 at depth 5 with f=100 covers a 20x20 px area.
        let k = cam(64, 64, 100.0);
        let pc = visible_points(&square(0.5, 5.0), &RigidScaleTransform::identity(), &k, 1);
        assert!((pc.len() as i64 - 400).abs() <= 2 * 20 + 1, "{}", pc.len());
        assert!(pc.points().iter().all(|p| (p.z - 5.0).abs() < 1e-9));
    }

    #[test]
    fn cube_shows_front_face_only() {
        let k = cam(48, 48, 40.0);
        let pose = RigidScaleTransform::from_translation(Vec3::new(0.0, 0.0, 4.0));
        let pc = visible_points(&unit_cube(), &pose, &k, 3);
        assert!(!pc.is_empty());
        assert!(pc.points().iter().all(|p| (p.z - 3.5).abs() < 1e-9));
    }

    #[test]
    fn mesh_behind_camera_is_invisible() {
        let k = cam(16, 16, 10.0);
        let pose = RigidScaleTransform::from_translation(Vec3::new(0.0, 0.0, -4.0));
        assert!(visible_points(&unit_cube(), &pose, &k, 1).is_empty());
        let s = render_silhouette(&unit_cube(), &pose, &k, 1.0).unwrap();
        assert!(s.occupancy.iter().all(|v| *v < 1e-2));
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::from_points(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.6..0.6),
                        rng.random_range(-0.3..0.3),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn icp_identity_and_constructed_transform() {
        let src = random_cloud(500, 1);
        let cfg = IcpConfig::default();
        let id = icp_register(&src, &src, &cfg).unwrap();
        assert!((id.transform.rotation() - Mat3::identity()).abs().max() < 1e-6);
        assert!(id.transform.translation().norm() < 1e-6);

        let r0 = rotation_from_axis_angle(&Vec3::new(0.2, -0.3, 0.1));
        let t0 = Vec3::new(0.3, -0.2, 0.5);
        let truth = RigidScaleTransform::new(1.0, r0, t0).unwrap();
        let res = icp_register(&src, &src.transformed(&truth), &cfg).unwrap();
        assert!(res.rmse < 1e-4);
        assert!(res.converged);
        assert!(rotation_angle_between(res.transform.rotation(), &r0).to_degrees() < 0.1);
        assert!((res.transform.translation() - t0).norm() < 1e-3);
    }

    #[test]
    fn icp_flags_incompatible_clouds() {
        // A blob against two tiny clusters far apart: no rigid motion fits.
        let blob = random_cloud(200, 3);
        let mut far: Vec<Vec3> = (0..15).map(|i| Vec3::new(100.0, i as f64 * 0.001, 0.0)).collect();
        far.extend((0..15).map(|i| Vec3::new(-100.0, i as f64 * 0.001, 0.0)));
        let far = PointCloud::from_points(far).unwrap();
        let res = icp_register(&blob, &far, &IcpConfig::default()).unwrap();
        assert!(!res.converged);
        assert!(matches!(
            icp_register(&random_cloud(5, 2), &far, &IcpConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn silhouette_edge_cases() {
        let k = cam(20, 16, 10.0);
        let plane = square(100.0, 1.0);
        let s = render_silhouette(&plane, &RigidScaleTransform::identity(), &k, 0.0).unwrap();
        assert!(s.occupancy.iter().all(|v| *v == 1.0));
        let away = RigidScaleTransform::from_translation(Vec3::new(500.0, 0.0, 0.0));
        let s = render_silhouette(&square(0.5, 5.0), &away, &k, 0.0).unwrap();
        assert!(s.occupancy.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn soft_occupancy_sums_to_projected_area() {
        let k = cam(96, 96, 200.0);
        // Side 0.9 at depth 5 projects to 36 x 36 px.
        let s = render_silhouette(&square(0.45, 5.0), &RigidScaleTransform::identity(), &k, 1.0).unwrap();
        let sum: f64 = s.occupancy.iter().sum();
        assert!((sum - 1296.0).abs() / 1296.0 < 0.02, "{sum}");
        assert!(s.occupancy.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pixel_aligned_square_matches_soft_mask() {
        let k = CameraIntrinsics::new(100.0, 100.0, 19.5, 19.5, 40, 40).unwrap();
        let pose = RigidScaleTransform::from_translation(Vec3::new(0.0, 0.0, 10.0));
        let sil = render_silhouette(&square(0.5, 0.0), &pose, &k, 1.0).unwrap();
        let mask = InstanceMask::new(1, 40, 40, sil.coverage.clone()).unwrap();
        assert_eq!(mask.count(), 100);
        for (a, b) in sil.occupancy.iter().zip(soft_mask_occupancy(&mask, 1.0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn silhouette_invariant_under_axial_rotation_of_symmetric_mesh() {
        let k = cam(40, 40, 50.0);
        let base = RigidScaleTransform::from_translation(Vec3::new(0.0, 0.0, 5.0));
        let quarter = RigidScaleTransform::new(
            1.0,
            rotation_from_axis_angle(&(Vec3::z() * std::f64::consts::FRAC_PI_2)),
            Vec3::new(0.0, 0.0, 5.0),
        )
        .unwrap();
        let a = render_silhouette(&unit_cube(), &base, &k, 1.0).unwrap();
        let b = render_silhouette(&unit_cube(), &quarter, &k, 1.0).unwrap();
        for (x, y) in a.occupancy.iter().zip(&b.occupancy) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn refine_keeps_true_pose() {
        // Square with edges on half-integer pixel coordinates: the soft
        // silhouette is symmetric about the binary target edge.
        let (w, f) = (40usize, 100.0);
        let k = CameraIntrinsics::new(f, f, 19.5, 19.5, w, w).unwrap();
        let mesh = square(0.5, 0.0);
        let truth = RigidScaleTransform::from_translation(Vec3::new(0.0, 0.0, 10.0));
        let target = render_silhouette(&mesh, &truth, &k, 0.0).unwrap();
        let mask = InstanceMask::new(1, w, w, target.coverage.clone()).unwrap();
        let st = refine_pose(&mesh, &truth, &mask, &k, &RefineConfig::default()).unwrap();
        assert!((st.transform.translation() - truth.translation()).norm() < 1e-4 * 10.0);
        assert!((st.transform.scale() - 1.0).abs() < 1e-4);
        assert!(st.loss_history.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn refine_fails_without_overlap() {
        let k = cam(32, 32, 40.0);
        let mask = InstanceMask::from_fn(1, 32, 32, |x, y| x < 4 && y < 4);
        let far = RigidScaleTransform::from_translation(Vec3::new(0.0, 0.0, -10.0));
        let err = refine_pose(&unit_cube(), &far, &mask, &k, &RefineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Optimization { .. }));
    }

    #[test]
    fn refine_recovers_rotation_of_cube() {
        let k = cam(128, 128, 160.0);
        let mesh = unit_cube();
        let r_true = rotation_from_axis_angle(&Vec3::new(0.3, 0.5, 0.1));
        let truth = RigidScaleTransform::new(1.0, r_true, Vec3::new(0.1, -0.05, 4.0)).unwrap();
        let target = render_silhouette(&mesh, &truth, &k, 0.0).unwrap();
        let mask = InstanceMask::new(1, 128, 128, target.coverage).unwrap();
        let r0 = rotation_from_axis_angle(&Vec3::new(0.0, 5f64.to_radians(), 0.0)) * r_true;
        let init = RigidScaleTransform::new(1.0, r0, *truth.translation()).unwrap();
        let st = refine_pose(
            &mesh,
            &init,
            &mask,
            &k,
            &RefineConfig {
                depth_anchor: Some(4.0),
                ..Default::default()
            },
        )
        .unwrap();
        let err = rotation_angle_between(st.transform.rotation(), &r_true).to_degrees();
        assert!(err < 1.0, "rotation error {err}");
        assert!(st.loss_history.windows(2).all(|p| p[1] <= p[0]));
        assert!(st.final_loss() <= st.loss_history[0]);
    }

    #[test]
    fn compose_counts_and_centroid() {
        let bg = square(2.0, 6.0);
        let cube = unit_cube();
        let pose = |t: Vec3| PoseState {
            transform: RigidScaleTransform::from_translation(t),
            loss_history: vec![0.0],
            converged: true,
        };
        let empty = compose_scene(&bg, &[], false).unwrap();
        assert_eq!(empty.mesh, bg);
        let placed = vec![
            PlacedInstance {
                instance_id: 1,
                mesh: cube.clone(),
                pose: pose(Vec3::new(1.0, 0.0, 3.0)),
            },
            PlacedInstance {
                instance_id: 2,
                mesh: cube.clone(),
                pose: pose(Vec3::new(-1.0, 0.0, 3.0)),
            },
        ];
        let s = compose_scene(&bg, &placed, false).unwrap();
        assert_eq!(s.mesh.faces().len(), 2 + 12 + 12);
        let r = s.provenance[0].vertices.clone();
        let c = s.mesh.vertices()[r].iter().fold(Vec3::zeros(), |a, p| a + p) / 8.0;
        assert!((c - Vec3::new(1.0, 0.0, 3.0)).norm() < 1e-12);

        let mut bad = placed.clone();
        bad[1].pose.converged = false;
        assert!(matches!(compose_scene(&bg, &bad, false), Err(Error::NonConvergence(_))));
        assert!(compose_scene(&bg, &bad, true).is_ok());
    }

    #[test]
    fn pose_record_round_trip() {
        let p = RigidScaleTransform::new(1.5, rotation_from_axis_angle(&Vec3::new(0.1, 0.2, 0.3)), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let rec = PoseRecord::from(&p);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"R\""));
        let back: PoseRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(RigidScaleTransform::try_from(&back).unwrap(), p);
    }

    #[test]
    fn placement_of_visible_surface_reproduces_it() {
        // A depth map of a tilted plane patch, lifted as its own mesh.
        let k = cam(48, 40, 60.0);
        let mask = InstanceMask::from_fn(1, 48, 40, |x, y| (10..34).contains(&x) && (8..30).contains(&y));
        let depth = DepthMap::from_fn(48, 40, |x, y| Some(3.0 + 0.02 * x as f64 + 0.01 * y as f64)).unwrap();
        let mesh = crate::camera::lift_surface(&depth, Some(&mask), &k).unwrap();
        let pts = mesh.vertices().to_vec();
        let cfg = PlacementConfig::default();
        let placed = place_instance(&mesh, &depth, &mask, None, &k, &cfg).unwrap();
        let posed = placed.local_mesh.transformed(&placed.pose.transform);
        let err = posed.vertices().iter().zip(&pts).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 0.02, "max vertex error {err}");
    }
}
