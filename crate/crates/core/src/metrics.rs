//! Reconstruction and image quality metrics.
//!
//! Chamfer distance here is the sum of the two directed mean closest-point
//! distances (not half of it).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::{icp_register, IcpConfig};
use crate::error::{ensure, Result};
use crate::io::{read_json, read_mesh};
use crate::spatial::KdTree;
use crate::types::{ImageBuffer, PointCloud, RigidScaleTransform, TriangleMesh, Vec3};

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.faces().len());
    let mut total = 0.0;
    for f in 0..mesh.faces().len() {
        total += mesh.triangle_area(f);
        cumulative.push(total);
    }
    ensure!(total > 0.0 && total.is_finite(), Degenerate, "mesh has no face with positive area");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let pick = rng.random::<f64>() * total;
            let f = cumulative.partition_point(|c| *c <= pick).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect();
    PointCloud::from_points(points)
}

/// Distance from each point of `from` to its nearest neighbour in `to`.
pub fn nearest_distances(from: &PointCloud, to: &PointCloud) -> Vec<f64> {
    let tree = KdTree::new(to.points());
    from.points()
        .par_iter()
        .map(|p| tree.nearest(p).map_or(f64::INFINITY, |(_, d2)| d2.sqrt()))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_non_empty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    ensure!(!a.is_empty() && !b.is_empty(), Contract, "point clouds must be non-empty");
    Ok(())
}

pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_non_empty(a, b)?;
    Ok(mean(&nearest_distances(a, b)) + mean(&nearest_distances(b, a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

fn fraction_within(d: &[f64], tau: f64) -> f64 {
    d.iter().filter(|v| **v <= tau).count() as f64 / d.len() as f64
}

fn harmonic(precision: f64, recall: f64) -> FScore {
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    FScore { precision, recall, fscore }
}

/// Precision: fraction of `pred` within `tau` of `gt`; recall the reverse.
pub fn fscore(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<FScore> {
    check_non_empty(pred, gt)?;
    ensure!(tau > 0.0, Contract, "tau must be positive");
    Ok(harmonic(
        fraction_within(&nearest_distances(pred, gt), tau),
        fraction_within(&nearest_distances(gt, pred), tau),
    ))
}

/// 5% of the ground-truth bounding-box diagonal.
pub fn default_tau(gt: &PointCloud) -> f64 {
    0.05 * gt.diagonal()
}

/// Rigid transform registering `pred` onto `gt` from surface samples.
pub fn align_for_eval(pred: &TriangleMesh, gt: &TriangleMesh, n: usize, seed: u64, icp: &IcpConfig) -> Result<RigidScaleTransform> {
    let p = sample_surface(pred, n, seed)?;
    let g = sample_surface(gt, n, seed)?;
    let cfg = IcpConfig {
        centroid_init: true,
        ..icp.clone()
    };
    Ok(icp_register(&p, &g, &cfg)?.transform)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Absolute F-score threshold; defaults to 5% of the ground-truth diagonal.
    pub tau: Option<f64>,
    /// Register the prediction to the ground truth before measuring.
    pub align: bool,
    pub icp: IcpConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            seed: 0,
            tau: None,
            align: true,
            icp: IcpConfig {
                yaw_sweep: false,
                ..IcpConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chamfer: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    pub tau: f64,
    pub n_samples: usize,
    pub psnr: Option<f64>,
    pub mse: Option<f64>,
    pub ssim: Option<f64>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "schema,chamfer_sum_of_means,fscore,precision,recall,tau,n_samples,psnr,mse,ssim"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{REPORT_SCHEMA_VERSION},{},{},{},{},{},{},{},{},{}",
            self.chamfer,
            self.fscore,
            self.precision,
            self.recall,
            self.tau,
            self.n_samples,
            opt(self.psnr.map(psnr_for_table)),
            opt(self.mse),
            opt(self.ssim)
        )
    }
}

/// Samples both meshes (after optional ICP alignment of `pred`) and measures
/// Chamfer distance and F-score.
pub fn evaluate_meshes(pred: &TriangleMesh, gt: &TriangleMesh, cfg: &MetricsConfig) -> Result<EvalReport> {
    let pred = if cfg.align {
        pred.transformed(&align_for_eval(pred, gt, cfg.n_samples, cfg.seed, &cfg.icp)?)
    } else {
        pred.clone()
    };
    let p = sample_surface(&pred, cfg.n_samples, cfg.seed)?;
    let g = sample_surface(gt, cfg.n_samples, cfg.seed.wrapping_add(1))?;
    let tau = cfg.tau.unwrap_or_else(|| default_tau(&g));
    let f = fscore(&p, &g, tau)?;
    Ok(EvalReport {
        chamfer: chamfer(&p, &g)?,
        fscore: f.fscore,
        precision: f.precision,
        recall: f.recall,
        tau,
        n_samples: cfg.n_samples,
        psnr: None,
        mse: None,
        ssim: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    /// `+inf` for identical images.
    pub psnr: f64,
    pub mse: f64,
    pub ssim: f64,
}

/// Finite stand-in for infinite PSNR in tables.
pub const PSNR_SENTINEL: f64 = 99.0;

pub fn psnr_for_table(psnr: f64) -> f64 {
    if psnr.is_finite() {
        psnr
    } else {
        PSNR_SENTINEL
    }
}

/// MSE over all channels, PSNR for data in `[0, 1]`, and mean SSIM.
pub fn image_metrics(x: &ImageBuffer, y: &ImageBuffer) -> Result<ImageMetrics> {
    ensure!(
        x.same_shape(y),
        Contract,
        "image shapes differ: {}x{}x{} vs {}x{}x{}",
        x.width(),
        x.height(),
        x.channels(),
        y.width(),
        y.height(),
        y.channels()
    );
    ensure!(!x.data().is_empty(), Contract, "images are empty");
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.data().len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    Ok(ImageMetrics {
        psnr,
        mse,
        ssim: ssim(x, y)?,
    })
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all valid window positions and channels: separable
/// Gaussian window 11x11 with sigma 1.5 (truncated to the image size for
/// small images), K1 = 0.01, K2 = 0.03, dynamic range 1.
pub fn ssim(x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
    ensure!(x.same_shape(y), Contract, "image shapes differ");
    let (w, h, ch) = (x.width(), x.height(), x.channels());
    ensure!(w > 0 && h > 0, Contract, "images are empty");
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (wx, wy) = (gaussian_window(w.min(11), 1.5), gaussian_window(h.min(11), 1.5));
    let (ow, oh) = (w - wx.len() + 1, h - wy.len() + 1);
    let mut total = 0.0;
    for c in 0..ch {
        // Horizontal then vertical pass over x, y, x², y², xy.
        let mut rows = vec![[0.0f64; 5]; ow * h];
        for yy in 0..h {
            for ox in 0..ow {
                let mut acc = [0.0; 5];
                for (k, g) in wx.iter().enumerate() {
                    let (a, b) = (x.get(ox + k, yy, c), y.get(ox + k, yy, c));
                    acc[0] += g * a;
                    acc[1] += g * b;
                    acc[2] += g * a * a;
                    acc[3] += g * b * b;
                    acc[4] += g * a * b;
                }
                rows[yy * ow + ox] = acc;
            }
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = [0.0; 5];
                for (k, g) in wy.iter().enumerate() {
                    let r = rows[(oy + k) * ow + ox];
                    for i in 0..5 {
                        m[i] += g * r[i];
                    }
                }
                let (mx, my) = (m[0], m[1]);
                let vx = m[2] - mx * mx;
                let vy = m[3] - my * my;
                let cov = m[4] - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (ow * oh * ch) as f64)
}

/// One `(pred, gt)` pair of a batch manifest. Relative paths resolve against
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    #[serde(default)]
    pub name: String,
    pub pred: PathBuf,
    pub gt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub pairs: Vec<BatchEntry>,
}

/// Evaluates every pair listed in a manifest file, in order.
pub fn evaluate_batch(manifest: &Path, cfg: &MetricsConfig) -> Result<Vec<(String, EvalReport)>> {
    let m: BatchManifest = read_json(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    m.pairs
        .iter()
        .map(|e| {
            let pred = read_mesh(&base.join(&e.pred))?;
            let gt = read_mesh(&base.join(&e.gt))?;
            Ok((e.name.clone(), evaluate_meshes(&pred, &gt, cfg)?))
        })
        .collect()
}

/// Brute-force nearest distance, the reference for the accelerated queries.
pub fn nearest_distance_brute_force(p: &Vec3, cloud: &PointCloud) -> f64 {
    cloud
        .points()
        .iter()
        .map(|q| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{rotation_from_axis_angle, Mat3};

    fn pc(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_points(pts.iter().map(|p| Vec3::from(*p)).collect()).unwrap()
    }

    fn unit_square() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn chamfer_hand_cases() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        let b = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        let a2 = pc(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a2, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a2, &a2).unwrap(), 0.0);
        assert!(chamfer(&a, &pc(&[])).is_err());
    }

    #[test]
    fn fscore_hand_cases() {
        let pred = pc(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let gt = pc(&[[0.0, 0.0, 0.0]]);
        let f = fscore(&pred, &gt, 1.0).unwrap();
        assert_eq!((f.precision, f.recall), (0.5, 1.0));
        assert!((f.fscore - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            fscore(&gt, &gt, 0.1).unwrap(),
            FScore {
                precision: 1.0,
                recall: 1.0,
                fscore: 1.0
            }
        );
        let far = pc(&[[9.0, 0.0, 0.0]]);
        assert_eq!(fscore(&far, &gt, 1.0).unwrap().fscore, 0.0);
    }

    #[test]
    fn samples_are_uniform_over_square() {
        let pts = sample_surface(&unit_square(), 10_000, 3).unwrap();
        let mut q = [0usize; 4];
        for p in pts.points() {
            q[(p.x >= 0.5) as usize + 2 * (p.y >= 0.5) as usize] += 1;
        }
        // Binomial(10000, 1/4): sigma = 43.3.
        for c in q {
            assert!((c as f64 - 2500.0).abs() <= 3.0 * 43.3, "{q:?}");
        }
        assert_eq!(sample_surface(&unit_square(), 0, 1).unwrap().len(), 0);
        assert_eq!(
            sample_surface(&unit_square(), 50, 9).unwrap(),
            sample_surface(&unit_square(), 50, 9).unwrap()
        );
    }

    #[test]
    fn samples_inside_single_triangle() {
        let tri = TriangleMesh::new(
            vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(2.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 1.0)],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        for p in sample_surface(&tri, 500, 4).unwrap().points() {
            assert!(p.x >= 0.0 && p.y >= 0.0 && p.x / 2.0 + p.y <= 1.0 + 1e-12 && (p.z - 1.0).abs() < 1e-12);
        }
        let flat = TriangleMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0], vec![[0, 1, 2]], None).unwrap();
        assert!(sample_surface(&flat, 5, 0).is_err());
    }

    #[test]
    fn alignment_recovers_translation_and_improves_rotation() {
        let gt = TriangleMesh::cuboid(Vec3::new(-0.5, -0.3, 1.8), Vec3::new(0.5, 0.3, 2.2));
        let shift = Vec3::new(0.05, -0.03, 0.02);
        let pred = gt.transformed(&RigidScaleTransform::from_translation(shift));
        let t = align_for_eval(&pred, &gt, 2000, 1, &IcpConfig::default()).unwrap();
        assert!((t.translation() + shift).norm() < 1e-3 * gt.diagonal(), "{:?}", t.translation());
        let same = align_for_eval(&gt, &gt, 2000, 1, &IcpConfig::default()).unwrap();
        assert!((same.rotation() - Mat3::identity()).abs().max() < 1e-6);

        let rot = RigidScaleTransform::new(
            1.0,
            rotation_from_axis_angle(&Vec3::new(0.0, 10f64.to_radians(), 0.0)),
            Vec3::zeros(),
        )
        .unwrap();
        let pred = gt.transformed(&rot);
        let cfg = MetricsConfig {
            n_samples: 2000,
            ..Default::default()
        };
        let before = evaluate_meshes(
            &pred,
            &gt,
            &MetricsConfig {
                align: false,
                ..cfg.clone()
            },
        )
        .unwrap();
        let after = evaluate_meshes(&pred, &gt, &cfg).unwrap();
        assert!(after.chamfer < before.chamfer);
    }

    #[test]
    fn image_metric_closed_forms() {
        let x = ImageBuffer::new(16, 12, 3, (0..16 * 12 * 3).map(|i| (i % 9) as f64 / 10.0).collect()).unwrap();
        let same = image_metrics(&x, &x).unwrap();
        assert_eq!((same.mse, same.psnr), (0.0, f64::INFINITY));
        assert!((same.ssim - 1.0).abs() < 1e-12);
        assert_eq!(psnr_for_table(same.psnr), 99.0);
        let y = ImageBuffer::new(16, 12, 3, x.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let m = image_metrics(&x, &y).unwrap();
        assert!((m.mse - 0.01).abs() < 1e-9 && (m.psnr - 20.0).abs() < 1e-9);
        let zero = ImageBuffer::filled(12, 12, 1, 0.0).unwrap();
        let one = ImageBuffer::filled(12, 12, 1, 1.0).unwrap();
        let m = image_metrics(&zero, &one).unwrap();
        assert_eq!((m.mse, m.psnr), (1.0, 0.0));
        assert!(m.ssim > 0.0 && m.ssim < 1e-3);
        assert!(image_metrics(&zero, &x).is_err());
    }

    #[test]
    fn report_csv_row() {
        let r = EvalReport {
            chamfer: 0.5,
            fscore: 1.0,
            precision: 1.0,
            recall: 1.0,
            tau: 0.1,
            n_samples: 10,
            psnr: Some(f64::INFINITY),
            mse: Some(0.0),
            ssim: None,
        };
        assert_eq!(r.csv_row(), "1,0.5,1,1,1,0.1,10,99,0,");
        assert_eq!(EvalReport::csv_header().split(',').count(), r.csv_row().split(',').count());
    }
}
