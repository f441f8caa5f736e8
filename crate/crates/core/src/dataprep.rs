//! Training-data helpers: camera sample validation and inpainting-mask
//! augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::morphology::{dilate, erode};
use crate::spatial::KdTree;
use crate::types::{InstanceMask, PointCloud, Vec3};

/// A rendered viewpoint. The scene is z-up, so height is `position[2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub pitch: f64,
}

impl CameraSample {
    pub fn new(position: [f64; 3]) -> Self {
        Self {
            id: None,
            position,
            yaw: 0.0,
            pitch: 0.0,
        }
    }

    pub fn height(&self) -> f64 {
        self.position[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub h_min: f64,
    pub h_max: f64,
    pub d_min: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            h_min: 1.4,
            h_max: 1.9,
            d_min: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Height,
    Proximity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision", content = "reason")]
pub enum CameraDecision {
    Accept,
    Reject(RejectReason),
}

/// Reusable validator: the scene points are indexed once.
#[derive(Debug, Clone)]
pub struct CameraValidator {
    tree: KdTree,
    cfg: CameraConfig,
}

impl CameraValidator {
    pub fn new(scene_points: &PointCloud, cfg: CameraConfig) -> Result<Self> {
        ensure!(!scene_points.is_empty(), Contract, "scene point cloud is empty");
        ensure!(cfg.h_min <= cfg.h_max, Contract, "h_min {} > h_max {}", cfg.h_min, cfg.h_max);
        Ok(Self {
            tree: KdTree::new(scene_points.points()),
            cfg,
        })
    }

    pub fn min_distance(&self, sample: &CameraSample) -> f64 {
        self.tree
            .nearest(&Vec3::from(sample.position))
            .map_or(f64::INFINITY, |(_, d2)| d2.sqrt())
    }

    /// Height is checked before proximity.
    pub fn validate(&self, sample: &CameraSample) -> CameraDecision {
        let h = sample.height();
        if !(self.cfg.h_min..=self.cfg.h_max).contains(&h) {
            CameraDecision::Reject(RejectReason::Height)
        } else if self.min_distance(sample) < self.cfg.d_min {
            CameraDecision::Reject(RejectReason::Proximity)
        } else {
            CameraDecision::Accept
        }
    }
}

pub fn validate_camera(sample: &CameraSample, scene_points: &PointCloud, cfg: &CameraConfig) -> Result<CameraDecision> {
    Ok(CameraValidator::new(scene_points, *cfg)?.validate(sample))
}

/// One line of a batch report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraVerdict {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub height: f64,
    pub min_distance: f64,
    #[serde(flatten)]
    pub decision: CameraDecision,
}

/// Parses JSONL camera samples (blank lines skipped) and validates them in
/// parallel. Verdicts come back in input order.
pub fn validate_jsonl(text: &str, scene_points: &PointCloud, cfg: &CameraConfig) -> Result<Vec<CameraVerdict>> {
    let samples: Vec<CameraSample> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Validation(format!("camera sample on line {}: {e}", n + 1))))
        .collect::<Result<_>>()?;
    let v = CameraValidator::new(scene_points, *cfg)?;
    Ok(samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| CameraVerdict {
            index,
            id: s.id.clone(),
            height: s.height(),
            min_distance: v.min_distance(s),
            decision: v.validate(s),
        })
        .collect())
}

pub fn verdicts_to_jsonl(verdicts: &[CameraVerdict]) -> Result<String> {
    let mut out = String::new();
    for v in verdicts {
        out.push_str(&serde_json::to_string(v)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_radius: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_radius: 12 }
    }
}

impl AugmentConfig {
    /// Default radius range scaled from 1024 px to the longer image side.
    pub fn for_size(width: usize, height: usize) -> Self {
        let r = (12.0 * width.max(height) as f64 / 1024.0).round() as u32;
        Self { max_radius: r.max(1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Dilate,
    Erode,
}

/// The operation and radius drawn for `seed`.
pub fn augmentation_plan(seed: u64, cfg: &AugmentConfig) -> Result<(MorphOp, u32)> {
    ensure!(cfg.max_radius >= 1, Contract, "max_radius must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = rng.random_range(1..=cfg.max_radius);
    let op = if rng.random::<bool>() { MorphOp::Dilate } else { MorphOp::Erode };
    Ok((op, radius))
}

/// Randomly grows or shrinks a mask with a disk. An erosion that would
/// empty a non-empty mask returns the original instead.
pub fn augment_mask(mask: &InstanceMask, seed: u64, cfg: &AugmentConfig) -> Result<InstanceMask> {
    Ok(match augmentation_plan(seed, cfg)? {
        (MorphOp::Dilate, r) => dilate(mask, r),
        (MorphOp::Erode, r) => {
            let e = erode(mask, r);
            if e.is_empty() {
                mask.clone()
            } else {
                e
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> PointCloud {
        PointCloud::from_points(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(10.0, 0.0, 1.0)]).unwrap()
    }

    #[test]
    fn camera_rules() {
        let cfg = CameraConfig::default();
        let d = |p: [f64; 3]| validate_camera(&CameraSample::new(p), &scene(), &cfg).unwrap();
        // Nearest point (0,0,0) at distance sqrt(3.5^2 - 1.6^2 + 1.6^2) = 3.5.
        let x = (3.5f64 * 3.5 - 1.6 * 1.6).sqrt();
        assert_eq!(d([x, 0.0, 1.6]), CameraDecision::Accept);
        assert_eq!(d([x, 0.0, 1.2]), CameraDecision::Reject(RejectReason::Height));
        assert_eq!(
            d([(4.0f64 - 2.56).sqrt(), 0.0, 1.6]),
            CameraDecision::Reject(RejectReason::Proximity)
        );
        assert_eq!(d([5.0, 0.0, 1.4]), CameraDecision::Accept);
        assert!(validate_camera(&CameraSample::new([0.0; 3]), &PointCloud::default(), &cfg).is_err());
    }

    #[test]
    fn jsonl_batch_round_trip() {
        let text = "{\"id\":\"a\",\"position\":[5,0,1.5]}\n\n{\"position\":[0,0,1.5],\"yaw\":1.0}\n";
        let v = validate_jsonl(text, &scene(), &CameraConfig::default()).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].decision, CameraDecision::Accept);
        assert_eq!(v[1].decision, CameraDecision::Reject(RejectReason::Proximity));
        let out = verdicts_to_jsonl(&v).unwrap();
        let back: Vec<CameraVerdict> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, v);
        assert!(out.lines().next().unwrap().contains("\"decision\":\"accept\""));
        assert!(validate_jsonl("{oops", &scene(), &CameraConfig::default()).is_err());
    }

    #[test]
    fn single_pixel_behaviour() {
        let m = InstanceMask::from_fn(1, 31, 31, |x, y| x == 15 && y == 15);
        for seed in 0..40 {
            let (op, r) = augmentation_plan(seed, &AugmentConfig::default()).unwrap();
            let a = augment_mask(&m, seed, &AugmentConfig::default()).unwrap();
            match op {
                MorphOp::Erode => assert_eq!(a, m),
                MorphOp::Dilate => {
                    let disk = InstanceMask::from_fn(1, 31, 31, |x, y| {
                        let (dx, dy) = (x as i64 - 15, y as i64 - 15);
                        dx * dx + dy * dy <= (r * r) as i64
                    });
                    assert_eq!(a, disk);
                }
            }
            assert_eq!(a, augment_mask(&m, seed, &AugmentConfig::default()).unwrap());
        }
        assert!(augment_mask(&m, 0, &AugmentConfig { max_radius: 0 }).is_err());
    }

    #[test]
    fn plan_covers_both_ops_and_radius_range() {
        let cfg = AugmentConfig { max_radius: 3 };
        let plans: Vec<_> = (0..200).map(|s| augmentation_plan(s, &cfg).unwrap()).collect();
        assert!(plans.iter().any(|p| p.0 == MorphOp::Dilate) && plans.iter().any(|p| p.0 == MorphOp::Erode));
        for r in 1..=3 {
            assert!(plans.iter().any(|p| p.1 == r));
        }
        assert!(plans.iter().all(|p| (1..=3).contains(&p.1)));
        assert_eq!(AugmentConfig::for_size(1024, 768).max_radius, 12);
        assert_eq!(AugmentConfig::for_size(16, 16).max_radius, 1);
    }
}
