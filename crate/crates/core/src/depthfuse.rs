//! Fusion of a detail-rich, affine-invariant depth map with a geometrically
//! coherent metric depth map.
//!
//! Stage 1 fits `aligned = scale * detail + shift` to the coherent depth
//! under a per-pixel weighted squared loss. Stage 2 (optional) adds a smooth
//! per-pixel residual field on top of the affine fit so flat regions match
//! the coherent geometry, while the field's gradient stays within
//! `detail_tol` wherever the weight marks detailed structure.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::types::{ClassId, DepthMap, SemanticInstance};

/// Result of the affine alignment stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineDepthAlignment {
    pub scale: f64,
    pub shift: f64,
    pub iterations_run: usize,
    pub final_loss: f64,
    /// Loss after initialization followed by every accepted step.
    pub loss_history: Vec<f64>,
}

/// Non-negative per-pixel loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    width: usize,
    height: usize,
    w: Vec<f64>,
}

impl WeightMap {
    pub fn new(width: usize, height: usize, w: Vec<f64>) -> Result<Self> {
        ensure!(
            w.len() == width * height,
            Contract,
            "weight map has {} entries for {width}x{height}",
            w.len()
        );
        ensure!(
            w.iter().all(|v| v.is_finite() && *v >= 0.0),
            Contract,
            "weights must be finite and non-negative"
        );
        ensure!(w.iter().any(|v| *v > 0.0), Contract, "weights must not all be zero");
        Ok(Self { width, height, w })
    }

    pub fn uniform(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }
}

/// Initial `(scale, shift)`: the shift is the minimum coherent depth and the
/// scale the ratio of maximum to minimum coherent depth.
pub fn init_affine(coherent: &DepthMap) -> Result<AffineDepthAlignment> {
    let (lo, hi) = coherent
        .depth()
        .iter()
        .zip(coherent.valid())
        .filter(|(_, v)| **v)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (d, _)| (lo.min(*d), hi.max(*d)));
    ensure!(lo.is_finite(), Degenerate, "coherent depth has no valid pixels");
    ensure!(hi > lo, Degenerate, "coherent depth is constant ({lo}); scale is undetermined");
    Ok(AffineDepthAlignment {
        scale: hi / lo,
        shift: lo,
        iterations_run: 0,
        final_loss: f64::NAN,
        loss_history: Vec::new(),
    })
}

/// Pixels covered by an instance whose label is in `flat_classes` get
/// `w_flat`; every other pixel gets `w_detail`.
pub fn structure_weights(
    instances: &[SemanticInstance],
    width: usize,
    height: usize,
    flat_classes: &BTreeSet<ClassId>,
    w_flat: f64,
    w_detail: f64,
) -> Result<WeightMap> {
    ensure!(
        w_flat > w_detail && w_detail >= 0.0,
        Contract,
        "weights must satisfy w_flat > w_detail >= 0 (got {w_flat}, {w_detail})"
    );
    let mut w = vec![w_detail; width * height];
    for inst in instances.iter().filter(|i| flat_classes.contains(&i.label())) {
        ensure!(
            inst.mask().same_size(width, height),
            Contract,
            "instance {} does not match {width}x{height}",
            inst.mask().id()
        );
        for i in inst.mask().indices() {
            w[i] = w_flat;
        }
    }
    WeightMap::new(width, height, w)
}

fn check_dims(a: &DepthMap, b: &DepthMap, w: &WeightMap) -> Result<()> {
    ensure!(
        a.same_size(b.width(), b.height()) && a.same_size(w.width, w.height),
        Contract,
        "size mismatch: {}x{}, {}x{}, weights {}x{}",
        a.width(),
        a.height(),
        b.width(),
        b.height(),
        w.width,
        w.height
    );
    Ok(())
}

fn joint_indices(a: &DepthMap, b: &DepthMap) -> Vec<usize> {
    (0..a.len()).filter(|&i| a.valid()[i] && b.valid()[i]).collect()
}

/// Weighted mean squared difference `(1/N) Σ w_i (aligned_i - coherent_i)²`
/// over the `N` pixels valid in both maps.
pub fn alignment_loss(aligned: &DepthMap, coherent: &DepthMap, w: &WeightMap) -> Result<f64> {
    check_dims(aligned, coherent, w)?;
    let idx = joint_indices(aligned, coherent);
    ensure!(!idx.is_empty(), Degenerate, "no jointly valid pixels");
    let sum: f64 = idx
        .iter()
        .map(|&i| {
            let r = aligned.depth()[i] - coherent.depth()[i];
            w.w[i] * r * r
        })
        .sum();
    Ok(sum / idx.len() as f64)
}

/// Loss of `scale * detail + shift` against `coherent` together with its
/// analytic partial derivatives `(loss, d/dscale, d/dshift)`.
pub fn affine_loss_gradient(detail: &DepthMap, coherent: &DepthMap, w: &WeightMap, scale: f64, shift: f64) -> Result<(f64, f64, f64)> {
    check_dims(detail, coherent, w)?;
    let p = AffineProblem::new(detail, coherent, w)?;
    let s = p.stats(scale, shift);
    Ok((s.loss, s.d_scale, s.d_shift))
}

/// Optimizer settings. JSON keys match the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuseConfig {
    pub w_flat: f64,
    pub w_detail: f64,
    /// Smoothness weight of the residual field.
    pub beta: f64,
    /// Allowed deviation (meters) of the fused depth's forward differences
    /// from `scale * ∇detail` in detailed regions.
    pub detail_tol: f64,
    pub max_iters_stage1: usize,
    pub max_iters_stage2: usize,
    /// Consecutive failed steps tolerated before giving up.
    pub patience: usize,
    /// Run the residual-field stage.
    pub refine_residual: bool,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            w_flat: 1.0,
            w_detail: 0.2,
            beta: 0.1,
            detail_tol: 0.02,
            max_iters_stage1: 500,
            max_iters_stage2: 200,
            patience: 5,
            refine_residual: true,
        }
    }
}

/// Output of [`fuse`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDepth {
    pub depth: DepthMap,
    pub alignment: AffineDepthAlignment,
    /// Stage-2 objective after initialization and every accepted step;
    /// empty when the stage is disabled.
    pub residual_history: Vec<f64>,
}

/// Aligns `detail` to `coherent` (stage 1) and optionally refines a residual
/// field (stage 2). `detail` is expected to be normalized to `[0, 1]`.
pub fn fuse(detail: &DepthMap, coherent: &DepthMap, w: &WeightMap, cfg: &FuseConfig) -> Result<FusedDepth> {
    check_dims(detail, coherent, w)?;
    let init = init_affine(coherent)?;
    let problem = AffineProblem::new(detail, coherent, w)?;
    let alignment = problem.solve(init.scale, init.shift, cfg)?;

    let base: Vec<f64> = detail.depth().iter().map(|d| alignment.scale * d + alignment.shift).collect();
    let (residual, residual_history) = if cfg.refine_residual {
        let field = ResidualProblem::new(detail, coherent, w, &base, cfg);
        field.solve(cfg)?
    } else {
        (vec![0.0; base.len()], Vec::new())
    };

    let depth = DepthMap::from_fn(detail.width(), detail.height(), |x, y| {
        let i = y * detail.width() + x;
        let z = base[i] + residual[i];
        (detail.valid()[i] && z.is_finite() && z > 0.0).then_some(z)
    })?;
    Ok(FusedDepth {
        depth,
        alignment,
        residual_history,
    })
}

struct AffineStats {
    loss: f64,
    d_scale: f64,
    d_shift: f64,
    // Gauss-Newton normal matrix entries w.r.t. (scale, shift).
    h_ss: f64,
    h_sm: f64,
    h_mm: f64,
}

struct AffineProblem {
    d: Vec<f64>,
    c: Vec<f64>,
    w: Vec<f64>,
}

impl AffineProblem {
    fn new(detail: &DepthMap, coherent: &DepthMap, w: &WeightMap) -> Result<Self> {
        let idx = joint_indices(detail, coherent);
        ensure!(!idx.is_empty(), Degenerate, "no jointly valid pixels");
        Ok(Self {
            d: idx.iter().map(|&i| detail.depth()[i]).collect(),
            c: idx.iter().map(|&i| coherent.depth()[i]).collect(),
            w: idx.iter().map(|&i| w.w[i]).collect(),
        })
    }

    fn stats(&self, scale: f64, shift: f64) -> AffineStats {
        let n = self.d.len() as f64;
        let mut s = AffineStats {
            loss: 0.0,
            d_scale: 0.0,
            d_shift: 0.0,
            h_ss: 0.0,
            h_sm: 0.0,
            h_mm: 0.0,
        };
        for ((&d, &c), &w) in self.d.iter().zip(&self.c).zip(&self.w) {
            let r = scale * d + shift - c;
            s.loss += w * r * r;
            s.d_scale += w * r * d;
            s.d_shift += w * r;
            s.h_ss += w * d * d;
            s.h_sm += w * d;
            s.h_mm += w;
        }
        s.loss /= n;
        for v in [&mut s.d_scale, &mut s.d_shift, &mut s.h_ss, &mut s.h_sm, &mut s.h_mm] {
            *v *= 2.0 / n;
        }
        s
    }

    fn loss(&self, scale: f64, shift: f64) -> f64 {
        let n = self.d.len() as f64;
        self.d
            .iter()
            .zip(&self.c)
            .zip(&self.w)
            .map(|((&d, &c), &w)| {
                let r = scale * d + shift - c;
                w * r * r
            })
            .sum::<f64>()
            / n
    }

    /// Descent in `(ln scale, shift)` with a Gauss-Newton preconditioned
    /// direction and Armijo backtracking.
    fn solve(&self, scale0: f64, shift0: f64, cfg: &FuseConfig) -> Result<AffineDepthAlignment> {
        let (mut log_s, mut shift) = (scale0.ln(), shift0);
        let mut stats = self.stats(scale0, shift0);
        ensure!(stats.loss.is_finite(), Degenerate, "initial alignment loss is not finite");
        let mut history = vec![stats.loss];
        let mut failures = 0usize;
        let mut iterations = 0usize;
        while iterations < cfg.max_iters_stage1 && stats.loss > 0.0 {
            iterations += 1;
            let scale = log_s.exp();
            // Chain rule into log-space.
            let g = [stats.d_scale * scale, stats.d_shift];
            let h = [[stats.h_ss * scale * scale, stats.h_sm * scale], [stats.h_sm * scale, stats.h_mm]];
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            let use_newton = failures == 0 && det > 1e-14 * (h[0][0] * h[1][1]).max(f64::MIN_POSITIVE);
            let dir = if use_newton {
                [-(h[1][1] * g[0] - h[0][1] * g[1]) / det, -(-h[1][0] * g[0] + h[0][0] * g[1]) / det]
            } else {
                [-g[0], -g[1]]
            };
            let slope = g[0] * dir[0] + g[1] * dir[1];
            if !(slope < 0.0) {
                break;
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let (ls, sh) = (log_s + step * dir[0], shift + step * dir[1]);
                let l = self.loss(ls.exp(), sh);
                if l.is_finite() && l <= stats.loss + 1e-4 * step * slope {
                    accepted = Some((ls, sh, l));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((ls, sh, l)) => {
                    failures = 0;
                    let decrease = stats.loss - l;
                    log_s = ls;
                    shift = sh;
                    stats = self.stats(ls.exp(), sh);
                    history.push(stats.loss.min(l));
                    if decrease <= 1e-15 * stats.loss.max(f64::MIN_POSITIVE) {
                        break;
                    }
                }
                None => {
                    let gnorm = g[0].hypot(g[1]);
                    if gnorm <= 1e-10 * (1.0 + stats.loss) {
                        break;
                    }
                    failures += 1;
                    if failures >= cfg.patience {
                        return Err(Error::Optimization {
                            message: format!("affine alignment stalled after {iterations} iterations"),
                            best_loss: stats.loss,
                        });
                    }
                }
            }
        }
        Ok(AffineDepthAlignment {
            scale: log_s.exp(),
            shift,
            iterations_run: iterations,
            final_loss: stats.loss,
            loss_history: history,
        })
    }
}

struct ResidualProblem {
    n_joint: f64,
    beta: f64,
    tol: f64,
    // Per-pixel data term: weight and target residual (coherent - base); weight 0
    // outside the joint-valid set.
    data_w: Vec<f64>,
    target: Vec<f64>,
    active: Vec<bool>,
    // Forward-difference edges between detail-valid pixels.
    edges: Vec<(usize, usize)>,
    // Edges whose difference is bounded by `tol`.
    constrained: Vec<bool>,
    max_w: f64,
}

impl ResidualProblem {
    fn new(detail: &DepthMap, coherent: &DepthMap, w: &WeightMap, base: &[f64], cfg: &FuseConfig) -> Self {
        let (width, height) = (detail.width(), detail.height());
        let n = width * height;
        let mut data_w = vec![0.0; n];
        let mut target = vec![0.0; n];
        let mut n_joint = 0usize;
        for i in 0..n {
            if detail.valid()[i] && coherent.valid()[i] {
                data_w[i] = w.w[i];
                target[i] = coherent.depth()[i] - base[i];
                n_joint += 1;
            }
        }
        let active = detail.valid().to_vec();
        let is_detail = |i: usize| w.w[i] <= cfg.w_detail;
        let mut edges = Vec::new();
        let mut constrained = Vec::new();
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if !active[i] {
                    continue;
                }
                for j in [(x + 1 < width).then(|| i + 1), (y + 1 < height).then(|| i + width)]
                    .into_iter()
                    .flatten()
                {
                    if active[j] {
                        edges.push((i, j));
                        constrained.push(is_detail(i) || is_detail(j));
                    }
                }
            }
        }
        Self {
            n_joint: n_joint.max(1) as f64,
            beta: cfg.beta,
            tol: cfg.detail_tol,
            data_w,
            target,
            active,
            edges,
            constrained,
            max_w: w.w.iter().cloned().fold(0.0, f64::max),
        }
    }

    fn objective(&self, r: &[f64]) -> f64 {
        let data: f64 = r
            .iter()
            .zip(&self.data_w)
            .zip(&self.target)
            .map(|((ri, w), t)| w * (ri - t) * (ri - t))
            .sum();
        let smooth: f64 = self.edges.iter().map(|&(i, j)| (r[i] - r[j]).powi(2)).sum();
        (data + self.beta * smooth) / self.n_joint
    }

    fn gradient(&self, r: &[f64]) -> Vec<f64> {
        let k = 2.0 / self.n_joint;
        let mut g: Vec<f64> = r
            .iter()
            .zip(&self.data_w)
            .zip(&self.target)
            .map(|((ri, w), t)| k * w * (ri - t))
            .collect();
        for &(i, j) in &self.edges {
            let e = k * self.beta * (r[i] - r[j]);
            g[i] += e;
            g[j] -= e;
        }
        g
    }

    /// Projects a direction so it does not push any saturated constraint
    /// further out: pixels joined by such edges move together.
    fn project_direction(&self, r: &[f64], dir: &mut [f64]) {
        let n = r.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let eps = 1e-12 * (1.0 + self.tol);
        loop {
            let mut merged = false;
            for (e, &(i, j)) in self.edges.iter().enumerate() {
                if !self.constrained[e] {
                    continue;
                }
                let diff = r[i] - r[j];
                let ddiff = dir[i] - dir[j];
                let saturated = diff.abs() >= self.tol - eps;
                if saturated && diff * ddiff > 0.0 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                        merged = true;
                    }
                }
            }
            if !merged {
                break;
            }
            let mut sum = vec![0.0; n];
            let mut count = vec![0usize; n];
            for i in 0..n {
                let root = find(&mut parent, i);
                sum[root] += dir[i];
                count[root] += 1;
            }
            for i in 0..n {
                let root = find(&mut parent, i);
                dir[i] = sum[root] / count[root] as f64;
            }
        }
    }

    fn max_feasible_step(&self, r: &[f64], dir: &[f64]) -> f64 {
        let mut alpha = f64::INFINITY;
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            if !self.constrained[e] {
                continue;
            }
            let diff = r[i] - r[j];
            let dd = dir[i] - dir[j];
            let limit = if dd > 0.0 {
                (self.tol - diff) / dd
            } else if dd < 0.0 {
                (-self.tol - diff) / dd
            } else {
                continue;
            };
            alpha = alpha.min(limit.max(0.0));
        }
        alpha
    }

    fn solve(&self, cfg: &FuseConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.data_w.len();
        let mut r = vec![0.0; n];
        let mut f = self.objective(&r);
        let mut history = vec![f];
        // Inverse of a Lipschitz bound on the gradient.
        let base_step = self.n_joint / (2.0 * (self.max_w + 8.0 * self.beta));
        let mut failures = 0usize;
        for _ in 0..cfg.max_iters_stage2 {
            let g = self.gradient(&r);
            let mut dir: Vec<f64> = g.iter().zip(&self.active).map(|(gi, a)| if *a { -gi } else { 0.0 }).collect();
            self.project_direction(&r, &mut dir);
            let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            if !(slope < -1e-30) {
                break;
            }
            let mut step = base_step.min(self.max_feasible_step(&r, &dir));
            if step <= 0.0 {
                break;
            }
            let mut accepted = None;
            for _ in 0..40 {
                let cand: Vec<f64> = r.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
                let fc = self.objective(&cand);
                if fc.is_finite() && fc <= f + 1e-4 * step * slope {
                    accepted = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((cand, fc)) => {
                    failures = 0;
                    let decrease = f - fc;
                    r = cand;
                    f = fc;
                    history.push(f);
                    if decrease <= 1e-12 * f.max(f64::MIN_POSITIVE) {
                        break;
                    }
                }
                None => {
                    failures += 1;
                    if failures >= cfg.patience {
                        return Err(Error::Optimization {
                            message: "residual refinement stalled".into(),
                            best_loss: f,
                        });
                    }
                    break;
                }
            }
        }
        Ok((r, history))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dm(w: usize, h: usize, v: Vec<f64>) -> DepthMap {
        DepthMap::from_values(w, h, v).unwrap()
    }

    #[test]
    fn init_from_extremes() {
        let a = init_affine(&dm(3, 1, vec![1.0, 2.0, 4.0])).unwrap();
        assert_eq!((a.shift, a.scale), (1.0, 4.0));
        let a = init_affine(&dm(2, 1, vec![0.5, 5.0])).unwrap();
        assert_eq!((a.shift, a.scale), (0.5, 10.0));
    }

    #[test]
    fn init_rejects_degenerate() {
        assert!(matches!(init_affine(&dm(2, 1, vec![2.0, 2.0])), Err(Error::Degenerate(_))));
        let none = DepthMap::new(2, 1, vec![0.0, 0.0], vec![false, false]).unwrap();
        assert!(matches!(init_affine(&none), Err(Error::Degenerate(_))));
    }

    #[test]
    fn loss_examples() {
        let w = WeightMap::uniform(2, 1, 1.0).unwrap();
        let c = dm(2, 1, vec![2.0, 3.0]);
        assert_eq!(alignment_loss(&c, &c, &w).unwrap(), 0.0);
        let a = dm(2, 1, vec![3.0, 2.0]);
        assert_eq!(alignment_loss(&a, &c, &w).unwrap(), 1.0);
        let w2 = WeightMap::new(2, 1, vec![2.0, 0.0]).unwrap();
        assert_eq!(alignment_loss(&a, &c, &w2).unwrap(), 1.0);
    }

    #[test]
    fn loss_needs_joint_pixels() {
        let w = WeightMap::uniform(2, 1, 1.0).unwrap();
        let a = DepthMap::new(2, 1, vec![1.0, 0.0], vec![true, false]).unwrap();
        let b = DepthMap::new(2, 1, vec![0.0, 1.0], vec![false, true]).unwrap();
        assert!(matches!(alignment_loss(&a, &b, &w), Err(Error::Degenerate(_))));
    }

    #[test]
    fn weights_follow_flat_labels() {
        let wall = SemanticInstance::new(InstanceMask::from_fn(1, 3, 1, |x, _| x == 0), ClassId(1), 1, 1).unwrap();
        let sofa = SemanticInstance::new(InstanceMask::from_fn(2, 3, 1, |x, _| x == 1), ClassId(2), 1, 1).unwrap();
        let flat: BTreeSet<_> = [ClassId(1)].into();
        let w = structure_weights(&[wall.clone(), sofa.clone()], 3, 1, &flat, 1.0, 0.2).unwrap();
        assert_eq!(w.weights(), &[1.0, 0.2, 0.2]);
        let w = structure_weights(&[], 3, 1, &flat, 1.0, 0.2).unwrap();
        assert_eq!(w.weights(), &[0.2; 3]);
        let all: BTreeSet<_> = [ClassId(1), ClassId(2)].into();
        let full = SemanticInstance::new(InstanceMask::from_fn(3, 3, 1, |_, _| true), ClassId(2), 3, 3).unwrap();
        let w = structure_weights(&[full], 3, 1, &all, 1.0, 0.2).unwrap();
        assert_eq!(w.weights(), &[1.0; 3]);
        assert!(structure_weights(&[], 3, 1, &flat, 0.2, 1.0).is_err());
    }

    use crate::types::InstanceMask;

    #[test]
    fn identical_inputs_fuse_to_themselves() {
        let c = DepthMap::from_fn(8, 6, |x, y| Some(1.0 + 0.1 * x as f64 + 0.05 * y as f64)).unwrap();
        let w = WeightMap::uniform(8, 6, 1.0).unwrap();
        let out = fuse(&c, &c, &w, &FuseConfig::default()).unwrap();
        assert!(out.alignment.final_loss < 1e-10);
        for (a, b) in out.depth.depth().iter().zip(c.depth()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn recovers_exact_affine_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = DepthMap::from_fn(10, 10, |_, _| Some(rng.random_range(0.01..1.0))).unwrap();
        let c = dm(10, 10, d.depth().iter().map(|v| 3.0 * v + 0.7).collect());
        let w = WeightMap::new(10, 10, (0..100).map(|i| if i % 3 == 0 { 1.0 } else { 0.2 }).collect()).unwrap();
        let cfg = FuseConfig {
            refine_residual: false,
            ..FuseConfig::default()
        };
        let out = fuse(&d, &c, &w, &cfg).unwrap();
        assert!((out.alignment.scale - 3.0).abs() < 1e-3);
        assert!((out.alignment.shift - 0.7).abs() < 1e-3);
        assert!(out.alignment.loss_history.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let d = DepthMap::from_fn(6, 5, |_, _| Some(rng.random_range(0.0..1.0) + 1e-3)).unwrap();
            let c = DepthMap::from_fn(6, 5, |_, _| Some(rng.random_range(0.5..6.0))).unwrap();
            let w = WeightMap::new(6, 5, (0..30).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let (s, m) = (rng.random_range(0.5..5.0), rng.random_range(0.0..3.0));
            let (_, gs, gm) = affine_loss_gradient(&d, &c, &w, s, m).unwrap();
            let loss_at = |s: f64, m: f64| {
                let a = DepthMap::from_values(6, 5, d.depth().iter().map(|v| s * v + m).collect()).unwrap();
                alignment_loss(&a, &c, &w).unwrap()
            };
            let h = 1e-6;
            let fs = (loss_at(s + h, m) - loss_at(s - h, m)) / (2.0 * h);
            let fm = (loss_at(s, m + h) - loss_at(s, m - h)) / (2.0 * h);
            assert!((gs - fs).abs() <= 1e-4 * fs.abs().max(1e-8), "{gs} vs {fs}");
            assert!((gm - fm).abs() <= 1e-4 * fm.abs().max(1e-8), "{gm} vs {fm}");
        }
    }

    /// 5x5 box blur with edge clamping; the smoothing oracle for the edge fixture.
    fn box_blur(w: usize, h: usize, v: &[f64]) -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as i64, (i / w) as i64);
                let mut acc = 0.0;
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                        let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                        acc += v[yy * w + xx];
                    }
                }
                acc / 25.0
            })
            .collect()
    }

    #[test]
    fn residual_stage_keeps_edges_and_improves_flat_regions() {
        let (w, h) = (32usize, 16usize);
        // Metric scene: gently curved wall with a sharp 0.5 m step inside a
        // furniture region (columns 10..22).
        let metric: Vec<f64> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let step = if (16..22).contains(&(i % w)) { -0.5 } else { 0.0 };
                3.0 + 0.03 * x + 0.002 * (x - 16.0).powi(2) + 0.01 * y + step
            })
            .collect();
        let coherent = dm(w, h, box_blur(w, h, &metric));
        let (lo, hi) = metric.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        let detail = dm(w, h, metric.iter().map(|v| (v - lo) / (hi - lo) + 1e-6).collect());
        let furniture = |i: usize| (10..22).contains(&(i % w));
        let weights = WeightMap::new(w, h, (0..w * h).map(|i| if furniture(i) { 0.2 } else { 1.0 }).collect()).unwrap();

        let cfg = FuseConfig::default();
        let stage1 = fuse(
            &detail,
            &coherent,
            &weights,
            &FuseConfig {
                refine_residual: false,
                ..cfg.clone()
            },
        )
        .unwrap();
        let stage2 = fuse(&detail, &coherent, &weights, &cfg).unwrap();
        assert!(stage2.residual_history.windows(2).all(|p| p[1] <= p[0]));

        let flat = WeightMap::new(w, h, (0..w * h).map(|i| if furniture(i) { 0.0 } else { 1.0 }).collect()).unwrap();
        let l1 = alignment_loss(&stage1.depth, &coherent, &flat).unwrap();
        let l2 = alignment_loss(&stage2.depth, &coherent, &flat).unwrap();
        assert!(l2 < l1, "flat loss {l2} !< {l1}");

        let scale = stage2.alignment.scale;
        for y in 0..h {
            for x in 9..22 {
                let i = y * w + x;
                let fused = stage2.depth.depth()[i + 1] - stage2.depth.depth()[i];
                let reference = scale * (detail.depth()[i + 1] - detail.depth()[i]);
                assert!((fused - reference).abs() <= cfg.detail_tol + 1e-9, "edge at ({x},{y})");
            }
        }
    }
}
