//! Inpainting masks and noised inputs for completing occluded or
//! out-of-frame instances.
//!
//! The refined mask of a target instance is built in three steps: take the
//! masks of neighbouring instances, drop the pixels that lie behind the
//! target, then grow the canvas where the target touches the image border.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::io::{read_binary_mask, read_image, read_json, write_binary_mask, write_image, write_json};
use crate::morphology::dilate;
use crate::types::{ClassTable, DepthMap, ImageBuffer, InstanceMask, SemanticInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmodalConfig {
    /// Neighbourhood radius in pixels; `None` scales with the image diagonal.
    pub adjacency_radius: Option<u32>,
    /// Fraction in `(0, 1]` selecting the target depth statistic; 1 is the maximum.
    pub depth_percentile: f64,
    /// Out-of-frame growth per touched side, as a fraction of the target bbox extent.
    pub margin_frac: f64,
    /// `{label}` is replaced by the class name.
    pub prompt_template: String,
    pub seed: u64,
}

impl Default for AmodalConfig {
    fn default() -> Self {
        Self {
            adjacency_radius: None,
            depth_percentile: 1.0,
            margin_frac: 0.3,
            prompt_template: "a complete, fully visible {label}, studio background".into(),
            seed: 0,
        }
    }
}

/// 15 px at 1024x1024, proportional to the diagonal, at least 1.
pub fn default_adjacency_radius(width: usize, height: usize) -> u32 {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((15.0 * diag / (1024.0 * std::f64::consts::SQRT_2)).round() as u32).max(1)
}

fn check_same(a: &InstanceMask, b: &InstanceMask) -> Result<()> {
    ensure!(
        a.same_size(b.width(), b.height()),
        Contract,
        "mask {} is {}x{}, mask {} is {}x{}",
        a.id(),
        a.width(),
        a.height(),
        b.id(),
        b.width(),
        b.height()
    );
    Ok(())
}

/// Union of every other mask that comes within `adjacency_radius` of the
/// target (Euclidean), minus the target's own pixels.
pub fn init_mask(target: &InstanceMask, others: &[InstanceMask], adjacency_radius: u32) -> Result<InstanceMask> {
    ensure!(adjacency_radius >= 1, Contract, "adjacency radius must be at least 1");
    let reach = dilate(target, adjacency_radius);
    let mut bits = vec![false; target.bits().len()];
    for other in others {
        check_same(target, other)?;
        if other.indices().any(|i| reach.bits()[i]) {
            for i in other.indices() {
                bits[i] = true;
            }
        }
    }
    for i in target.indices() {
        bits[i] = false;
    }
    InstanceMask::new(target.id(), target.width(), target.height(), bits)
}

/// Nearest-rank percentile of the valid depths under `target`.
pub fn target_depth_threshold(target: &InstanceMask, depth: &DepthMap, percentile: f64) -> Result<f64> {
    ensure!(
        percentile > 0.0 && percentile <= 1.0,
        Contract,
        "depth percentile must lie in (0, 1], got {percentile}"
    );
    ensure!(
        depth.same_size(target.width(), target.height()),
        Contract,
        "depth is {}x{}, mask is {}x{}",
        depth.width(),
        depth.height(),
        target.width(),
        target.height()
    );
    let mut values: Vec<f64> = target.indices().filter_map(|i| depth.at(i)).collect();
    ensure!(!values.is_empty(), Degenerate, "instance {} has no valid depth", target.id());
    values.sort_by(f64::total_cmp);
    let rank = ((percentile * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Ok(values[rank - 1])
}

/// Keeps the pixels of `mask` whose depth is valid and not behind the
/// target's depth threshold.
pub fn depth_filter(mask: &InstanceMask, depth: &DepthMap, target: &InstanceMask, percentile: f64) -> Result<InstanceMask> {
    check_same(mask, target)?;
    let threshold = target_depth_threshold(target, depth, percentile)?;
    let bits = (0..mask.bits().len())
        .map(|i| mask.bits()[i] && depth.at(i).is_some_and(|d| d <= threshold))
        .collect();
    InstanceMask::new(mask.id(), mask.width(), mask.height(), bits)
}

/// Image borders touched by a mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TouchedSides {
    pub left: bool,
    pub top: bool,
    pub right: bool,
    pub bottom: bool,
}

impl TouchedSides {
    pub fn of(mask: &InstanceMask) -> Self {
        match mask.bbox() {
            None => Self::default(),
            Some(b) => Self {
                left: b.x0 == 0,
                top: b.y0 == 0,
                right: b.x1 + 1 == mask.width(),
                bottom: b.y1 + 1 == mask.height(),
            },
        }
    }

    pub fn any(&self) -> bool {
        self.left || self.top || self.right || self.bottom
    }
}

/// A mask placed on a possibly enlarged canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Extended {
    pub mask: InstanceMask,
    /// Position of the original image's top-left pixel on the new canvas.
    pub canvas_offset: [usize; 2],
    pub touched: TouchedSides,
}

/// Grows the canvas on every side the target touches by
/// `ceil(margin_frac * bbox extent)` and adds the strip facing the target's
/// border pixels, plus the corner block between two touched sides.
pub fn boundary_extend(mask: &InstanceMask, target: &InstanceMask, margin_frac: f64) -> Result<Extended> {
    ensure!(
        margin_frac >= 0.0 && margin_frac.is_finite(),
        Contract,
        "margin fraction must be non-negative"
    );
    check_same(mask, target)?;
    let touched = TouchedSides::of(target);
    let Some(bb) = target.bbox() else {
        return Ok(Extended {
            mask: mask.clone(),
            canvas_offset: [0, 0],
            touched,
        });
    };
    let grow = |on: bool, extent: usize| if on { (margin_frac * extent as f64).ceil() as usize } else { 0 };
    let (l, r) = (grow(touched.left, bb.width()), grow(touched.right, bb.width()));
    let (t, b) = (grow(touched.top, bb.height()), grow(touched.bottom, bb.height()));
    let (w, h) = (mask.width(), mask.height());
    let (nw, nh) = (w + l + r, h + t + b);
    let mut bits = vec![false; nw * nh];
    for (x, y) in mask.pixels() {
        bits[(y + t) * nw + x + l] = true;
    }
    let mut set = |x0: usize, x1: usize, y0: usize, y1: usize| {
        for y in y0..y1 {
            for x in x0..x1 {
                bits[y * nw + x] = true;
            }
        }
    };
    for y in 0..h {
        if l > 0 && target.contains(0, y) {
            set(0, l, y + t, y + t + 1);
        }
        if r > 0 && target.contains(w - 1, y) {
            set(l + w, nw, y + t, y + t + 1);
        }
    }
    for x in 0..w {
        if t > 0 && target.contains(x, 0) {
            set(x + l, x + l + 1, 0, t);
        }
        if b > 0 && target.contains(x, h - 1) {
            set(x + l, x + l + 1, t + h, nh);
        }
    }
    set(0, l, 0, t);
    set(l + w, nw, 0, t);
    set(0, l, t + h, nh);
    set(l + w, nw, t + h, nh);
    Ok(Extended {
        mask: InstanceMask::new(mask.id(), nw, nh, bits)?,
        canvas_offset: [l, t],
        touched,
    })
}

/// Everything the inpainting backend needs for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AmodalRequest {
    pub instance: SemanticInstance,
    pub refined_mask: InstanceMask,
    pub noised_image: ImageBuffer,
    pub prompt: String,
    pub canvas_offset: [usize; 2],
    /// Nothing to complete: the refined mask is empty.
    pub skip: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestManifest {
    pub instance_id: u32,
    pub prompt: String,
    pub canvas_offset: [usize; 2],
}

impl AmodalRequest {
    /// The instance's visible pixels on the request canvas.
    pub fn target_on_canvas(&self) -> InstanceMask {
        let [ox, oy] = self.canvas_offset;
        let src = self.instance.mask();
        InstanceMask::from_fn(src.id(), self.refined_mask.width(), self.refined_mask.height(), |x, y| {
            x >= ox && y >= oy && x - ox < src.width() && y - oy < src.height() && src.contains(x - ox, y - oy)
        })
    }

    pub fn manifest(&self) -> RequestManifest {
        RequestManifest {
            instance_id: self.instance.mask().id(),
            prompt: self.prompt.clone(),
            canvas_offset: self.canvas_offset,
        }
    }

    /// Writes `noised.png`, `mask.png` and `request.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        write_image(&dir.join("noised.png"), &self.noised_image)?;
        write_binary_mask(&dir.join("mask.png"), &self.refined_mask)?;
        write_json(&dir.join("request.json"), &self.manifest())
    }
}

/// Contents of a serialized request directory.
pub fn read_request_dir(dir: &Path) -> Result<(RequestManifest, ImageBuffer, InstanceMask)> {
    let manifest: RequestManifest = read_json(&dir.join("request.json"))?;
    let noised = read_image(&dir.join("noised.png"))?;
    let mask = read_binary_mask(&dir.join("mask.png"), manifest.instance_id)?;
    Ok((manifest, noised, mask))
}

fn noise_seed(seed: u64, instance_id: u32) -> u64 {
    seed ^ (instance_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the three mask steps for `instance` and composes the noised image.
/// `others` may include the instance itself; masks with its id are ignored.
pub fn make_request(
    instance: &SemanticInstance,
    others: &[InstanceMask],
    depth: &DepthMap,
    image: &ImageBuffer,
    classes: &ClassTable,
    cfg: &AmodalConfig,
) -> Result<AmodalRequest> {
    let target = instance.mask();
    let (w, h) = (target.width(), target.height());
    ensure!(
        image.width() == w && image.height() == h,
        Contract,
        "image is {}x{}, mask is {w}x{h}",
        image.width(),
        image.height()
    );
    let radius = cfg.adjacency_radius.unwrap_or_else(|| default_adjacency_radius(w, h));
    let neighbours: Vec<InstanceMask> = others.iter().filter(|m| m.id() != target.id()).cloned().collect();
    let m0 = init_mask(target, &neighbours, radius)?;
    let m1 = depth_filter(&m0, depth, target, cfg.depth_percentile)?;
    let ext = boundary_extend(&m1, target, cfg.margin_frac)?;
    let [ox, oy] = ext.canvas_offset;
    let (nw, nh) = (ext.mask.width(), ext.mask.height());

    let channels = image.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(cfg.seed, target.id()));
    let mut data = Vec::with_capacity(nw * nh * channels);
    for y in 0..nh {
        for x in 0..nw {
            let inside = x >= ox && y >= oy && x - ox < w && y - oy < h;
            if inside && target.contains(x - ox, y - oy) {
                data.extend_from_slice(image.pixel(x - ox, y - oy));
            } else {
                for c in 0..channels {
                    // Opaque alpha for RGBA inputs.
                    data.push(if channels == 4 && c == 3 { 1.0 } else { rng.random::<f64>() });
                }
            }
        }
    }
    let noised_image = ImageBuffer::new(nw, nh, channels, data)?;
    let prompt = cfg.prompt_template.replace("{label}", &classes.display_name(instance.label()));
    Ok(AmodalRequest {
        instance: instance.clone(),
        skip: ext.mask.is_empty(),
        refined_mask: ext.mask,
        noised_image,
        prompt,
        canvas_offset: ext.canvas_offset,
    })
}
