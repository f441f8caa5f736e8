//! Shared image and geometry types.
//!
//! Conventions used throughout the crate: image origin is the top-left
//! pixel, +x points right and +y points down; the camera looks along +z and
//! depth is the z coordinate of a point (axis depth, not ray length). Pixel
//! `(u, v)` is sampled at the integer coordinate `(u, v)`.
//!
//! All types validate their invariants on construction and are immutable
//! afterwards.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Rgb = [f64; 3];

/// Dense image with 1, 3 or 4 channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            matches!(channels, 1 | 3 | 4),
            Contract,
            "image must have 1, 3 or 4 channels, got {channels}"
        );
        ensure!(
            data.len() == width * height * channels,
            Contract,
            "image data length {} != {width}x{height}x{channels}",
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            Contract,
            "image values must be finite and within [0, 1]"
        );
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Per-pixel metric depth with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        ensure!(
            depth.len() == n && valid.len() == n,
            Contract,
            "depth map buffers must have {n} entries (got depth {}, valid {})",
            depth.len(),
            valid.len()
        );
        for (i, (&d, &ok)) in depth.iter().zip(&valid).enumerate() {
            ensure!(
                !ok || (d.is_finite() && d > 0.0),
                Contract,
                "valid depth at index {i} must be finite and positive, got {d}"
            );
        }
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    /// Builds a depth map where every finite positive value is valid.
    pub fn from_values(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let depth = depth.into_iter().map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 }).collect();
        Self::new(width, height, depth, valid)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Result<Self> {
        let mut depth = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(d) => {
                        depth.push(d);
                        valid.push(true);
                    }
                    None => {
                        depth.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        Self::new(width, height, depth, valid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Depth at `(x, y)` if the pixel is valid.
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.at(y * self.width + x)
    }

    pub fn at(&self, i: usize) -> Option<f64> {
        self.valid[i].then_some(self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn same_size(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// Inclusive integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Binary mask of one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    id: u32,
    width: usize,
    height: usize,
    bits: Vec<bool>,
    bbox: Option<BBox>,
}

impl InstanceMask {
    pub fn new(id: u32, width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(
            bits.len() == width * height,
            Contract,
            "mask bitmap length {} != {width}x{height}",
            bits.len()
        );
        let bbox = tight_bbox(width, &bits);
        Ok(Self {
            id,
            width,
            height,
            bits,
            bbox,
        })
    }

    pub fn empty(id: u32, width: usize, height: usize) -> Self {
        Self {
            id,
            width,
            height,
            bits: vec![false; width * height],
            bbox: None,
        }
    }

    pub fn from_fn(id: u32, width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits: Vec<bool> = (0..width * height).map(|i| f(i % width, i / width)).collect();
        let bbox = tight_bbox(width, &bits);
        Self {
            id,
            width,
            height,
            bits,
            bbox,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn with_id(mut self, id: u32) -> Self {
        self.id = id;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bbox(&self) -> Option<BBox> {
        self.bbox
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bbox.is_none()
    }

    pub fn same_size(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    /// Linear indices of set pixels in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    /// `(x, y)` of set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.indices().map(move |i| (i % w, i / w))
    }

    pub fn union(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &InstanceMask) -> bool {
        self.same_size(other.width, other.height) && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    fn zip_with(&self, other: &InstanceMask, f: impl Fn(bool, bool) -> bool) -> Result<InstanceMask> {
        ensure!(
            self.same_size(other.width, other.height),
            Contract,
            "mask size {}x{} != {}x{}",
            self.width,
            self.height,
            other.width,
            other.height
        );
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect();
        InstanceMask::new(self.id, self.width, self.height, bits)
    }
}

fn tight_bbox(width: usize, bits: &[bool]) -> Option<BBox> {
    let mut bbox: Option<BBox> = None;
    for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
        let (x, y) = (i % width, i / width);
        bbox = Some(match bbox {
            None => BBox {
                x0: x,
                y0: y,
                x1: x,
                y1: y,
            },
            Some(b) => BBox {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x),
                y1: b.y1.max(y),
            },
        });
    }
    bbox
}

/// Semantic class identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bidirectional class-name table shipped next to a semantic map.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    names: BTreeMap<u32, String>,
}

impl ClassTable {
    pub fn new(entries: impl IntoIterator<Item = (u32, String)>) -> Self {
        Self {
            names: entries.into_iter().collect(),
        }
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.names.get(&id.0).map(String::as_str)
    }

    /// Name for display; unknown ids render as `class_<id>`.
    pub fn display_name(&self, id: ClassId) -> String {
        self.name(id).map(str::to_owned).unwrap_or_else(|| format!("class_{}", id.0))
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.names.iter().find(|(_, n)| n.as_str() == name).map(|(id, _)| ClassId(*id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &str)> {
        self.names.iter().map(|(id, n)| (ClassId(*id), n.as_str()))
    }
}

/// Instance mask carrying the class label won by per-pixel voting.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticInstance {
    mask: InstanceMask,
    label: ClassId,
    votes: usize,
    voted_pixels: usize,
}

impl SemanticInstance {
    /// `votes` is the winning label's pixel count out of `voted_pixels`.
    pub fn new(mask: InstanceMask, label: ClassId, votes: usize, voted_pixels: usize) -> Result<Self> {
        ensure!(
            votes <= voted_pixels,
            Contract,
            "winning votes {votes} exceed voted pixels {voted_pixels}"
        );
        Ok(Self {
            mask,
            label,
            votes,
            voted_pixels,
        })
    }

    pub fn mask(&self) -> &InstanceMask {
        &self.mask
    }

    pub fn label(&self) -> ClassId {
        self.label
    }

    pub fn votes(&self) -> usize {
        self.votes
    }

    pub fn voted_pixels(&self) -> usize {
        self.voted_pixels
    }

    pub fn label_confidence(&self) -> f64 {
        if self.voted_pixels == 0 {
            0.0
        } else {
            self.votes as f64 / self.voted_pixels as f64
        }
    }
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics", into = "RawIntrinsics")]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: RawIntrinsics) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<CameraIntrinsics> for RawIntrinsics {
    fn from(k: CameraIntrinsics) -> Self {
        RawIntrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        ensure!(
            fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite(),
            Contract,
            "focal lengths must be positive (fx={fx}, fy={fy})"
        );
        ensure!(
            (0.0..width as f64).contains(&cx) && (0.0..height as f64).contains(&cy),
            Contract,
            "principal point ({cx}, {cy}) outside {width}x{height}"
        );
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Direction through pixel coordinate `(u, v)` scaled so that z = 1.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Back-projects pixel `(u, v)` at axis depth `z`.
    pub fn unproject_pixel(&self, u: f64, v: f64, z: f64) -> Vec3 {
        self.ray(u, v) * z
    }

    /// Projects a camera-space point; `None` when it is not in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn diagonal_px(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }
}

/// Similarity transform `x -> s * R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidScaleTransform {
    scale: f64,
    rotation: Mat3,
    translation: Vec3,
}

const ROTATION_TOL: f64 = 1e-6;

impl RigidScaleTransform {
    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        ensure!(scale > 0.0 && scale.is_finite(), Contract, "scale must be positive, got {scale}");
        ensure!(translation.iter().all(|v| v.is_finite()), Contract, "translation must be finite");
        let det = rotation.determinant();
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        ensure!(
            (det - 1.0).abs() < ROTATION_TOL && ortho < ROTATION_TOL,
            Contract,
            "rotation is not proper orthonormal (det {det}, orthogonality error {ortho})"
        );
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    /// Like [`new`](Self::new) but first projects `rotation` onto SO(3).
    pub fn new_orthonormalized(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        Self::new(scale, orthonormalize(&rotation)?, translation)
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &RigidScaleTransform) -> RigidScaleTransform {
        let rotation = orthonormalize(&(self.rotation * inner.rotation)).unwrap_or(self.rotation * inner.rotation);
        RigidScaleTransform {
            scale: self.scale * inner.scale,
            rotation,
            translation: self.rotation * inner.translation * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidScaleTransform {
        let rt = self.rotation.transpose();
        RigidScaleTransform {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        Self::new(scale, self.rotation, self.translation)
    }
}

/// Nearest rotation matrix (in Frobenius norm) to `m`.
pub fn orthonormalize(m: &Mat3) -> Result<Mat3> {
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Contract("rotation SVD failed".into())),
    };
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Ok(u * d * vt)
}

/// Rotation from an axis-angle vector (Rodrigues).
pub fn rotation_from_axis_angle(w: &Vec3) -> Mat3 {
    nalgebra::Rotation3::new(*w).into_inner()
}

/// Axis-angle vector of a rotation matrix.
pub fn axis_angle_from_rotation(r: &Mat3) -> Vec3 {
    nalgebra::Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Angle in radians of the relative rotation `a^T b`.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        Some(it.fold(Aabb { min: first, max: first }, |b, p| Aabb {
            min: b.min.inf(p),
            max: b.max.sup(p),
        }))
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

/// Point set in camera (or object) space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Vec3>,
    colors: Option<Vec<Rgb>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, colors: Option<Vec<Rgb>>) -> Result<Self> {
        ensure!(
            points.iter().all(|p| p.iter().all(|v| v.is_finite())),
            Contract,
            "point coordinates must be finite"
        );
        if let Some(c) = &colors {
            ensure!(c.len() == points.len(), Contract, "{} colors for {} points", c.len(), points.len());
            ensure!(
                c.iter().flatten().all(|v| (0.0..=1.0).contains(v)),
                Contract,
                "colors must lie in [0, 1]"
            );
        }
        Ok(Self { points, colors })
    }

    pub fn from_points(points: Vec<Vec3>) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[Rgb]> {
        self.colors.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        (!self.points.is_empty()).then(|| self.points.iter().fold(Vec3::zeros(), |a, p| a + p) / self.points.len() as f64)
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(&self.points)
    }

    pub fn diagonal(&self) -> f64 {
        self.aabb().map_or(0.0, |b| b.diagonal())
    }

    pub fn transformed(&self, t: &RigidScaleTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            colors: self.colors.clone(),
        }
    }
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    colors: Option<Vec<Rgb>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>, colors: Option<Vec<Rgb>>) -> Result<Self> {
        let n = vertices.len();
        ensure!(
            vertices.iter().all(|p| p.iter().all(|v| v.is_finite())),
            Contract,
            "vertex coordinates must be finite"
        );
        for (i, f) in faces.iter().enumerate() {
            ensure!(
                f.iter().all(|&v| (v as usize) < n),
                Contract,
                "face {i} references a vertex beyond {n}"
            );
            ensure!(
                f[0] != f[1] && f[1] != f[2] && f[0] != f[2],
                Contract,
                "face {i} repeats a vertex index"
            );
        }
        if let Some(c) = &colors {
            ensure!(c.len() == n, Contract, "{} colors for {n} vertices", c.len());
        }
        Ok(Self { vertices, faces, colors })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn colors(&self) -> Option<&[Rgb]> {
        self.colors.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        (b - a).cross(&(c - a)).norm() * 0.5
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(&self.vertices)
    }

    pub fn diagonal(&self) -> f64 {
        self.aabb().map_or(0.0, |b| b.diagonal())
    }

    pub fn vertex_centroid(&self) -> Option<Vec3> {
        (!self.vertices.is_empty()).then(|| self.vertices.iter().fold(Vec3::zeros(), |a, p| a + p) / self.vertices.len() as f64)
    }

    pub fn transformed(&self, t: &RigidScaleTransform) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|p| t.apply(p)).collect(),
            faces: self.faces.clone(),
            colors: self.colors.clone(),
        }
    }

    /// Recentres the mesh on its bounding-box centre and scales it to a unit
    /// bounding-box diagonal. Returns the normalized mesh and the transform
    /// that was applied.
    pub fn normalized_unit_diagonal(&self) -> Result<(TriangleMesh, RigidScaleTransform)> {
        let bbox = self
            .aabb()
            .ok_or_else(|| Error::Degenerate("cannot normalize a mesh without vertices".into()))?;
        let diag = bbox.diagonal();
        ensure!(diag > 0.0, Degenerate, "mesh bounding box has zero diagonal");
        let s = 1.0 / diag;
        let t = RigidScaleTransform::new(s, Mat3::identity(), -bbox.center() * s)?;
        Ok((self.transformed(&t), t))
    }

    /// Appends `other`, offsetting its face indices. Colors survive only when
    /// both meshes carry them.
    pub fn append(&mut self, other: &TriangleMesh) {
        let offset = self.vertices.len() as u32;
        self.colors = match (self.colors.take(), &other.colors) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if self.vertices.is_empty() => Some(b.clone()),
            _ => None,
        };
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + offset, f[1] + offset, f[2] + offset]));
    }

    /// Axis-aligned box between `lo` and `hi` with outward-facing triangles.
    pub fn cuboid(lo: Vec3, hi: Vec3) -> TriangleMesh {
        let vertices = (0..8)
            .map(|i| {
                Vec3::new(
                    if i & 1 == 0 { lo.x } else { hi.x },
                    if i & 2 == 0 { lo.y } else { hi.y },
                    if i & 4 == 0 { lo.z } else { hi.z },
                )
            })
            .collect();
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 4],
            [1, 5, 4],
            [2, 6, 3],
            [3, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 5],
            [3, 7, 5],
        ];
        TriangleMesh {
            vertices,
            faces,
            colors: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_is_tight() {
        let m = InstanceMask::from_fn(1, 8, 6, |x, y| (2..5).contains(&x) && (1..4).contains(&y));
        assert_eq!(
            m.bbox(),
            Some(BBox {
                x0: 2,
                y0: 1,
                x1: 4,
                y1: 3
            })
        );
        assert_eq!(m.count(), 9);
        assert!(InstanceMask::empty(0, 4, 4).bbox().is_none());
    }

    #[test]
    fn image_rejects_out_of_range_values() {
        assert!(ImageBuffer::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageBuffer::new(1, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(ImageBuffer::new(2, 1, 1, vec![0.5]).is_err());
    }

    #[test]
    fn depth_rejects_nonpositive_valid() {
        assert!(DepthMap::new(1, 1, vec![0.0], vec![true]).is_err());
        assert!(DepthMap::new(1, 1, vec![0.0], vec![false]).is_ok());
    }

    #[test]
    fn intrinsics_bounds() {
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).is_ok());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
    }

    #[test]
    fn transform_inverse_and_compose() {
        let r = rotation_from_axis_angle(&Vec3::new(0.1, -0.3, 0.2));
        let t = RigidScaleTransform::new(2.5, r, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let p = Vec3::new(0.3, -0.7, 1.1);
        let back = t.inverse().apply(&t.apply(&p));
        assert!((back - p).norm() < 1e-12);
        let tt = t.compose(&t);
        assert!((tt.apply(&p) - t.apply(&t.apply(&p))).norm() < 1e-12);
    }

    #[test]
    fn transform_rejects_reflection() {
        let mut m = Mat3::identity();
        m[(0, 0)] = -1.0;
        assert!(RigidScaleTransform::new(1.0, m, Vec3::zeros()).is_err());
        assert!(RigidScaleTransform::new(0.0, Mat3::identity(), Vec3::zeros()).is_err());
    }

    #[test]
    fn mesh_rejects_bad_faces() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(TriangleMesh::new(v.clone(), vec![[0, 1, 3]], None).is_err());
        assert!(TriangleMesh::new(v.clone(), vec![[0, 1, 1]], None).is_err());
        assert!(TriangleMesh::new(v, vec![[0, 1, 2]], None).is_ok());
    }

    #[test]
    fn normalized_mesh_has_unit_diagonal() {
        let v = vec![Vec3::new(1.0, 1.0, 1.0), Vec3::new(4.0, 1.0, 1.0), Vec3::new(1.0, 5.0, 1.0)];
        let m = TriangleMesh::new(v, vec![[0, 1, 2]], None).unwrap();
        let (n, t) = m.normalized_unit_diagonal().unwrap();
        assert!((n.diagonal() - 1.0).abs() < 1e-12);
        assert!(n.aabb().unwrap().center().norm() < 1e-12);
        assert!((t.scale() - 0.2).abs() < 1e-12);
    }
}
