//! Ray/triangle intersection with a bounding volume hierarchy.

use crate::types::{TriangleMesh, Vec3};

const LEAF_SIZE: usize = 4;

/// Nearest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter: hit point is `origin + t * dir`.
    pub t: f64,
    pub face: usize,
}

/// Two-sided Möller–Trumbore test. Returns the ray parameter of the hit if
/// it is greater than `t_min`.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3], t_min: f64) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > t_min).then_some(t)
}

#[derive(Debug, Clone)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    // Leaf: range into `order`; inner: children indices.
    kind: NodeKind,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Inner { left: usize, right: usize },
}

/// Static BVH over the triangles of a mesh.
#[derive(Debug, Clone)]
pub struct Bvh {
    triangles: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl Bvh {
    pub fn new(mesh: &TriangleMesh) -> Self {
        Self::from_triangles((0..mesh.faces().len()).map(|f| mesh.triangle(f)).collect())
    }

    pub fn from_triangles(triangles: Vec<[Vec3; 3]>) -> Self {
        let mut bvh = Self {
            order: (0..triangles.len()).collect(),
            triangles,
            nodes: Vec::new(),
        };
        if !bvh.triangles.is_empty() {
            let centroids: Vec<Vec3> = bvh.triangles.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
            bvh.build(0, bvh.triangles.len(), &centroids);
        }
        bvh
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn bounds(&self, start: usize, end: usize) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &f in &self.order[start..end] {
            for v in &self.triangles[f] {
                lo = lo.inf(v);
                hi = hi.sup(v);
            }
        }
        (lo, hi)
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Vec3]) -> usize {
        let (lo, hi) = self.bounds(start, end);
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            kind: NodeKind::Leaf { start, end },
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let extent = hi - lo;
        let axis = extent.imax();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let left = self.build(start, mid, centroids);
        let right = self.build(mid, end, centroids);
        self.nodes[id].kind = NodeKind::Inner { left, right };
        id
    }

    fn slab(node: &Node, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let near = (node.lo[a] - origin[a]) * inv_dir[a];
            let far = (node.hi[a] - origin[a]) * inv_dir[a];
            let (near, far) = if near <= far { (near, far) } else { (far, near) };
            // NaN (0 * inf) means the ray lies in the slab plane; keep the box.
            if near.is_nan() || far.is_nan() {
                continue;
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 * (1.0 + 1e-12) + 1e-12 {
                return false;
            }
        }
        true
    }

    /// Nearest hit with `t > t_min`; equal distances resolve to the lower face
    /// index so results do not depend on traversal order.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv_dir = dir.map(|d| 1.0 / d);
        let mut best: Option<Hit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let t_max = best.map_or(f64::INFINITY, |h| h.t);
            if !Self::slab(node, origin, &inv_dir, t_max) {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, end } => {
                    for &f in &self.order[start..end] {
                        if let Some(t) = ray_triangle(origin, dir, &self.triangles[f], t_min) {
                            let better = match best {
                                None => true,
                                Some(b) => t < b.t || (t == b.t && f < b.face),
                            };
                            if better {
                                best = Some(Hit { t, face: f });
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hits_triangle_interior_and_misses_outside() {
        let tri = [Vec3::new(-1.0, -1.0, 2.0), Vec3::new(1.0, -1.0, 2.0), Vec3::new(0.0, 1.0, 2.0)];
        let o = Vec3::zeros();
        assert_eq!(ray_triangle(&o, &Vec3::new(0.0, 0.0, 1.0), &tri, 0.0), Some(2.0));
        assert_eq!(ray_triangle(&o, &Vec3::new(0.0, 0.0, -1.0), &tri, 0.0), None);
        assert_eq!(ray_triangle(&o, &Vec3::new(2.0, 0.0, 1.0), &tri, 0.0), None);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..4.0));
        let tris: Vec<[Vec3; 3]> = (0..300).map(|_| [v(), v(), v()]).collect();
        let bvh = Bvh::from_triangles(tris.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let d = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 1.0);
            let brute = tris
                .iter()
                .enumerate()
                .filter_map(|(f, t)| ray_triangle(&Vec3::zeros(), &d, t, 0.0).map(|t| (t, f)))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got = bvh.intersect(&Vec3::zeros(), &d, 0.0).map(|h| (h.t, h.face));
            assert_eq!(got, brute);
        }
    }

    #[test]
    fn axis_parallel_rays() {
        let tri = [Vec3::new(-1.0, -1.0, 3.0), Vec3::new(1.0, -1.0, 3.0), Vec3::new(-1.0, 1.0, 3.0)];
        let bvh = Bvh::from_triangles(vec![tri]);
        let h = bvh.intersect(&Vec3::new(-0.5, -0.5, 0.0), &Vec3::new(0.0, 0.0, 1.0), 0.0).unwrap();
        assert_eq!((h.t, h.face), (3.0, 0));
        assert!(Bvh::from_triangles(vec![]).intersect(&Vec3::zeros(), &Vec3::z(), 0.0).is_none());
    }
}
