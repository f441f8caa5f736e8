//! Synthetic scene used by the end-to-end tests and the `fixture` command:
//! a floor, a back wall and three boxes seen by a pinhole camera, rendered
//! by ray casting into an image, depth maps, masks and ground-truth meshes.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{write_image, write_json, write_label_map, write_obj, write_pfm};
use crate::pipeline::{BackendSettings, PipelineConfig, PipelineInputs};
use crate::raycast::Bvh;
use crate::types::{CameraIntrinsics, ClassTable, DepthMap, ImageBuffer, TriangleMesh, Vec3};

/// Detail depth is the ground truth under `(z - SHIFT) / SCALE`.
pub const DETAIL_SCALE: f64 = 3.0;
pub const DETAIL_SHIFT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureObject {
    pub instance_id: u32,
    pub class_id: u32,
    pub mesh: TriangleMesh,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureScene {
    pub intrinsics: CameraIntrinsics,
    pub classes: ClassTable,
    pub objects: Vec<FixtureObject>,
}

/// Per-pixel renders of a [`FixtureScene`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub instance_ids: Vec<u32>,
    pub class_ids: Vec<u32>,
}

fn quad(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> TriangleMesh {
    TriangleMesh::new(vec![a, b, c, d], vec![[0, 1, 2], [0, 2, 3]], None).expect("valid quad")
}

impl FixtureScene {
    /// Camera 1.5 m above the floor looking at a wall 8 m away.
    pub fn standard(width: usize, height: usize) -> Result<Self> {
        let f = 80.0 * width as f64 / 96.0;
        let k = CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)?;
        let classes = ClassTable::new([
            (1, "wall".to_string()),
            (2, "floor".to_string()),
            (3, "cabinet".to_string()),
            (4, "table".to_string()),
        ]);
        let floor_y = 1.5;
        let objects = vec![
            FixtureObject {
                instance_id: 1,
                class_id: 1,
                mesh: quad(
                    Vec3::new(-5.0, -3.7, 8.0),
                    Vec3::new(5.0, -3.7, 8.0),
                    Vec3::new(5.0, floor_y, 8.0),
                    Vec3::new(-5.0, floor_y, 8.0),
                ),
                color: [0.82, 0.80, 0.74],
            },
            FixtureObject {
                instance_id: 2,
                class_id: 2,
                mesh: quad(
                    Vec3::new(-2.0, floor_y, 3.2),
                    Vec3::new(2.0, floor_y, 3.2),
                    Vec3::new(5.0, floor_y, 8.0),
                    Vec3::new(-5.0, floor_y, 8.0),
                ),
                color: [0.55, 0.40, 0.30],
            },
            FixtureObject {
                instance_id: 3,
                class_id: 3,
                mesh: TriangleMesh::cuboid(Vec3::new(-1.6, 0.7, 4.5), Vec3::new(-0.6, floor_y, 5.5)),
                color: [0.20, 0.45, 0.70],
            },
            FixtureObject {
                instance_id: 4,
                class_id: 4,
                mesh: TriangleMesh::cuboid(Vec3::new(0.3, 0.5, 5.5), Vec3::new(1.5, floor_y, 6.3)),
                color: [0.70, 0.25, 0.20],
            },
            FixtureObject {
                instance_id: 5,
                class_id: 3,
                mesh: TriangleMesh::cuboid(Vec3::new(0.0, 1.0, 4.2), Vec3::new(0.8, floor_y, 4.8)),
                color: [0.30, 0.65, 0.30],
            },
        ];
        Ok(Self {
            intrinsics: k,
            classes,
            objects,
        })
    }

    pub fn mesh(&self) -> TriangleMesh {
        let mut m = TriangleMesh::default();
        for o in &self.objects {
            m.append(&o.mesh);
        }
        m
    }

    pub fn object(&self, instance_id: u32) -> Option<&FixtureObject> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }

    /// Ray casts every pixel centre. Unhit pixels get label 0 and invalid
    /// depth.
    pub fn render(&self) -> Result<Rendered> {
        let k = &self.intrinsics;
        let (w, h) = (k.width(), k.height());
        let mesh = self.mesh();
        let mut owner = Vec::with_capacity(mesh.faces().len());
        for (i, o) in self.objects.iter().enumerate() {
            owner.extend(std::iter::repeat_n(i, o.mesh.faces().len()));
        }
        let bvh = Bvh::new(&mesh);
        let light = Vec3::new(0.3, -1.0, -0.5).normalize();
        let (mut rgb, mut depth, mut valid) = (Vec::with_capacity(w * h * 3), vec![0.0; w * h], vec![false; w * h]);
        let (mut ids, mut classes) = (vec![0u32; w * h], vec![0u32; w * h]);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let dir = k.ray(x as f64, y as f64);
                match bvh.intersect(&Vec3::zeros(), &dir, 0.0) {
                    Some(hit) => {
                        let o = &self.objects[owner[hit.face]];
                        let [a, b, c] = mesh.triangle(hit.face);
                        let n = (b - a).cross(&(c - a)).normalize();
                        let shade = 0.55 + 0.45 * n.dot(&light).abs();
                        rgb.extend(o.color.iter().map(|v| (v * shade).clamp(0.0, 1.0)));
                        depth[i] = hit.t;
                        valid[i] = true;
                        ids[i] = o.instance_id;
                        classes[i] = o.class_id;
                    }
                    None => rgb.extend_from_slice(&[0.0; 3]),
                }
            }
        }
        Ok(Rendered {
            image: ImageBuffer::new(w, h, 3, rgb)?,
            depth: DepthMap::new(w, h, depth, valid)?,
            instance_ids: ids,
            class_ids: classes,
        })
    }
}

/// Writes the fixture inputs, ground truth and a `pipeline.json` that runs
/// the full pipeline with mock backends into `<dir>/out`. Returns the
/// config path.
pub fn write_fixture(dir: &Path, width: usize, height: usize, seed: u64) -> Result<PathBuf> {
    let scene = FixtureScene::standard(width, height)?;
    let r = scene.render()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = |name: &str| dir.join(name);
    write_image(&p("image.png"), &r.image)?;
    write_label_map(&p("instances.png"), width, height, &r.instance_ids)?;
    write_label_map(&p("semantic.png"), width, height, &r.class_ids)?;
    write_json(&p("classes.json"), &scene.classes)?;
    write_json(&p("intrinsics.json"), &scene.intrinsics)?;
    write_pfm(&p("depth_coherent.pfm"), &r.depth)?;
    let detail = DepthMap::from_fn(width, height, |x, y| r.depth.get(x, y).map(|z| (z - DETAIL_SHIFT) / DETAIL_SCALE))?;
    write_pfm(&p("depth_detail.pfm"), &detail)?;
    write_obj(&p("gt_scene.obj"), &scene.mesh())?;
    let gt_dir = p("gt_instances");
    for o in scene.objects.iter().filter(|o| o.class_id >= 3) {
        write_obj(&gt_dir.join(format!("{}.obj", o.instance_id)), &o.mesh)?;
    }
    let cfg = PipelineConfig {
        inputs: PipelineInputs {
            image: "image.png".into(),
            instances: "instances.png".into(),
            semantic: "semantic.png".into(),
            classes: "classes.json".into(),
            intrinsics: "intrinsics.json".into(),
            depth_detail: "depth_detail.pfm".into(),
            depth_coherent: "depth_coherent.pfm".into(),
            gt_mesh: Some("gt_scene.obj".into()),
            gt_instances: Some("gt_instances".into()),
        },
        output_root: "out".into(),
        seed,
        backend: BackendSettings {
            root: None,
            inline_mocks: true,
        },
        ..PipelineConfig::default()
    };
    let path = p("pipeline.json");
    write_json(&path, &cfg)?;
    Ok(path)
}
