//! Staged, cached orchestration: analyze, amodal (with backend jobs),
//! compose and eval.
//!
//! Every stage writes into `<output_root>/<stage>/` and finishes by writing
//! `stage.json` with a content-hash cache key over its configuration and
//! input bytes. Rerunning a stage whose key is unchanged and whose artifacts
//! are present is a cache hit. Stage files hold no timings and no absolute
//! paths, so identical inputs give byte-identical trees.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amodal::{make_request, AmodalConfig};
use crate::backend::{default_mocks, rgba_pack, run_mocks, BackendJob, BackendRegistry, JobKind, JobStatus, BACKEND_ROOT_ENV};
use crate::camera::lift_surface;
use crate::compose::{compose_scene, place_instance, ManifestInstance, PlacedInstance, PlacementConfig, PoseRecord, SceneManifest};
use crate::depthfuse::{fuse, structure_weights, FuseConfig};
use crate::error::{ensure, Error, Result};
use crate::io::{
    atomic_write, read_bytes, read_depth, read_image, read_indexed_masks, read_json, read_label_map, read_mesh, read_pfm,
    write_binary_mask, write_image, write_indexed_masks, write_json, write_obj, write_pfm,
};
use crate::maskfuse::{classify_background, fuse_semantics, resolve_classes, MaskFuseConfig, SemanticMap};
use crate::metrics::{evaluate_meshes, EvalReport, MetricsConfig};
use crate::types::{CameraIntrinsics, ClassId, ClassTable, DepthMap, InstanceMask, RigidScaleTransform, SemanticInstance, TriangleMesh};

pub const STAGE_SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "SCENEKIT_SEED";
pub const WORKERS_ENV: &str = "SCENEKIT_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Analyze,
    Amodal,
    Compose,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Analyze, Stage::Amodal, Stage::Compose, Stage::Eval];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Analyze => "analyze",
            Stage::Amodal => "amodal",
            Stage::Compose => "compose",
            Stage::Eval => "eval",
        }
    }

    pub fn upstream(&self) -> Option<Stage> {
        match self {
            Stage::Analyze => None,
            Stage::Amodal => Some(Stage::Analyze),
            Stage::Compose => Some(Stage::Amodal),
            Stage::Eval => Some(Stage::Compose),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evaluate" => Ok(Stage::Eval),
            _ => Stage::ALL
                .into_iter()
                .find(|st| st.as_str() == s)
                .ok_or_else(|| Error::Validation(format!("unknown stage `{s}`"))),
        }
    }
}

/// Input files. Relative paths resolve against the config file directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineInputs {
    pub image: PathBuf,
    /// Indexed PNG of class-agnostic instances (0 = none).
    pub instances: PathBuf,
    /// Label map PNG of semantic classes.
    pub semantic: PathBuf,
    pub classes: PathBuf,
    pub intrinsics: PathBuf,
    pub depth_detail: PathBuf,
    pub depth_coherent: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mesh: Option<PathBuf>,
    /// Directory of `<instance_id>.obj` ground-truth meshes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_instances: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSettings {
    /// Job root; defaults to `$SCENEKIT_BACKEND_ROOT`, then
    /// `<output_root>/backend`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Serve pending jobs with the built-in mocks instead of waiting for an
    /// external backend.
    pub inline_mocks: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub inputs: PipelineInputs,
    pub output_root: PathBuf,
    /// Root seed; overrides the per-module seeds.
    pub seed: u64,
    pub maskfuse: MaskFuseConfig,
    pub fuse: FuseConfig,
    pub amodal: AmodalConfig,
    pub placement: PlacementConfig,
    pub metrics: MetricsConfig,
    pub backend: BackendSettings,
    /// Worker threads for per-instance work; `None` uses all cores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Compose even when some poses did not converge.
    pub force: bool,
}

impl PipelineConfig {
    /// Reads a config file and resolves relative paths against its
    /// directory. `SCENEKIT_SEED` and `SCENEKIT_WORKERS` override the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let r = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let i = &mut self.inputs;
        for p in [
            &mut i.image,
            &mut i.instances,
            &mut i.semantic,
            &mut i.classes,
            &mut i.intrinsics,
            &mut i.depth_detail,
            &mut i.depth_coherent,
        ] {
            r(p);
        }
        for p in [i.gt_mesh.as_mut(), i.gt_instances.as_mut(), self.backend.root.as_mut()]
            .into_iter()
            .flatten()
        {
            r(p);
        }
        r(&mut self.output_root);
    }

    fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .parse()
                .map_err(|_| Error::Validation(format!("{SEED_ENV}={s} is not an integer")))?;
        }
        if let Ok(s) = std::env::var(WORKERS_ENV) {
            self.workers = Some(
                s.parse()
                    .map_err(|_| Error::Validation(format!("{WORKERS_ENV}={s} is not an integer")))?,
            );
        }
        Ok(())
    }

    /// Module configs with the root seed applied.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.amodal.seed = self.seed;
        c.placement.refine.seed = self.seed;
        c.metrics.seed = self.seed;
        c
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.output_root.join(stage.as_str())
    }

    pub fn backend_registry(&self) -> BackendRegistry {
        match &self.backend.root {
            Some(r) => BackendRegistry::new(r),
            None => BackendRegistry::from_env(self.output_root.join("backend")),
        }
    }
}

/// Contents of `<stage>/stage.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub schema_version: u32,
    pub stage: Stage,
    pub cache_key: String,
    pub seed: u64,
    /// Paths relative to the output root.
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
}

/// What a stage run did. Timings live only here, never on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub cache_hit: bool,
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

fn hasher(stage: Stage, cfg: &impl Serialize, seed: u64) -> Result<Sha256> {
    let mut h = Sha256::new();
    h.update(stage.as_str().as_bytes());
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(cfg)?);
    Ok(h)
}

fn hash_file(h: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = read_bytes(path)?;
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(&bytes);
    Ok(())
}

fn hash_artifacts(h: &mut Sha256, root: &Path, rec: &StageRecord) -> Result<()> {
    h.update(rec.cache_key.as_bytes());
    for a in &rec.artifacts {
        h.update(a.as_bytes());
        hash_file(h, &root.join(a))?;
    }
    Ok(())
}

fn finish(h: Sha256) -> String {
    hex::encode(h.finalize())
}

pub fn read_stage_record(cfg: &PipelineConfig, stage: Stage) -> Result<Option<StageRecord>> {
    let p = cfg.stage_dir(stage).join("stage.json");
    if p.is_file() {
        read_json(&p).map(Some)
    } else {
        Ok(None)
    }
}

fn require_upstream(cfg: &PipelineConfig, stage: Stage) -> Result<StageRecord> {
    let p = cfg.stage_dir(stage).join("stage.json");
    match read_stage_record(cfg, stage)? {
        Some(r) if r.artifacts.iter().all(|a| cfg.output_root.join(a).is_file()) => Ok(r),
        _ => Err(Error::MissingStage {
            stage: stage.as_str().to_string(),
            artifact: p,
        }),
    }
}

fn cached(cfg: &PipelineConfig, stage: Stage, key: &str) -> Result<Option<StageRecord>> {
    Ok(read_stage_record(cfg, stage)?.filter(|r| r.cache_key == key && r.artifacts.iter().all(|a| cfg.output_root.join(a).is_file())))
}

struct Outputs<'a> {
    root: &'a Path,
    artifacts: Vec<String>,
    warnings: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(root: &'a Path) -> Self {
        Self {
            root,
            artifacts: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn path(&mut self, rel: &str) -> PathBuf {
        self.artifacts.push(rel.to_string());
        self.root.join(rel)
    }
}

fn clear_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs one stage, or reuses its outputs when the cache key matches.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<StageReport> {
    let start = Instant::now();
    let cfg = cfg.seeded();
    let key = match stage {
        Stage::Analyze => analyze_key(&cfg)?,
        Stage::Amodal => amodal_key(&cfg)?,
        Stage::Compose => compose_key(&cfg)?,
        Stage::Eval => eval_key(&cfg)?,
    };
    if let Some(rec) = cached(&cfg, stage, &key)? {
        return Ok(StageReport {
            stage,
            cache_hit: true,
            artifacts: rec.artifacts,
            warnings: rec.warnings,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    clear_dir(&cfg.stage_dir(stage))?;
    let mut out = Outputs::new(&cfg.output_root);
    match stage {
        Stage::Analyze => analyze(&cfg, &mut out)?,
        Stage::Amodal => amodal(&cfg, &mut out)?,
        Stage::Compose => compose(&cfg, &mut out)?,
        Stage::Eval => evaluate(&cfg, &mut out)?,
    }
    out.artifacts.sort();
    let rec = StageRecord {
        schema_version: STAGE_SCHEMA_VERSION,
        stage,
        cache_key: key,
        seed: cfg.seed,
        artifacts: out.artifacts,
        warnings: out.warnings,
    };
    write_json(&cfg.stage_dir(stage).join("stage.json"), &rec)?;
    Ok(StageReport {
        stage,
        cache_hit: false,
        artifacts: rec.artifacts,
        warnings: rec.warnings,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every stage in order up to and including `last`.
pub fn run_through(last: Stage, cfg: &PipelineConfig) -> Result<Vec<StageReport>> {
    Stage::ALL.into_iter().filter(|s| *s <= last).map(|s| run_stage(s, cfg)).collect()
}

// ---- analyze ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceRole {
    Foreground,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: u32,
    pub label: ClassId,
    pub class_name: String,
    pub role: InstanceRole,
    pub votes: usize,
    pub voted_pixels: usize,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeManifest {
    pub width: usize,
    pub height: usize,
    pub instances: Vec<InstanceRecord>,
    pub depth_scale: f64,
    pub depth_shift: f64,
    pub depth_final_loss: f64,
}

fn analyze_key(cfg: &PipelineConfig) -> Result<String> {
    let mut h = hasher(Stage::Analyze, &(&cfg.maskfuse, &cfg.fuse), cfg.seed)?;
    let i = &cfg.inputs;
    for p in [
        &i.image,
        &i.instances,
        &i.semantic,
        &i.classes,
        &i.intrinsics,
        &i.depth_detail,
        &i.depth_coherent,
    ] {
        ensure!(p.is_file(), Validation, "input {} does not exist", p.display());
        hash_file(&mut h, p)?;
    }
    Ok(finish(h))
}

fn analyze(cfg: &PipelineConfig, out: &mut Outputs) -> Result<()> {
    let i = &cfg.inputs;
    let k: CameraIntrinsics = read_json(&i.intrinsics)?;
    let (w, h) = (k.width(), k.height());
    let masks = read_indexed_masks(&i.instances)?;
    ensure!(!masks.is_empty(), Validation, "{} holds no instances", i.instances.display());
    let (sw, sh, labels) = read_label_map(&i.semantic)?;
    let semantic = SemanticMap::new(
        sw,
        sh,
        labels.into_iter().map(ClassId).collect(),
        ClassId(cfg.maskfuse.ignore_label),
    )?;
    let classes: ClassTable = read_json(&i.classes)?;
    let instances = fuse_semantics(&masks, &semantic)?;
    let detail = read_depth(&i.depth_detail)?;
    let coherent = read_depth(&i.depth_coherent)?;
    ensure!(
        detail.same_size(w, h) && coherent.same_size(w, h) && masks[0].same_size(w, h),
        Validation,
        "inputs do not all match the {w}x{h} camera"
    );
    let flat = resolve_classes(&classes, &cfg.maskfuse.flat_classes);
    let weights = structure_weights(&instances, w, h, &flat, cfg.fuse.w_flat, cfg.fuse.w_detail)?;
    let fused = fuse(&detail, &coherent, &weights, &cfg.fuse)?;
    write_pfm(&out.path("analyze/fused_depth.pfm"), &fused.depth)?;
    write_indexed_masks(&out.path("analyze/instances.png"), w, h, &masks)?;

    let bg_classes = resolve_classes(&classes, &cfg.maskfuse.background_classes);
    let bg_ids: BTreeSet<u32> = classify_background(instances.clone(), &bg_classes)
        .1
        .iter()
        .map(|s| s.mask().id())
        .collect();
    let records = instances
        .iter()
        .map(|s| InstanceRecord {
            instance_id: s.mask().id(),
            label: s.label(),
            class_name: classes.display_name(s.label()),
            role: if bg_ids.contains(&s.mask().id()) {
                InstanceRole::Background
            } else {
                InstanceRole::Foreground
            },
            votes: s.votes(),
            voted_pixels: s.voted_pixels(),
            pixels: s.mask().count(),
        })
        .collect::<Vec<_>>();
    for r in records.iter().filter(|r| r.voted_pixels == 0) {
        out.warnings.push(format!("instance {} has no semantic votes", r.instance_id));
    }
    write_json(
        &out.path("analyze/instances.json"),
        &AnalyzeManifest {
            width: w,
            height: h,
            instances: records,
            depth_scale: fused.alignment.scale,
            depth_shift: fused.alignment.shift,
            depth_final_loss: fused.alignment.final_loss,
        },
    )
}

/// Outputs of the analyze stage, reloaded.
struct Analysis {
    k: CameraIntrinsics,
    depth: DepthMap,
    instances: Vec<SemanticInstance>,
    foreground: Vec<u32>,
    classes: ClassTable,
}

fn load_analysis(cfg: &PipelineConfig) -> Result<Analysis> {
    let dir = cfg.stage_dir(Stage::Analyze);
    let manifest: AnalyzeManifest = read_json(&dir.join("instances.json"))?;
    let masks = read_indexed_masks(&dir.join("instances.png"))?;
    let instances = manifest
        .instances
        .iter()
        .map(|r| {
            let mask = masks
                .iter()
                .find(|m| m.id() == r.instance_id)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("instance {} missing from instances.png", r.instance_id)))?;
            SemanticInstance::new(mask, r.label, r.votes, r.voted_pixels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Analysis {
        k: read_json(&cfg.inputs.intrinsics)?,
        depth: read_pfm(&dir.join("fused_depth.pfm"))?,
        foreground: manifest
            .instances
            .iter()
            .filter(|r| r.role == InstanceRole::Foreground)
            .map(|r| r.instance_id)
            .collect(),
        instances,
        classes: read_json(&cfg.inputs.classes)?,
    })
}

fn union_of<'a>(w: usize, h: usize, masks: impl IntoIterator<Item = &'a InstanceMask>) -> Result<InstanceMask> {
    masks.into_iter().try_fold(InstanceMask::empty(0, w, h), |acc, m| acc.union(m))
}

// ---- amodal + backend jobs ----

/// Per-instance record written by the amodal stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmodalInstance {
    pub instance_id: u32,
    pub prompt: String,
    pub canvas_offset: [usize; 2],
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inpaint_job: Option<String>,
    pub mesh_job: String,
    pub mesh: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmodalManifest {
    pub instances: Vec<AmodalInstance>,
    pub defurnish_job: String,
    pub room_depth_job: String,
    pub room_depth: String,
}

fn amodal_key(cfg: &PipelineConfig) -> Result<String> {
    let up = require_upstream(cfg, Stage::Analyze)?;
    let mut h = hasher(Stage::Amodal, &(&cfg.amodal, cfg.backend.inline_mocks), cfg.seed)?;
    hash_artifacts(&mut h, &cfg.output_root, &up)?;
    hash_file(&mut h, &cfg.inputs.image)?;
    hash_file(&mut h, &cfg.inputs.classes)?;
    hash_file(&mut h, &cfg.inputs.intrinsics)?;
    Ok(finish(h))
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    atomic_write(to, &read_bytes(from)?)
}

/// Serves pending jobs with mocks when configured, then insists that every
/// job in `ids` is done.
fn settle(cfg: &PipelineConfig, reg: &BackendRegistry, ids: &[String]) -> Result<()> {
    if cfg.backend.inline_mocks {
        let mocks = default_mocks();
        for id in ids {
            if reg.poll(id)? == JobStatus::Pending {
                run_mocks(&mocks, &reg.job(id)?)?;
            }
        }
    }
    let mut pending = Vec::new();
    for id in ids {
        match reg.poll(id)? {
            JobStatus::Done => {}
            JobStatus::Pending => pending.push(id.clone()),
            JobStatus::Failed(d) => return Err(Error::Backend(format!("job {id} failed: {d}"))),
        }
    }
    ensure!(
        pending.is_empty(),
        Backend,
        "{} backend job(s) pending under {} ({}); run a backend or `mock-backends`, then rerun this stage",
        pending.len(),
        reg.root().display(),
        pending.join(", ")
    );
    Ok(())
}

fn amodal(cfg: &PipelineConfig, out: &mut Outputs) -> Result<()> {
    let a = load_analysis(cfg)?;
    let image = read_image(&cfg.inputs.image)?;
    let (w, h) = (a.k.width(), a.k.height());
    let reg = cfg.backend_registry();
    let jobs = reg.root().join("jobs");
    let all_masks: Vec<InstanceMask> = a.instances.iter().map(|s| s.mask().clone()).collect();
    let fg: Vec<&SemanticInstance> = a.instances.iter().filter(|s| a.foreground.contains(&s.mask().id())).collect();

    // Inpainting and defurnishing.
    let mut inpaint_ids = Vec::new();
    let mut requests = Vec::new();
    for inst in &fg {
        let req = make_request(inst, &all_masks, &a.depth, &image, &a.classes, &cfg.amodal)?;
        let id = inst.mask().id();
        let job = if req.skip {
            None
        } else {
            let dir = jobs.join(format!("inpaint_{id}"));
            req.write_dir(&dir.join("in"))?;
            let job_id = reg.submit(BackendJob::new(JobKind::AmodalInpaint, dir.join("in"), dir.join("out")))?;
            inpaint_ids.push(job_id.clone());
            Some(job_id)
        };
        requests.push((req, job));
    }
    let fg_union = union_of(w, h, fg.iter().map(|s| s.mask()))?;
    let room_dir = jobs.join("defurnish");
    write_image(&room_dir.join("in/rgba.png"), &rgba_pack(&image, &fg_union)?)?;
    let defurnish_id = reg.submit(BackendJob::new(JobKind::Defurnish, room_dir.join("in"), room_dir.join("out")))?;
    inpaint_ids.push(defurnish_id.clone());
    settle(cfg, &reg, &inpaint_ids)?;

    // Image-to-3D per instance and metric depth of the empty room. The
    // depth and mask files are hints that mock backends rely on.
    let mut mesh_ids = Vec::new();
    let mut records = Vec::new();
    for (req, inpaint_job) in &requests {
        let id = req.instance.mask().id();
        let dir = jobs.join(format!("mesh_{id}"));
        let inp = dir.join("in");
        let view = match inpaint_job {
            Some(_) => jobs.join(format!("inpaint_{id}/out/completed.png")),
            None => cfg.inputs.image.clone(),
        };
        copy_file(&view, &inp.join("image.png"))?;
        write_binary_mask(&inp.join("mask.png"), req.instance.mask())?;
        write_pfm(&inp.join("depth.pfm"), &a.depth)?;
        write_json(&inp.join("intrinsics.json"), &a.k)?;
        let mesh_job = reg.submit(BackendJob::new(JobKind::ImageTo3d, inp, dir.join("out")))?;
        mesh_ids.push(mesh_job.clone());
        let stage_dir = format!("amodal/instances/{id}");
        if !req.skip {
            copy_file(&view, &out.path(&format!("{stage_dir}/completed.png")))?;
            write_binary_mask(&out.path(&format!("{stage_dir}/inpaint_mask.png")), &req.refined_mask)?;
        }
        records.push(AmodalInstance {
            instance_id: id,
            prompt: req.prompt.clone(),
            canvas_offset: req.canvas_offset,
            skipped: req.skip,
            inpaint_job: inpaint_job.clone(),
            mesh_job,
            mesh: format!("{stage_dir}/mesh.obj"),
        });
    }
    let depth_dir = jobs.join("room_depth");
    copy_file(&room_dir.join("out/empty_room.png"), &depth_dir.join("in/image.png"))?;
    let bg_hint = DepthMap::from_fn(w, h, |x, y| if fg_union.contains(x, y) { None } else { a.depth.get(x, y) })?;
    write_pfm(&depth_dir.join("in/depth.pfm"), &bg_hint)?;
    let room_depth_job = reg.submit(BackendJob::new(JobKind::DepthCoherent, depth_dir.join("in"), depth_dir.join("out")))?;
    mesh_ids.push(room_depth_job.clone());
    settle(cfg, &reg, &mesh_ids)?;

    for r in &records {
        copy_file(&jobs.join(format!("mesh_{}/out/mesh.obj", r.instance_id)), &out.path(&r.mesh))?;
    }
    copy_file(&room_dir.join("out/empty_room.png"), &out.path("amodal/empty_room.png"))?;
    copy_file(&depth_dir.join("out/depth.pfm"), &out.path("amodal/room_depth.pfm"))?;
    write_json(
        &out.path("amodal/amodal.json"),
        &AmodalManifest {
            instances: records,
            defurnish_job: defurnish_id,
            room_depth_job,
            room_depth: "amodal/room_depth.pfm".into(),
        },
    )
}

// ---- compose ----

fn compose_key(cfg: &PipelineConfig) -> Result<String> {
    let up = require_upstream(cfg, Stage::Amodal)?;
    let analyze = require_upstream(cfg, Stage::Analyze)?;
    let mut h = hasher(Stage::Compose, &(&cfg.placement, cfg.force), cfg.seed)?;
    hash_artifacts(&mut h, &cfg.output_root, &analyze)?;
    hash_artifacts(&mut h, &cfg.output_root, &up)?;
    hash_file(&mut h, &cfg.inputs.intrinsics)?;
    Ok(finish(h))
}

fn worker_pool(cfg: &PipelineConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Validation(format!("cannot build worker pool: {e}")))
}

fn compose(cfg: &PipelineConfig, out: &mut Outputs) -> Result<()> {
    let a = load_analysis(cfg)?;
    let manifest: AmodalManifest = read_json(&cfg.stage_dir(Stage::Amodal).join("amodal.json"))?;
    let (w, h) = (a.k.width(), a.k.height());
    let fg_masks: Vec<InstanceMask> = a
        .instances
        .iter()
        .filter(|s| a.foreground.contains(&s.mask().id()))
        .map(|s| s.mask().clone())
        .collect();
    let placements = worker_pool(cfg)?.install(|| {
        manifest
            .instances
            .par_iter()
            .map(|rec| {
                let mask = fg_masks
                    .iter()
                    .find(|m| m.id() == rec.instance_id)
                    .ok_or_else(|| Error::Validation(format!("instance {} is not a foreground instance", rec.instance_id)))?;
                let ignore = union_of(w, h, fg_masks.iter().filter(|m| m.id() != rec.instance_id))?;
                let mesh = read_mesh(&cfg.output_root.join(&rec.mesh))?;
                let p = place_instance(&mesh, &a.depth, mask, Some(&ignore), &a.k, &cfg.placement)?;
                Ok((rec.instance_id, p))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let room_depth = read_pfm(&cfg.output_root.join(&manifest.room_depth))?;
    let background = match lift_surface(&room_depth, None, &a.k) {
        Ok(m) => m,
        Err(Error::Degenerate(msg)) => {
            out.warnings.push(format!("no background geometry: {msg}"));
            TriangleMesh::default()
        }
        Err(e) => return Err(e),
    };
    let placed: Vec<PlacedInstance> = placements
        .iter()
        .map(|(id, p)| PlacedInstance {
            instance_id: *id,
            mesh: p.local_mesh.clone(),
            pose: p.pose.clone(),
        })
        .collect();
    for p in placed.iter().filter(|p| !p.pose.converged) {
        out.warnings.push(format!(
            "pose of instance {} did not converge (final loss {})",
            p.instance_id,
            p.pose.final_loss()
        ));
    }
    let scene = compose_scene(&background, &placed, cfg.force)?;
    let mut instances = Vec::new();
    for p in &placed {
        let rel = format!("compose/instances/{}.obj", p.instance_id);
        write_obj(&out.path(&rel), &p.mesh)?;
        instances.push(ManifestInstance {
            instance_id: p.instance_id,
            mesh_path: rel,
            pose: PoseRecord::from(&p.pose.transform),
            converged: p.pose.converged,
            final_loss: p.pose.final_loss(),
        });
    }
    write_obj(&out.path("compose/background.obj"), &background)?;
    write_obj(&out.path("compose/scene.obj"), &scene.mesh)?;
    write_json(&out.path("compose/provenance.json"), &scene.provenance)?;
    write_json(
        &out.path("compose/scene.json"),
        &SceneManifest {
            schema_version: 1,
            instances,
        },
    )
}

// ---- eval ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<EvalReport>,
    pub instances: Vec<NamedReport>,
}

impl MetricsSummary {
    pub fn to_csv(&self) -> String {
        let mut s = format!("name,{}\n", EvalReport::csv_header());
        if let Some(r) = &self.scene {
            s.push_str(&format!("scene,{}\n", r.csv_row()));
        }
        for n in &self.instances {
            s.push_str(&format!("{},{}\n", n.name, n.report.csv_row()));
        }
        s
    }

    /// Writes `eval/metrics.json` and `eval/metrics.csv` under `root`.
    pub fn write(&self, root: &Path) -> Result<Vec<String>> {
        write_json(&root.join("eval/metrics.json"), self)?;
        atomic_write(&root.join("eval/metrics.csv"), self.to_csv().as_bytes())?;
        Ok(vec!["eval/metrics.csv".into(), "eval/metrics.json".into()])
    }
}

fn eval_key(cfg: &PipelineConfig) -> Result<String> {
    let up = require_upstream(cfg, Stage::Compose)?;
    let mut h = hasher(Stage::Eval, &cfg.metrics, cfg.seed)?;
    hash_artifacts(&mut h, &cfg.output_root, &up)?;
    if let Some(g) = &cfg.inputs.gt_mesh {
        hash_file(&mut h, g)?;
    }
    if let Some(dir) = &cfg.inputs.gt_instances {
        for p in sorted_objs(dir)? {
            h.update(
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
                    .as_bytes(),
            );
            hash_file(&mut h, &p)?;
        }
    }
    Ok(finish(h))
}

fn sorted_objs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "obj"))
        .collect();
    v.sort();
    Ok(v)
}

fn evaluate(cfg: &PipelineConfig, out: &mut Outputs) -> Result<()> {
    // Composed geometry is already in the camera frame of the ground truth.
    let mcfg = MetricsConfig {
        align: false,
        ..cfg.metrics.clone()
    };
    let scene_mesh = read_mesh(&cfg.output_root.join("compose/scene.obj"))?;
    let manifest: SceneManifest = read_json(&cfg.output_root.join("compose/scene.json"))?;
    let mut summary = MetricsSummary::default();
    if let Some(g) = &cfg.inputs.gt_mesh {
        summary.scene = Some(evaluate_meshes(&scene_mesh, &read_mesh(g)?, &mcfg)?);
    }
    if let Some(dir) = &cfg.inputs.gt_instances {
        for inst in &manifest.instances {
            let gt_path = dir.join(format!("{}.obj", inst.instance_id));
            if !gt_path.is_file() {
                out.warnings.push(format!("no ground truth for instance {}", inst.instance_id));
                continue;
            }
            let pose = RigidScaleTransform::try_from(&inst.pose)?;
            let pred = read_mesh(&cfg.output_root.join(&inst.mesh_path))?.transformed(&pose);
            summary.instances.push(NamedReport {
                name: format!("instance_{}", inst.instance_id),
                report: evaluate_meshes(&pred, &read_mesh(&gt_path)?, &mcfg)?,
            });
        }
    }
    if summary.scene.is_none() && summary.instances.is_empty() {
        out.warnings.push("no ground truth configured; metrics are empty".into());
    }
    for a in summary.write(&cfg.output_root)? {
        out.artifacts.push(a);
    }
    Ok(())
}

// ---- report ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub instance_id: u32,
    pub converged: bool,
    pub final_loss: f64,
    pub scale: f64,
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<Stage>,
    pub poses: Vec<PoseRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsSummary>,
    pub warnings: Vec<String>,
}

/// Summary of whatever stages have completed under `output_root`.
pub fn report(output_root: &Path) -> Result<PipelineReport> {
    let mut r = PipelineReport::default();
    for s in Stage::ALL {
        let p = output_root.join(s.as_str()).join("stage.json");
        if p.is_file() {
            let rec: StageRecord = read_json(&p)?;
            r.stages.push(s);
            r.warnings.extend(rec.warnings.into_iter().map(|w| format!("{s}: {w}")));
        }
    }
    let scene = output_root.join("compose/scene.json");
    if r.stages.contains(&Stage::Compose) && scene.is_file() {
        let m: SceneManifest = read_json(&scene)?;
        r.poses = m
            .instances
            .iter()
            .map(|i| PoseRow {
                instance_id: i.instance_id,
                converged: i.converged,
                final_loss: i.final_loss,
                scale: i.pose.s,
                translation: i.pose.t,
            })
            .collect();
    }
    let metrics = output_root.join("eval/metrics.json");
    if metrics.is_file() {
        r.metrics = Some(read_json(&metrics)?);
    }
    Ok(r)
}

impl PipelineReport {
    pub fn to_text(&self) -> String {
        if self.stages.is_empty() && self.metrics.is_none() {
            return "no stages complete\n".into();
        }
        let mut s = String::new();
        if !self.stages.is_empty() {
            let names: Vec<&str> = self.stages.iter().map(|s| s.as_str()).collect();
            s.push_str(&format!("stages complete: {}\n", names.join(", ")));
        }
        if !self.poses.is_empty() {
            s.push_str("\nposes\n");
            s.push_str(&format!(
                "{:>8}  {:>9}  {:>12}  {:>8}  {:>26}\n",
                "instance", "converged", "final_loss", "scale", "translation"
            ));
            for p in &self.poses {
                s.push_str(&format!(
                    "{:>8}  {:>9}  {:>12.4e}  {:>8.4}  ({:>7.3}, {:>7.3}, {:>7.3})\n",
                    p.instance_id, p.converged, p.final_loss, p.scale, p.translation[0], p.translation[1], p.translation[2]
                ));
            }
        }
        if let Some(m) = &self.metrics {
            s.push_str("\nmetrics\n");
            s.push_str(&format!(
                "{:<14}  {:>10}  {:>8}  {:>9}  {:>8}\n",
                "name", "chamfer", "fscore", "precision", "recall"
            ));
            let rows = m
                .scene
                .iter()
                .map(|r| ("scene".to_string(), r))
                .chain(m.instances.iter().map(|n| (n.name.clone(), &n.report)));
            for (name, r) in rows {
                s.push_str(&format!(
                    "{:<14}  {:>10.5}  {:>8.4}  {:>9.4}  {:>8.4}\n",
                    name, r.chamfer, r.fscore, r.precision, r.recall
                ));
            }
        }
        if !self.warnings.is_empty() {
            s.push_str("\nwarnings\n");
            for w in &self.warnings {
                s.push_str(&format!("- {w}\n"));
            }
        }
        s
    }
}

/// Environment variables that override configuration.
pub const ENV_OVERRIDES: [&str; 3] = [SEED_ENV, WORKERS_ENV, BACKEND_ROOT_ENV];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("evaluate".parse::<Stage>().unwrap(), Stage::Eval);
        assert!("render".parse::<Stage>().is_err());
        assert_eq!(Stage::Compose.upstream(), Some(Stage::Amodal));
    }

    #[test]
    fn empty_root_reports_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let r = report(tmp.path()).unwrap();
        assert_eq!(r.to_text(), "no stages complete\n");
    }

    #[test]
    fn compose_before_amodal_names_amodal() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            output_root: tmp.path().to_path_buf(),
            ..Default::default()
        };
        match run_stage(Stage::Compose, &cfg).unwrap_err() {
            Error::MissingStage { stage, .. } => assert_eq!(stage, "amodal"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn relative_paths_resolve_against_config() {
        let mut cfg = PipelineConfig {
            output_root: "out".into(),
            ..Default::default()
        };
        cfg.inputs.image = "a.png".into();
        cfg.inputs.gt_mesh = Some("/abs/gt.obj".into());
        cfg.resolve_paths(Path::new("/data"));
        assert_eq!(cfg.inputs.image, PathBuf::from("/data/a.png"));
        assert_eq!(cfg.inputs.gt_mesh, Some(PathBuf::from("/abs/gt.obj")));
        assert_eq!(cfg.output_root, PathBuf::from("/data/out"));
    }
}
