//! Directory-based job protocol for external model backends, plus
//! deterministic mock handlers.
//!
//! A job is a populated input directory. `submit` hashes its contents into a
//! job id and writes `<root>/<kind>/<id>/request.json`; a backend process
//! watching `<root>/<kind>` reads the request, writes its outputs into the
//! recorded output directory, and `poll` inspects those outputs. A backend
//! may report failure by writing `error.txt` into the output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::lift_surface;
use crate::error::{ensure, Error, Result};
use crate::io::{
    atomic_write, read_binary_mask, read_bytes, read_image, read_json, read_mesh, read_pfm, write_image, write_json, write_obj,
};
use crate::types::{CameraIntrinsics, ImageBuffer, InstanceMask};

pub const BACKEND_ROOT_ENV: &str = "SCENEKIT_BACKEND_ROOT";
pub const REQUEST_SCHEMA_VERSION: u32 = 1;
pub const ERROR_FILE: &str = "error.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    AmodalInpaint,
    Defurnish,
    ImageTo3d,
    DepthDetail,
    DepthCoherent,
}

impl JobKind {
    pub const ALL: [JobKind; 5] = [
        JobKind::AmodalInpaint,
        JobKind::Defurnish,
        JobKind::ImageTo3d,
        JobKind::DepthDetail,
        JobKind::DepthCoherent,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            JobKind::AmodalInpaint => "amodal_inpaint",
            JobKind::Defurnish => "defurnish",
            JobKind::ImageTo3d => "image_to_3d",
            JobKind::DepthDetail => "depth_detail",
            JobKind::DepthCoherent => "depth_coherent",
        }
    }

    /// Files that must be present in the input directory.
    pub fn required_inputs(&self) -> &'static [&'static str] {
        match self {
            JobKind::AmodalInpaint => &["noised.png", "mask.png", "request.json"],
            JobKind::Defurnish => &["rgba.png"],
            JobKind::ImageTo3d | JobKind::DepthDetail | JobKind::DepthCoherent => &["image.png"],
        }
    }

    /// Files a finished job leaves in its output directory.
    pub fn outputs(&self) -> &'static [&'static str] {
        match self {
            JobKind::AmodalInpaint => &["completed.png"],
            JobKind::Defurnish => &["empty_room.png"],
            JobKind::ImageTo3d => &["mesh.obj"],
            JobKind::DepthDetail | JobKind::DepthCoherent => &["depth.pfm"],
        }
    }
}

impl fmt::Display for JobKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        JobKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown backend kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "diagnostic", rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Done,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendJob {
    pub kind: JobKind,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub status: JobStatus,
    /// Kind-specific parameters passed through to the backend.
    pub manifest: serde_json::Value,
}

impl BackendJob {
    pub fn new(kind: JobKind, input_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            input_dir: input_dir.into(),
            output_dir: output_dir.into(),
            status: JobStatus::Pending,
            manifest: serde_json::Value::Null,
        }
    }

    pub fn with_manifest(mut self, manifest: serde_json::Value) -> Self {
        self.manifest = manifest;
        self
    }
}

/// Contents of `<root>/<kind>/<id>/request.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub schema_version: u32,
    pub job_id: String,
    pub kind: JobKind,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub manifest: serde_json::Value,
}

impl JobRequest {
    /// Job with relative directories resolved against `root`.
    pub fn to_job(&self, root: &Path) -> BackendJob {
        BackendJob {
            kind: self.kind,
            input_dir: root.join(&self.input_dir),
            output_dir: root.join(&self.output_dir),
            status: JobStatus::Pending,
            manifest: self.manifest.clone(),
        }
    }
}

/// Paths inside the root are stored relative to it so that request files
/// do not depend on where the root lives.
fn relative_to(root: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn validate_inputs(kind: JobKind, dir: &Path) -> Result<()> {
    ensure!(dir.is_dir(), Validation, "input directory {} does not exist", dir.display());
    for name in kind.required_inputs() {
        let p = dir.join(name);
        ensure!(p.is_file(), Validation, "{kind} job input is missing {name} in {}", dir.display());
    }
    if kind == JobKind::Defurnish {
        let rgba = read_image(&dir.join("rgba.png"))?;
        ensure!(
            rgba.channels() == 4,
            Validation,
            "rgba.png has {} channels, expected 4",
            rgba.channels()
        );
    }
    Ok(())
}

/// Content hash over the kind, the manifest and every regular file in the
/// input directory (sorted by name). Identical inputs give identical ids.
pub fn job_id(job: &BackendJob) -> Result<String> {
    let mut names: Vec<(String, PathBuf)> = std::fs::read_dir(&job.input_dir)
        .map_err(|e| Error::io(&job.input_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    names.sort();
    let mut h = Sha256::new();
    h.update(job.kind.as_str().as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(&job.manifest)?);
    for (name, path) in names {
        let bytes = read_bytes(&path)?;
        h.update([0]);
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize())[..16].to_string())
}

fn check_output(kind: JobKind, path: &Path) -> Result<()> {
    match kind {
        JobKind::AmodalInpaint | JobKind::Defurnish => read_image(path).map(|_| ()),
        JobKind::ImageTo3d => read_mesh(path).map(|_| ()),
        JobKind::DepthDetail | JobKind::DepthCoherent => read_pfm(path).map(|_| ()),
    }
}

/// Status derived from the output directory alone.
pub fn output_status(kind: JobKind, output_dir: &Path) -> JobStatus {
    let err = output_dir.join(ERROR_FILE);
    if err.is_file() {
        let msg = std::fs::read_to_string(&err).unwrap_or_default();
        return JobStatus::Failed(format!("backend reported: {}", msg.trim()));
    }
    let mut missing = false;
    for name in kind.outputs() {
        let p = output_dir.join(name);
        if !p.is_file() {
            missing = true;
            continue;
        }
        if let Err(e) = check_output(kind, &p) {
            return JobStatus::Failed(format!("{name} is unreadable: {e}"));
        }
    }
    if missing {
        JobStatus::Pending
    } else {
        JobStatus::Done
    }
}

/// Job registry over a backend root directory. Safe to share between
/// threads.
#[derive(Debug)]
pub struct BackendRegistry {
    root: PathBuf,
    jobs: Mutex<BTreeMap<String, BackendJob>>,
}

impl BackendRegistry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            jobs: Mutex::new(BTreeMap::new()),
        }
    }

    /// Root from `SCENEKIT_BACKEND_ROOT`, falling back to `default`.
    pub fn from_env(default: impl Into<PathBuf>) -> Self {
        match std::env::var_os(BACKEND_ROOT_ENV) {
            Some(r) if !r.is_empty() => Self::new(PathBuf::from(r)),
            _ => Self::new(default),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn request_path(&self, kind: JobKind, id: &str) -> PathBuf {
        self.root.join(kind.as_str()).join(id).join("request.json")
    }

    /// Validates the input directory, records the job and writes its
    /// request file. Resubmitting identical inputs returns the same id.
    pub fn submit(&self, job: BackendJob) -> Result<String> {
        validate_inputs(job.kind, &job.input_dir)?;
        let id = job_id(&job)?;
        let req = JobRequest {
            schema_version: REQUEST_SCHEMA_VERSION,
            job_id: id.clone(),
            kind: job.kind,
            input_dir: relative_to(&self.root, &job.input_dir),
            output_dir: relative_to(&self.root, &job.output_dir),
            manifest: job.manifest.clone(),
        };
        std::fs::create_dir_all(&job.output_dir).map_err(|e| Error::io(&job.output_dir, e))?;
        write_json(&self.request_path(job.kind, &id), &req)?;
        self.lock().insert(id.clone(), job);
        Ok(id)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, BackendJob>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn find_on_disk(&self, id: &str) -> Option<BackendJob> {
        JobKind::ALL.iter().find_map(|k| {
            let p = self.request_path(*k, id);
            p.is_file()
                .then(|| read_json::<JobRequest>(&p).ok())
                .flatten()
                .map(|r| r.to_job(&self.root))
        })
    }

    pub fn job(&self, id: &str) -> Result<BackendJob> {
        if let Some(j) = self.lock().get(id) {
            return Ok(j.clone());
        }
        let j = self.find_on_disk(id).ok_or_else(|| Error::UnknownJob(id.to_string()))?;
        self.lock().insert(id.to_string(), j.clone());
        Ok(j)
    }

    /// Current status; jobs submitted by an earlier process are found
    /// through their request files.
    pub fn poll(&self, id: &str) -> Result<JobStatus> {
        let job = self.job(id)?;
        let status = output_status(job.kind, &job.output_dir);
        if let Some(j) = self.lock().get_mut(id) {
            j.status = status.clone();
        }
        Ok(status)
    }

    /// Every request under the root, ordered by kind then id.
    pub fn scan(&self) -> Result<Vec<JobRequest>> {
        let mut out = Vec::new();
        for k in JobKind::ALL {
            let dir = self.root.join(k.as_str());
            if !dir.is_dir() {
                continue;
            }
            let mut ids: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("request.json").is_file())
                .collect();
            ids.sort();
            for p in ids {
                out.push(read_json(&p.join("request.json"))?);
            }
        }
        Ok(out)
    }

    /// Runs `handler` on every pending job under the root. Returns the ids
    /// that were processed.
    pub fn serve_pending(&self, handler: &dyn Fn(&BackendJob) -> Result<()>) -> Result<Vec<String>> {
        let mut done = Vec::new();
        for req in self.scan()? {
            let job = req.to_job(&self.root);
            if output_status(job.kind, &job.output_dir) == JobStatus::Pending {
                handler(&job)?;
                done.push(req.job_id);
            }
        }
        Ok(done)
    }

    /// Fails with a backend error unless the job is done.
    pub fn require_done(&self, id: &str) -> Result<BackendJob> {
        match self.poll(id)? {
            JobStatus::Done => self.job(id),
            JobStatus::Pending => Err(Error::Backend(format!("job {id} is still pending"))),
            JobStatus::Failed(d) => Err(Error::Backend(format!("job {id} failed: {d}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockRule {
    Identity,
    FillMaskWithConstant,
    LiftDepthToPlaneMesh,
}

impl FromStr for MockRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(MockRule::Identity),
            "fill_mask_with_constant" => Ok(MockRule::FillMaskWithConstant),
            "lift_depth_to_plane_mesh" => Ok(MockRule::LiftDepthToPlaneMesh),
            _ => Err(Error::Validation(format!("unknown mock rule `{s}`"))),
        }
    }
}

/// Deterministic stand-in for a model backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockBackend {
    pub kind: JobKind,
    pub rule: MockRule,
}

pub fn mock_backend(kind: JobKind, rule: MockRule) -> MockBackend {
    MockBackend { kind, rule }
}

/// Mock handlers for every kind: identity inpainting, constant-fill
/// defurnishing, depth-lift image-to-3D and hint-copying depth.
pub fn default_mocks() -> Vec<MockBackend> {
    vec![
        mock_backend(JobKind::AmodalInpaint, MockRule::Identity),
        mock_backend(JobKind::Defurnish, MockRule::FillMaskWithConstant),
        mock_backend(JobKind::ImageTo3d, MockRule::LiftDepthToPlaneMesh),
        mock_backend(JobKind::DepthDetail, MockRule::Identity),
        mock_backend(JobKind::DepthCoherent, MockRule::Identity),
    ]
}

/// Dispatches to the mock registered for the job's kind.
pub fn run_mocks(mocks: &[MockBackend], job: &BackendJob) -> Result<()> {
    mocks
        .iter()
        .find(|m| m.kind == job.kind)
        .ok_or_else(|| Error::Backend(format!("no mock registered for {}", job.kind)))?
        .handle(job)
}

impl MockBackend {
    /// Writes the outputs for `job`.
    pub fn handle(&self, job: &BackendJob) -> Result<()> {
        ensure!(job.kind == self.kind, Backend, "mock for {} given a {} job", self.kind, job.kind);
        let (inp, out) = (&job.input_dir, &job.output_dir);
        let unsupported = || Error::Backend(format!("mock rule {:?} does not apply to {}", self.rule, self.kind));
        match (self.kind, self.rule) {
            (JobKind::AmodalInpaint, MockRule::Identity) => atomic_write(&out.join("completed.png"), &read_bytes(&inp.join("noised.png"))?),
            (JobKind::AmodalInpaint, MockRule::FillMaskWithConstant) => {
                let img = read_image(&inp.join("noised.png"))?;
                let mask = read_binary_mask(&inp.join("mask.png"), 0)?;
                write_image(&out.join("completed.png"), &fill_mask_with_constant(&img, &mask)?)
            }
            (JobKind::Defurnish, MockRule::Identity) => {
                let (rgb, _) = rgba_unpack(&read_image(&inp.join("rgba.png"))?)?;
                write_image(&out.join("empty_room.png"), &rgb)
            }
            (JobKind::Defurnish, MockRule::FillMaskWithConstant) => {
                let (rgb, mask) = rgba_unpack(&read_image(&inp.join("rgba.png"))?)?;
                write_image(&out.join("empty_room.png"), &fill_mask_with_constant(&rgb, &mask)?)
            }
            (JobKind::ImageTo3d, MockRule::LiftDepthToPlaneMesh) => {
                let depth = read_pfm(&inp.join("depth.pfm"))?;
                let k: CameraIntrinsics = read_json(&inp.join("intrinsics.json"))?;
                let mask_path = inp.join("mask.png");
                let mask = if mask_path.is_file() {
                    Some(read_binary_mask(&mask_path, 0)?)
                } else {
                    None
                };
                write_obj(&out.join("mesh.obj"), &lift_surface(&depth, mask.as_ref(), &k)?)
            }
            (JobKind::DepthDetail | JobKind::DepthCoherent, MockRule::Identity) => {
                let hint = inp.join("depth.pfm");
                ensure!(
                    hint.is_file(),
                    Backend,
                    "identity depth mock needs a depth.pfm hint in {}",
                    inp.display()
                );
                atomic_write(&out.join("depth.pfm"), &read_bytes(&hint)?)
            }
            _ => Err(unsupported()),
        }
    }
}

/// Replaces masked pixels with the mean colour of the unmasked pixels that
/// are 4-adjacent to the mask. Falls back to the mean of all unmasked pixels,
/// then to mid-grey for a full mask.
pub fn fill_mask_with_constant(img: &ImageBuffer, mask: &InstanceMask) -> Result<ImageBuffer> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    ensure!(
        mask.same_size(w, h),
        Contract,
        "mask {}x{} vs image {w}x{h}",
        mask.width(),
        mask.height()
    );
    let mean_of = |pred: &dyn Fn(usize, usize) -> bool| -> Option<Vec<f64>> {
        let mut sum = vec![0.0; ch];
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if !mask.contains(x, y) && pred(x, y) {
                    for (c, s) in sum.iter_mut().enumerate() {
                        *s += img.get(x, y, c);
                    }
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
    };
    let border = |x: usize, y: usize| {
        (x > 0 && mask.contains(x - 1, y))
            || (x + 1 < w && mask.contains(x + 1, y))
            || (y > 0 && mask.contains(x, y - 1))
            || (y + 1 < h && mask.contains(x, y + 1))
    };
    let fill = mean_of(&border).or_else(|| mean_of(&|_, _| true)).unwrap_or_else(|| vec![0.5; ch]);
    let mut data = img.data().to_vec();
    for i in mask.indices() {
        data[i * ch..(i + 1) * ch].copy_from_slice(&fill);
    }
    ImageBuffer::new(w, h, ch, data)
}

/// RGB image plus mask as alpha (1 inside the mask, 0 outside). Gray inputs
/// are replicated to three channels; an existing alpha channel is replaced.
pub fn rgba_pack(image: &ImageBuffer, mask: &InstanceMask) -> Result<ImageBuffer> {
    let (w, h) = (image.width(), image.height());
    ensure!(
        mask.same_size(w, h),
        Contract,
        "mask is {}x{}, image is {w}x{h}",
        mask.width(),
        mask.height()
    );
    let mut data = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(x, y);
            match p.len() {
                1 => data.extend_from_slice(&[p[0], p[0], p[0]]),
                _ => data.extend_from_slice(&p[..3]),
            }
            data.push(if mask.contains(x, y) { 1.0 } else { 0.0 });
        }
    }
    ImageBuffer::new(w, h, 4, data)
}

/// Inverse of [`rgba_pack`]: alpha above one half counts as masked.
pub fn rgba_unpack(rgba: &ImageBuffer) -> Result<(ImageBuffer, InstanceMask)> {
    ensure!(rgba.channels() == 4, Contract, "expected 4 channels, got {}", rgba.channels());
    let (w, h) = (rgba.width(), rgba.height());
    let rgb = rgba.data().chunks(4).flat_map(|p| p[..3].iter().copied()).collect();
    let mask = InstanceMask::from_fn(0, w, h, |x, y| rgba.get(x, y, 3) > 0.5);
    Ok((ImageBuffer::new(w, h, 3, rgb)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{decode_png_image, encode_png_image, write_binary_mask};

    fn rgb(w: usize, h: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> ImageBuffer {
        let mut d = Vec::new();
        for y in 0..h {
            for x in 0..w {
                d.extend_from_slice(&f(x, y));
            }
        }
        ImageBuffer::new(w, h, 3, d).unwrap()
    }

    fn amodal_dir(dir: &Path) {
        let img = rgb(6, 5, |x, y| [x as f64 / 10.0, y as f64 / 10.0, 0.5]);
        write_image(&dir.join("noised.png"), &img).unwrap();
        write_binary_mask(&dir.join("mask.png"), &InstanceMask::from_fn(0, 6, 5, |x, _| x < 2)).unwrap();
        std::fs::write(
            dir.join("request.json"),
            "{\"instance_id\":1,\"prompt\":\"p\",\"canvas_offset\":[0,0]}",
        )
        .unwrap();
    }

    #[test]
    fn submit_is_content_addressed() {
        let tmp = tempfile::tempdir().unwrap();
        let inp = tmp.path().join("in");
        std::fs::create_dir_all(&inp).unwrap();
        amodal_dir(&inp);
        let reg = BackendRegistry::new(tmp.path().join("root"));
        let job = BackendJob::new(JobKind::AmodalInpaint, &inp, tmp.path().join("out"));
        let a = reg.submit(job.clone()).unwrap();
        let b = reg.submit(job.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(reg.request_path(JobKind::AmodalInpaint, &a).is_file());
        let req: JobRequest = read_json(&reg.request_path(JobKind::AmodalInpaint, &a)).unwrap();
        assert_eq!(req.to_job(reg.root()), job);

        std::fs::write(
            inp.join("request.json"),
            "{\"instance_id\":2,\"prompt\":\"p\",\"canvas_offset\":[0,0]}",
        )
        .unwrap();
        assert_ne!(reg.submit(job).unwrap(), a);
    }

    #[test]
    fn missing_input_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        amodal_dir(tmp.path());
        std::fs::remove_file(tmp.path().join("mask.png")).unwrap();
        let reg = BackendRegistry::new(tmp.path().join("root"));
        let err = reg
            .submit(BackendJob::new(JobKind::AmodalInpaint, tmp.path(), tmp.path().join("out")))
            .unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("mask.png")), "{err}");
    }

    #[test]
    fn poll_lifecycle() {
        let tmp = tempfile::tempdir().unwrap();
        let inp = tmp.path().join("in");
        std::fs::create_dir_all(&inp).unwrap();
        amodal_dir(&inp);
        let out = tmp.path().join("out");
        let reg = BackendRegistry::new(tmp.path().join("root"));
        let id = reg.submit(BackendJob::new(JobKind::AmodalInpaint, &inp, &out)).unwrap();
        assert_eq!(reg.poll(&id).unwrap(), JobStatus::Pending);
        assert!(matches!(reg.poll("0000000000000000"), Err(Error::UnknownJob(_))));

        std::fs::write(out.join("completed.png"), b"not a png").unwrap();
        assert!(matches!(reg.poll(&id).unwrap(), JobStatus::Failed(d) if d.contains("completed.png")));

        std::fs::remove_file(out.join("completed.png")).unwrap();
        let served = reg.serve_pending(&|j| run_mocks(&default_mocks(), j)).unwrap();
        assert_eq!(served, vec![id.clone()]);
        assert_eq!(reg.poll(&id).unwrap(), JobStatus::Done);
        assert_eq!(
            read_bytes(&out.join("completed.png")).unwrap(),
            read_bytes(&inp.join("noised.png")).unwrap()
        );

        // A fresh registry over the same root finds the job on disk.
        let again = BackendRegistry::new(tmp.path().join("root"));
        assert_eq!(again.poll(&id).unwrap(), JobStatus::Done);
    }

    #[test]
    fn error_file_marks_failure() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join(ERROR_FILE), "out of memory\n").unwrap();
        assert_eq!(
            output_status(JobKind::Defurnish, tmp.path()),
            JobStatus::Failed("backend reported: out of memory".into())
        );
    }

    #[test]
    fn fill_uses_mean_border_colour() {
        let img = rgb(5, 1, |x, _| [x as f64 / 10.0, 0.0, 1.0]);
        let mask = InstanceMask::from_fn(0, 5, 1, |x, _| x == 2);
        let f = fill_mask_with_constant(&img, &mask).unwrap();
        assert!((f.get(2, 0, 0) - 0.2).abs() < 1e-15);
        assert_eq!(f.get(0, 0, 0), 0.0);
        let full = fill_mask_with_constant(&img, &InstanceMask::from_fn(0, 5, 1, |_, _| true)).unwrap();
        assert!(full.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn rgba_alpha_matches_mask() {
        let img = rgb(4, 4, |x, y| [x as f64 / 3.0, y as f64 / 3.0, 0.0]);
        let empty = rgba_pack(&img, &InstanceMask::empty(0, 4, 4)).unwrap();
        assert!(empty.data().chunks(4).all(|p| p[3] == 0.0));
        let full = rgba_pack(&img, &InstanceMask::from_fn(0, 4, 4, |_, _| true)).unwrap();
        assert!(full.data().chunks(4).all(|p| p[3] == 1.0));
        let checker = InstanceMask::from_fn(0, 4, 4, |x, y| (x + y) % 2 == 0);
        let packed = rgba_pack(&img, &checker).unwrap();
        let decoded = decode_png_image(&encode_png_image(&packed).unwrap(), Path::new("x.png")).unwrap();
        let (_, back) = rgba_unpack(&decoded).unwrap();
        assert_eq!(back.bits(), checker.bits());
        assert!(rgba_pack(&img, &InstanceMask::empty(0, 3, 4)).is_err());
    }

    #[test]
    fn lift_mock_writes_mesh() {
        let tmp = tempfile::tempdir().unwrap();
        let (inp, out) = (tmp.path().join("in"), tmp.path().join("out"));
        std::fs::create_dir_all(&inp).unwrap();
        write_image(&inp.join("image.png"), &rgb(4, 3, |_, _| [0.1, 0.2, 0.3])).unwrap();
        let depth = crate::types::DepthMap::from_fn(4, 3, |_, _| Some(2.0)).unwrap();
        crate::io::write_pfm(&inp.join("depth.pfm"), &depth).unwrap();
        let k = CameraIntrinsics::new(4.0, 4.0, 1.5, 1.0, 4, 3).unwrap();
        write_json(&inp.join("intrinsics.json"), &k).unwrap();
        let job = BackendJob::new(JobKind::ImageTo3d, &inp, &out);
        mock_backend(JobKind::ImageTo3d, MockRule::LiftDepthToPlaneMesh)
            .handle(&job)
            .unwrap();
        let mesh = read_mesh(&out.join("mesh.obj")).unwrap();
        assert_eq!(mesh.faces().len(), 24);
        assert_eq!(output_status(JobKind::ImageTo3d, &out), JobStatus::Done);
        assert!(mock_backend(JobKind::ImageTo3d, MockRule::Identity).handle(&job).is_err());
    }
}
