//! `scenekit` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use scenekit_core::backend::{default_mocks, run_mocks, BackendRegistry, JobKind, MockBackend, MockRule};
use scenekit_core::dataprep::{augment_mask, validate_jsonl, verdicts_to_jsonl, AugmentConfig, CameraConfig};
use scenekit_core::fixture::write_fixture;
use scenekit_core::io::{read_binary_mask, read_image, read_mesh, read_ply_points, write_binary_mask};
use scenekit_core::metrics::{evaluate_batch, evaluate_meshes, image_metrics, psnr_for_table, sample_surface, MetricsConfig};
use scenekit_core::pipeline::{report, run_stage, run_through, MetricsSummary, NamedReport, PipelineConfig, Stage, StageReport};
use scenekit_core::{Error, PointCloud};

#[derive(Parser)]
#[command(name = "scenekit", version, about = "Single-view indoor scene reconstruction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label instances and fuse the two depth estimates.
    Analyze(StageArgs),
    /// Build inpainting requests and run the backend jobs.
    Amodal(StageArgs),
    /// Place every instance and assemble the scene mesh.
    Compose(StageArgs),
    /// Score meshes: the pipeline output (--config) or explicit files.
    Eval(EvalArgs),
    /// Summarize an output root.
    Report {
        output_root: PathBuf,
        /// Print machine-readable JSON instead of tables.
        #[arg(long)]
        json: bool,
    },
    /// Run all stages in order.
    Run(StageArgs),
    /// Serve pending backend jobs with deterministic mocks.
    MockBackends {
        /// Job root; defaults to $SCENEKIT_BACKEND_ROOT.
        #[arg(long)]
        root: Option<PathBuf>,
        /// Override the mock for a kind, e.g. `defurnish=identity`.
        #[arg(long = "rule", value_name = "KIND=RULE")]
        rules: Vec<String>,
    },
    /// Write the synthetic fixture scene and its pipeline config.
    Fixture {
        dir: PathBuf,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 72)]
        height: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Training-data utilities.
    #[command(subcommand)]
    Dataprep(Dataprep),
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides the config and $SCENEKIT_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-instance work.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_root: Option<PathBuf>,
    /// Serve backend jobs with the built-in mocks.
    #[arg(long)]
    mock: bool,
    /// Compose even if some poses did not converge.
    #[arg(long)]
    force: bool,
}

impl StageArgs {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
        if let Some(o) = &self.output_root {
            cfg.output_root = o.clone();
        }
        cfg.backend.inline_mocks |= self.mock;
        cfg.force |= self.force;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluate the pipeline output described by this config.
    #[arg(long, conflicts_with_all = ["pred", "manifest"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Batch manifest: {"pairs": [{"name", "pred", "gt"}]}.
    #[arg(long, conflicts_with = "pred")]
    manifest: Option<PathBuf>,
    /// Predicted and reference PNGs for image metrics.
    #[arg(long, num_args = 2, value_names = ["PRED", "GT"])]
    images: Option<Vec<PathBuf>>,
    /// Write eval/metrics.{json,csv} under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long)]
    tau: Option<f64>,
    /// Skip ICP alignment of the prediction.
    #[arg(long)]
    no_align: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Dataprep {
    /// Accept or reject camera samples (JSONL in, JSONL out).
    Cameras {
        #[arg(long)]
        samples: PathBuf,
        /// Scene geometry: OBJ/PLY mesh or PLY point cloud.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.4)]
        h_min: f64,
        #[arg(long, default_value_t = 1.9)]
        h_max: f64,
        #[arg(long, default_value_t = 3.0)]
        d_min: f64,
    },
    /// Randomly dilate or erode a mask PNG.
    Augment {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to 12 px scaled to the mask size.
        #[arg(long)]
        max_radius: Option<u32>,
    },
}

fn print_stage(r: &StageReport) {
    if r.cache_hit {
        println!("{}: cache hit ({} artifacts)", r.stage, r.artifacts.len());
    } else {
        println!("{}: {} artifacts in {:.2}s", r.stage, r.artifacts.len(), r.seconds);
    }
    for w in &r.warnings {
        println!("  warning: {w}");
    }
}

fn scene_points(path: &Path) -> anyhow::Result<PointCloud> {
    match read_mesh(path) {
        Ok(mesh) if !mesh.faces().is_empty() => {
            let mut pts = sample_surface(&mesh, 50_000, 0)?.points().to_vec();
            pts.extend_from_slice(mesh.vertices());
            Ok(PointCloud::from_points(pts)?)
        }
        _ => read_ply_points(path).with_context(|| format!("reading scene points from {}", path.display())),
    }
}

fn parse_rule(s: &str) -> anyhow::Result<MockBackend> {
    let Some((kind, rule)) = s.split_once('=') else {
        bail!("expected KIND=RULE, got `{s}`");
    };
    Ok(MockBackend {
        kind: kind.parse::<JobKind>()?,
        rule: rule.parse::<MockRule>()?,
    })
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    if let Some(c) = &a.config {
        let cfg = PipelineConfig::load(c)?;
        print_stage(&run_stage(Stage::Eval, &cfg)?);
        print!("{}", report(&cfg.output_root)?.to_text());
        return Ok(());
    }
    let mcfg = MetricsConfig {
        n_samples: a.samples,
        seed: a.seed,
        tau: a.tau,
        align: !a.no_align,
        ..MetricsConfig::default()
    };
    let mut summary = MetricsSummary::default();
    if let (Some(p), Some(g)) = (&a.pred, &a.gt) {
        summary.scene = Some(evaluate_meshes(&read_mesh(p)?, &read_mesh(g)?, &mcfg)?);
    }
    if let Some(m) = &a.manifest {
        for (name, report) in evaluate_batch(m, &mcfg)? {
            summary.instances.push(NamedReport { name, report });
        }
    }
    if let Some(imgs) = &a.images {
        let m = image_metrics(&read_image(&imgs[0])?, &read_image(&imgs[1])?)?;
        let target = summary.scene.as_mut();
        match target {
            Some(r) => {
                r.psnr = Some(m.psnr);
                r.mse = Some(m.mse);
                r.ssim = Some(m.ssim);
            }
            None => println!("psnr {:.4}  mse {:.6e}  ssim {:.6}", psnr_for_table(m.psnr), m.mse, m.ssim),
        }
    }
    if summary.scene.is_none() && summary.instances.is_empty() && a.images.is_none() {
        bail!(Error::Validation("eval needs --config, --pred/--gt, --manifest or --images".into()));
    }
    print!("{}", summary.to_csv());
    if let Some(out) = &a.out {
        summary.write(out)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Analyze(a) => print_stage(&run_stage(Stage::Analyze, &a.load()?)?),
        Command::Amodal(a) => print_stage(&run_stage(Stage::Amodal, &a.load()?)?),
        Command::Compose(a) => print_stage(&run_stage(Stage::Compose, &a.load()?)?),
        Command::Run(a) => {
            let cfg = a.load()?;
            for r in run_through(Stage::Eval, &cfg)? {
                print_stage(&r);
            }
            print!("{}", report(&cfg.output_root)?.to_text());
        }
        Command::Eval(a) => eval(&a)?,
        Command::Report { output_root, json } => {
            let r = report(&output_root)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", r.to_text());
            }
        }
        Command::MockBackends { root, rules } => {
            let reg = match root {
                Some(r) => BackendRegistry::new(r),
                None => match std::env::var_os(scenekit_core::backend::BACKEND_ROOT_ENV) {
                    Some(r) => BackendRegistry::new(PathBuf::from(r)),
                    None => bail!(Error::Validation("pass --root or set SCENEKIT_BACKEND_ROOT".into())),
                },
            };
            let mut mocks = default_mocks();
            for r in &rules {
                let m = parse_rule(r)?;
                mocks.retain(|x| x.kind != m.kind);
                mocks.push(m);
            }
            let done = reg.serve_pending(&|job| run_mocks(&mocks, job))?;
            println!("served {} job(s)", done.len());
            for id in done {
                println!("  {id}");
            }
        }
        Command::Fixture { dir, width, height, seed } => {
            let cfg = write_fixture(&dir, width, height, seed)?;
            println!("{}", cfg.display());
        }
        Command::Dataprep(Dataprep::Cameras {
            samples,
            scene,
            out,
            h_min,
            h_max,
            d_min,
        }) => {
            let text = std::fs::read_to_string(&samples).with_context(|| format!("reading {}", samples.display()))?;
            let verdicts = validate_jsonl(&text, &scene_points(&scene)?, &CameraConfig { h_min, h_max, d_min })?;
            let jsonl = verdicts_to_jsonl(&verdicts)?;
            match out {
                Some(p) => scenekit_core::io::atomic_write(&p, jsonl.as_bytes())?,
                None => print!("{jsonl}"),
            }
        }
        Command::Dataprep(Dataprep::Augment {
            mask,
            out,
            seed,
            max_radius,
        }) => {
            let m = read_binary_mask(&mask, 1)?;
            let cfg = match max_radius {
                Some(r) => AugmentConfig { max_radius: r },
                None => AugmentConfig::for_size(m.width(), m.height()),
            };
            write_binary_mask(&out, &augment_mask(&m, seed, &cfg)?)?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
