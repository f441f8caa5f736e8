use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use scenekit_core::fixture::{write_fixture, FixtureScene};
use scenekit_core::pipeline::{report, run_stage, run_through, PipelineConfig, Stage};
use scenekit_core::Error;

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_fixture(dir: &Path) -> PipelineConfig {
    let cfg = PipelineConfig::load(&write_fixture(dir, 96, 72, 7).unwrap()).unwrap();
    let reports = run_through(Stage::Eval, &cfg).unwrap();
    assert!(reports.iter().all(|r| !r.cache_hit));
    cfg
}

#[test]
fn fixture_pipeline_is_deterministic_and_accurate() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = run_fixture(a.path());
    run_fixture(b.path());
    let (ta, tb) = (tree(&a.path().join("out")), tree(&b.path().join("out")));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs between runs", k.display());
    }

    let r = report(&cfg.output_root).unwrap();
    assert_eq!(r.stages, Stage::ALL.to_vec());
    assert_eq!(r.poses.len(), 3);
    assert!(r.poses.iter().all(|p| p.converged), "{}", r.to_text());
    let scene = r.metrics.as_ref().unwrap().scene.as_ref().unwrap();
    let diag = FixtureScene::standard(96, 72).unwrap().mesh().diagonal();
    assert!(
        scene.chamfer < 0.02 * diag,
        "chamfer {} vs diagonal {diag}\n{}",
        scene.chamfer,
        r.to_text()
    );
    let text = r.to_text();
    for id in ["3", "4", "5"] {
        assert!(text.lines().any(|l| l.trim_start().starts_with(id)), "{text}");
    }

    // Unchanged inputs: every stage is a cache hit and nothing is rewritten.
    let again = run_through(Stage::Eval, &cfg).unwrap();
    assert!(again.iter().all(|r| r.cache_hit));
    assert_eq!(tree(&a.path().join("out")), ta);
}

#[test]
fn pending_backend_is_reported_as_backend_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::load(&write_fixture(tmp.path(), 48, 36, 1).unwrap()).unwrap();
    cfg.backend.inline_mocks = false;
    run_stage(Stage::Analyze, &cfg).unwrap();
    let err = run_stage(Stage::Amodal, &cfg).unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(run_stage(Stage::Compose, &cfg), Err(Error::MissingStage { ref stage, .. }) if stage == "amodal"));
}
