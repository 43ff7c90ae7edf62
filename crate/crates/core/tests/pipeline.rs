use std::collections::BTreeMap;
use std::path::Path;

use tamaraw_core::error::Error;
use tamaraw_core::pipeline::config::PipelineConfig;
use tamaraw_core::pipeline::Pipeline;

fn small_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.synth.n_sites = 6;
    c.synth.traces_per_site = 12;
    c.grid_steps = 6;
    c.ks = vec![2, 3];
    c.table_ks = vec![2];
    c.k = 2;
    c.ls = vec![100, 500];
    c.checkpoint_max = 10.0;
    c.detector.forest.n_trees = 20;
    c
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_run_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Pipeline::new(small_config(), a.path()).unwrap().run_all().unwrap();
    Pipeline::new(small_config(), b.path()).unwrap().run_all().unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.contains_key("bounds.json") && sa.contains_key("simulate.csv"));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{name} differs between runs");
    }

    // A downstream stage refuses artifacts produced under another config.
    let mut changed = small_config();
    changed.alpha = 0.5;
    let err = Pipeline::new(changed, a.path()).unwrap().simulate().unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_config(), dir.path()).unwrap();
    assert!(matches!(p.pareto(), Err(Error::MissingArtifact(_))));
    p.synth().unwrap();
    assert!(matches!(p.sets(), Err(Error::MissingArtifact(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = small_config();
    c.k = 5;
    assert!(Pipeline::new(c, "unused").is_err());
    let mut c = small_config();
    c.alpha = 0.0;
    assert!(Pipeline::new(c, "unused").is_err());
    let mut c = small_config();
    c.ls = vec![500];
    assert_eq!(Pipeline::new(c, "unused").unwrap_err().exit_code(), 1);
}
