use std::path::{Path, PathBuf};

use meb_core::config::ExperimentConfig;

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn default_config_file_matches_defaults() {
    let cfg = ExperimentConfig::load(shipped("default.toml")).unwrap();
    assert_eq!(cfg, ExperimentConfig::default().resolved().unwrap());
}

#[test]
fn smoke_config_is_valid_and_small() {
    let cfg = ExperimentConfig::load(shipped("smoke.toml")).unwrap();
    assert_eq!(cfg.experts.len(), 2);
    assert!(cfg.adapt.epochs * cfg.adapt.iterations_per_epoch <= 20);
    assert_eq!(cfg.sweep.ablations().unwrap().len(), 2);
}
