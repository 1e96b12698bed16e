#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fleetroute_gateway::{commands, Runtime, Service};

pub const SMALL: &str = r#"
trace_dir = "traces"
prior_store = "artifacts/priors.json"
policy_checkpoint = "artifacts/policy.json"
report_dir = "reports"
eval_seeds = [1, 2]

[sim]
calibrated = true

[pipeline]
tasks_per_suite = 20
train_tasks_per_suite = 40
discovery_trials = 5

[pipeline.train]
epochs = 5
"#;

pub fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("gateway.toml");
    std::fs::write(&p, body).unwrap();
    p
}

/// A small calibrated config with discovered priors and a trained policy.
pub fn prepared(dir: &Path) -> PathBuf {
    let path = write_config(dir, SMALL);
    let rt = Runtime::load(&path).unwrap();
    commands::discover(&rt, 1, None, None).unwrap();
    commands::train(&rt, 1, None).unwrap();
    path
}

pub fn service(dir: &Path) -> Service {
    let path = prepared(dir);
    Service::new(Runtime::load(&path).unwrap()).unwrap()
}
