#![allow(dead_code)]

pub mod fd;
pub mod fused;

use std::sync::{Mutex, MutexGuard};

use advprop::config::ExperimentConfig;

/// A small synthetic experiment: 8×8 images, one conv stage, a few epochs.
pub const TINY: &str = "\
base_epochs = 2
decay_epochs = [1]
calibrate_epochs = false
batch_size = 16
[data]
train_size = 320
test_size = 40
height = 8
width = 8
[model]
conv_channels = [4]
[eval]
batch_size = 40
";

pub fn cfg(base: &str, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    ExperimentConfig::from_toml_with(base, &o).unwrap()
}

pub fn tiny(overrides: &[(&str, &str)]) -> ExperimentConfig {
    cfg(TINY, overrides)
}

static HEAVY: Mutex<()> = Mutex::new(());

/// Serializes long training tests so that each one's wall-clock
/// measurement is not shared with another.
pub fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}
