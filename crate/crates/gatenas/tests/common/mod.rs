#![allow(dead_code)]

use std::path::Path;

use gatenas::config::Config;

/// A run that finishes in well under a second.
pub const TINY: &str = r#"
seed = 3

[network]
layout = [8, "pool", 8]
kernels = [1, 3]

[data]
classes = 3
size = 8
train_samples = 256
test_samples = 128

[train]
batch_size = 32
recalibration_batches = 4

[pretrain]
lr = 0.05
epochs = 2

[search]
lr = 0.05
epochs = 4
lambda = 1e-6
target_fraction = 0.3

[finetune]
lr = 0.05
epochs = 2
"#;

pub fn tiny() -> Config {
    Config::parse(TINY, "tiny.toml", Path::new(".")).unwrap()
}
