#![allow(dead_code)]

use std::path::Path;

/// Small model and run settings that train in well under a second per step.
pub fn tiny_toml(out: &Path, iterations: usize) -> String {
    format!(
        r#"
[model]
embed_dim = 12
depth = 4
heads = 2
stages = 2
num_classes = 4
stem_channels = [4, 6, 8]
adapter_heads = 2
decoder_channels = 8
crop_size = 32

[data]
image_size = 32
train_samples = 4
eval_samples = 3

[train]
iterations = {iterations}
batch_size = 2
lr = 1e-3
warmup_steps = 2
output_dir = "{}"
"#,
        out.display()
    )
}

pub fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}
