//! Trains a few steps, saves a checkpoint, loads it back and checks the
//! reloaded model predicts identically.

use wuneng::checkpoint;
use wuneng::harness::{train, Task, TrainConfig};
use wuneng::model::{Model, ModelConfig};
use wuneng::ParamSet;

fn main() -> wuneng::Result<()> {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ffn: 32,
        ..ModelConfig::default()
    };
    let mut model = Model::init(cfg)?;
    let tc = TrainConfig {
        task: Task::Copy,
        steps: 20,
        batch: 8,
        seq_len: 12,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    train(&mut model, &tc, |_| {})?;

    let dir = std::env::temp_dir().join(format!("wuneng-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    checkpoint::save(&path, &model)?;
    let back = checkpoint::load_as(&path, &cfg)?;
    let tokens = [1, 4, 2, 7, 11, 1, 4];
    let diff = model.forward(&tokens)?.max_abs_diff(&back.forward(&tokens)?);
    println!(
        "{} bytes, {} tensors, max logit diff after reload {diff:e}",
        std::fs::metadata(&path)?.len(),
        back.tensors().len()
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
