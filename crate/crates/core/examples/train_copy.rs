//! Trains the default hybrid model on the copy task and reports held-out
//! accuracy.
//!
//! ```text
//! cargo run --release --example train_copy -- [steps] [lr]
//! ```

use wuneng::harness::{evaluate, train, Task, TrainConfig};
use wuneng::model::{Model, ModelConfig};
use wuneng::{FusionConfig, MiddleMode};

fn main() -> wuneng::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(3000, |s| s.parse().expect("steps"));
    let lr = args.next().map_or(3e-3, |s| s.parse().expect("lr"));

    let cfg = ModelConfig {
        vocab_size: 16,
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ffn: 256,
        fusion: FusionConfig {
            middle_mode: MiddleMode::Gated,
            ..FusionConfig::default()
        },
        seed: 0,
    };
    let mut model = Model::init(cfg)?;
    let tc = TrainConfig {
        task: Task::Copy,
        steps,
        batch: 32,
        seq_len: 32,
        lr,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    train(&mut model, &tc, |m| {
        if m.step % 50 == 0 {
            eprintln!(
                "step {:5}  loss {:.4}  acc {:.3}  {:.0} ms",
                m.step, m.loss, m.acc, m.ms
            );
        }
    })?;
    let eval = evaluate(&model, Task::Copy, 256, 32, 12345)?;
    println!(
        "trained {steps} steps in {:.1}s; held-out loss {:.4} acc {:.4}",
        start.elapsed().as_secs_f64(),
        eval.loss,
        eval.acc
    );
    Ok(())
}
