//! Permutation composition with the middle heads off (FFN widened to match
//! parameters) against gated middle heads, over a few seeds.
//!
//! ```text
//! cargo run --release --example perm_ablation -- [steps] [seeds] [n_perms]
//! ```

use wuneng::harness::{evaluate, train, Task, TrainConfig};
use wuneng::model::{count_params, match_ffn_width, Model, ModelConfig};
use wuneng::{FusionConfig, MiddleMode};

fn main() -> wuneng::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(300, |s| s.parse().expect("steps"));
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seeds"));
    let n_perms = args.next().map_or(3, |s| s.parse().expect("n_perms"));

    let gated = ModelConfig {
        vocab_size: 120,
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        d_ffn: 64,
        ..ModelConfig::default()
    };
    let off = match_ffn_width(
        ModelConfig {
            fusion: FusionConfig {
                middle_mode: MiddleMode::Off,
                ..gated.fusion
            },
            ..gated
        },
        &gated,
    );
    for (label, cfg) in [("off", off), ("gated", gated)] {
        let mut accs = Vec::new();
        for seed in 0..seeds {
            let mut model = Model::init(ModelConfig { seed, ..cfg })?;
            let tc = TrainConfig {
                task: Task::PermCompose,
                steps,
                batch: 32,
                seq_len: n_perms,
                lr: 3e-3,
                seed,
                ..TrainConfig::default()
            };
            train(&mut model, &tc, |_| {})?;
            accs.push(evaluate(&model, Task::PermCompose, 512, n_perms, 777)?.acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!(
            "{label:<6} d_ffn {:3}  params {:6}  acc {accs:.3?}  mean {mean:.3}",
            cfg.d_ffn,
            count_params(&cfg).total()
        );
    }
    Ok(())
}
