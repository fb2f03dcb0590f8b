//! Compares every combine and middle-head mode: parameter count and how far
//! the logits move from the plain attention model at initialization.

use wuneng::model::{count_params, Model, ModelConfig};
use wuneng::{CombineMode, FusionConfig, MiddleMode};

fn main() -> wuneng::Result<()> {
    let tokens: Vec<usize> = (0..16)
        .map(|i| (5 * i + 2) % ModelConfig::default().vocab_size)
        .collect();
    println!(
        "{:<15} {:<9} {:>8} {:>8} {:>12}",
        "combine", "middle", "total", "ratio", "|Δ logits|"
    );
    for combine_mode in CombineMode::ALL {
        for middle_mode in MiddleMode::ALL {
            let cfg = ModelConfig {
                fusion: FusionConfig {
                    combine_mode,
                    middle_mode,
                },
                ..ModelConfig::default()
            };
            let mut model = Model::init(cfg)?;
            // Untrained unembeddings are zero; give them something to show.
            model.params.visit_named_mut(&mut |name, t| {
                if name == "unembed" {
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        *v = ((i * 37 % 101) as f64 / 101.0 - 0.5) * 0.2;
                    }
                }
            });
            let diff = model.forward(&tokens)?.max_abs_diff(&model.baseline_forward(&tokens)?);
            let b = count_params(&cfg);
            println!(
                "{:<15} {:<9} {:>8} {:>8.3} {diff:>12.3e}",
                combine_mode.to_string(),
                middle_mode.to_string(),
                b.total(),
                b.ratio()
            );
        }
    }
    Ok(())
}
