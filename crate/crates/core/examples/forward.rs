//! Builds the default model, runs a forward pass and prints the parameter
//! breakdown.

use wuneng::model::{count_params, Model, ModelConfig};

fn main() -> wuneng::Result<()> {
    let cfg = ModelConfig::default();
    let model = Model::init(cfg)?;
    let tokens: Vec<usize> = (0..12).map(|i| (3 * i + 1) % cfg.vocab_size).collect();
    let logits = model.forward(&tokens)?;
    println!("tokens {tokens:?}");
    println!(
        "logits {}x{}, max |logit| {:.3e}",
        logits.rows(),
        logits.cols(),
        logits.max_abs()
    );

    let b = count_params(&cfg);
    println!("{b:#?}");
    println!(
        "base {}  additions {}  total {}  ratio {:.3}",
        b.base(),
        b.additions(),
        b.total(),
        b.ratio()
    );
    Ok(())
}
