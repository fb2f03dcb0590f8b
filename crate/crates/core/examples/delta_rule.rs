//! Steps one state head through a short sequence and checks that a full
//! erase followed by a write leaves exactly the new association behind.

use wuneng::numerics::{dot, Rng, Tensor};
use wuneng::state::{delta_rule_step, normalize, run_recurrence, HeadState, StateParams, TokenStateInputs};

fn main() -> wuneng::Result<()> {
    let mut rng = Rng::new(7);
    let (d_model, d_k, n) = (8, 4, 6);
    let p = StateParams::init(d_model, d_k, &mut rng);
    let x = Tensor::matrix(n, d_model, (0..n * d_model).map(|_| rng.normal()).collect())?;
    let fused = Tensor::matrix(n, d_model, (0..n * d_model).map(|_| rng.normal()).collect())?;

    let states = run_recurrence(&x, &fused, &p, None)?;
    for (t, s) in states.iter().enumerate() {
        println!("t={t}  |S| = {:.4}", s.s.norm());
    }

    // w = 1 and a = 1 along a unit key: old content on that key is erased.
    let s = HeadState {
        s: Tensor::matrix(d_k, d_k, (0..d_k * d_k).map(|_| rng.normal()).collect())?,
    };
    let kappa_hat = normalize(&(0..d_k).map(|_| rng.normal()).collect::<Vec<_>>());
    let k: Vec<f64> = (0..d_k).map(|_| rng.normal()).collect();
    let v: Vec<f64> = (0..d_k).map(|_| rng.normal()).collect();
    let inp = TokenStateInputs {
        w: vec![1.0; d_k],
        kappa_hat: kappa_hat.clone(),
        k: k.clone(),
        v: v.clone(),
        a: vec![1.0; d_k],
    };
    let next = delta_rule_step(&s, &inp, 0)?;
    let read: Vec<f64> = (0..d_k).map(|i| dot(next.s.row(i), &kappa_hat)).collect();
    let kk = dot(&k, &kappa_hat);
    let residual = read.iter().zip(&v).map(|(r, v)| (r - v * kk).abs()).fold(0.0, f64::max);
    println!("read-back residual after erase-then-write: {residual:.2e}");
    Ok(())
}
