//! Distillation losses between a teacher and student: hidden-state
//! alignment and token-level KL.

use wuneng::harness::{align_loss, token_kl};
use wuneng::numerics::Rng;
use wuneng::Tensor;

fn main() -> wuneng::Result<()> {
    let mut rng = Rng::new(3);
    let (n, d, vocab) = (6, 8, 10);
    let teacher_h = Tensor::matrix(n, d, (0..n * d).map(|_| rng.normal()).collect())?;
    let teacher_logits = Tensor::matrix(n, vocab, (0..n * vocab).map(|_| 2.0 * rng.normal()).collect())?;

    for noise in [0.0, 0.1, 0.5, 1.0] {
        let mut jitter = |t: &Tensor| {
            let data = t.data().iter().map(|v| v + noise * rng.normal()).collect();
            Tensor::new(t.dims().to_vec(), data)
        };
        let student_h = jitter(&teacher_h)?;
        let student_logits = jitter(&teacher_logits)?;
        println!(
            "noise {noise:.1}  align {:.4}  kl {:.4}",
            align_loss(&teacher_h, &student_h)?,
            token_kl(&teacher_logits, &student_logits)?
        );
    }
    let uniform = Tensor::zeros(&[n, vocab]);
    let mut sharp = Tensor::zeros(&[n, vocab]);
    for t in 0..n {
        sharp.row_mut(t)[t % vocab] = 60.0;
    }
    println!(
        "one-hot teacher vs uniform student: {:.4} (ln V = {:.4})",
        token_kl(&sharp, &uniform)?,
        (vocab as f64).ln()
    );
    Ok(())
}
