//! Central finite differences against reverse-mode gradients for a small
//! attention block built directly on the tape.

use calf::tensor::{LossKind, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;

fn objective(tape: &mut Tape<f64>, x: Var, w: Var, target: Var) -> calf::Result<Var> {
    let q = tape.matmul(x, w)?;
    let kt = tape.transpose_last2(q)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 0.5);
    let attn = tape.softmax_last(scores)?;
    let mixed = tape.matmul(attn, x)?;
    let act = tape.gelu(mixed);
    tape.loss(LossKind::SmoothL1, act, target)
}

fn main() -> calf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f64> = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let target: Tensor<f64> = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let mut w = Tensor::<f64>::randn(&[4, 4], 0.5, &mut rng).with_requires_grad(true);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tv = tape.constant(target.clone());
    let wv = tape.watch(&mut w).expect("w is trainable");
    let loss = objective(&mut tape, xv, wv, tv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(wv).expect("w is on the tape").to_vec();

    let eval = |w: &Tensor<f64>| -> calf::Result<f64> {
        let mut tape = Tape::new();
        let (xv, tv, wv) = (tape.constant(x.clone()), tape.constant(target.clone()), tape.constant(w.clone()));
        let l = objective(&mut tape, xv, wv, tv)?;
        Ok(tape.value(l).data()[0])
    };

    println!("{:>5} {:>14} {:>14} {:>10}", "coord", "analytic", "numeric", "rel_err");
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[i] += STEP;
        minus.data_mut()[i] -= STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
        println!("{i:>5} {:>14.8} {numeric:>14.8} {rel:>10.2e}", analytic[i]);
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
