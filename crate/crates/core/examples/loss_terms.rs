//! Fit the logits of a tiny image by gradient descent while Adam updates the loss
//! weights. Each `s_i` trails `ln L_i`, the minimizer of `exp(-s)·L + s`.

use petseg::losses::{combined_loss, LossWeights, TERM_NAMES};
use petseg::optim::Adam;

fn main() -> petseg::Result<()> {
    let side = 8;
    let square = |i: usize| (3..6).contains(&(i / side)) && (2..5).contains(&(i % side));
    let target: Vec<f64> = (0..side * side).map(|i| square(i) as u8 as f64).collect();
    let mut logits = vec![0.0; side * side];
    let mut weights = LossWeights::default();
    let mut opt = Adam::<3>::new(0.05);
    for step in 0..=100 {
        let out = combined_loss(&logits, &target, side * side, &weights)?;
        if step % 20 == 0 {
            let terms: Vec<String> = TERM_NAMES
                .iter()
                .zip(out.terms)
                .zip(weights.s)
                .map(|((n, v), s)| format!("{n} {v:.4} (ln {:+.2}, s {s:+.2})", v.max(1e-12).ln()))
                .collect();
            println!("step {step:>3}  total {:+.4}  {}", out.total, terms.join("  "));
        }
        for (f, g) in logits.iter_mut().zip(&out.grad_logits) {
            *f -= 20.0 * g;
        }
        opt.step(&mut weights.s, &out.grad_s);
    }
    Ok(())
}
