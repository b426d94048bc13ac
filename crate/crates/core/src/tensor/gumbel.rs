use rand::Rng;

use super::tape::{Tape, Var};
use super::Real;
use crate::error::{Error, Result};

/// `n` draws of standard Gumbel noise, `-ln(-ln u)` with `u ~ U(0,1)`.
pub fn gumbel_noise<F: Real>(rng: &mut impl Rng, n: usize) -> Vec<F> {
    (0..n)
        .map(|_| {
            // Open interval keeps both logs finite.
            let u: f64 = rng.random::<f64>().clamp(1e-20, 1.0 - 1e-16);
            F::from_f64_lossy(-(-u.ln()).ln())
        })
        .collect()
}

/// Relaxed categorical sample `softmax((log_probs + g) / tau)` along the
/// trailing axis, with caller-supplied noise `g`.
///
/// With `hard` set the value is the one-hot argmax of the relaxed sample and
/// the gradient is that of the relaxed sample (straight-through).
pub fn gumbel_softmax_sample<F: Real>(
    tape: &mut Tape<F>,
    log_probs: Var,
    noise: &[F],
    tau: f64,
    hard: bool,
) -> Result<Var> {
    if noise.len() != tape.value(log_probs).len() {
        return Err(Error::shape(
            "gumbel_softmax",
            tape.shape(log_probs),
            &[noise.len()],
        ));
    }
    let g = tape.constant_from(tape.shape(log_probs).to_vec(), noise.to_vec())?;
    let perturbed = tape.add(log_probs, g)?;
    let soft = tape.softmax(perturbed, tau)?;
    if !hard {
        return Ok(soft);
    }
    let c = *tape.shape(soft).last().unwrap();
    let mut onehot = vec![F::zero(); tape.value(soft).len()];
    for (row, out) in tape
        .value(soft)
        .chunks_exact(c)
        .zip(onehot.chunks_exact_mut(c))
    {
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        out[best] = F::one();
    }
    tape.straight_through(onehot, soft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn equal_logits_and_equal_noise_give_uniform() {
        let mut tape = Tape::<f64>::new();
        let lp = tape.constant_from([1, 4], vec![-(4f64.ln()); 4]).unwrap();
        let y = gumbel_softmax_sample(&mut tape, lp, &[0.3; 4], 0.5, false).unwrap();
        for &v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_sample_is_one_hot_with_soft_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(&crate::tensor::Tensor::new([1, 3], vec![0.2, -0.1, 0.5]).unwrap());
        let lp = tape.log_softmax(w, 1.0).unwrap();
        let noise = [0.0, 0.0, 0.0];
        let hard = gumbel_softmax_sample(&mut tape, lp, &noise, 0.5, true).unwrap();
        assert_eq!(tape.value(hard), &[0.0, 0.0, 1.0]);
        let pick = tape.slice_cols(hard, 2, 3).unwrap();
        let loss = tape.sum(pick);
        let grads = tape.backward(loss).unwrap();

        let mut tape2 = Tape::<f64>::new();
        let w2 = tape2.param(&crate::tensor::Tensor::new([1, 3], vec![0.2, -0.1, 0.5]).unwrap());
        let lp2 = tape2.log_softmax(w2, 1.0).unwrap();
        let soft = gumbel_softmax_sample(&mut tape2, lp2, &noise, 0.5, false).unwrap();
        let pick2 = tape2.slice_cols(soft, 2, 3).unwrap();
        let loss2 = tape2.sum(pick2);
        let grads2 = tape2.backward(loss2).unwrap();
        assert_eq!(grads.get(w).unwrap(), grads2.get(w2).unwrap());
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let a: Vec<f32> = gumbel_noise(&mut stream(1, "gumbel", 0), 64);
        let b: Vec<f32> = gumbel_noise(&mut stream(1, "gumbel", 0), 64);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }
}
