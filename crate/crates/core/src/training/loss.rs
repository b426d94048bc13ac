use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOut, Model};
use crate::tensor::{Real, Tape, Var};

/// Terms of the negative ELBO for one batch, all per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll_p: f64,
    /// Present only when states are supervised.
    pub nll_s: Option<f64>,
    pub kl: f64,
    pub total: f64,
}

fn gaussian_constant(sigma2: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * sigma2).ln()
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "sigma2 must be positive, got {sigma2}"
        )))
    }
}

/// `Σ 0.5·[(pred − target)²/σ² + ln(2πσ²)]` over every element, divided by
/// the number of samples in the batch.
pub fn gaussian_nll(pred: &[f64], target: &[f64], batch_size: usize, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    if pred.len() != target.len() {
        return Err(Error::Contract(format!(
            "gaussian_nll: {} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let c = gaussian_constant(sigma2);
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| 0.5 * (p - t).powi(2) / sigma2 + c)
        .sum();
    Ok(s / batch_size.max(1) as f64)
}

/// `Σ q·ln(q·n_e)` over every `(pair, state)` row, divided by the batch
/// size: the KL to a uniform prior over edge types.
pub fn kl_categorical_uniform(q: &[f64], edge_types: usize, batch_size: usize) -> f64 {
    let ln_ne = (edge_types as f64).ln();
    let s: f64 = q
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * (v.ln() + ln_ne))
        .sum();
    s / batch_size.max(1) as f64
}

/// Tape version of [`gaussian_nll`].
pub fn gaussian_nll_var<F: Real>(
    tape: &mut Tape<F>,
    pred: Var,
    target: &[F],
    batch_size: usize,
    sigma2: f64,
) -> Result<Var> {
    check_sigma2(sigma2)?;
    if tape.value(pred).len() != target.len() {
        return Err(Error::Contract(format!(
            "gaussian_nll: {} predictions for {} targets",
            tape.value(pred).len(),
            target.len()
        )));
    }
    let b = batch_size.max(1) as f64;
    let t = tape.constant_from(tape.shape(pred).to_vec(), target.to_vec())?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    let s = tape.scale(s, 0.5 / sigma2 / b);
    Ok(tape.add_scalar(s, target.len() as f64 * gaussian_constant(sigma2) / b))
}

/// Tape version of [`kl_categorical_uniform`] from `q` and `log q`.
pub fn kl_var<F: Real>(
    tape: &mut Tape<F>,
    q: Var,
    log_q: Var,
    edge_types: usize,
    batch_size: usize,
) -> Result<Var> {
    let b = batch_size.max(1) as f64;
    let rows = tape.value(q).len() / edge_types;
    let ql = tape.mul(q, log_q)?;
    let s = tape.sum(ql);
    let s = tape.scale(s, 1.0 / b);
    Ok(tape.add_scalar(s, rows as f64 * (edge_types as f64).ln() / b))
}

/// Categorical negative log-likelihood of `targets` under `softmax(logits)`,
/// summed over rows and divided by the batch size.
pub fn categorical_nll_var<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[usize],
    batch_size: usize,
) -> Result<Var> {
    let c = *tape.shape(logits).last().unwrap();
    if tape.value(logits).len() != targets.len() * c {
        return Err(Error::shape(
            "categorical_nll",
            tape.shape(logits),
            &[targets.len(), c],
        ));
    }
    let mut onehot = vec![F::zero(); targets.len() * c];
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Contract(format!(
                "state target {t} out of range 0..{c}"
            )));
        }
        onehot[r * c + t] = F::one();
    }
    let lp = tape.log_softmax(logits, 1.0)?;
    let oh = tape.constant_from(tape.shape(lp).to_vec(), onehot)?;
    let picked = tape.mul(lp, oh)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / batch_size.max(1) as f64))
}

/// Scalar loss variable plus its breakdown.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `nll_p + λ·nll_s + kl` for one forward pass.
pub fn negative_elbo<F: Real>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    out: &ForwardOut<F>,
    batch: &Batch<F>,
    sigma2: f64,
    lambda: f64,
) -> Result<Objective> {
    let bsz = batch.size;
    let mut nll_p: Option<Var> = None;
    let mut nll_s: Option<Var> = None;
    for step in &out.steps {
        let term = gaussian_nll_var(tape, step.pred, &step.target, bsz, sigma2)?;
        nll_p = Some(match nll_p {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        if let Some(logits) = step.state_logits {
            let term = categorical_nll_var(tape, logits, &step.state_target, bsz)?;
            nll_s = Some(match nll_s {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    let nll_p = nll_p.ok_or_else(|| Error::Contract("rollout produced no steps".into()))?;
    let kl = kl_var(tape, out.q, out.log_q, model.config.edge_types, bsz)?;
    let mut total = tape.add(nll_p, kl)?;
    if let Some(ns) = nll_s {
        let weighted = tape.scale(ns, lambda);
        total = tape.add(total, weighted)?;
    }
    let v = |tape: &Tape<F>, x: Var| tape.scalar_value(x).to_f64_lossy();
    let breakdown = LossBreakdown {
        nll_p: v(tape, nll_p),
        nll_s: nll_s.map(|x| v(tape, x)),
        kl: v(tape, kl),
        total: v(tape, total),
    };
    Ok(Objective { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIGMA2: f64 = 5e-5;

    #[test]
    fn nll_constant_term() {
        // Oracle: 0.5·ln(2π·5e-5) evaluated independently.
        let c = 0.5 * (2.0 * std::f64::consts::PI * 5e-5_f64).ln();
        assert!((c - (-4.0328)).abs() < 1e-4);
        let v = gaussian_nll(&[0.3], &[0.3], 1, SIGMA2).unwrap();
        assert!((v - c).abs() < 1e-12);
    }

    #[test]
    fn nll_error_adds_one() {
        let base = gaussian_nll(&[0.0], &[0.0], 1, SIGMA2).unwrap();
        let off = gaussian_nll(&[0.01], &[0.0], 1, SIGMA2).unwrap();
        assert!((off - base - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nll_doubling_variance() {
        let (p, t) = ([0.02, -0.01], [0.0, 0.0]);
        let q1 = gaussian_nll(&p, &t, 1, SIGMA2).unwrap() - 2.0 * gaussian_constant(SIGMA2);
        let q2 =
            gaussian_nll(&p, &t, 1, 2.0 * SIGMA2).unwrap() - 2.0 * gaussian_constant(2.0 * SIGMA2);
        assert!((q2 - q1 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn nll_rejects_bad_inputs() {
        assert!(gaussian_nll(&[0.0], &[0.0, 1.0], 1, SIGMA2).is_err());
        assert!(gaussian_nll(&[0.0], &[0.0], 1, 0.0).is_err());
    }

    #[test]
    fn kl_hand_values() {
        assert!(kl_categorical_uniform(&[0.5, 0.5], 2, 1).abs() < 1e-15);
        assert!((kl_categorical_uniform(&[1.0, 0.0], 2, 1) - 2f64.ln()).abs() < 1e-12);
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let got = kl_categorical_uniform(&[0.75, 0.25], 2, 1);
        assert!((got - want).abs() < 1e-12 && (got - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn tape_versions_agree() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.constant_from([2, 1], vec![0.1, 0.2]).unwrap();
        let v = gaussian_nll_var(&mut tape, pred, &[0.1, 0.25], 2, SIGMA2).unwrap();
        let want = gaussian_nll(&[0.1, 0.2], &[0.1, 0.25], 2, SIGMA2).unwrap();
        assert!((tape.scalar_value(v) - want).abs() < 1e-9);

        let logits = tape
            .constant_from([1, 2], vec![(0.75f64).ln(), (0.25f64).ln()])
            .unwrap();
        let lq = tape.log_softmax(logits, 1.0).unwrap();
        let q = tape.exp(lq);
        let kl = kl_var(&mut tape, q, lq, 2, 1).unwrap();
        assert!((tape.scalar_value(kl) - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn categorical_nll_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant_from([2, 2], vec![0.0; 4]).unwrap();
        let v = categorical_nll_var(&mut tape, logits, &[0, 1], 1).unwrap();
        assert!((tape.scalar_value(v) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }
}
