use super::scalar::Scalar;
use crate::subword::PAD;
use crate::{Error, Result};

/// Label-smoothed cross-entropy, averaged over non-pad targets.
///
/// The smoothed target puts `1 - eps` on the gold token and spreads `eps`
/// uniformly over the other `V - 1` entries. Returns the loss and its
/// gradient with respect to the pre-softmax logits (`[rows, vocab]`).
pub fn smoothed_cross_entropy<T: Scalar>(
    log_probs: &[T],
    targets: &[u32],
    vocab: usize,
    eps: f64,
) -> Result<(f64, Vec<T>)> {
    if log_probs.len() != targets.len() * vocab {
        return Err(Error::ShapeMismatch(format!(
            "{} log-probs for {} targets x {vocab}",
            log_probs.len(),
            targets.len()
        )));
    }
    let n = targets.iter().filter(|&&t| t != PAD).count();
    if n == 0 {
        return Err(Error::AllPadTarget);
    }
    let off = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
    let gold = 1.0 - eps;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![T::zero(); log_probs.len()];
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let row = &log_probs[r * vocab..(r + 1) * vocab];
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        let t = t as usize;
        let mut sum_lp = 0.0;
        for (i, (&lp, gi)) in row.iter().zip(g.iter_mut()).enumerate() {
            let lp = lp.to_f64().unwrap_or(f64::NAN);
            let q = if i == t { gold } else { off };
            if i != t {
                sum_lp += lp;
            }
            *gi = T::c((lp.exp() - q) * inv_n);
        }
        let gold_lp = row[t].to_f64().unwrap_or(f64::NAN);
        total -= gold * gold_lp + off * sum_lp;
    }
    Ok((total * inv_n, grad))
}

/// Loss value only.
pub fn loss<T: Scalar>(log_probs: &[T], targets: &[u32], vocab: usize, label_smoothing: f64) -> Result<f64> {
    smoothed_cross_entropy(log_probs, targets, vocab, label_smoothing).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_predictor_gives_log_v() {
        let v = 7;
        let lp = vec![-(v as f64).ln(); 2 * v];
        for eps in [0.0, 0.1, 0.5] {
            let l = loss(&lp, &[3, 4], v, eps).unwrap();
            assert!((l - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_rows_are_ignored() {
        let lp = vec![-(4f64).ln(); 8];
        assert!(matches!(loss(&lp, &[PAD, PAD], 4, 0.1), Err(Error::AllPadTarget)));
        let (_, g) = smoothed_cross_entropy(&lp, &[PAD, 2], 4, 0.1).unwrap();
        assert!(g[..4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn perfect_prediction_without_smoothing_is_free() {
        let mut lp = vec![-50.0f64; 5];
        lp[2] = 0.0;
        assert!(loss(&lp, &[2], 5, 0.0).unwrap() < 1e-9);
    }
}
