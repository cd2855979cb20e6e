use crate::{Error, Result};

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::ZeroStep);
    }
    let (s, w) = (step as f64, warmup.max(1) as f64);
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}
