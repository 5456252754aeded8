use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compares the taped gradient of a scalar function against central finite
/// differences and returns the largest relative error
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over all entries of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("grad_check: eps must be positive, got {eps}")));
    }
    let tape = Tape::new();
    let leaf = tape.watch(&x.detach().with_requires_grad(true));
    let loss = f(&tape, &leaf)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }
    let grads = tape.backward(&loss)?;
    let analytic = match grads.get(&leaf) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::from_parts(x.shape().to_vec(), data);
        let value = f(&Tape::new(), &probe)?.item()?;
        if !value.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite value under perturbation".into()));
        }
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let ad = analytic[i];
        if !ad.is_finite() {
            return Err(Error::Numeric(format!("grad_check: non-finite gradient at entry {i}")));
        }
        let denom = ad.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((ad - numeric).abs() / denom);
    }
    Ok(worst)
}
