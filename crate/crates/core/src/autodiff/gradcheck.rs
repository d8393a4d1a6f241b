use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares backward-pass gradients of a scalar function against central
/// finite differences and returns the largest relative error.
///
/// `f` is rebuilt on a fresh tape for every evaluation, receiving `x` as a
/// leaf. Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.detach());
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(probe);
        let out = f(&mut tape, leaf)?;
        Ok(tape.item(out))
    };

    let mut worst = 0.0_f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.detach();
        plus.data_mut()[i] += eps;
        let mut minus = x.detach();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
