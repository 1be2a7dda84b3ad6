//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Graph, Tensor, Var};

/// Compares analytic gradients against central differences.
///
/// `f` builds a scalar output from the single input leaf it is handed; it is
/// re-run `2·numel + 1` times (once analytically, twice per coordinate).
/// Returns `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    if eps <= S::zero() {
        return Err(Error::contract("grad_check requires eps > 0"));
    }

    let eval = |t: Tensor<S>| -> Result<S> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let y = f(&mut g, v)?;
        if g.value(y).len() != 1 {
            return Err(Error::contract(format!(
                "grad_check requires a scalar-valued function, got shape {:?}",
                g.shape(y)
            )));
        }
        g.scalar_value(y)
    };

    // analytic pass
    let analytic = {
        let mut g = Graph::new();
        let v = g.leaf(x.clone().with_grad(true));
        let y = f(&mut g, v)?;
        if g.value(y).len() != 1 {
            return Err(Error::contract(format!(
                "grad_check requires a scalar-valued function, got shape {:?}",
                g.shape(y)
            )));
        }
        g.backward(y)?;
        g.grad(v)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); x.numel()])
    };

    let mut worst = S::zero();
    let two_eps = eps + eps;
    for i in 0..x.numel() {
        let mut plus = x.clone().with_grad(false);
        plus.data_mut()[i] += eps;
        let mut minus = x.clone().with_grad(false);
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / two_eps;
        let denom = S::one().max(analytic[i].abs());
        let err = (analytic[i] - fd).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
