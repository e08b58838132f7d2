//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Tensor};
use crate::numerics::tensor::TensorData;

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central finite differences, elementwise, at fp64.
///
/// `f` must build its computation on the provided fresh graph and return
/// a scalar (single-element) tensor. Returns the maximum relative error
/// `|ad - fd| / max(|ad|, |fd|, 1)` over all elements of `x`.
pub fn grad_check<F>(f: F, x: &TensorData<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Tensor) -> Result<Tensor>,
{
    let analytic = {
        let mut g = Graph::new();
        let xt = g.leaf(x.clone(), true)?;
        let y = f(&mut g, xt)?;
        if g.value(y).numel() != 1 {
            return Err(Error::Dimension(
                "grad_check: f must return a scalar".into(),
            ));
        }
        g.backward(y)?;
        match g.grad(xt) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; x.numel()],
        }
    };

    let eval = |data: &TensorData<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xt = g.leaf(data.clone(), false)?;
        let y = f(&mut g, xt)?;
        Ok(g.value(y).item())
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let ad = analytic[i];
        let denom = ad.abs().max(fd.abs()).max(1.0);
        max_err = max_err.max((ad - fd).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        // Binary-exact values and step make the central difference exact,
        // so the reported error is exactly zero.
        let x = TensorData::from_slice(&[1.0, 2.0, -0.5]);
        let err = grad_check(|g, x| g.sum(x), &x, 0.5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn scale_of_mul_checks_out() {
        let x = TensorData::from_slice(&[0.7, -1.3, 0.4]);
        let err = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                let s = g.sum(y)?;
                g.scale(s, 0.5)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err {}", err);
    }
}
