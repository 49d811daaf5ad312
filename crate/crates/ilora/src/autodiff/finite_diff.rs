//! Central-difference gradient oracle.
//!
//! Evaluates `(f(x + h e_i) - f(x - h e_i)) / (2h)` coordinate by
//! coordinate. Deliberately independent of the tape: `f` is an opaque
//! scalar-valued function, typically a closure that rebuilds a forward pass
//! from scratch.

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub fn finite_diff<F>(f: &mut F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::arg(format!("finite_diff step must be finite and > 0, got {h}")));
    }
    let (rows, cols) = x.shape();
    let mut grad = Tensor::zeros(rows, cols);
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[idx] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[idx] = orig;
        let d = (up - down) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite_diff at coordinate {idx}"),
            });
        }
        grad.data_mut()[idx] = d;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_analytic_gradient_of_quadratic() {
        // f(x) = sum x_i^2, gradient 2x.
        let x = Tensor::row(&[1.0, -2.0, 0.5]);
        let g = finite_diff(&mut |t: &Tensor| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff(&mut |_t: &Tensor| Ok(0.0), &x, 0.0).is_err());
        assert!(finite_diff(&mut |_t: &Tensor| Ok(0.0), &x, -1e-5).is_err());
    }
}
