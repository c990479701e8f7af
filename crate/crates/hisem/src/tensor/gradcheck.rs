//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numeric side never touches the tape: it perturbs one stored
//! coordinate at a time and re-runs the forward closure, so it stays an
//! independent oracle for whatever the backward pass claims.

use super::{Scalar, Tensor};

/// Maximum relative error between analytic gradients and central finite
/// differences, over every coordinate of every input.
///
/// `f` must be a pure function of the inputs. Each input must be a leaf
/// with `requires_grad` set. The relative error per coordinate is
/// |analytic − fd| / max(|analytic|, |fd|, 1e-8).
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: Scalar) -> Scalar
where
    F: Fn(&[Tensor]) -> Tensor,
{
    for t in inputs {
        assert!(t.is_requires_grad(), "grad_check inputs must require grad");
        t.zero_grad();
    }
    let loss = f(inputs);
    assert_eq!(loss.len(), 1, "grad_check expects a scalar function");
    loss.backward().expect("backward failed in grad_check");

    let mut max_rel = 0.0_f64;
    for t in inputs {
        let analytic = t
            .grad_vec()
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let base = t.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            t.set_data(&plus);
            let up = super::no_grad(|| f(inputs).item());
            let mut minus = base.clone();
            minus[i] -= eps;
            t.set_data(&minus);
            let down = super::no_grad(|| f(inputs).item());
            t.set_data(&base);
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
