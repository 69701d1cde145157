//! Central finite-difference gradient verification.
//!
//! Used by the test suites to compare tape gradients against numerical
//! derivatives for every differentiable block.

use super::{Tape, Tensor};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error between tape gradients and central finite
/// differences of `f` over every element of every input.
///
/// `f` must map the inputs to a scalar tensor and must not register its own
/// leaves; the checker tracks `inputs` itself. The error is
/// `|g_tape - g_fd| / max(1, |g_tape|, |g_fd|)`, so gradients of magnitude
/// below 1 are compared absolutely.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, f: F) -> f64
where
    F: Fn(&Tape, &[Tensor]) -> Tensor,
{
    let tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| tape.var(t)).collect();
    let out = f(&tape, &tracked);
    assert_eq!(out.len(), 1, "grad_check target must be scalar, got {:?}", out.shape());
    let grads = tape.backward(&out).expect("backward failed in grad_check");

    let eval = |perturbed: &[Tensor]| -> f64 {
        let inf = Tape::inference();
        f(&inf, perturbed).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(&tracked[i]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut pv = input.to_vec();
            pv[j] += eps;
            plus[i] = Tensor::from_vec(input.shape(), pv);
            let mut mv = input.to_vec();
            mv[j] -= eps;
            minus[i] = Tensor::from_vec(input.shape(), mv);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
