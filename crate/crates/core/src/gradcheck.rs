//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward evaluation closure, so it is
//! independent of the tape's backward pass and can be used as an oracle for it.

use crate::autodiff::Tensor;

/// Numeric gradient of `f` w.r.t. every element of every tensor in `params`,
/// by central differences with the given step.
pub fn central_difference<F>(mut f: F, params: &[Tensor], step: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].raw_dim());
        for idx in 0..params[pi].len() {
            let orig = params[pi].as_slice().unwrap()[idx];
            work[pi].as_slice_mut().unwrap()[idx] = orig + step;
            let fp = f(&work);
            work[pi].as_slice_mut().unwrap()[idx] = orig - step;
            let fm = f(&work);
            work[pi].as_slice_mut().unwrap()[idx] = orig;
            grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// Worst element found by [`compare`].
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

/// Compare analytic and numeric gradients element-wise with
/// `|a - n| <= atol + rtol * max(|a|, |n|)`. Returns the worst offender,
/// or `None` when every element passes.
pub fn compare(
    analytic: &[Tensor],
    numeric: &[Tensor],
    rtol: f64,
    atol: f64,
) -> Option<GradMismatch> {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: Option<GradMismatch> = None;
    for (pi, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (idx, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
            let tol = atol + rtol * av.abs().max(nv.abs());
            let err = (av - nv).abs();
            if err > tol {
                let rel = err / av.abs().max(nv.abs()).max(1e-300);
                let cand = GradMismatch {
                    param: pi,
                    index: idx,
                    analytic: av,
                    numeric: nv,
                    error: rel,
                };
                if worst.as_ref().is_none_or(|w| rel > w.error) {
                    worst = Some(cand);
                }
            }
        }
    }
    worst
}

/// Assert-style wrapper used by the test suites. `step` 1e-4 and `rtol` 1e-3
/// are the standard double-precision settings here.
pub fn assert_grads_match<F>(f: F, params: &[Tensor], analytic: &[Tensor], step: f64, rtol: f64, atol: f64)
where
    F: FnMut(&[Tensor]) -> f64,
{
    let numeric = central_difference(f, params, step);
    if let Some(m) = compare(analytic, &numeric, rtol, atol) {
        panic!(
            "gradient mismatch: param {} index {}: analytic {:.6e} vs numeric {:.6e} (rel err {:.3e})",
            m.param, m.index, m.analytic, m.numeric, m.error
        );
    }
}

/// Numeric gradients at selected `(param, flat_index)` coordinates only —
/// used when checking a sampled subset of a large parameter set.
pub fn central_difference_sampled<F>(
    mut f: F,
    params: &[Tensor],
    step: f64,
    coords: &[(usize, usize)],
) -> Vec<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    coords
        .iter()
        .map(|&(pi, idx)| {
            let orig = params[pi].as_slice().unwrap()[idx];
            work[pi].as_slice_mut().unwrap()[idx] = orig + step;
            let fp = f(&work);
            work[pi].as_slice_mut().unwrap()[idx] = orig - step;
            let fm = f(&work);
            work[pi].as_slice_mut().unwrap()[idx] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}
