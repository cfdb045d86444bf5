//! Adam with decoupled rates for the generator-side and discriminator-side
//! parameter sets.

use crate::autodiff::Tensor;
use ndarray::{ArrayD, ArrayViewMutD, IxDyn};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam state over a fixed named parameter subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub step: u64,
    /// `(name, first moment, second moment)` in canonical parameter order.
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Adam {
    /// Zero-initialized moments for the given named shapes.
    pub fn new(learning_rate: f64, named_shapes: &[(String, Vec<usize>)]) -> Adam {
        Adam {
            learning_rate,
            step: 0,
            moments: named_shapes
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        ArrayD::zeros(IxDyn(s)),
                        ArrayD::zeros(IxDyn(s)),
                    )
                })
                .collect(),
        }
    }

    /// One update over `params`; entries without a gradient are skipped
    /// (their moments also stay untouched).
    pub fn apply(
        &mut self,
        params: &mut [(String, ArrayViewMutD<'_, f64>)],
        grads: &[(String, Tensor)],
    ) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (name, m, v) in self.moments.iter_mut() {
            let Some((_, g)) = grads.iter().find(|(gn, _)| gn == name) else {
                continue;
            };
            let Some((_, p)) = params.iter_mut().find(|(pn, _)| pn == name) else {
                continue;
            };
            azip(m, v, p, g, self.learning_rate, bc1, bc2);
        }
    }
}

fn azip(
    m: &mut Tensor,
    v: &mut Tensor,
    p: &mut ArrayViewMutD<'_, f64>,
    g: &Tensor,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    let ms = m.as_slice_mut().unwrap();
    let vs = v.as_slice_mut().unwrap();
    let gs = g.as_slice().unwrap();
    let ps = p.as_slice_mut().unwrap();
    for i in 0..ms.len() {
        ms[i] = ADAM_BETA1 * ms[i] + (1.0 - ADAM_BETA1) * gs[i];
        vs[i] = ADAM_BETA2 * vs[i] + (1.0 - ADAM_BETA2) * gs[i] * gs[i];
        let mhat = ms[i] / bc1;
        let vhat = vs[i] / bc2;
        ps[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(p) = |p - t|^2
        let target = arr1(&[1.0, -2.0, 0.5]).into_dyn();
        let mut p = arr1(&[0.0, 0.0, 0.0]).into_dyn();
        let mut opt = Adam::new(0.05, &[("p".to_string(), vec![3])]);
        for _ in 0..400 {
            let g = (&p - &target) * 2.0;
            let mut view = p.view_mut();
            opt.apply(
                &mut [("p".to_string(), view.view_mut())],
                &[("p".to_string(), g)],
            );
        }
        for (a, b) in p.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut p = arr1(&[1.0, 2.0]).into_dyn();
        let orig = p.clone();
        let mut opt = Adam::new(0.0, &[("p".to_string(), vec![2])]);
        let g = arr1(&[5.0, -3.0]).into_dyn();
        let mut view = p.view_mut();
        opt.apply(
            &mut [("p".to_string(), view.view_mut())],
            &[("p".to_string(), g)],
        );
        drop(view);
        assert_eq!(p, orig);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn missing_gradients_skip_their_parameters() {
        let mut p = arr1(&[1.0]).into_dyn();
        let mut q = arr1(&[1.0]).into_dyn();
        let mut opt = Adam::new(0.1, &[("p".into(), vec![1]), ("q".into(), vec![1])]);
        let (mut pv, mut qv) = (p.view_mut(), q.view_mut());
        opt.apply(
            &mut [("p".into(), pv.view_mut()), ("q".into(), qv.view_mut())],
            &[("p".into(), arr1(&[1.0]).into_dyn())],
        );
        drop((pv, qv));
        assert_ne!(p[[0]], 1.0);
        assert_eq!(q[[0]], 1.0);
    }
}
