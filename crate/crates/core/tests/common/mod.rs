//! Shared test oracles, independent of the library's implementation paths.

#![allow(dead_code)]

use ndarray::{Array1, Array2};

/// Density of a 1-D diagonal-Gaussian mixture.
pub fn mixture_pdf_1d(z: f64, weights: &[f64], means: &[f64], vars: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..weights.len() {
        let diff = z - means[k];
        acc += weights[k] * (-0.5 * diff * diff / vars[k]).exp()
            / (2.0 * std::f64::consts::PI * vars[k]).sqrt();
    }
    acc
}

/// `KL(q || p)` between two 1-D Gaussian mixtures by trapezoidal quadrature
/// over `z` in `[-12, 12]` with step 1e-3.
pub fn quadrature_mixture_kl_1d(
    wq: &[f64],
    mq: &[f64],
    vq: &[f64],
    wp: &[f64],
    mp: &[f64],
    vp: &[f64],
) -> f64 {
    let (lo, hi, step) = (-12.0, 12.0, 1e-3);
    let n = ((hi - lo) / step) as usize;
    let mut acc = 0.0;
    for i in 0..=n {
        let z = lo + i as f64 * step;
        let q = mixture_pdf_1d(z, wq, mq, vq);
        if q <= 0.0 {
            continue;
        }
        let p = mixture_pdf_1d(z, wp, mp, vp);
        let f = q * (q / p).ln();
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * f;
    }
    acc * step
}

/// A reproducible random 1-D mixture pair (posterior-style and prior-style)
/// with K components, bounded so the quadrature window holds all the mass.
pub struct MixturePair1d {
    pub q_logits: Array1<f64>,
    pub q_means: Array2<f64>,
    pub q_log_vars: Array2<f64>,
    pub p_logits: Array1<f64>,
    pub p_means: Array2<f64>,
    pub p_log_vars: Array2<f64>,
}

pub fn random_mixture_pair_1d(k: usize, rng: &mut impl rand::Rng) -> MixturePair1d {
    let gen_logits = |rng: &mut dyn FnMut() -> f64| Array1::from_shape_fn(k, |_| rng());
    let mut r1 = || rng.random_range(-1.5..1.5);
    let q_logits = gen_logits(&mut r1);
    let p_logits = Array1::from_shape_fn(k, |_| rng.random_range(-1.5..1.5));
    let q_means = Array2::from_shape_fn((k, 1), |_| rng.random_range(-3.0..3.0));
    let p_means = Array2::from_shape_fn((k, 1), |_| rng.random_range(-3.0..3.0));
    // variances in [0.3, 2.2]: wide enough for stable quadrature, narrow
    // enough that [-12,12] captures everything
    let q_log_vars = Array2::from_shape_fn((k, 1), |_| rng.random_range(0.3f64..2.2).ln());
    let p_log_vars = Array2::from_shape_fn((k, 1), |_| rng.random_range(0.3f64..2.2).ln());
    MixturePair1d {
        q_logits,
        q_means,
        q_log_vars,
        p_logits,
        p_means,
        p_log_vars,
    }
}

/// Softmax used by oracle-side weight computations.
pub fn softmax_vec(logits: &Array1<f64>) -> Vec<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
