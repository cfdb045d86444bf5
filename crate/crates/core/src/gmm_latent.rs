//! Probability math for the shared Gaussian-mixture latent space: densities,
//! reparameterized sampling, and KL estimators between posterior and prior
//! mixtures.
//!
//! The differentiable forms live in the `*_graph` builders, which record onto
//! an [`autodiff::Tape`]; the plain operations wrap those builders on a
//! single-element batch so there is exactly one formula for each quantity.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::SeedStream;
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};

use rand_distr::{Distribution, Gumbel, StandardNormal};

/// Smallest admissible variance: `exp(log_var) >= VAR_FLOOR`.
pub const VAR_FLOOR: f64 = 1e-8;

/// `ln(VAR_FLOOR)`; training projects learned log-variances onto this bound.
pub fn log_var_floor() -> f64 {
    VAR_FLOOR.ln()
}

const LN_2PI: f64 = 1.8378770664093453;

/// Max-shifted softmax of a logit vector.
pub fn softmax1(logits: &ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = logits.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

/// Max-shifted log-sum-exp of a slice.
pub fn logsumexp1(xs: &[f64]) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// The shared latent prior p(z): mixture weights (as logits), component means
/// and diagonal log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weight_logits: Array1<f64>,
    pub means: Array2<f64>,
    pub log_vars: Array2<f64>,
}

impl GmmParams {
    pub fn new(weight_logits: Array1<f64>, means: Array2<f64>, log_vars: Array2<f64>) -> Result<Self> {
        let k = weight_logits.len();
        if k == 0 {
            return Err(Error::config("GmmParams requires K >= 1"));
        }
        if means.nrows() != k || log_vars.nrows() != k || means.ncols() != log_vars.ncols() {
            return Err(Error::contract(format!(
                "GmmParams shape mismatch: logits K={}, means {:?}, log_vars {:?}",
                k,
                means.dim(),
                log_vars.dim()
            )));
        }
        if means.ncols() == 0 {
            return Err(Error::config("GmmParams requires d >= 1"));
        }
        let p = GmmParams {
            weight_logits,
            means,
            log_vars,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.weight_logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Mixture weights on the simplex.
    pub fn weights(&self) -> Array1<f64> {
        softmax1(&self.weight_logits.view())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight_logits.iter().all(|x| x.is_finite())
            || !self.means.iter().all(|x| x.is_finite())
            || !self.log_vars.iter().all(|x| x.is_finite())
        {
            return Err(Error::numeric("GmmParams contains non-finite values"));
        }
        Ok(())
    }
}

/// Encoder output defining q(z|x) as a mixture: per-component means produced
/// by the encoder heads, domain-level log-variances shared across inputs, and
/// this input's mixture logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub comp_means: Array2<f64>,
    pub comp_log_vars: Array2<f64>,
    pub mixture_logits: Array1<f64>,
    pub domain_id: u8,
}

impl PosteriorParams {
    pub fn new(
        comp_means: Array2<f64>,
        comp_log_vars: Array2<f64>,
        mixture_logits: Array1<f64>,
        domain_id: u8,
    ) -> Result<Self> {
        let k = mixture_logits.len();
        if comp_means.nrows() != k || comp_log_vars.dim() != comp_means.dim() {
            return Err(Error::contract(format!(
                "PosteriorParams shape mismatch: logits K={}, means {:?}, log_vars {:?}",
                k,
                comp_means.dim(),
                comp_log_vars.dim()
            )));
        }
        if domain_id != 1 && domain_id != 2 {
            return Err(Error::contract("domain_id must be 1 or 2"));
        }
        Ok(PosteriorParams {
            comp_means,
            comp_log_vars,
            mixture_logits,
            domain_id,
        })
    }

    pub fn k(&self) -> usize {
        self.mixture_logits.len()
    }

    pub fn dim(&self) -> usize {
        self.comp_means.ncols()
    }

    pub fn weights(&self) -> Array1<f64> {
        softmax1(&self.mixture_logits.view())
    }
}

/// A drawn latent code with its (relaxed or one-hot) component selector.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Array1<f64>,
    pub soft_assignment: Array1<f64>,
    pub temperature: f64,
}

/// Component-selection mode for posterior sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Temperature-relaxed categorical; gradients reach every component.
    Relaxed,
    /// One-hot categorical draw; gradients reach only the drawn component.
    Hard,
}

// ---------------------------------------------------------------------------
// Graph builders (differentiable forms)
// ---------------------------------------------------------------------------

/// Prior parameters as tape vars.
#[derive(Clone, Copy)]
pub struct GmmVars {
    pub weight_logits: Var,
    pub means: Var,
    pub log_vars: Var,
}

/// Posterior parameters as tape vars for a batch of inputs:
/// `comp_means [B,K,d]`, `comp_log_vars [K,d]`, `mixture_logits [B,K]`.
#[derive(Clone, Copy)]
pub struct PosteriorVars {
    pub comp_means: Var,
    pub comp_log_vars: Var,
    pub mixture_logits: Var,
}

/// A batch of sampled latents on the tape: `z [B,d]`, `soft_assignment [B,K]`.
#[derive(Clone, Copy)]
pub struct LatentSampleVars {
    pub z: Var,
    pub soft_assignment: Var,
}

/// Insert prior parameters as differentiable leaves.
pub fn prior_vars(tape: &mut Tape, p: &GmmParams) -> GmmVars {
    GmmVars {
        weight_logits: tape.leaf(p.weight_logits.clone().into_dyn()),
        means: tape.leaf(p.means.clone().into_dyn()),
        log_vars: tape.leaf(p.log_vars.clone().into_dyn()),
    }
}

/// Insert one posterior as a batch of one.
pub fn posterior_vars_single(tape: &mut Tape, q: &PosteriorParams) -> PosteriorVars {
    let (k, d) = q.comp_means.dim();
    let means = q
        .comp_means
        .clone()
        .into_shape_with_order((1, k, d))
        .unwrap();
    let logits = q
        .mixture_logits
        .clone()
        .into_shape_with_order((1, k))
        .unwrap();
    PosteriorVars {
        comp_means: tape.leaf(means.into_dyn()),
        comp_log_vars: tape.leaf(q.comp_log_vars.clone().into_dyn()),
        mixture_logits: tape.leaf(logits.into_dyn()),
    }
}

fn batch_of(tape: &Tape, q: &PosteriorVars) -> (usize, usize, usize) {
    let s = tape.value(q.comp_means).shape().to_vec();
    (s[0], s[1], s[2])
}

/// Draw one latent per batch row. Relaxed mode blends all K reparameterized
/// component draws with a Gumbel-softmax selector; hard mode keeps only the
/// Gumbel-argmax component.
pub fn sample_posterior_graph(
    tape: &mut Tape,
    q: &PosteriorVars,
    temperature: f64,
    mode: SampleMode,
    rng: &mut SeedStream,
) -> LatentSampleVars {
    assert!(temperature > 0.0, "temperature must be positive");
    let (b, k, d) = batch_of(tape, q);
    let gumbel = Gumbel::new(0.0, 1.0).unwrap();
    let g = Array2::from_shape_fn((b, k), |_| gumbel.sample(rng));
    let eps = Array3::from_shape_fn((b, k, d), |_| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    });

    // per-component reparameterized draws: z_k = mu_k + sigma_k * eps_k
    let half_lv = tape.scale(q.comp_log_vars, 0.5);
    let sigma = tape.exp(half_lv);
    let sigma_b = tape.broadcast_to(sigma, &[b, k, d]);
    let eps_v = tape.constant(eps.into_dyn());
    let noise = tape.mul(sigma_b, eps_v);
    let zk = tape.add(q.comp_means, noise);

    let g_v = tape.constant(g.into_dyn());
    let perturbed = tape.add(q.mixture_logits, g_v);
    match mode {
        SampleMode::Relaxed => {
            let scaled = tape.scale(perturbed, 1.0 / temperature);
            let assign = tape.softmax(scaled, 1);
            let z = tape.weighted_sum_k(assign, zk);
            LatentSampleVars {
                z,
                soft_assignment: assign,
            }
        }
        SampleMode::Hard => {
            // Gumbel-argmax is an exact categorical draw from softmax(logits).
            let pv = tape
                .value(perturbed)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let idx: Vec<usize> = pv
                .rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect();
            let mut onehot = Array2::<f64>::zeros((b, k));
            for (bi, &ki) in idx.iter().enumerate() {
                onehot[[bi, ki]] = 1.0;
            }
            let assign = tape.constant(onehot.into_dyn());
            let z = tape.select_k(zk, idx);
            LatentSampleVars {
                z,
                soft_assignment: assign,
            }
        }
    }
}

/// `log q(z)` under the posterior mixture, per batch row.
pub fn posterior_log_density_graph(tape: &mut Tape, z: Var, q: &PosteriorVars) -> Var {
    let lp = tape.gauss_log_pdf(z, q.comp_means, q.comp_log_vars);
    let logw = tape.log_softmax(q.mixture_logits, 1);
    let joint = tape.add(lp, logw);
    tape.logsumexp(joint, 1)
}

/// `log p(z)` under the prior mixture, per batch row.
pub fn prior_log_density_graph(tape: &mut Tape, z: Var, p: &GmmVars) -> Var {
    let b = tape.value(z).shape()[0];
    let k = tape.value(p.weight_logits).shape()[0];
    let lp = tape.gauss_log_pdf(z, p.means, p.log_vars);
    let logw = tape.log_softmax(p.weight_logits, 0);
    let logw_b = tape.broadcast_to(logw, &[b, k]);
    let joint = tape.add(lp, logw_b);
    tape.logsumexp(joint, 1)
}

/// Monte Carlo estimate of `KL(q || p)` per batch row:
/// `(1/S) * sum_s [log q(z_s) - log p(z_s)]` with relaxed-mode draws.
pub fn kl_mc_graph(
    tape: &mut Tape,
    q: &PosteriorVars,
    p: &GmmVars,
    num_samples: usize,
    temperature: f64,
    rng: &mut SeedStream,
) -> Var {
    assert!(num_samples > 0);
    let mut acc: Option<Var> = None;
    for _ in 0..num_samples {
        let s = sample_posterior_graph(tape, q, temperature, SampleMode::Relaxed, rng);
        let lq = posterior_log_density_graph(tape, s.z, q);
        let lpz = prior_log_density_graph(tape, s.z, p);
        let diff = tape.sub(lq, lpz);
        acc = Some(match acc {
            None => diff,
            Some(a) => tape.add(a, diff),
        });
    }
    tape.scale(acc.unwrap(), 1.0 / num_samples as f64)
}

/// Deterministic index-matched upper bound on the mixture KL, per batch row:
/// `KL(softmax(logits) || pi) + sum_k softmax(logits)_k KL(N_k^q || N_k^p)`.
pub fn kl_matched_graph(tape: &mut Tape, q: &PosteriorVars, p: &GmmVars) -> Var {
    let (b, k, d) = batch_of(tape, q);
    assert_eq!(
        k,
        tape.value(p.weight_logits).shape()[0],
        "kl_matched requires identical K"
    );

    let logq = tape.log_softmax(q.mixture_logits, 1); // [B,K]
    let a = tape.exp(logq);
    let logp_w = tape.log_softmax(p.weight_logits, 0);
    let logp_b = tape.broadcast_to(logp_w, &[b, k]);
    let diff_w = tape.sub(logq, logp_b);
    let cat_terms = tape.mul(a, diff_w);
    let cat_kl = tape.sum_axis(cat_terms, 1); // [B]

    // Per-component diagonal-Gaussian KL, all broadcast to [B,K,d].
    let lv_q = tape.broadcast_to(q.comp_log_vars, &[b, k, d]);
    let lv_p = tape.broadcast_to(p.log_vars, &[b, k, d]);
    let mu_p = tape.broadcast_to(p.means, &[b, k, d]);
    let lv_diff = tape.sub(lv_p, lv_q);
    let var_ratio = {
        let e = tape.sub(lv_q, lv_p);
        tape.exp(e)
    };
    let mu_diff = tape.sub(q.comp_means, mu_p);
    let mu_sq = tape.mul(mu_diff, mu_diff);
    let inv_var_p = {
        let n = tape.neg(lv_p);
        tape.exp(n)
    };
    let maha = tape.mul(mu_sq, inv_var_p);
    let s1 = tape.add(lv_diff, var_ratio);
    let s2 = tape.add(s1, maha);
    let s3 = tape.add_scalar(s2, -1.0);
    let per_dim = tape.scale(s3, 0.5);
    let per_comp = tape.sum_axis(per_dim, 2); // [B,K]
    let weighted = tape.mul(a, per_comp);
    let gauss_kl = tape.sum_axis(weighted, 1); // [B]

    tape.add(cat_kl, gauss_kl)
}

// ---------------------------------------------------------------------------
// Plain operations
// ---------------------------------------------------------------------------

/// Log density of the prior mixture at `z`, with max-shifted log-sum-exp.
pub fn mixture_log_density(z: &ArrayView1<f64>, p: &GmmParams) -> Result<f64> {
    if z.len() != p.dim() {
        return Err(Error::contract(format!(
            "z has dim {}, prior has d={}",
            z.len(),
            p.dim()
        )));
    }
    if !z.iter().all(|x| x.is_finite()) {
        return Err(Error::numeric("mixture_log_density: non-finite z"));
    }
    p.validate()?;
    let logw = {
        let w = p.weight_logits.view();
        let lse = logsumexp1(w.as_slice().unwrap());
        p.weight_logits.mapv(|x| x - lse)
    };
    let mut terms = Vec::with_capacity(p.k());
    for k in 0..p.k() {
        let mut acc = 0.0;
        for dd in 0..p.dim() {
            let lv = p.log_vars[[k, dd]].max(log_var_floor());
            let diff = z[dd] - p.means[[k, dd]];
            acc += LN_2PI + lv + diff * diff * (-lv).exp();
        }
        terms.push(logw[k] - 0.5 * acc);
    }
    Ok(logsumexp1(&terms))
}

/// Closed-form KL between diagonal Gaussians.
pub fn gaussian_kl_diag(
    mu_q: &ArrayView1<f64>,
    logvar_q: &ArrayView1<f64>,
    mu_p: &ArrayView1<f64>,
    logvar_p: &ArrayView1<f64>,
) -> Result<f64> {
    let d = mu_q.len();
    if logvar_q.len() != d || mu_p.len() != d || logvar_p.len() != d {
        return Err(Error::contract("gaussian_kl_diag: dimension mismatch"));
    }
    let mut acc = 0.0;
    for i in 0..d {
        let (mq, lq, mp, lp) = (mu_q[i], logvar_q[i], mu_p[i], logvar_p[i]);
        if !(mq.is_finite() && lq.is_finite() && mp.is_finite() && lp.is_finite()) {
            return Err(Error::numeric("gaussian_kl_diag: non-finite input"));
        }
        acc += lp - lq + (lq.exp() + (mq - mp) * (mq - mp)) * (-lp).exp() - 1.0;
    }
    Ok(0.5 * acc)
}

/// Draw a latent sample from the posterior (plain values; wraps the graph form).
pub fn sample_posterior(
    q: &PosteriorParams,
    temperature: f64,
    mode: SampleMode,
    rng: &mut SeedStream,
) -> Result<LatentSample> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut tape = Tape::new();
    let qv = posterior_vars_single(&mut tape, q);
    let s = sample_posterior_graph(&mut tape, &qv, temperature, mode, rng);
    let z = tape
        .value(s.z)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .index_axis(Axis(0), 0)
        .to_owned();
    let assign = tape
        .value(s.soft_assignment)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .index_axis(Axis(0), 0)
        .to_owned();
    if !z.iter().all(|x| x.is_finite()) {
        return Err(Error::numeric("sample_posterior produced non-finite z"));
    }
    Ok(LatentSample {
        z,
        soft_assignment: assign,
        temperature,
    })
}

/// Monte Carlo `KL(q || p)` (plain value; wraps the graph form). Use the graph
/// form when gradients are needed.
pub fn kl_mc_estimate(
    q: &PosteriorParams,
    p: &GmmParams,
    num_samples: usize,
    temperature: f64,
    rng: &mut SeedStream,
) -> Result<f64> {
    if num_samples == 0 {
        return Err(Error::config("kl_mc_estimate requires num_samples >= 1"));
    }
    if temperature <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    if q.k() != p.k() || q.dim() != p.dim() {
        return Err(Error::contract(format!(
            "posterior (K={}, d={}) incompatible with prior (K={}, d={})",
            q.k(),
            q.dim(),
            p.k(),
            p.dim()
        )));
    }
    let mut tape = Tape::new();
    let qv = posterior_vars_single(&mut tape, q);
    let pv = prior_vars(&mut tape, p);
    let kl = kl_mc_graph(&mut tape, &qv, &pv, num_samples, temperature, rng);
    Ok(tape.value(kl)[[0]])
}

/// Deterministic index-matched upper bound on `KL(q || p)` (plain value).
pub fn kl_matched_upper_bound(q: &PosteriorParams, p: &GmmParams) -> Result<f64> {
    if q.k() != p.k() {
        return Err(Error::contract(format!(
            "kl_matched_upper_bound: K mismatch ({} vs {})",
            q.k(),
            p.k()
        )));
    }
    if q.dim() != p.dim() {
        return Err(Error::contract("kl_matched_upper_bound: d mismatch"));
    }
    let mut tape = Tape::new();
    let qv = posterior_vars_single(&mut tape, q);
    let pv = prior_vars(&mut tape, p);
    let kl = kl_matched_graph(&mut tape, &qv, &pv);
    Ok(tape.value(kl)[[0]])
}
