//! All objective terms: per-domain VAE losses, the two GAN losses (generator
//! and discriminator sides), cycle-consistency losses, and their composition
//! into the alternating min-max objective.
//!
//! Gradient partition is structural: generator-side GAN terms run the
//! discriminator through stop-gradded parameter copies, and discriminator
//! losses see translated patches only through a stop-grad, so `total_gen`
//! carries no gradient into D parameters and `total_disc` none into the
//! generator-side set.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gmm_latent::{
    kl_matched_graph, kl_mc_graph, sample_posterior_graph, GmmVars, PosteriorVars, SampleMode,
};
use crate::networks::{
    discriminate_logit_graph_with, encode_graph, generate_graph, stack_patches, BundleVars,
    DiscriminatorVars, Domain, ModelBundle,
};
use crate::SeedStream;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// The five objective weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // reconstruction-dominant defaults; exposed in config
        LossWeights {
            lambda0: 1.0,
            lambda1: 0.1,
            lambda2: 10.0,
            lambda3: 0.1,
            lambda4: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which KL estimator the objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Single-or-few-sample Monte Carlo (differentiable, unbiased for the
    /// relaxed surrogate).
    #[default]
    Mc,
    /// Deterministic index-matched upper bound.
    Matched,
}

impl KlEstimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(KlEstimator::Mc),
            "matched" => Ok(KlEstimator::Matched),
            other => Err(Error::config(format!("unknown kl estimator '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KlEstimator::Mc => "mc",
            KlEstimator::Matched => "matched",
        }
    }
}

/// Estimator settings shared by every loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub kl_estimator: KlEstimator,
    pub kl_samples: usize,
    pub temperature: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            weights: LossWeights::default(),
            kl_estimator: KlEstimator::Mc,
            kl_samples: 1,
            temperature: 1.0,
        }
    }
}

/// Per-step loss values; serializes as one JSON-lines record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub vae_1: f64,
    pub vae_2: f64,
    pub gan_1: f64,
    pub gan_2: f64,
    pub cc_1: f64,
    pub cc_2: f64,
    pub disc_1: f64,
    pub disc_2: f64,
    pub total_gen: f64,
    pub total_disc: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }

    /// First non-finite field name, if any (used in training diagnostics).
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.fields().iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }

    pub fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("vae_1", self.vae_1),
            ("vae_2", self.vae_2),
            ("gan_1", self.gan_1),
            ("gan_2", self.gan_2),
            ("cc_1", self.cc_1),
            ("cc_2", self.cc_2),
            ("disc_1", self.disc_1),
            ("disc_2", self.disc_2),
            ("total_gen", self.total_gen),
            ("total_disc", self.total_disc),
        ]
    }
}

/// Tape handles for every term of the objective.
pub struct ObjectiveVars {
    pub vae: [Var; 2],
    pub gan: [Var; 2],
    pub cc: [Var; 2],
    pub disc: [Var; 2],
    pub total_gen: Var,
    pub total_disc: Var,
}

impl ObjectiveVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            vae_1: tape.scalar(self.vae[0]),
            vae_2: tape.scalar(self.vae[1]),
            gan_1: tape.scalar(self.gan[0]),
            gan_2: tape.scalar(self.gan[1]),
            cc_1: tape.scalar(self.cc[0]),
            cc_2: tape.scalar(self.cc[1]),
            disc_1: tape.scalar(self.disc[0]),
            disc_2: tape.scalar(self.disc[1]),
            total_gen: tape.scalar(self.total_gen),
            total_disc: tape.scalar(self.total_disc),
        }
    }
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Laplace negative log-likelihood (constant dropped): per patch the mean
/// absolute error times the pixel count, averaged over the batch.
pub fn reconstruction_graph(tape: &mut Tape, x: Var, x_hat: Var) -> Var {
    let b = tape.value(x).shape()[0] as f64;
    let d = tape.sub(x, x_hat);
    let a = tape.abs(d);
    let s = tape.sum_all(a);
    tape.scale(s, 1.0 / b)
}

/// KL(q || p) per batch row with the configured estimator.
pub fn kl_term_graph(
    tape: &mut Tape,
    settings: &LossSettings,
    q: &PosteriorVars,
    p: &GmmVars,
    rng: &mut SeedStream,
) -> Var {
    match settings.kl_estimator {
        KlEstimator::Mc => kl_mc_graph(tape, q, p, settings.kl_samples, settings.temperature, rng),
        KlEstimator::Matched => kl_matched_graph(tape, q, p),
    }
}

/// `lambda1 * KL(q_d(z|x) || p) + lambda2 * recon(x, G_d(z))`, z ~ q_d.
pub fn vae_loss_graph(
    tape: &mut Tape,
    bv: &BundleVars,
    settings: &LossSettings,
    domain: Domain,
    patches: Var,
    rng: &mut SeedStream,
) -> Var {
    let q = encode_graph(tape, bv, domain, patches);
    vae_loss_from_posterior(tape, bv, settings, domain, patches, &q, rng)
}

fn vae_loss_from_posterior(
    tape: &mut Tape,
    bv: &BundleVars,
    settings: &LossSettings,
    domain: Domain,
    patches: Var,
    q: &PosteriorVars,
    rng: &mut SeedStream,
) -> Var {
    let w = settings.weights;
    let kl = kl_term_graph(tape, settings, q, &bv.prior, rng);
    let kl_mean = tape.mean_all(kl);
    let s = sample_posterior_graph(tape, q, settings.temperature, SampleMode::Relaxed, rng);
    let recon = generate_graph(tape, bv, domain, s.z);
    let rec = reconstruction_graph(tape, patches, recon);
    let t1 = tape.scale(kl_mean, w.lambda1);
    let t2 = tape.scale(rec, w.lambda2);
    tape.add(t1, t2)
}

/// Non-saturating generator-side GAN loss for translations `source -> target`:
/// `lambda0 * mean softplus(-D_target_logit(G_target(z ~ q_source(x))))`.
/// The discriminator runs with stop-gradded parameters.
pub fn gan_loss_generator_graph(
    tape: &mut Tape,
    bv: &BundleVars,
    settings: &LossSettings,
    source: Domain,
    target: Domain,
    patches: Var,
    rng: &mut SeedStream,
) -> Var {
    let q = encode_graph(tape, bv, source, patches);
    let (loss, _fake) = gan_gen_from_posterior(tape, bv, settings, target, &q, rng);
    loss
}

/// Shared inner form returning the translated batch so callers can reuse it.
fn gan_gen_from_posterior(
    tape: &mut Tape,
    bv: &BundleVars,
    settings: &LossSettings,
    target: Domain,
    q: &PosteriorVars,
    rng: &mut SeedStream,
) -> (Var, Var) {
    let s = sample_posterior_graph(tape, q, settings.temperature, SampleMode::Relaxed, rng);
    let fake = generate_graph(tape, bv, target, s.z);
    let frozen = freeze_disc(tape, &bv.discriminators[target.index()]);
    let logit = discriminate_logit_graph_with(tape, &bv.spec, &frozen, fake);
    let neg = tape.neg(logit);
    let nll = tape.softplus(neg); // -log sigmoid(logit)
    let m = tape.mean_all(nll);
    (tape.scale(m, settings.weights.lambda0), fake)
}

fn freeze_disc(tape: &mut Tape, d: &DiscriminatorVars) -> DiscriminatorVars {
    DiscriminatorVars {
        convs: d
            .convs
            .iter()
            .map(|&(w, b)| (tape.stop_grad(w), tape.stop_grad(b)))
            .collect(),
        head: (tape.stop_grad(d.head.0), tape.stop_grad(d.head.1)),
    }
}

/// Discriminator loss for one domain: `-log D(real) - log(1 - D(fake))` in
/// stable softplus form; the fake batch is detached.
pub fn gan_loss_discriminator_graph(
    tape: &mut Tape,
    bv: &BundleVars,
    domain: Domain,
    real: Var,
    fake: Var,
) -> Var {
    let fake_detached = tape.stop_grad(fake);
    let l_real = discriminate_logit_graph_with(tape, &bv.spec, &bv.discriminators[domain.index()], real);
    let l_fake =
        discriminate_logit_graph_with(tape, &bv.spec, &bv.discriminators[domain.index()], fake_detached);
    let neg_real = tape.neg(l_real);
    let a = tape.softplus(neg_real); // -log D(real)
    let b = tape.softplus(l_fake); // -log (1 - D(fake))
    let ma = tape.mean_all(a);
    let mb = tape.mean_all(b);
    tape.add(ma, mb)
}

/// Cycle-consistency loss for one direction:
/// `lambda3 KL(q_s(z|x)||p) + lambda4 KL(q_t(z|x^{s->t})||p) + lambda4 recon(x, G_s(z'))`.
pub fn cycle_loss_graph(
    tape: &mut Tape,
    bv: &BundleVars,
    settings: &LossSettings,
    source: Domain,
    patches: Var,
    rng: &mut SeedStream,
) -> Var {
    let q = encode_graph(tape, bv, source, patches);
    let s = sample_posterior_graph(tape, &q, settings.temperature, SampleMode::Relaxed, rng);
    let target = source.other();
    let translated = generate_graph(tape, bv, target, s.z);
    cycle_loss_from_translation(tape, bv, settings, source, patches, &q, translated, rng)
}

fn cycle_loss_from_translation(
    tape: &mut Tape,
    bv: &BundleVars,
    settings: &LossSettings,
    source: Domain,
    patches: Var,
    q_source: &PosteriorVars,
    translated: Var,
    rng: &mut SeedStream,
) -> Var {
    let w = settings.weights;
    let target = source.other();
    let kl_src = kl_term_graph(tape, settings, q_source, &bv.prior, rng);
    let kl_src_mean = tape.mean_all(kl_src);
    let q_t = encode_graph(tape, bv, target, translated);
    let kl_t = kl_term_graph(tape, settings, &q_t, &bv.prior, rng);
    let kl_t_mean = tape.mean_all(kl_t);
    let s2 = sample_posterior_graph(tape, &q_t, settings.temperature, SampleMode::Relaxed, rng);
    let back = generate_graph(tape, bv, source, s2.z);
    let rec = reconstruction_graph(tape, patches, back);
    let t1 = tape.scale(kl_src_mean, w.lambda3);
    let t2 = tape.scale(kl_t_mean, w.lambda4);
    let t3 = tape.scale(rec, w.lambda4);
    let s12 = tape.add(t1, t2);
    tape.add(s12, t3)
}

/// Build the full objective over one batch per domain. Encoders run once per
/// domain; the translated batch is shared between the GAN terms, the cycle
/// legs, and (detached) the discriminator losses.
pub fn total_objective_graph(
    tape: &mut Tape,
    bv: &BundleVars,
    settings: &LossSettings,
    batch_1: Var,
    batch_2: Var,
    rng: &mut SeedStream,
) -> ObjectiveVars {
    let batches = [batch_1, batch_2];
    let mut vae = [None, None];
    let mut gan = [None, None];
    let mut cc = [None, None];
    let mut disc = [None, None];

    for source in [Domain::D1, Domain::D2] {
        let si = source.index();
        let target = source.other();
        let x = batches[si];
        let q = encode_graph(tape, bv, source, x);
        vae[si] = Some(vae_loss_from_posterior(tape, bv, settings, source, x, &q, rng));
        // one translated batch serves the GAN generator term, the cycle leg,
        // and (detached) the target discriminator's fake side
        let (gan_term, fake) = gan_gen_from_posterior(tape, bv, settings, target, &q, rng);
        gan[target.index()] = Some(gan_term);
        cc[si] = Some(cycle_loss_from_translation(
            tape, bv, settings, source, x, &q, fake, rng,
        ));
        let real_target = batches[target.index()];
        disc[target.index()] = Some(gan_loss_discriminator_graph(
            tape, bv, target, real_target, fake,
        ));
    }

    let vae = [vae[0].unwrap(), vae[1].unwrap()];
    let gan = [gan[0].unwrap(), gan[1].unwrap()];
    let cc = [cc[0].unwrap(), cc[1].unwrap()];
    let disc = [disc[0].unwrap(), disc[1].unwrap()];

    let s1 = tape.add(vae[0], vae[1]);
    let s2 = tape.add(cc[0], cc[1]);
    let s3 = tape.add(gan[0], gan[1]);
    let s12 = tape.add(s1, s2);
    let total_gen = tape.add(s12, s3);
    let total_disc = tape.add(disc[0], disc[1]);

    ObjectiveVars {
        vae,
        gan,
        cc,
        disc,
        total_gen,
        total_disc,
    }
}

// ---------------------------------------------------------------------------
// Plain operations
// ---------------------------------------------------------------------------

/// Laplace reconstruction NLL between two patches: sum of absolute differences
/// (equals MAE times pixel count).
pub fn reconstruction_nll(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::contract(format!(
            "reconstruction_nll shapes differ: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    Ok(x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b).abs()).sum())
}

fn single_batch(tape: &mut Tape, bundle: &ModelBundle, patch: &Array2<f64>) -> Result<Var> {
    if patch.dim() != (bundle.spec.patch_size, bundle.spec.patch_size) {
        return Err(Error::contract(format!(
            "patch shape {:?} does not match patch_size {}",
            patch.dim(),
            bundle.spec.patch_size
        )));
    }
    let t = stack_patches(std::slice::from_ref(patch))?;
    Ok(tape.constant(t))
}

/// VAE loss for one patch with default estimator settings (MC, S=1, unit
/// temperature); use the graph form for training-time control.
pub fn vae_loss(
    bundle: &ModelBundle,
    domain: Domain,
    patch: &Array2<f64>,
    weights: &LossWeights,
    rng: &mut SeedStream,
) -> Result<f64> {
    weights.validate()?;
    let settings = LossSettings {
        weights: *weights,
        ..LossSettings::default()
    };
    let mut tape = Tape::new();
    let bv = crate::networks::insert_bundle(&mut tape, bundle, false);
    let x = single_batch(&mut tape, bundle, patch)?;
    let v = vae_loss_graph(&mut tape, &bv, &settings, domain, x, rng);
    Ok(tape.scalar(v))
}

/// Generator-side GAN loss for one source patch translated into the target
/// domain.
pub fn gan_loss_generator(
    bundle: &ModelBundle,
    source: Domain,
    target: Domain,
    patch: &Array2<f64>,
    weights: &LossWeights,
    rng: &mut SeedStream,
) -> Result<f64> {
    if source == target {
        return Err(Error::contract("gan_loss_generator: source == target"));
    }
    weights.validate()?;
    let settings = LossSettings {
        weights: *weights,
        ..LossSettings::default()
    };
    let mut tape = Tape::new();
    let bv = crate::networks::insert_bundle(&mut tape, bundle, false);
    let x = single_batch(&mut tape, bundle, patch)?;
    let v = gan_loss_generator_graph(&mut tape, &bv, &settings, source, target, x, rng);
    Ok(tape.scalar(v))
}

/// Discriminator loss for one (real, fake) patch pair.
pub fn gan_loss_discriminator(
    bundle: &ModelBundle,
    domain: Domain,
    real_patch: &Array2<f64>,
    fake_patch: &Array2<f64>,
) -> Result<f64> {
    if real_patch.dim() != fake_patch.dim() {
        return Err(Error::contract("gan_loss_discriminator: shape mismatch"));
    }
    let mut tape = Tape::new();
    let bv = crate::networks::insert_bundle(&mut tape, bundle, false);
    let r = single_batch(&mut tape, bundle, real_patch)?;
    let f = single_batch(&mut tape, bundle, fake_patch)?;
    let v = gan_loss_discriminator_graph(&mut tape, &bv, domain, r, f);
    Ok(tape.scalar(v))
}

/// Cycle-consistency loss for one source patch.
pub fn cycle_loss(
    bundle: &ModelBundle,
    source: Domain,
    patch: &Array2<f64>,
    weights: &LossWeights,
    rng: &mut SeedStream,
) -> Result<f64> {
    weights.validate()?;
    let settings = LossSettings {
        weights: *weights,
        ..LossSettings::default()
    };
    let mut tape = Tape::new();
    let bv = crate::networks::insert_bundle(&mut tape, bundle, false);
    let x = single_batch(&mut tape, bundle, patch)?;
    let v = cycle_loss_graph(&mut tape, &bv, &settings, source, x, rng);
    Ok(tape.scalar(v))
}

/// Full objective over two per-domain batches, with default estimator
/// settings; returns the per-term report.
pub fn total_objective(
    bundle: &ModelBundle,
    batch_1: &[Array2<f64>],
    batch_2: &[Array2<f64>],
    weights: &LossWeights,
    rng: &mut SeedStream,
) -> Result<LossReport> {
    if batch_1.is_empty() || batch_2.is_empty() {
        return Err(Error::contract("total_objective: empty batch"));
    }
    weights.validate()?;
    let settings = LossSettings {
        weights: *weights,
        ..LossSettings::default()
    };
    let mut tape = Tape::new();
    let bv = crate::networks::insert_bundle(&mut tape, bundle, false);
    let x1 = tape.constant(stack_patches(batch_1)?);
    let x2 = tape.constant(stack_patches(batch_2)?);
    let obj = total_objective_graph(&mut tape, &bv, &settings, x1, x2, rng);
    Ok(obj.report(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::gmm_latent::gaussian_kl_diag;
    use crate::gradcheck;
    use crate::networks::{init_params, insert_bundle, Activation, MixtureLogitMode, NetSpec};
    use crate::test_support::{gradcheck_bundle, make_identity_bundle, near_half_patch};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn tiny_spec() -> NetSpec {
        NetSpec {
            patch_size: 8,
            latent_dim: 3,
            num_components: 2,
            channel_widths: vec![3, 4],
            activation: Activation::LeakyRelu,
            logit_mode: MixtureLogitMode::Input,
        }
    }

    fn random_patch(ps: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::SeedStream::seed_from_u64(seed);
        Array2::from_shape_fn((ps, ps), |_| rng.random_range(0.0..1.0))
    }

    fn zero_weights() -> LossWeights {
        LossWeights {
            lambda0: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        }
    }

    #[test]
    fn reconstruction_examples() {
        let x = random_patch(32, 1);
        assert_eq!(reconstruction_nll(&x, &x).unwrap(), 0.0);
        let zeros = Array2::zeros((32, 32));
        let ones = Array2::from_elem((32, 32), 1.0);
        assert_abs_diff_eq!(reconstruction_nll(&zeros, &ones).unwrap(), 1024.0);
        let y = random_patch(32, 2);
        assert_abs_diff_eq!(
            reconstruction_nll(&x, &y).unwrap(),
            reconstruction_nll(&y, &x).unwrap()
        );
        assert!(matches!(
            reconstruction_nll(&zeros, &Array2::zeros((8, 8))).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn vae_loss_zero_weights_is_zero() {
        let bundle = init_params(&tiny_spec(), 3).unwrap();
        let mut rng = crate::SeedStream::seed_from_u64(4);
        let v = vae_loss(&bundle, Domain::D1, &random_patch(8, 5), &zero_weights(), &mut rng).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn vae_loss_identity_model_reconstruction_term_is_tiny() {
        let bundle = make_identity_bundle();
        let w = LossWeights {
            lambda0: 0.0,
            lambda1: 0.0,
            lambda2: 1.0,
            lambda3: 0.0,
            lambda4: 0.0,
        };
        let mut rng = crate::SeedStream::seed_from_u64(6);
        let patch = near_half_patch(7, 0.01);
        let v = vae_loss(&bundle, Domain::D1, &patch, &w, &mut rng).unwrap();
        // 16 pixels, per-pixel error ~1e-4 noise + ~1e-6 cubic term
        assert!(v >= 0.0 && v < 0.05, "identity reconstruction loss {v}");
    }

    #[test]
    fn vae_loss_kl_term_vanishes_when_posterior_equals_prior() {
        // zeroed heads + zero prior means + matching log-variances give
        // q(z|x) = p(z) for every x, so the single-sample MC KL is exactly 0.
        let spec = tiny_spec();
        let mut bundle = init_params(&spec, 8).unwrap();
        bundle.encoder_1.mean_head.weight.fill(0.0);
        bundle.encoder_1.mean_head.bias.fill(0.0);
        bundle.encoder_1.logit_head.weight.fill(0.0);
        bundle.encoder_1.logit_head.bias.fill(0.0);
        bundle.prior.means.fill(0.0);
        bundle.prior.weight_logits.fill(0.0);
        bundle
            .prior
            .log_vars
            .assign(&bundle.domain_log_vars_1);
        let w = LossWeights {
            lambda0: 0.0,
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        };
        for seed in 0..20 {
            let mut rng = crate::SeedStream::seed_from_u64(100 + seed);
            let v = vae_loss(&bundle, Domain::D1, &random_patch(8, seed), &w, &mut rng).unwrap();
            assert!(v.abs() < 1e-10, "seed {seed}: KL-only vae loss {v}");
        }
    }

    #[test]
    fn gan_generator_loss_at_fresh_discriminator_is_ln2() {
        let spec = tiny_spec();
        let mut bundle = init_params(&spec, 9).unwrap();
        bundle.discriminator_2.head.weight.fill(0.0);
        bundle.discriminator_2.head.bias.fill(0.0);
        let w = LossWeights {
            lambda0: 1.5,
            ..LossWeights::default()
        };
        let mut rng = crate::SeedStream::seed_from_u64(10);
        let v = gan_loss_generator(&bundle, Domain::D1, Domain::D2, &random_patch(8, 11), &w, &mut rng)
            .unwrap();
        assert_abs_diff_eq!(v, 1.5 * std::f64::consts::LN_2, epsilon = 1e-12);

        let w0 = zero_weights();
        let v0 = gan_loss_generator(&bundle, Domain::D1, Domain::D2, &random_patch(8, 11), &w0, &mut rng)
            .unwrap();
        assert_eq!(v0, 0.0);
    }

    #[test]
    fn gan_generator_rejects_same_domain() {
        let bundle = init_params(&tiny_spec(), 12).unwrap();
        let mut rng = crate::SeedStream::seed_from_u64(13);
        assert!(matches!(
            gan_loss_generator(
                &bundle,
                Domain::D1,
                Domain::D1,
                &random_patch(8, 14),
                &LossWeights::default(),
                &mut rng
            )
            .unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn discriminator_loss_at_half_is_two_ln2() {
        let spec = tiny_spec();
        let mut bundle = init_params(&spec, 15).unwrap();
        bundle.discriminator_1.head.weight.fill(0.0);
        bundle.discriminator_1.head.bias.fill(0.0);
        let v = gan_loss_discriminator(&bundle, Domain::D1, &random_patch(8, 16), &random_patch(8, 17))
            .unwrap();
        assert_abs_diff_eq!(v, 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn discriminator_loss_limit_for_perfect_separation() {
        // the convention under test: -ln D(real) - ln(1 - D(fake)) with
        // D(real)=1-eps, D(fake)=eps approaches 2*eps
        let eps = 1e-6f64;
        let loss = -(1.0 - eps).ln() - (1.0 - eps).ln();
        assert_abs_diff_eq!(loss, 2.0 * eps, epsilon = 1e-9);
    }

    #[test]
    fn cycle_loss_zero_weights_is_zero() {
        let bundle = init_params(&tiny_spec(), 18).unwrap();
        let mut rng = crate::SeedStream::seed_from_u64(19);
        let v = cycle_loss(&bundle, Domain::D2, &random_patch(8, 20), &zero_weights(), &mut rng).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn cycle_loss_identity_model_reconstruction_term_is_tiny() {
        // identity bundle: twice-translated patch returns to the original;
        // lambda3 = 0 isolates the reconstruction + second-leg KL, and the
        // second-leg KL is checked separately in the q=p configuration above.
        let bundle = make_identity_bundle();
        let w = LossWeights {
            lambda0: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 1.0,
        };
        let mut rng = crate::SeedStream::seed_from_u64(21);
        let patch = near_half_patch(22, 0.01);
        // strip the KL part by comparing against the same run with the
        // reconstruction disabled is not possible through the public op, so
        // bound the whole thing: KL of the translated patch under the wide
        // prior stays small because translated means sit near 0.
        let v = cycle_loss(&bundle, Domain::D1, &patch, &w, &mut rng).unwrap();
        assert!(v.is_finite());
        // reconstruction component alone must be tiny; verify via graph parts
        let settings = LossSettings {
            weights: w,
            ..LossSettings::default()
        };
        let mut tape = Tape::new();
        let bv = crate::networks::insert_bundle(&mut tape, &bundle, false);
        let x = tape.constant(stack_patches(std::slice::from_ref(&patch)).unwrap());
        let q = encode_graph(&mut tape, &bv, Domain::D1, x);
        let mut rng2 = crate::SeedStream::seed_from_u64(23);
        let s = sample_posterior_graph(&mut tape, &q, settings.temperature, SampleMode::Relaxed, &mut rng2);
        let translated = generate_graph(&mut tape, &bv, Domain::D2, s.z);
        let q2 = encode_graph(&mut tape, &bv, Domain::D2, translated);
        let s2 = sample_posterior_graph(&mut tape, &q2, settings.temperature, SampleMode::Relaxed, &mut rng2);
        let back = generate_graph(&mut tape, &bv, Domain::D1, s2.z);
        let rec = reconstruction_graph(&mut tape, x, back);
        let rec_val = tape.scalar(rec);
        assert!(rec_val < 0.05, "cycle reconstruction {rec_val}");
    }

    #[test]
    fn cycle_loss_random_init_is_finite_positive_and_gradchecks() {
        let bundle = init_params(&tiny_spec(), 24).unwrap();
        let all_ones = LossWeights {
            lambda0: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
        };
        let mut rng = crate::SeedStream::seed_from_u64(25);
        let patch = random_patch(8, 26);
        let v = cycle_loss(&bundle, Domain::D1, &patch, &all_ones, &mut rng).unwrap();
        assert!(v.is_finite() && v > 0.0);

        let settings = LossSettings {
            weights: all_ones,
            ..LossSettings::default()
        };
        let patch2 = patch.clone();
        gradcheck_bundle(&bundle, move |tape, bv| {
            let x = tape.constant(stack_patches(std::slice::from_ref(&patch2)).unwrap());
            let mut rng = crate::SeedStream::seed_from_u64(900);
            cycle_loss_graph(tape, bv, &settings, Domain::D1, x, &mut rng)
        });
    }

    #[test]
    fn total_objective_zero_weights_zeroes_generator_terms() {
        let bundle = init_params(&tiny_spec(), 27).unwrap();
        let mut rng = crate::SeedStream::seed_from_u64(28);
        let b1 = vec![random_patch(8, 29), random_patch(8, 30)];
        let b2 = vec![random_patch(8, 31), random_patch(8, 32)];
        let r = total_objective(&bundle, &b1, &b2, &zero_weights(), &mut rng).unwrap();
        assert_eq!(r.vae_1, 0.0);
        assert_eq!(r.vae_2, 0.0);
        assert_eq!(r.gan_1, 0.0);
        assert_eq!(r.gan_2, 0.0);
        assert_eq!(r.cc_1, 0.0);
        assert_eq!(r.cc_2, 0.0);
        assert_eq!(r.total_gen, 0.0);
        assert!(r.disc_1 > 0.0 && r.disc_2 > 0.0);
        assert_abs_diff_eq!(r.total_disc, r.disc_1 + r.disc_2, epsilon = 1e-12);
    }

    #[test]
    fn total_objective_is_additive() {
        let bundle = init_params(&tiny_spec(), 33).unwrap();
        let mut rng = crate::SeedStream::seed_from_u64(34);
        let b1 = vec![random_patch(8, 35)];
        let b2 = vec![random_patch(8, 36)];
        let r = total_objective(&bundle, &b1, &b2, &LossWeights::default(), &mut rng).unwrap();
        assert!(r.all_finite());
        assert_abs_diff_eq!(
            r.total_gen,
            r.vae_1 + r.vae_2 + r.cc_1 + r.cc_2 + r.gan_1 + r.gan_2,
            epsilon = 1e-6
        );
        assert!(matches!(
            total_objective(&bundle, &[], &b2, &LossWeights::default(), &mut rng).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn doubling_lambda2_doubles_reconstruction_contribution() {
        let bundle = init_params(&tiny_spec(), 37).unwrap();
        let patch = random_patch(8, 38);
        let run = |l2: f64| -> f64 {
            let w = LossWeights {
                lambda0: 0.0,
                lambda1: 0.0,
                lambda2: l2,
                lambda3: 0.0,
                lambda4: 0.0,
            };
            // identical rng so the z draw is shared across runs
            let mut rng = crate::SeedStream::seed_from_u64(39);
            vae_loss(&bundle, Domain::D1, &patch, &w, &mut rng).unwrap()
        };
        let base = run(1.0);
        assert!(base > 0.0);
        assert_abs_diff_eq!(run(2.0), 2.0 * base, epsilon = 1e-9);
    }

    #[test]
    fn k1_matched_kl_reduces_to_single_gaussian_kl() {
        let spec = NetSpec {
            num_components: 1,
            logit_mode: MixtureLogitMode::Global,
            ..tiny_spec()
        };
        let bundle = init_params(&spec, 40).unwrap();
        let patch = random_patch(8, 41);
        let q = crate::networks::encode(&bundle, Domain::D1, &patch).unwrap();
        let matched = crate::gmm_latent::kl_matched_upper_bound(&q, &bundle.prior).unwrap();
        let direct = gaussian_kl_diag(
            &q.comp_means.row(0),
            &q.comp_log_vars.row(0),
            &bundle.prior.means.row(0),
            &bundle.prior.log_vars.row(0),
        )
        .unwrap();
        assert_abs_diff_eq!(matched, direct, epsilon = 1e-12);
    }

    #[test]
    fn loss_terms_are_nonnegative_with_matched_estimator() {
        let bundle = init_params(&tiny_spec(), 42).unwrap();
        let settings = LossSettings {
            kl_estimator: KlEstimator::Matched,
            ..LossSettings::default()
        };
        let mut tape = Tape::new();
        let bv = crate::networks::insert_bundle(&mut tape, &bundle, false);
        let b1 = vec![random_patch(8, 43), random_patch(8, 44)];
        let b2 = vec![random_patch(8, 45)];
        let x1 = tape.constant(stack_patches(&b1).unwrap());
        let x2 = tape.constant(stack_patches(&b2).unwrap());
        let mut rng = crate::SeedStream::seed_from_u64(46);
        let obj = total_objective_graph(&mut tape, &bv, &settings, x1, x2, &mut rng);
        let r = obj.report(&tape);
        for (name, v) in r.fields() {
            assert!(v >= 0.0, "{name} = {v} negative");
        }
    }

    #[test]
    fn gradient_partition_between_generator_and_discriminator_sides() {
        let bundle = init_params(&tiny_spec(), 47).unwrap();
        let mut tape = Tape::new();
        let bv = insert_bundle(&mut tape, &bundle, true);
        let b1 = vec![random_patch(8, 48)];
        let b2 = vec![random_patch(8, 49)];
        let x1 = tape.constant(stack_patches(&b1).unwrap());
        let x2 = tape.constant(stack_patches(&b2).unwrap());
        let mut rng = crate::SeedStream::seed_from_u64(50);
        let obj = total_objective_graph(&mut tape, &bv, &LossSettings::default(), x1, x2, &mut rng);

        let disc_grads = tape.backward(obj.total_disc);
        for (name, v) in &bv.named {
            let g = disc_grads.get(*v);
            if crate::networks::is_discriminator_param(name) {
                assert!(
                    g.is_some_and(|t| t.iter().any(|&x| x != 0.0)),
                    "disc loss should reach {name}"
                );
            } else {
                assert!(
                    g.is_none_or(|t| t.iter().all(|&x| x == 0.0)),
                    "disc loss leaked into {name}"
                );
            }
        }

        let gen_grads = tape.backward(obj.total_gen);
        for (name, v) in &bv.named {
            let g = gen_grads.get(*v);
            if crate::networks::is_discriminator_param(name) {
                assert!(
                    g.is_none_or(|t| t.iter().all(|&x| x == 0.0)),
                    "gen loss leaked into {name}"
                );
            }
        }
        // the Eq.-7 min-set must be reached: encoders, generators, prior,
        // domain log-vars all receive gradient
        for probe in [
            "encoder_1.conv0.weight",
            "encoder_2.mean_head.weight",
            "generator_1.fc.weight",
            "generator_2.deconv0.weight",
            "prior.means",
            "prior.log_vars",
            "prior.weight_logits",
            "domain_log_vars_1",
            "domain_log_vars_2",
        ] {
            let (_, v) = bv.named.iter().find(|(n, _)| n == probe).unwrap();
            assert!(
                gen_grads.get(*v).is_some_and(|t| t.iter().any(|&x| x != 0.0)),
                "gen loss never reached {probe}"
            );
        }
    }

    #[test]
    fn total_objective_gradients_match_sampled_finite_differences() {
        let bundle = init_params(&tiny_spec(), 51).unwrap();
        let b1 = vec![random_patch(8, 52), random_patch(8, 53)];
        let b2 = vec![random_patch(8, 54), random_patch(8, 55)];
        let settings = LossSettings::default();

        let named = bundle.named_params();
        let params: Vec<Tensor> = named.iter().map(|(_, v)| v.to_owned()).collect();
        // 20 random coordinates from the generator-side min-set (total_gen is
        // defined with the discriminators held constant, so FD against D
        // parameters would measure the detached dependency instead)
        let gen_side: Vec<usize> = named
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| !crate::networks::is_discriminator_param(n))
            .map(|(i, _)| i)
            .collect();
        let mut pick = crate::SeedStream::seed_from_u64(56);
        let coords: Vec<(usize, usize)> = (0..20)
            .map(|_| {
                let pi = gen_side[pick.random_range(0..gen_side.len())];
                let idx = pick.random_range(0..params[pi].len());
                (pi, idx)
            })
            .collect();

        let eval = |ps: &[Tensor]| -> f64 {
            let mut b = bundle.clone();
            for ((_, mut view), t) in b.named_params_mut().into_iter().zip(ps.iter()) {
                view.assign(t);
            }
            let mut tape = Tape::new();
            let bv = insert_bundle(&mut tape, &b, true);
            let x1 = tape.constant(stack_patches(&b1).unwrap());
            let x2 = tape.constant(stack_patches(&b2).unwrap());
            let mut rng = crate::SeedStream::seed_from_u64(777);
            let obj = total_objective_graph(&mut tape, &bv, &settings, x1, x2, &mut rng);
            tape.scalar(obj.total_gen)
        };
        let numeric = gradcheck::central_difference_sampled(eval, &params, 1e-4, &coords);

        let mut tape = Tape::new();
        let bv = insert_bundle(&mut tape, &bundle, true);
        let x1 = tape.constant(stack_patches(&b1).unwrap());
        let x2 = tape.constant(stack_patches(&b2).unwrap());
        let mut rng = crate::SeedStream::seed_from_u64(777);
        let obj = total_objective_graph(&mut tape, &bv, &settings, x1, x2, &mut rng);
        let grads = tape.backward(obj.total_gen);
        for (ci, &(pi, idx)) in coords.iter().enumerate() {
            let analytic = grads
                .get(bv.named[pi].1)
                .map(|t| t.as_slice().unwrap()[idx])
                .unwrap_or(0.0);
            let n = numeric[ci];
            let tol = 1e-6 + 1e-3 * analytic.abs().max(n.abs());
            assert!(
                (analytic - n).abs() <= tol,
                "param {} ({}) idx {idx}: analytic {analytic:.6e} vs numeric {n:.6e}",
                pi,
                bundle.named_params()[pi].0
            );
        }
    }

    #[test]
    fn generator_loss_decreases_against_frozen_discriminator() {
        let spec = tiny_spec();
        let mut bundle = init_params(&spec, 57).unwrap();
        let patches = vec![random_patch(8, 58), random_patch(8, 59)];
        let settings = LossSettings::default();
        let lr = 0.01;
        let mut losses = Vec::new();
        for step in 0..100 {
            let mut tape = Tape::new();
            let bv = insert_bundle(&mut tape, &bundle, true);
            let x = tape.constant(stack_patches(&patches).unwrap());
            let mut rng = crate::SeedStream::seed_from_u64(1000 + step);
            let loss = gan_loss_generator_graph(&mut tape, &bv, &settings, Domain::D1, Domain::D2, x, &mut rng);
            losses.push(tape.scalar(loss));
            let grads = tape.backward(loss);
            let updates: Vec<(String, Tensor)> = bv
                .named
                .iter()
                .filter(|(n, _)| !crate::networks::is_discriminator_param(n))
                .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
                .collect();
            for (name, mut view) in bundle.named_params_mut() {
                if let Some((_, g)) = updates.iter().find(|(n, _)| *n == name) {
                    view.zip_mut_with(g, |p, &gv| *p -= lr * gv);
                }
            }
        }
        let early: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let late: f64 = losses[95..].iter().sum::<f64>() / 5.0;
        assert!(late < early, "gen loss did not decrease: {early} -> {late}");
    }
}
