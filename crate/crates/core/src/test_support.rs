//! Hand-constructed model configurations and shared harnesses used by tests
//! across modules.

use crate::autodiff::{Tape, Tensor, Var};
use crate::gmm_latent::GmmParams;
use crate::gradcheck;
use crate::networks::{
    init_params, insert_bundle, Activation, BundleVars, MixtureLogitMode, ModelBundle, NetSpec,
};
use ndarray::{Array1, Array2};

/// Gradcheck a scalar functional of a model forward pass against central
/// finite differences, over every bundle parameter.
pub fn gradcheck_bundle<F>(bundle: &ModelBundle, build: F)
where
    F: Fn(&mut Tape, &BundleVars) -> Var,
{
    let named = bundle.named_params();
    let params: Vec<Tensor> = named.iter().map(|(_, v)| v.to_owned()).collect();
    let rebuild = |ps: &[Tensor]| -> ModelBundle {
        let mut b = bundle.clone();
        for ((_, mut view), t) in b.named_params_mut().into_iter().zip(ps.iter()) {
            view.assign(t);
        }
        b
    };
    let eval = |ps: &[Tensor]| -> f64 {
        let b = rebuild(ps);
        let mut tape = Tape::new();
        let bv = insert_bundle(&mut tape, &b, true);
        let root = build(&mut tape, &bv);
        tape.scalar(root)
    };
    let mut tape = Tape::new();
    let bv = insert_bundle(&mut tape, bundle, true);
    let root = build(&mut tape, &bv);
    let grads = tape.backward(root);
    let analytic: Vec<Tensor> = bv
        .named
        .iter()
        .zip(params.iter())
        .map(|((_, v), p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    gradcheck::assert_grads_match(eval, &params, &analytic, 1e-4, 1e-3, 1e-8);
}

/// Patch side of the identity bundle.
pub const IDENTITY_PATCH: usize = 4;
/// Latent dimension (= pixel count) of the identity bundle.
pub const IDENTITY_DIM: usize = 16;

/// A bundle whose encoder/generator pairs compose to (near-)identity on
/// patches with intensities close to 0.5, in every domain and direction.
///
/// Construction: a one-stage space-to-depth convolution (each of four channels
/// picks one pixel of each 2x2 block), a permutation mean-head producing
/// `z = x_pixels - 0.5`, a generator fc undoing the permutation (with a +0.6
/// shift keeping the trunk activation in its identity range), and a
/// transposed conv scattering values back with a *4 gain so the final sigmoid
/// linearizes: `sigmoid(4(x-0.5)) = x + O(|x-0.5|^3)`.
///
/// Posterior and prior log-variances sit at 2*ln(1e-4), so sampled latents
/// carry ~1e-4 noise and reconstruction error stays ~1e-3 per patch.
pub fn make_identity_bundle() -> ModelBundle {
    let spec = NetSpec {
        patch_size: IDENTITY_PATCH,
        latent_dim: IDENTITY_DIM,
        num_components: 1,
        channel_widths: vec![4],
        activation: Activation::LeakyRelu,
        logit_mode: MixtureLogitMode::Input,
    };
    let mut bundle = init_params(&spec, 0).unwrap();
    let side = IDENTITY_PATCH / 2; // trunk spatial side
    debug_assert_eq!(spec.feature_len(), IDENTITY_DIM);

    // trunk feature index for channel c at cell (i,j)
    let feat_idx = |c: usize, i: usize, j: usize| (c * side + i) * side + j;
    // pixel carried by that feature: channel c picks offset (c%2, c/2)
    let pix_idx = |c: usize, i: usize, j: usize| {
        let (di, dj) = (c % 2, c / 2);
        (2 * i + di) * IDENTITY_PATCH + (2 * j + dj)
    };

    for enc in [&mut bundle.encoder_1, &mut bundle.encoder_2] {
        let conv = &mut enc.convs[0];
        conv.weight.fill(0.0);
        conv.bias.fill(0.0);
        for c in 0..4 {
            let (di, dj) = (c % 2, c / 2);
            // kernel tap hitting input pixel (2i+di, 2j+dj) given pad 1
            conv.weight[[c, 0, di + 1, dj + 1]] = 1.0;
        }
        enc.mean_head.weight.fill(0.0);
        enc.mean_head.bias.fill(-0.5);
        for c in 0..4 {
            for i in 0..side {
                for j in 0..side {
                    enc.mean_head.weight[[pix_idx(c, i, j), feat_idx(c, i, j)]] = 1.0;
                }
            }
        }
        enc.logit_head.weight.fill(0.0);
        enc.logit_head.bias.fill(0.0);
    }

    for gen in [&mut bundle.generator_1, &mut bundle.generator_2] {
        gen.fc.weight.fill(0.0);
        gen.fc.bias.fill(0.6); // keeps trunk input positive: x + 0.1 in [0.1, 1.1]
        for c in 0..4 {
            for i in 0..side {
                for j in 0..side {
                    gen.fc.weight[[feat_idx(c, i, j), pix_idx(c, i, j)]] = 1.0;
                }
            }
        }
        let deconv = &mut gen.deconvs[0];
        deconv.weight.fill(0.0);
        deconv.bias.fill(4.0 * (-0.5 - 0.1)); // pre-sigmoid = 4*(x - 0.5)
        for c in 0..4 {
            let (di, dj) = (c % 2, c / 2);
            deconv.weight[[c, 0, di + 1, dj + 1]] = 4.0;
        }
    }

    let lv = 2.0 * 1e-4f64.ln();
    bundle.domain_log_vars_1.fill(lv);
    bundle.domain_log_vars_2.fill(lv);
    bundle.prior = GmmParams::new(
        Array1::zeros(1),
        Array2::zeros((1, IDENTITY_DIM)),
        Array2::from_elem((1, IDENTITY_DIM), lv),
    )
    .unwrap();
    bundle
}

/// A patch with values within `amp` of 0.5 (the identity bundle's linear range).
pub fn near_half_patch(seed: u64, amp: f64) -> Array2<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = crate::SeedStream::seed_from_u64(seed);
    Array2::from_shape_fn((IDENTITY_PATCH, IDENTITY_PATCH), |_| {
        0.5 + rng.random_range(-amp..amp)
    })
}
