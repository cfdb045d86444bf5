//! The six parameterized maps of the model — two encoders, two generators,
//! two discriminators — plus the shared prior and per-domain posterior
//! log-variances, at desk scale.
//!
//! Encoders/discriminators are short stacks of stride-2 convolutions
//! (kernel 4, padding 1, each stage halving the spatial size); generators
//! mirror them with transposed convolutions and a final sigmoid squash.
//! The K encoder mean-heads share the trunk and differ only in the final
//! linear layer, so parameter growth stays O(K*d).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gmm_latent::{GmmParams, GmmVars, LatentSample, PosteriorParams, PosteriorVars};
use crate::SeedStream;
use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const CONV_KERNEL: usize = 4;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 1;

/// Initial per-domain posterior log-variance (sigma ~0.14 on latent scale,
/// small enough that early reconstructions are not noise-dominated).
const DOMAIN_LOG_VAR_INIT: f64 = -4.0;

/// Trunk nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::LeakyRelu => "leaky_relu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn apply(&self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::LeakyRelu => tape.leaky_relu(v, 0.2),
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
        }
    }
}

/// Where an input's mixture logits come from: an encoder head (per input) or
/// a per-domain learned vector (the strictly input-independent reading).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixtureLogitMode {
    #[default]
    Input,
    Global,
}

impl MixtureLogitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(MixtureLogitMode::Input),
            "global" => Ok(MixtureLogitMode::Global),
            other => Err(Error::config(format!("unknown mixture-logit mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MixtureLogitMode::Input => "input",
            MixtureLogitMode::Global => "global",
        }
    }
}

/// One of the two image domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    D1,
    D2,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::D1 => 0,
            Domain::D2 => 1,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Domain::D1 => 1,
            Domain::D2 => 2,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::D1 => Domain::D2,
            Domain::D2 => Domain::D1,
        }
    }

    pub fn from_id(id: u8) -> Result<Domain> {
        match id {
            1 => Ok(Domain::D1),
            2 => Ok(Domain::D2),
            other => Err(Error::contract(format!("domain must be 1 or 2, got {other}"))),
        }
    }
}

/// Architecture hyperparameters shared by all six networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub patch_size: usize,
    pub latent_dim: usize,
    pub num_components: usize,
    pub channel_widths: Vec<usize>,
    pub activation: Activation,
    pub logit_mode: MixtureLogitMode,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            patch_size: 32,
            latent_dim: 64,
            num_components: 25,
            channel_widths: vec![16, 32, 64],
            activation: Activation::LeakyRelu,
            logit_mode: MixtureLogitMode::Input,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be >= 1"));
        }
        if self.num_components == 0 {
            return Err(Error::config("num_components must be >= 1"));
        }
        if self.channel_widths.is_empty() || self.channel_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("channel_widths must be nonempty and positive"));
        }
        let factor = self.downsample_factor();
        if self.patch_size == 0 || self.patch_size % factor != 0 || self.patch_size / factor == 0 {
            return Err(Error::config(format!(
                "patch_size {} must be a positive multiple of the downsampling factor {}",
                self.patch_size, factor
            )));
        }
        Ok(())
    }

    /// Total spatial downsampling across all conv stages.
    pub fn downsample_factor(&self) -> usize {
        1 << self.channel_widths.len()
    }

    /// Spatial side of the trunk output.
    pub fn bottleneck_side(&self) -> usize {
        self.patch_size / self.downsample_factor()
    }

    /// Flattened trunk feature length.
    pub fn feature_len(&self) -> usize {
        let s = self.bottleneck_side();
        self.channel_widths.last().unwrap() * s * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub convs: Vec<ConvParams>,
    /// `[K*d, F]`: K mean heads stacked row-block-wise.
    pub mean_head: LinearParams,
    /// `[K, F]`: per-input mixture logits.
    pub logit_head: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub fc: LinearParams,
    /// Transposed convs, last stage mapping to one output channel.
    pub deconvs: Vec<ConvParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub convs: Vec<ConvParams>,
    pub head: LinearParams,
}

/// All trainable state: six subnetworks, the shared GMM prior, per-domain
/// posterior log-variances, and per-domain global mixture logits (used in
/// [`MixtureLogitMode::Global`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub spec: NetSpec,
    pub encoder_1: EncoderParams,
    pub encoder_2: EncoderParams,
    pub generator_1: GeneratorParams,
    pub generator_2: GeneratorParams,
    pub discriminator_1: DiscriminatorParams,
    pub discriminator_2: DiscriminatorParams,
    pub prior: GmmParams,
    pub domain_log_vars_1: Array2<f64>,
    pub domain_log_vars_2: Array2<f64>,
    pub global_logits_1: Array1<f64>,
    pub global_logits_2: Array1<f64>,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut SeedStream) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * std)
        .collect()
}

fn init_conv(co: usize, ci: usize, k: usize, fan_in: usize, rng: &mut SeedStream) -> ConvParams {
    let w = he_normal(&[co, ci, k, k], fan_in, rng);
    ConvParams {
        weight: Array4::from_shape_vec((co, ci, k, k), w).unwrap(),
        bias: Array1::zeros(co),
    }
}

fn init_linear(out: usize, inp: usize, rng: &mut SeedStream) -> LinearParams {
    let w = he_normal(&[out, inp], inp, rng);
    LinearParams {
        weight: Array2::from_shape_vec((out, inp), w).unwrap(),
        bias: Array1::zeros(out),
    }
}

fn init_encoder(spec: &NetSpec, rng: &mut SeedStream) -> EncoderParams {
    let k = CONV_KERNEL;
    let mut convs = Vec::new();
    let mut cin = 1;
    for &cout in &spec.channel_widths {
        convs.push(init_conv(cout, cin, k, cin * k * k, rng));
        cin = cout;
    }
    let f = spec.feature_len();
    EncoderParams {
        convs,
        mean_head: init_linear(spec.num_components * spec.latent_dim, f, rng),
        logit_head: init_linear(spec.num_components, f, rng),
    }
}

fn init_generator(spec: &NetSpec, rng: &mut SeedStream) -> GeneratorParams {
    let k = CONV_KERNEL;
    let fc = init_linear(spec.feature_len(), spec.latent_dim, rng);
    let mut deconvs = Vec::new();
    let widths = &spec.channel_widths;
    let n = widths.len();
    for i in 0..n {
        let cin = widths[n - 1 - i];
        let cout = if i + 1 == n { 1 } else { widths[n - 2 - i] };
        // transposed-conv weight layout is [Cin, Cout, k, k]
        let w = he_normal(&[cin, cout, k, k], cin * k * k, rng);
        deconvs.push(ConvParams {
            weight: Array4::from_shape_vec((cin, cout, k, k), w).unwrap(),
            bias: Array1::zeros(cout),
        });
    }
    GeneratorParams { fc, deconvs }
}

fn init_discriminator(spec: &NetSpec, rng: &mut SeedStream) -> DiscriminatorParams {
    let k = CONV_KERNEL;
    let mut convs = Vec::new();
    let mut cin = 1;
    for &cout in &spec.channel_widths {
        convs.push(init_conv(cout, cin, k, cin * k * k, rng));
        cin = cout;
    }
    DiscriminatorParams {
        convs,
        head: init_linear(1, spec.feature_len(), rng),
    }
}

/// Reproducible initialization: fan-in-scaled conv/linear weights, prior means
/// from a unit-Gaussian draw scaled by 0.5, prior log-variances and weight
/// logits at zero (uniform mixture weights).
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<ModelBundle> {
    spec.validate()?;
    let mut rng = SeedStream::seed_from_u64(seed);
    // both domains start from the same functions; the domain gap is learned
    // as divergence from a shared starting point, so corresponding content
    // begins with identical latent codes and coherent adversarial gradients
    let encoder_1 = init_encoder(spec, &mut rng);
    let encoder_2 = encoder_1.clone();
    let generator_1 = init_generator(spec, &mut rng);
    let generator_2 = generator_1.clone();
    let discriminator_1 = init_discriminator(spec, &mut rng);
    let discriminator_2 = discriminator_1.clone();
    let (k, d) = (spec.num_components, spec.latent_dim);
    let means = Array2::from_shape_fn((k, d), |_| {
        0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let prior = GmmParams::new(Array1::zeros(k), means, Array2::zeros((k, d)))?;
    Ok(ModelBundle {
        spec: spec.clone(),
        encoder_1,
        encoder_2,
        generator_1,
        generator_2,
        discriminator_1,
        discriminator_2,
        prior,
        domain_log_vars_1: Array2::from_elem((k, d), DOMAIN_LOG_VAR_INIT),
        domain_log_vars_2: Array2::from_elem((k, d), DOMAIN_LOG_VAR_INIT),
        global_logits_1: Array1::zeros(k),
        global_logits_2: Array1::zeros(k),
    })
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.prior.k() != self.spec.num_components || self.prior.dim() != self.spec.latent_dim {
            return Err(Error::Model(format!(
                "prior ({}, {}) does not match spec (K={}, d={})",
                self.prior.k(),
                self.prior.dim(),
                self.spec.num_components,
                self.spec.latent_dim
            )));
        }
        let expect_heads = self.spec.num_components * self.spec.latent_dim;
        for (name, enc) in [("encoder_1", &self.encoder_1), ("encoder_2", &self.encoder_2)] {
            if enc.mean_head.weight.nrows() != expect_heads {
                return Err(Error::Model(format!(
                    "{name} head count does not match prior K"
                )));
            }
        }
        Ok(())
    }

    /// Every parameter tensor with its canonical name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = Vec::new();
        macro_rules! enc {
            ($prefix:literal, $e:expr) => {
                for (i, c) in $e.convs.iter().enumerate() {
                    out.push((format!("{}.conv{i}.weight", $prefix), c.weight.view().into_dyn()));
                    out.push((format!("{}.conv{i}.bias", $prefix), c.bias.view().into_dyn()));
                }
                out.push((format!("{}.mean_head.weight", $prefix), $e.mean_head.weight.view().into_dyn()));
                out.push((format!("{}.mean_head.bias", $prefix), $e.mean_head.bias.view().into_dyn()));
                out.push((format!("{}.logit_head.weight", $prefix), $e.logit_head.weight.view().into_dyn()));
                out.push((format!("{}.logit_head.bias", $prefix), $e.logit_head.bias.view().into_dyn()));
            };
        }
        macro_rules! gen {
            ($prefix:literal, $g:expr) => {
                out.push((format!("{}.fc.weight", $prefix), $g.fc.weight.view().into_dyn()));
                out.push((format!("{}.fc.bias", $prefix), $g.fc.bias.view().into_dyn()));
                for (i, c) in $g.deconvs.iter().enumerate() {
                    out.push((format!("{}.deconv{i}.weight", $prefix), c.weight.view().into_dyn()));
                    out.push((format!("{}.deconv{i}.bias", $prefix), c.bias.view().into_dyn()));
                }
            };
        }
        macro_rules! disc {
            ($prefix:literal, $d:expr) => {
                for (i, c) in $d.convs.iter().enumerate() {
                    out.push((format!("{}.conv{i}.weight", $prefix), c.weight.view().into_dyn()));
                    out.push((format!("{}.conv{i}.bias", $prefix), c.bias.view().into_dyn()));
                }
                out.push((format!("{}.head.weight", $prefix), $d.head.weight.view().into_dyn()));
                out.push((format!("{}.head.bias", $prefix), $d.head.bias.view().into_dyn()));
            };
        }
        enc!("encoder_1", self.encoder_1);
        enc!("encoder_2", self.encoder_2);
        gen!("generator_1", self.generator_1);
        gen!("generator_2", self.generator_2);
        disc!("discriminator_1", self.discriminator_1);
        disc!("discriminator_2", self.discriminator_2);
        out.push(("prior.weight_logits".into(), self.prior.weight_logits.view().into_dyn()));
        out.push(("prior.means".into(), self.prior.means.view().into_dyn()));
        out.push(("prior.log_vars".into(), self.prior.log_vars.view().into_dyn()));
        out.push(("domain_log_vars_1".into(), self.domain_log_vars_1.view().into_dyn()));
        out.push(("domain_log_vars_2".into(), self.domain_log_vars_2.view().into_dyn()));
        out.push(("global_logits_1".into(), self.global_logits_1.view().into_dyn()));
        out.push(("global_logits_2".into(), self.global_logits_2.view().into_dyn()));
        out
    }

    /// Mutable views in the same order as [`ModelBundle::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = Vec::new();
        macro_rules! enc {
            ($prefix:literal, $e:expr) => {
                for (i, c) in $e.convs.iter_mut().enumerate() {
                    out.push((format!("{}.conv{i}.weight", $prefix), c.weight.view_mut().into_dyn()));
                    out.push((format!("{}.conv{i}.bias", $prefix), c.bias.view_mut().into_dyn()));
                }
                out.push((format!("{}.mean_head.weight", $prefix), $e.mean_head.weight.view_mut().into_dyn()));
                out.push((format!("{}.mean_head.bias", $prefix), $e.mean_head.bias.view_mut().into_dyn()));
                out.push((format!("{}.logit_head.weight", $prefix), $e.logit_head.weight.view_mut().into_dyn()));
                out.push((format!("{}.logit_head.bias", $prefix), $e.logit_head.bias.view_mut().into_dyn()));
            };
        }
        macro_rules! gen {
            ($prefix:literal, $g:expr) => {
                out.push((format!("{}.fc.weight", $prefix), $g.fc.weight.view_mut().into_dyn()));
                out.push((format!("{}.fc.bias", $prefix), $g.fc.bias.view_mut().into_dyn()));
                for (i, c) in $g.deconvs.iter_mut().enumerate() {
                    out.push((format!("{}.deconv{i}.weight", $prefix), c.weight.view_mut().into_dyn()));
                    out.push((format!("{}.deconv{i}.bias", $prefix), c.bias.view_mut().into_dyn()));
                }
            };
        }
        macro_rules! disc {
            ($prefix:literal, $d:expr) => {
                for (i, c) in $d.convs.iter_mut().enumerate() {
                    out.push((format!("{}.conv{i}.weight", $prefix), c.weight.view_mut().into_dyn()));
                    out.push((format!("{}.conv{i}.bias", $prefix), c.bias.view_mut().into_dyn()));
                }
                out.push((format!("{}.head.weight", $prefix), $d.head.weight.view_mut().into_dyn()));
                out.push((format!("{}.head.bias", $prefix), $d.head.bias.view_mut().into_dyn()));
            };
        }
        enc!("encoder_1", self.encoder_1);
        enc!("encoder_2", self.encoder_2);
        gen!("generator_1", self.generator_1);
        gen!("generator_2", self.generator_2);
        disc!("discriminator_1", self.discriminator_1);
        disc!("discriminator_2", self.discriminator_2);
        out.push(("prior.weight_logits".into(), self.prior.weight_logits.view_mut().into_dyn()));
        out.push(("prior.means".into(), self.prior.means.view_mut().into_dyn()));
        out.push(("prior.log_vars".into(), self.prior.log_vars.view_mut().into_dyn()));
        out.push(("domain_log_vars_1".into(), self.domain_log_vars_1.view_mut().into_dyn()));
        out.push(("domain_log_vars_2".into(), self.domain_log_vars_2.view_mut().into_dyn()));
        out.push(("global_logits_1".into(), self.global_logits_1.view_mut().into_dyn()));
        out.push(("global_logits_2".into(), self.global_logits_2.view_mut().into_dyn()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_params()
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// True for parameters the discriminators own (updated in the D phase);
/// everything else belongs to the generator-side min-set of the objective.
pub fn is_discriminator_param(name: &str) -> bool {
    name.starts_with("discriminator_")
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct EncoderVars {
    pub convs: Vec<(Var, Var)>,
    pub mean_head: (Var, Var),
    pub logit_head: (Var, Var),
}

#[derive(Clone)]
pub struct GeneratorVars {
    pub fc: (Var, Var),
    pub deconvs: Vec<(Var, Var)>,
}

#[derive(Clone)]
pub struct DiscriminatorVars {
    pub convs: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

/// The whole bundle inserted on a tape, plus the canonical `(name, var)` list
/// used to route gradients back to parameters.
pub struct BundleVars {
    pub spec: NetSpec,
    pub encoders: [EncoderVars; 2],
    pub generators: [GeneratorVars; 2],
    pub discriminators: [DiscriminatorVars; 2],
    pub prior: GmmVars,
    pub domain_log_vars: [Var; 2],
    pub global_logits: [Var; 2],
    pub named: Vec<(String, Var)>,
}

/// Insert every bundle parameter as a differentiable leaf (or frozen constant).
pub fn insert_bundle(tape: &mut Tape, bundle: &ModelBundle, trainable: bool) -> BundleVars {
    let mut named = Vec::new();
    let mut put = |tape: &mut Tape, name: String, t: crate::autodiff::Tensor| -> Var {
        let v = if trainable { tape.leaf(t) } else { tape.constant(t) };
        named.push((name, v));
        v
    };
    let mut enc = |tape: &mut Tape, prefix: &str, e: &EncoderParams| EncoderVars {
        convs: e
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    put(tape, format!("{prefix}.conv{i}.weight"), c.weight.clone().into_dyn()),
                    put(tape, format!("{prefix}.conv{i}.bias"), c.bias.clone().into_dyn()),
                )
            })
            .collect(),
        mean_head: (
            put(tape, format!("{prefix}.mean_head.weight"), e.mean_head.weight.clone().into_dyn()),
            put(tape, format!("{prefix}.mean_head.bias"), e.mean_head.bias.clone().into_dyn()),
        ),
        logit_head: (
            put(tape, format!("{prefix}.logit_head.weight"), e.logit_head.weight.clone().into_dyn()),
            put(tape, format!("{prefix}.logit_head.bias"), e.logit_head.bias.clone().into_dyn()),
        ),
    };
    let encoders = [
        enc(tape, "encoder_1", &bundle.encoder_1),
        enc(tape, "encoder_2", &bundle.encoder_2),
    ];
    let mut gen = |tape: &mut Tape, prefix: &str, g: &GeneratorParams| GeneratorVars {
        fc: (
            put(tape, format!("{prefix}.fc.weight"), g.fc.weight.clone().into_dyn()),
            put(tape, format!("{prefix}.fc.bias"), g.fc.bias.clone().into_dyn()),
        ),
        deconvs: g
            .deconvs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    put(tape, format!("{prefix}.deconv{i}.weight"), c.weight.clone().into_dyn()),
                    put(tape, format!("{prefix}.deconv{i}.bias"), c.bias.clone().into_dyn()),
                )
            })
            .collect(),
    };
    let generators = [
        gen(tape, "generator_1", &bundle.generator_1),
        gen(tape, "generator_2", &bundle.generator_2),
    ];
    let mut disc = |tape: &mut Tape, prefix: &str, d: &DiscriminatorParams| DiscriminatorVars {
        convs: d
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    put(tape, format!("{prefix}.conv{i}.weight"), c.weight.clone().into_dyn()),
                    put(tape, format!("{prefix}.conv{i}.bias"), c.bias.clone().into_dyn()),
                )
            })
            .collect(),
        head: (
            put(tape, format!("{prefix}.head.weight"), d.head.weight.clone().into_dyn()),
            put(tape, format!("{prefix}.head.bias"), d.head.bias.clone().into_dyn()),
        ),
    };
    let discriminators = [
        disc(tape, "discriminator_1", &bundle.discriminator_1),
        disc(tape, "discriminator_2", &bundle.discriminator_2),
    ];
    let prior = GmmVars {
        weight_logits: put(tape, "prior.weight_logits".into(), bundle.prior.weight_logits.clone().into_dyn()),
        means: put(tape, "prior.means".into(), bundle.prior.means.clone().into_dyn()),
        log_vars: put(tape, "prior.log_vars".into(), bundle.prior.log_vars.clone().into_dyn()),
    };
    let domain_log_vars = [
        put(tape, "domain_log_vars_1".into(), bundle.domain_log_vars_1.clone().into_dyn()),
        put(tape, "domain_log_vars_2".into(), bundle.domain_log_vars_2.clone().into_dyn()),
    ];
    let global_logits = [
        put(tape, "global_logits_1".into(), bundle.global_logits_1.clone().into_dyn()),
        put(tape, "global_logits_2".into(), bundle.global_logits_2.clone().into_dyn()),
    ];
    BundleVars {
        spec: bundle.spec.clone(),
        encoders,
        generators,
        discriminators,
        prior,
        domain_log_vars,
        global_logits,
        named,
    }
}

fn trunk_graph(
    tape: &mut Tape,
    spec: &NetSpec,
    convs: &[(Var, Var)],
    activation: Activation,
    patches: Var,
) -> Var {
    let mut h = patches;
    for &(w, b) in convs {
        h = tape.conv2d(h, w, b, CONV_STRIDE, CONV_PAD);
        h = activation.apply(tape, h);
    }
    let bsz = tape.value(h).shape()[0];
    tape.reshape(h, &[bsz, spec.feature_len()])
}

/// Encoder forward for a patch batch `[B,1,ps,ps]`; produces the posterior
/// parameter vars (`comp_means [B,K,d]`, domain log-vars, mixture logits).
pub fn encode_graph(tape: &mut Tape, bv: &BundleVars, domain: Domain, patches: Var) -> PosteriorVars {
    let spec = &bv.spec;
    let (k, d) = (spec.num_components, spec.latent_dim);
    let bsz = tape.value(patches).shape()[0];
    let e = &bv.encoders[domain.index()];
    let feat = trunk_graph(tape, spec, &e.convs, spec.activation, patches);
    let flat_means = tape.linear(feat, e.mean_head.0, e.mean_head.1);
    let comp_means = tape.reshape(flat_means, &[bsz, k, d]);
    let mixture_logits = match spec.logit_mode {
        MixtureLogitMode::Input => tape.linear(feat, e.logit_head.0, e.logit_head.1),
        MixtureLogitMode::Global => {
            let g = bv.global_logits[domain.index()];
            tape.broadcast_to(g, &[bsz, k])
        }
    };
    PosteriorVars {
        comp_means,
        comp_log_vars: bv.domain_log_vars[domain.index()],
        mixture_logits,
    }
}

/// Generator forward: latent batch `[B,d]` to patch batch `[B,1,ps,ps]` in [0,1].
pub fn generate_graph(tape: &mut Tape, bv: &BundleVars, domain: Domain, z: Var) -> Var {
    let spec = &bv.spec;
    let g = &bv.generators[domain.index()];
    let bsz = tape.value(z).shape()[0];
    let side = spec.bottleneck_side();
    let c_last = *spec.channel_widths.last().unwrap();
    let h0 = tape.linear(z, g.fc.0, g.fc.1);
    let h0 = spec.activation.apply(tape, h0);
    let mut h = tape.reshape(h0, &[bsz, c_last, side, side]);
    let n = g.deconvs.len();
    for (i, &(w, b)) in g.deconvs.iter().enumerate() {
        h = tape.conv_transpose2d(h, w, b, CONV_STRIDE, CONV_PAD);
        if i + 1 < n {
            h = spec.activation.apply(tape, h);
        } else {
            h = tape.sigmoid(h);
        }
    }
    h
}

/// Discriminator forward returning raw logits `[B]`; compose with sigmoid for
/// scores or with softplus forms for stable GAN losses.
pub fn discriminate_logit_graph(tape: &mut Tape, bv: &BundleVars, domain: Domain, patches: Var) -> Var {
    discriminate_logit_graph_with(tape, &bv.spec, &bv.discriminators[domain.index()], patches)
}

/// Discriminator forward through an explicit parameter set (used by the GAN
/// generator loss, which runs D with stop-gradded parameter copies).
pub fn discriminate_logit_graph_with(
    tape: &mut Tape,
    spec: &NetSpec,
    dsc: &DiscriminatorVars,
    patches: Var,
) -> Var {
    let feat = trunk_graph(tape, spec, &dsc.convs, spec.activation, patches);
    let logit = tape.linear(feat, dsc.head.0, dsc.head.1);
    let bsz = tape.value(patches).shape()[0];
    tape.reshape(logit, &[bsz])
}

// ---------------------------------------------------------------------------
// Plain operations
// ---------------------------------------------------------------------------

/// Stack grayscale patches into a `[B,1,ps,ps]` tensor.
pub fn stack_patches(patches: &[Array2<f64>]) -> Result<crate::autodiff::Tensor> {
    if patches.is_empty() {
        return Err(Error::contract("stack_patches: empty batch"));
    }
    let (h, w) = patches[0].dim();
    let mut out = Array4::<f64>::zeros((patches.len(), 1, h, w));
    for (i, p) in patches.iter().enumerate() {
        if p.dim() != (h, w) {
            return Err(Error::contract("stack_patches: ragged patch shapes"));
        }
        out.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(p);
    }
    Ok(out.into_dyn())
}

fn check_patch(bundle: &ModelBundle, patch: &Array2<f64>) -> Result<()> {
    let ps = bundle.spec.patch_size;
    if patch.dim() != (ps, ps) {
        return Err(Error::contract(format!(
            "patch shape {:?} does not match patch_size {ps}",
            patch.dim()
        )));
    }
    Ok(())
}

/// Encode one patch into its posterior parameters.
pub fn encode(bundle: &ModelBundle, domain: Domain, patch: &Array2<f64>) -> Result<PosteriorParams> {
    check_patch(bundle, patch)?;
    let mut tape = Tape::new();
    let bv = insert_bundle(&mut tape, bundle, false);
    let x = stack_patches(std::slice::from_ref(patch))?;
    let xv = tape.constant(x);
    let q = encode_graph(&mut tape, &bv, domain, xv);
    let (k, d) = (bundle.spec.num_components, bundle.spec.latent_dim);
    let comp_means = tape
        .value(q.comp_means)
        .clone()
        .into_shape_with_order((k, d))
        .unwrap();
    let logits = tape
        .value(q.mixture_logits)
        .clone()
        .into_shape_with_order(k)
        .unwrap();
    let lv = tape
        .value(q.comp_log_vars)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    PosteriorParams::new(comp_means, lv, logits, domain.id())
}

/// Decode a latent sample into a patch with intensities in [0,1].
pub fn generate(bundle: &ModelBundle, domain: Domain, z: &LatentSample) -> Result<Array2<f64>> {
    if z.z.len() != bundle.spec.latent_dim {
        return Err(Error::contract(format!(
            "latent dim {} does not match spec d={}",
            z.z.len(),
            bundle.spec.latent_dim
        )));
    }
    let mut tape = Tape::new();
    let bv = insert_bundle(&mut tape, bundle, false);
    let zv = tape.constant(
        z.z.clone()
            .into_shape_with_order((1, bundle.spec.latent_dim))
            .unwrap()
            .into_dyn(),
    );
    let patch = generate_graph(&mut tape, &bv, domain, zv);
    let ps = bundle.spec.patch_size;
    Ok(tape
        .value(patch)
        .clone()
        .into_shape_with_order((ps, ps))
        .unwrap())
}

/// Realness score strictly inside (0,1).
pub fn discriminate(bundle: &ModelBundle, domain: Domain, patch: &Array2<f64>) -> Result<f64> {
    check_patch(bundle, patch)?;
    let mut tape = Tape::new();
    let bv = insert_bundle(&mut tape, bundle, false);
    let x = stack_patches(std::slice::from_ref(patch))?;
    let xv = tape.constant(x);
    let logit = discriminate_logit_graph(&mut tape, &bv, domain, xv);
    // clamp keeps the sigmoid strictly inside (0,1) in f64
    let l = tape.value(logit)[[0]].clamp(-36.0, 36.0);
    Ok(1.0 / (1.0 + (-l).exp()))
}
