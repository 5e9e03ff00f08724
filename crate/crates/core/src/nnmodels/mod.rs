//! Encoders, decoders, latent codes, composition operators and the
//! supervised regression head, built on hand-differentiated primitives.

pub mod checkpoint;
pub mod layers;
pub mod operators;
pub mod ops;
pub mod params;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::DatasetKind;
pub use layers::{Layer, SeqBuilder, Sequential, Shape, Tape};
pub use operators::{interpolate, CompositionOperator, OperatorKind, OperatorTrace};
pub use params::{ParamEntry, ParamStore, Slot};

pub const LATENT_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            channels,
            kernel,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DecoderConfig {
    /// Mirror image of the encoder built from transposed convolutions.
    Deconv,
    /// Spatial broadcast decoder followed by stride-1 convolutions and a
    /// linear output convolution.
    Sbd { convs: Vec<ConvSpec> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Reduced,
    Tiny,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "reduced" => Ok(Profile::Reduced),
            "tiny" => Ok(Profile::Tiny),
            _ => Err(Error::config(format!("unknown profile {s:?}"))),
        }
    }

    /// Canvas edge length used by this profile.
    pub fn canvas(self) -> usize {
        match self {
            Profile::Paper => 64,
            Profile::Reduced => 32,
            Profile::Tiny => 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub canvas: usize,
    pub channels: usize,
    pub encoder_convs: Vec<ConvSpec>,
    pub encoder_hidden: Vec<usize>,
    pub decoder: DecoderConfig,
    pub latent_dim: usize,
    pub n_factors: usize,
    pub operator: OperatorKind,
    pub output: OutputActivation,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
}

fn default_mlp_hidden() -> usize {
    64
}

impl ModelConfig {
    fn base(canvas: usize, channels: usize, n_factors: usize) -> Self {
        ModelConfig {
            canvas,
            channels,
            encoder_convs: Vec::new(),
            encoder_hidden: Vec::new(),
            decoder: DecoderConfig::Deconv,
            latent_dim: LATENT_DIM,
            n_factors,
            operator: OperatorKind::InterpFixed,
            output: OutputActivation::Sigmoid,
            mlp_hidden: default_mlp_hidden(),
        }
    }

    /// dSprites / 3DShapes column: five stride-2 convolutions, deconv decoder.
    pub fn paper_sprites(channels: usize, n_factors: usize) -> Self {
        let c = |n| ConvSpec::new(n, 4, 2);
        ModelConfig {
            encoder_convs: vec![c(32), c(32), c(64), c(64), c(128)],
            encoder_hidden: vec![256],
            ..Self::base(64, channels, n_factors)
        }
    }

    /// MPI3D column: wider five-layer stack, deconv decoder.
    pub fn paper_mpi3d(channels: usize, n_factors: usize) -> Self {
        let c = |n| ConvSpec::new(n, 4, 2);
        ModelConfig {
            encoder_convs: vec![c(64), c(64), c(128), c(128), c(256)],
            encoder_hidden: vec![256],
            ..Self::base(64, channels, n_factors)
        }
    }

    /// Circles / Simple column: four convolutions and a spatial broadcast decoder.
    pub fn paper_sbd(channels: usize, n_factors: usize) -> Self {
        ModelConfig {
            encoder_convs: vec![ConvSpec::new(64, 4, 2); 4],
            encoder_hidden: vec![256],
            decoder: DecoderConfig::Sbd {
                convs: vec![ConvSpec::new(64, 5, 1); 4],
            },
            ..Self::base(64, channels, n_factors)
        }
    }

    /// 32×32 canvas, four stride-2 convolutions with half-width channels and
    /// a transposed-convolution decoder.
    pub fn reduced(channels: usize, n_factors: usize) -> Self {
        let c = |n| ConvSpec::new(n, 4, 2);
        ModelConfig {
            encoder_convs: vec![c(16), c(16), c(32), c(32)],
            encoder_hidden: vec![128],
            ..Self::base(32, channels, n_factors)
        }
    }

    /// Reduced model with a small spatial broadcast decoder.
    pub fn reduced_sbd(channels: usize, n_factors: usize) -> Self {
        ModelConfig {
            decoder: DecoderConfig::Sbd {
                convs: vec![ConvSpec::new(16, 5, 1); 2],
            },
            ..Self::reduced(channels, n_factors)
        }
    }

    /// 16×16 model small enough for exhaustive finite-difference checks.
    pub fn tiny(channels: usize, n_factors: usize) -> Self {
        let c = |n| ConvSpec::new(n, 4, 2);
        ModelConfig {
            encoder_convs: vec![c(4), c(4)],
            encoder_hidden: vec![16],
            ..Self::base(16, channels, n_factors)
        }
    }

    pub fn tiny_sbd(channels: usize, n_factors: usize) -> Self {
        ModelConfig {
            decoder: DecoderConfig::Sbd {
                convs: vec![ConvSpec::new(3, 3, 1)],
            },
            ..Self::tiny(channels, n_factors)
        }
    }

    pub fn for_dataset(profile: Profile, kind: DatasetKind, channels: usize, n_factors: usize) -> Self {
        match profile {
            Profile::Paper => match kind {
                DatasetKind::Circles | DatasetKind::Simple => Self::paper_sbd(channels, n_factors),
                DatasetKind::Sprites2d | DatasetKind::Bands => Self::paper_sprites(channels, n_factors),
            },
            Profile::Reduced => Self::reduced(channels, n_factors),
            Profile::Tiny => Self::tiny(channels, n_factors),
        }
    }

    pub fn with_operator(mut self, operator: OperatorKind) -> Self {
        self.operator = operator;
        self
    }

    pub fn with_output(mut self, output: OutputActivation) -> Self {
        self.output = output;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 || !matches!(self.channels, 1 | 3) {
            return Err(Error::config("model: canvas must be positive and channels 1 or 3"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("model: latent_dim must be positive"));
        }
        if self.n_factors == 0 || self.n_factors > self.latent_dim {
            return Err(Error::config(format!(
                "model: n_factors {} must be in 1..={}",
                self.n_factors, self.latent_dim
            )));
        }
        let mut size = self.canvas;
        for (i, c) in self.encoder_convs.iter().enumerate() {
            if c.channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(Error::config(format!("model: encoder conv {i} has a zero field")));
            }
            if size % c.stride != 0 {
                return Err(Error::config(format!(
                    "model: encoder conv {i} stride {} does not divide spatial size {size}",
                    c.stride
                )));
            }
            size /= c.stride;
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::config("model: zero-width hidden layer"));
        }
        if let DecoderConfig::Sbd { convs } = &self.decoder {
            if convs.iter().any(|c| c.stride != 1 || c.channels == 0 || c.kernel == 0) {
                return Err(Error::config("model: broadcast decoder convolutions must have stride 1"));
            }
        }
        Ok(())
    }

    fn encoder_spatial(&self) -> Shape {
        let mut h = self.canvas;
        let mut c = self.channels;
        for conv in &self.encoder_convs {
            h /= conv.stride;
            c = conv.channels;
        }
        Shape::Chw(c, h, h)
    }

    fn build_encoder(&self, store: &mut ParamStore, prefix: &str, head: usize) -> Result<Sequential> {
        let mut b = SeqBuilder::new(store, prefix, Shape::Chw(self.channels, self.canvas, self.canvas));
        for c in &self.encoder_convs {
            b = b.conv(c.channels, c.kernel, c.stride)?.relu();
        }
        let flat = b.shape().len();
        b = b.reshape(Shape::Flat(flat))?;
        for &h in &self.encoder_hidden {
            b = b.linear(h)?.relu();
        }
        Ok(b.linear(head)?.finish())
    }

    fn build_decoder(&self, store: &mut ParamStore) -> Result<Sequential> {
        let mut b = SeqBuilder::new(store, "decoder", Shape::Flat(self.latent_dim));
        match &self.decoder {
            DecoderConfig::Deconv => {
                for &h in self.encoder_hidden.iter().rev() {
                    b = b.linear(h)?.relu();
                }
                let spatial = self.encoder_spatial();
                b = b.linear(spatial.len())?.relu().reshape(spatial)?;
                let n = self.encoder_convs.len();
                for i in (0..n).rev() {
                    let conv = self.encoder_convs[i];
                    let cout = if i == 0 { self.channels } else { self.encoder_convs[i - 1].channels };
                    b = b.conv_transpose(cout, conv.kernel, conv.stride)?;
                    if i > 0 {
                        b = b.relu();
                    }
                }
            }
            DecoderConfig::Sbd { convs } => {
                b = b.broadcast(self.canvas, self.canvas)?;
                for c in convs {
                    b = b.conv(c.channels, c.kernel, 1)?.relu();
                }
                let k = convs.last().map_or(5, |c| c.kernel);
                b = b.conv(self.channels, k, 1)?;
            }
        }
        Ok(b.finish())
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.canvas * self.canvas
    }
}

/// Diagonal-Gaussian posterior with its reparameterized sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
    pub eps: Vec<f64>,
    pub sample: Vec<f64>,
}

impl LatentCode {
    pub fn from_head(head: &[f64], eps: &[f64]) -> Self {
        let l = head.len() / 2;
        let mean = head[..l].to_vec();
        let log_variance = head[l..].to_vec();
        let sample = ops::reparameterize(&mean, &log_variance, eps);
        LatentCode {
            mean,
            log_variance,
            eps: eps.to_vec(),
            sample,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(&self.log_variance)
            .chain(&self.sample)
            .all(|v| v.is_finite())
    }
}

/// Applies the configured output nonlinearity to raw decoder outputs.
pub fn activate(output: OutputActivation, raw: &[f64]) -> Vec<f64> {
    match output {
        OutputActivation::Sigmoid => raw.iter().map(|&v| ops::sigmoid(v)).collect(),
        OutputActivation::Linear => raw.to_vec(),
    }
}

/// The three decoded images of a composition forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionOutput {
    pub out: Vec<f64>,
    pub og: Vec<f64>,
    pub trans: Vec<f64>,
}

/// Everything recorded by [`CompositionModel::trace`] for the backward pass.
#[derive(Clone, Debug)]
pub struct CompositionTrace {
    enc_og: Tape,
    enc_trans: Tape,
    pub code_og: LatentCode,
    pub code_trans: LatentCode,
    op: OperatorTrace,
    pub z_out: Vec<f64>,
    dec_out: Tape,
    dec_og: Tape,
    dec_trans: Tape,
}

impl CompositionTrace {
    /// Raw (pre-activation) decoder outputs for `x̂_out`, `x̂_og`, `x̂_trans`.
    pub fn raw_outputs(&self) -> [&[f64]; 3] {
        [self.dec_out.output(), self.dec_og.output(), self.dec_trans.output()]
    }

    pub fn coefficients(&self) -> &[f64] {
        self.op.coefficients()
    }
}

/// Upstream gradients fed into [`CompositionModel::backward`].
#[derive(Clone, Debug, Default)]
pub struct CompositionGrads {
    /// Gradients with respect to the raw decoder outputs.
    pub raw_out: Vec<f64>,
    pub raw_og: Vec<f64>,
    pub raw_trans: Vec<f64>,
    /// Direct gradients on the posterior parameters (KL terms); empty means zero.
    pub mean_og: Vec<f64>,
    pub log_variance_og: Vec<f64>,
    pub mean_trans: Vec<f64>,
    pub log_variance_trans: Vec<f64>,
    /// Direct gradients on the latent samples (MMD terms); empty means zero.
    pub sample_og: Vec<f64>,
    pub sample_trans: Vec<f64>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Shared encoder, composition operator and decoder over one parameter vector.
#[derive(Clone, Debug)]
pub struct CompositionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Sequential,
    operator: CompositionOperator,
    decoder: Sequential,
}

impl CompositionModel {
    /// Builds the model with parameters drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::uninitialized(config)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        model.encoder.init(&mut model.params, &mut rng);
        model.operator.init(&mut model.params, &mut rng);
        model.decoder.init(&mut model.params, &mut rng);
        Ok(model)
    }

    /// Same architecture with every parameter set to zero.
    pub fn uninitialized(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let encoder = config.build_encoder(&mut params, "encoder", 2 * config.latent_dim)?;
        let operator = CompositionOperator::new(
            config.operator,
            config.latent_dim,
            config.n_factors,
            config.mlp_hidden,
            &mut params,
        )?;
        let decoder = config.build_decoder(&mut params)?;
        Ok(CompositionModel {
            config,
            params,
            encoder,
            operator,
            decoder,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn encoder(&self) -> &Sequential {
        &self.encoder
    }

    pub fn decoder(&self) -> &Sequential {
        &self.decoder
    }

    pub fn operator(&self) -> &CompositionOperator {
        &self.operator
    }

    fn check_image(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.image_len() {
            return Err(Error::shape(format!(
                "image has {} values, model expects {}",
                x.len(),
                self.config.image_len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64], eps: &[f64]) -> Result<LatentCode> {
        self.check_image(x)?;
        if eps.len() != self.config.latent_dim {
            return Err(Error::shape("noise length differs from the latent size"));
        }
        Ok(LatentCode::from_head(&self.encoder.infer(&self.params.values, x), eps))
    }

    /// Posterior means, the deterministic code used for evaluation.
    pub fn encode_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_image(x)?;
        let mut head = self.encoder.infer(&self.params.values, x);
        head.truncate(self.config.latent_dim);
        Ok(head)
    }

    pub fn compose(&self, z_og: &[f64], z_trans: &[f64], q: &[f64]) -> Result<Vec<f64>> {
        Ok(self.operator.forward(&self.params.values, z_og, z_trans, q)?.0)
    }

    pub fn decode_raw(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape("latent length mismatch"));
        }
        Ok(self.decoder.infer(&self.params.values, z))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(activate(self.config.output, &self.decode_raw(z)?))
    }

    /// Encodes with means and decodes; the deterministic reconstruction.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode_mean(x)?)
    }

    pub fn forward_composition(
        &self,
        x_og: &[f64],
        x_trans: &[f64],
        q: &[f64],
        eps_og: &[f64],
        eps_trans: &[f64],
    ) -> Result<CompositionOutput> {
        let t = self.trace(x_og, x_trans, q, eps_og, eps_trans)?;
        let [o, g, tr] = t.raw_outputs();
        let act = |r: &[f64]| activate(self.config.output, r);
        Ok(CompositionOutput {
            out: act(o),
            og: act(g),
            trans: act(tr),
        })
    }

    /// Forward pass that records all intermediates for [`Self::backward`].
    pub fn trace(
        &self,
        x_og: &[f64],
        x_trans: &[f64],
        q: &[f64],
        eps_og: &[f64],
        eps_trans: &[f64],
    ) -> Result<CompositionTrace> {
        self.check_image(x_og)?;
        self.check_image(x_trans)?;
        let p = &self.params.values;
        let enc_og = self.encoder.forward(p, x_og);
        let enc_trans = self.encoder.forward(p, x_trans);
        let code_og = LatentCode::from_head(enc_og.output(), eps_og);
        let code_trans = LatentCode::from_head(enc_trans.output(), eps_trans);
        let (z_out, op) = self.operator.forward(p, &code_og.sample, &code_trans.sample, q)?;
        let dec_out = self.decoder.forward(p, &z_out);
        let dec_og = self.decoder.forward(p, &code_og.sample);
        let dec_trans = self.decoder.forward(p, &code_trans.sample);
        Ok(CompositionTrace {
            enc_og,
            enc_trans,
            code_og,
            code_trans,
            op,
            z_out,
            dec_out,
            dec_og,
            dec_trans,
        })
    }

    /// Accumulates the parameter gradient of a loss whose partial derivatives
    /// with respect to the traced intermediates are given in `g`.
    pub fn backward(&self, t: &CompositionTrace, g: CompositionGrads, grads: &mut [f64]) {
        let p = &self.params.values;
        let l = self.config.latent_dim;
        let gz_out = self.decoder.backward(p, &t.dec_out, g.raw_out, grads, true).expect("input grad");
        let (mut gs_og, mut gs_trans) = self.operator.backward(p, &t.op, &gz_out, grads);
        add_into(&mut gs_og, &self.decoder.backward(p, &t.dec_og, g.raw_og, grads, true).expect("input grad"));
        add_into(
            &mut gs_trans,
            &self.decoder.backward(p, &t.dec_trans, g.raw_trans, grads, true).expect("input grad"),
        );
        add_into(&mut gs_og, &g.sample_og);
        add_into(&mut gs_trans, &g.sample_trans);
        for (code, tape, gs, gm, glv) in [
            (&t.code_og, &t.enc_og, gs_og, g.mean_og, g.log_variance_og),
            (&t.code_trans, &t.enc_trans, gs_trans, g.mean_trans, g.log_variance_trans),
        ] {
            let (mut gmean, mut glogv) = ops::reparameterize_backward(&code.log_variance, &code.eps, &gs);
            add_into(&mut gmean, &gm);
            add_into(&mut glogv, &glv);
            let mut head = Vec::with_capacity(2 * l);
            head.extend_from_slice(&gmean);
            head.extend_from_slice(&glogv);
            self.encoder.backward(p, tape, head, grads, false);
        }
    }
}

/// Encoder-shaped regressor from an image to normalized factor values.
#[derive(Clone, Debug)]
pub struct SupervisedModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    net: Sequential,
}

impl SupervisedModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::uninitialized(config)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        model.net.init(&mut model.params, &mut rng);
        Ok(model)
    }

    pub fn uninitialized(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = config.build_encoder(&mut params, "regressor", config.n_factors)?;
        Ok(SupervisedModel { config, params, net })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.image_len() {
            return Err(Error::shape("image size differs from the model canvas"));
        }
        Ok(self.net.infer(&self.params.values, x))
    }

    pub fn trace(&self, x: &[f64]) -> Result<Tape> {
        if x.len() != self.config.image_len() {
            return Err(Error::shape("image size differs from the model canvas"));
        }
        Ok(self.net.forward(&self.params.values, x))
    }

    pub fn backward(&self, tape: &Tape, g: Vec<f64>, grads: &mut [f64]) {
        self.net.backward(&self.params.values, tape, g, grads, false);
    }
}

/// Anything that maps an image to a latent vector deterministically.
pub trait LatentEncoder: Sync {
    fn latent_dim(&self) -> usize;
    fn encode_latent(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl LatentEncoder for CompositionModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn encode_latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encode_mean(x)
    }
}

impl LatentEncoder for SupervisedModel {
    fn latent_dim(&self) -> usize {
        self.config.n_factors
    }

    fn encode_latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predict(x)
    }
}
