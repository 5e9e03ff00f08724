//! Objectives, the Adam optimizer and the training loops for the composition
//! and supervised tasks.

mod gradcheck;
mod losses;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradcheck::{check_coordinates, gradient_check, GradCheckReport, GRADCHECK_FLOOR, GRADCHECK_STEP};
pub use losses::{
    image_loss, imq_kernel, kl_divergence, kl_divergence_batch, kl_grad, kl_terms, mmd_estimate, mmd_with_grad,
    raw_image_loss, reconstruction_loss, ReconstructionKind, BCE_CLAMP,
};

use crate::comptask::{stream_rng, CompositionSample, CompositionSampler, SamplerRng};
use crate::error::{Error, Result};
use crate::factorspace::{DatasetSplit, FactorSpace};
use crate::image::ImageSet;
use crate::nnmodels::{CompositionGrads, CompositionModel, OutputActivation, SupervisedModel};
use crate::synthgen::DatasetKind;

/// Samples per gradient buffer; fixed so results do not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveFamily {
    Vae,
    Wae,
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub family: ObjectiveFamily,
    pub reconstruction: ReconstructionKind,
    #[serde(default = "one")]
    pub kl_weight: f64,
    #[serde(default = "ten")]
    pub mmd_weight: f64,
    /// IMQ kernel scale; `2·L` when absent.
    #[serde(default)]
    pub mmd_kernel_scale: Option<f64>,
    /// Include the `x̂_og` and `x̂_trans` reconstruction terms.
    #[serde(default = "yes")]
    pub reconstruct_inputs: bool,
}

fn one() -> f64 {
    1.0
}

fn ten() -> f64 {
    10.0
}

fn yes() -> bool {
    true
}

impl ObjectiveConfig {
    pub fn vae() -> Self {
        ObjectiveConfig {
            family: ObjectiveFamily::Vae,
            reconstruction: ReconstructionKind::BernoulliBce,
            kl_weight: 1.0,
            mmd_weight: 10.0,
            mmd_kernel_scale: None,
            reconstruct_inputs: true,
        }
    }

    pub fn wae() -> Self {
        ObjectiveConfig {
            family: ObjectiveFamily::Wae,
            reconstruction: ReconstructionKind::Mse,
            ..Self::vae()
        }
    }

    pub fn supervised() -> Self {
        ObjectiveConfig {
            family: ObjectiveFamily::Supervised,
            reconstruction: ReconstructionKind::Mse,
            ..Self::vae()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = matches!(
            (self.family, self.reconstruction),
            (ObjectiveFamily::Vae, ReconstructionKind::BernoulliBce)
                | (ObjectiveFamily::Wae, ReconstructionKind::Mse)
                | (ObjectiveFamily::Supervised, ReconstructionKind::Mse)
        );
        if !ok {
            return Err(Error::config(format!(
                "objective: {:?} cannot be paired with {:?} reconstruction",
                self.family, self.reconstruction
            )));
        }
        if !(self.kl_weight >= 0.0 && self.mmd_weight >= 0.0) {
            return Err(Error::config("objective: weights must be nonnegative"));
        }
        if let Some(c) = self.mmd_kernel_scale {
            if !(c > 0.0) {
                return Err(Error::config("objective: mmd_kernel_scale must be positive"));
            }
        }
        Ok(())
    }

    pub fn kernel_scale(&self, latent_dim: usize) -> f64 {
        self.mmd_kernel_scale.unwrap_or(2.0 * latent_dim as f64)
    }

    /// Decoder output nonlinearity this objective expects.
    pub fn output_activation(&self) -> OutputActivation {
        match self.reconstruction {
            ReconstructionKind::BernoulliBce => OutputActivation::Sigmoid,
            ReconstructionKind::Mse => OutputActivation::Linear,
        }
    }

    pub fn regularizer_weight(&self) -> f64 {
        match self.family {
            ObjectiveFamily::Vae => self.kl_weight,
            ObjectiveFamily::Wae => self.mmd_weight,
            ObjectiveFamily::Supervised => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Optimizer steps per epoch; one pass over the training split when absent.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "default_window")]
    pub early_stop_window: usize,
    /// Minimum relative improvement over the window; `0` disables early stopping.
    #[serde(default = "default_tolerance")]
    pub early_stop_tolerance: f64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_window() -> usize {
    5
}

fn default_tolerance() -> f64 {
    1e-3
}

impl TrainConfig {
    pub fn for_dataset(kind: DatasetKind, seed: u64) -> Self {
        let (batch, learning_rate) = match kind {
            DatasetKind::Circles | DatasetKind::Simple => (16, 3e-4),
            DatasetKind::Sprites2d | DatasetKind::Bands => (64, 1e-4),
        };
        TrainConfig {
            batch,
            learning_rate,
            max_epochs: 100,
            seed,
            steps_per_epoch: None,
            early_stop_window: default_window(),
            early_stop_tolerance: default_tolerance(),
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.max_epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::config("train: batch, max_epochs and learning_rate must be positive"));
        }
        if self.steps_per_epoch == Some(0) || self.checkpoint_every == Some(0) {
            return Err(Error::config("train: steps_per_epoch and checkpoint_every must be positive"));
        }
        if self.early_stop_window == 0 || self.early_stop_tolerance < 0.0 {
            return Err(Error::config("train: invalid early-stopping settings"));
        }
        Ok(())
    }

    fn steps(&self, train_len: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| train_len.div_ceil(self.batch))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_recon: f64,
    pub train_reg: f64,
    pub total: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl FitReport {
    pub fn final_total(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.total)
    }
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_recon,train_reg,total,wallclock_s")?;
    for r in history {
        writeln!(
            f,
            "{},{:e},{:e},{:e},{:.3}",
            r.epoch, r.train_recon, r.train_reg, r.total, r.wallclock_s
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Loss components of one batch, each averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub recon_out: f64,
    pub recon_og: f64,
    pub recon_trans: f64,
    /// Weighted regularizer (`kl_weight·KL` or `λ·MMD²`).
    pub reg: f64,
}

impl LossParts {
    pub fn recon(&self) -> f64 {
        self.recon_out + self.recon_og + self.recon_trans
    }

    pub fn total(&self) -> f64 {
        self.recon() + self.reg
    }
}

/// A fully specified minibatch: triples, reparameterization noise and prior draws.
#[derive(Clone, Debug)]
pub struct CompositionBatch {
    pub samples: Vec<CompositionSample>,
    pub eps_og: Vec<Vec<f64>>,
    pub eps_trans: Vec<Vec<f64>>,
    /// `2·batch` prior draws for the MMD term; empty for other objectives.
    pub prior: Vec<Vec<f64>>,
}

fn normals(rng: &mut SamplerRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn draw_composition_batch(
    sampler: &CompositionSampler,
    batch: usize,
    latent_dim: usize,
    with_prior: bool,
    sample_rng: &mut SamplerRng,
    noise_rng: &mut SamplerRng,
) -> Result<CompositionBatch> {
    let samples = sampler.sample_batch(sample_rng, batch)?;
    let eps_og = (0..batch).map(|_| normals(noise_rng, latent_dim)).collect();
    let eps_trans = (0..batch).map(|_| normals(noise_rng, latent_dim)).collect();
    let prior = if with_prior {
        (0..2 * batch).map(|_| normals(noise_rng, latent_dim)).collect()
    } else {
        Vec::new()
    };
    Ok(CompositionBatch {
        samples,
        eps_og,
        eps_trans,
        prior,
    })
}

fn sum_chunks(chunks: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    let mut total = vec![0.0; n];
    for c in chunks {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    total
}

/// Batch loss of the composition objective and its gradient with respect
/// to every model parameter.
pub fn composition_loss_and_grad(
    model: &CompositionModel,
    images: &ImageSet,
    batch: &CompositionBatch,
    objective: &ObjectiveConfig,
) -> Result<(LossParts, Vec<f64>)> {
    let b = batch.samples.len();
    if b == 0 {
        return Err(Error::shape("empty batch"));
    }
    let inv = 1.0 / b as f64;
    let kind = objective.reconstruction;
    let output = model.config.output;
    let traces = batch
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            model.trace(
                s.x_og(images),
                s.x_trans(images),
                &s.query,
                &batch.eps_og[i],
                &batch.eps_trans[i],
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut parts = LossParts::default();
    let mut sample_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); b];
    let mut kl_grads: Vec<[(Vec<f64>, Vec<f64>); 2]> = Vec::new();
    match objective.family {
        ObjectiveFamily::Vae => {
            let w = objective.kl_weight;
            for t in &traces {
                let kl = kl_terms(&t.code_og.mean, &t.code_og.log_variance)?
                    + kl_terms(&t.code_trans.mean, &t.code_trans.log_variance)?;
                parts.reg += w * kl * inv;
                let scale = |(m, v): (Vec<f64>, Vec<f64>)| {
                    (
                        m.into_iter().map(|x| x * w * inv).collect(),
                        v.into_iter().map(|x| x * w * inv).collect(),
                    )
                };
                kl_grads.push([
                    scale(kl_grad(&t.code_og.mean, &t.code_og.log_variance)),
                    scale(kl_grad(&t.code_trans.mean, &t.code_trans.log_variance)),
                ]);
            }
        }
        ObjectiveFamily::Wae => {
            if batch.prior.len() != 2 * b {
                return Err(Error::shape("WAE batch needs 2·batch prior draws"));
            }
            let z: Vec<Vec<f64>> = traces
                .iter()
                .map(|t| t.code_og.sample.clone())
                .chain(traces.iter().map(|t| t.code_trans.sample.clone()))
                .collect();
            let scale = objective.kernel_scale(model.config.latent_dim);
            let (mmd, g) = mmd_with_grad(&z, &batch.prior, scale)?;
            let lam = objective.mmd_weight;
            parts.reg = lam * mmd;
            for i in 0..b {
                let sc = |v: &Vec<f64>| v.iter().map(|x| x * lam).collect::<Vec<f64>>();
                sample_grads[i] = (sc(&g[i]), sc(&g[b + i]));
            }
        }
        ObjectiveFamily::Supervised => {
            return Err(Error::config("supervised objective used with a composition model"));
        }
    }

    let n = model.n_params();
    let with_inputs = objective.reconstruct_inputs;
    let results: Vec<(Vec<f64>, [f64; 3])> = traces
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut grads = vec![0.0; n];
            let mut losses = [0.0; 3];
            for (k, t) in chunk.iter().enumerate() {
                let i = ci * GRAD_CHUNK + k;
                let s = &batch.samples[i];
                let [r_out, r_og, r_trans] = t.raw_outputs();
                let scaled = |(l, g): (f64, Vec<f64>)| (l, g.into_iter().map(|v| v * inv).collect::<Vec<f64>>());
                let (l_out, g_out) = scaled(raw_image_loss(r_out, s.x_out(images), kind, output));
                losses[0] += l_out;
                let mut g = CompositionGrads {
                    raw_out: g_out,
                    ..Default::default()
                };
                if with_inputs {
                    let (l_og, g_og) = scaled(raw_image_loss(r_og, s.x_og(images), kind, output));
                    let (l_tr, g_tr) = scaled(raw_image_loss(r_trans, s.x_trans(images), kind, output));
                    losses[1] += l_og;
                    losses[2] += l_tr;
                    g.raw_og = g_og;
                    g.raw_trans = g_tr;
                } else {
                    g.raw_og = vec![0.0; r_og.len()];
                    g.raw_trans = vec![0.0; r_trans.len()];
                }
                if let Some([(mo, vo), (mt, vt)]) = kl_grads.get(i).cloned() {
                    g.mean_og = mo;
                    g.log_variance_og = vo;
                    g.mean_trans = mt;
                    g.log_variance_trans = vt;
                }
                let (so, st) = &sample_grads[i];
                g.sample_og = so.clone();
                g.sample_trans = st.clone();
                model.backward(t, g, &mut grads);
            }
            (grads, losses)
        })
        .collect();
    let mut chunks = Vec::with_capacity(results.len());
    for (g, l) in results {
        parts.recon_out += l[0] * inv;
        parts.recon_og += l[1] * inv;
        parts.recon_trans += l[2] * inv;
        chunks.push(g);
    }
    Ok((parts, sum_chunks(chunks, n)))
}

/// Loss of the composition objective only (no gradient).
pub fn composition_loss(
    model: &CompositionModel,
    images: &ImageSet,
    batch: &CompositionBatch,
    objective: &ObjectiveConfig,
) -> Result<LossParts> {
    Ok(composition_loss_and_grad(model, images, batch, objective)?.0)
}

/// Mean over the batch of the per-factor mean squared error, with gradient.
pub fn supervised_loss_and_grad(
    model: &SupervisedModel,
    images: &ImageSet,
    space: &FactorSpace,
    indices: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let inv = 1.0 / indices.len() as f64;
    let j = space.n_factors() as f64;
    let n = model.n_params();
    let results: Vec<(Vec<f64>, f64)> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<(Vec<f64>, f64)> {
            let mut grads = vec![0.0; n];
            let mut loss = 0.0;
            for &idx in chunk {
                let tape = model.trace(images.pixels(idx))?;
                let target = space.vector(idx).values;
                let pred = tape.output();
                let mut g = Vec::with_capacity(pred.len());
                for (p, t) in pred.iter().zip(&target) {
                    loss += (p - t) * (p - t) / j;
                    g.push(2.0 * (p - t) / j * inv);
                }
                model.backward(&tape, g, &mut grads);
            }
            Ok((grads, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut chunks = Vec::with_capacity(results.len());
    for (g, l) in results {
        total += l * inv;
        chunks.push(g);
    }
    Ok((total, sum_chunks(chunks, n)))
}

fn check_images(images: &ImageSet, space: &FactorSpace, canvas: usize, channels: usize, n_factors: usize) -> Result<()> {
    if images.len() != space.total() {
        return Err(Error::config(format!(
            "{} images do not cover {} factor combinations",
            images.len(),
            space.total()
        )));
    }
    if (images.channels, images.height, images.width) != (channels, canvas, canvas) {
        return Err(Error::config(format!(
            "images are {}x{}x{} but the model expects {channels}x{canvas}x{canvas}",
            images.channels, images.height, images.width
        )));
    }
    if space.n_factors() != n_factors {
        return Err(Error::config(format!(
            "space has {} factors, model expects {n_factors}",
            space.n_factors()
        )));
    }
    Ok(())
}

fn should_stop(history: &[EpochRecord], cfg: &TrainConfig) -> bool {
    let w = cfg.early_stop_window;
    if cfg.early_stop_tolerance == 0.0 || history.len() <= w {
        return false;
    }
    let best = |rs: &[EpochRecord]| rs.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    let before = best(&history[..history.len() - w]);
    let now = best(history);
    before - now < cfg.early_stop_tolerance * before.abs()
}

fn guard(parts: &LossParts, grads: &[f64], epoch: usize, step: usize) -> Result<()> {
    if !parts.total().is_finite() {
        return Err(Error::Diverged {
            epoch,
            step,
            detail: format!(
                "loss is not finite (recon {} / reg {})",
                parts.recon(),
                parts.reg
            ),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            epoch,
            step,
            detail: "gradient is not finite".into(),
        });
    }
    Ok(())
}

/// Trains a composition model on triples drawn from the training split.
pub fn fit_composition(
    model: &mut CompositionModel,
    images: &ImageSet,
    space: &FactorSpace,
    split: &DatasetSplit,
    objective: &ObjectiveConfig,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<FitReport> {
    objective.validate()?;
    cfg.validate()?;
    if objective.family == ObjectiveFamily::Supervised {
        return Err(Error::config("composition training needs a vae or wae objective"));
    }
    if model.config.output != objective.output_activation() {
        return Err(Error::config(format!(
            "decoder output {:?} does not match {:?} reconstruction",
            model.config.output, objective.reconstruction
        )));
    }
    check_images(images, space, model.config.canvas, model.config.channels, model.config.n_factors)?;
    let sampler = CompositionSampler::new(space, split, images, true)?;
    let mut sample_rng = stream_rng(cfg.seed, 0);
    let mut noise_rng = stream_rng(cfg.seed, 1);
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate);
    let steps = cfg.steps(split.train.len());
    let with_prior = objective.family == ObjectiveFamily::Wae;
    let start = Instant::now();
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut acc = LossParts::default();
        for step in 0..steps {
            let batch = draw_composition_batch(
                &sampler,
                cfg.batch,
                model.config.latent_dim,
                with_prior,
                &mut sample_rng,
                &mut noise_rng,
            )?;
            let (parts, grads) =
                composition_loss_and_grad(model, images, &batch, objective).map_err(|e| match e {
                    Error::Numerical(detail) => Error::Diverged { epoch, step, detail },
                    e => e,
                })?;
            guard(&parts, &grads, epoch, step)?;
            adam.step(&mut model.params.values, &grads);
            acc.recon_out += parts.recon_out;
            acc.recon_og += parts.recon_og;
            acc.recon_trans += parts.recon_trans;
            acc.reg += parts.reg;
        }
        let s = steps as f64;
        let record = EpochRecord {
            epoch,
            train_recon: acc.recon() / s,
            train_reg: acc.reg / s,
            total: acc.total() / s,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: recon {:.4} reg {:.4} (weight {}) total {:.4}",
            record.train_recon,
            record.train_reg,
            objective.regularizer_weight(),
            record.total
        );
        history.push(record);
        if let (Some(dir), Some(every)) = (checkpoint_dir, cfg.checkpoint_every) {
            if epoch % every == 0 {
                model.save(dir.join(format!("epoch_{epoch:04}")), cfg.seed, epoch)?;
            }
        }
        if should_stop(&history, cfg) {
            return Ok(FitReport {
                history,
                stopped_early: true,
            });
        }
    }
    Ok(FitReport {
        history,
        stopped_early: false,
    })
}

/// Trains a factor regressor on shuffled minibatches of the training split.
pub fn fit_supervised(
    model: &mut SupervisedModel,
    images: &ImageSet,
    space: &FactorSpace,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<FitReport> {
    cfg.validate()?;
    check_images(images, space, model.config.canvas, model.config.channels, model.config.n_factors)?;
    let mut rng = stream_rng(cfg.seed, 0);
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate);
    let steps = cfg.steps(split.train.len());
    let mut order = split.train.clone();
    let mut cursor = order.len();
    let start = Instant::now();
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut acc = 0.0;
        for step in 0..steps {
            let mut batch = Vec::with_capacity(cfg.batch);
            while batch.len() < cfg.batch {
                if cursor == order.len() {
                    shuffle(&mut order, &mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let (loss, grads) = supervised_loss_and_grad(model, images, space, &batch)?;
            let parts = LossParts {
                recon_out: loss,
                ..Default::default()
            };
            guard(&parts, &grads, epoch, step)?;
            adam.step(&mut model.params.values, &grads);
            acc += loss;
        }
        let total = acc / steps as f64;
        history.push(EpochRecord {
            epoch,
            train_recon: total,
            train_reg: 0.0,
            total,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: factor mse {total:.6}");
        if let (Some(dir), Some(every)) = (checkpoint_dir, cfg.checkpoint_every) {
            if epoch % every == 0 {
                model.save(dir.join(format!("epoch_{epoch:04}")), cfg.seed, epoch)?;
            }
        }
        if should_stop(&history, cfg) {
            return Ok(FitReport {
                history,
                stopped_early: true,
            });
        }
    }
    Ok(FitReport {
        history,
        stopped_early: false,
    })
}

/// Fisher–Yates shuffle driven by the sampler generator.
fn shuffle(v: &mut [usize], rng: &mut SamplerRng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Mean per-image reconstruction loss of `x → decode(mean(x))` over `indices`.
/// Linear outputs are clamped to `[0, 1]` first.
pub fn reconstruction_error(
    model: &CompositionModel,
    images: &ImageSet,
    indices: &[usize],
    kind: ReconstructionKind,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Undefined("no images to evaluate".into()));
    }
    let losses = indices
        .par_iter()
        .map(|&i| -> Result<f64> {
            let x = images.pixels(i);
            let mut xhat = model.reconstruct(x)?;
            if model.config.output == OutputActivation::Linear {
                xhat.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            Ok(image_loss(&xhat, x, kind))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean over images of the per-factor mean squared error.
pub fn supervised_error(model: &SupervisedModel, images: &ImageSet, space: &FactorSpace, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Undefined("no images to evaluate".into()));
    }
    let j = space.n_factors() as f64;
    let errs = indices
        .par_iter()
        .map(|&i| -> Result<f64> {
            let pred = model.predict(images.pixels(i))?;
            let t = space.vector(i).values;
            Ok(pred.iter().zip(&t).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / j)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorspace::{builtin_condition, partition};
    use crate::nnmodels::{ModelConfig, OperatorKind};
    use crate::synthgen::{generate_full, DatasetDef, RenderSpec};

    fn circles16() -> (ImageSet, FactorSpace, DatasetSplit) {
        let def = DatasetDef::circles(6, 6).unwrap();
        let imgs = generate_full(&def, &RenderSpec::new(16, 1)).unwrap();
        let split = partition(&def.space, &builtin_condition("circles", "circles_corner").unwrap()).unwrap();
        (imgs, def.space, split)
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            batch: 4,
            learning_rate: 1e-3,
            max_epochs: 3,
            seed,
            steps_per_epoch: Some(3),
            early_stop_window: 5,
            early_stop_tolerance: 0.0,
            checkpoint_every: None,
        }
    }

    #[test]
    fn objective_pairings() {
        assert!(ObjectiveConfig::vae().validate().is_ok());
        assert!(ObjectiveConfig::wae().validate().is_ok());
        let bad = ObjectiveConfig {
            reconstruction: ReconstructionKind::Mse,
            ..ObjectiveConfig::vae()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ObjectiveConfig::wae().kernel_scale(10), 20.0);
        let t = TrainConfig::for_dataset(DatasetKind::Simple, 0);
        assert_eq!((t.batch, t.learning_rate, t.max_epochs), (16, 3e-4, 100));
        let t = TrainConfig::for_dataset(DatasetKind::Sprites2d, 0);
        assert_eq!((t.batch, t.learning_rate), (64, 1e-4));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![1.0, -2.0];
        let mut adam = Adam::new(2, 0.1);
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn training_is_deterministic() {
        let (imgs, space, split) = circles16();
        let cfg = ModelConfig::tiny(1, 2).with_output(OutputActivation::Linear);
        let run = || {
            let mut m = CompositionModel::new(cfg.clone(), 5).unwrap();
            let r = fit_composition(&mut m, &imgs, &space, &split, &ObjectiveConfig::wae(), &quick(5), None).unwrap();
            (r.history.iter().map(|h| h.total.to_bits()).collect::<Vec<_>>(), m.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn input_reconstruction_terms_are_additive() {
        let (imgs, space, split) = circles16();
        let m = CompositionModel::new(ModelConfig::tiny(1, 2), 1).unwrap();
        let sampler = CompositionSampler::new(&space, &split, &imgs, true).unwrap();
        let batch = draw_composition_batch(&sampler, 5, 10, false, &mut stream_rng(0, 0), &mut stream_rng(0, 1)).unwrap();
        let full = composition_loss(&m, &imgs, &batch, &ObjectiveConfig::vae()).unwrap();
        let partial = composition_loss(
            &m,
            &imgs,
            &batch,
            &ObjectiveConfig {
                reconstruct_inputs: false,
                ..ObjectiveConfig::vae()
            },
        )
        .unwrap();
        let diff = full.total() - partial.total();
        assert!((diff - (full.recon_og + full.recon_trans)).abs() < 1e-9);
        assert_eq!(full.recon_out, partial.recon_out);
    }

    #[test]
    fn mismatched_setups_rejected() {
        let (imgs, space, split) = circles16();
        let mut m = CompositionModel::new(ModelConfig::tiny(1, 2), 1).unwrap();
        // sigmoid decoder with MSE objective
        assert!(matches!(
            fit_composition(&mut m, &imgs, &space, &split, &ObjectiveConfig::wae(), &quick(0), None),
            Err(Error::Config(_))
        ));
        let mut m = CompositionModel::new(ModelConfig::reduced(1, 2), 1).unwrap();
        assert!(fit_composition(&mut m, &imgs, &space, &split, &ObjectiveConfig::vae(), &quick(0), None).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (imgs, space, split) = circles16();
        let mut m = CompositionModel::new(ModelConfig::tiny(1, 2), 1).unwrap();
        m.params.values[0] = f64::NAN;
        let err = fit_composition(&mut m, &imgs, &space, &split, &ObjectiveConfig::vae(), &quick(0), None).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, step: 0, .. }), "{err}");
    }

    #[test]
    fn history_csv_and_checkpoints() {
        let (imgs, space, split) = circles16();
        let dir = tempfile::tempdir().unwrap();
        let mut m = CompositionModel::new(ModelConfig::tiny(1, 2).with_operator(OperatorKind::InterpLearned), 2).unwrap();
        let cfg = TrainConfig {
            checkpoint_every: Some(2),
            ..quick(2)
        };
        let r = fit_composition(&mut m, &imgs, &space, &split, &ObjectiveConfig::vae(), &cfg, Some(dir.path())).unwrap();
        assert_eq!(r.history.len(), 3);
        assert!(dir.path().join("epoch_0002").join("manifest.json").exists());
        let csv = dir.path().join("history.csv");
        write_history_csv(&r.history, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_recon,train_reg,total,wallclock_s");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "1");
        assert_eq!(row[3].parse::<f64>().unwrap(), r.history[0].total);
    }

    #[test]
    fn early_stopping_rule() {
        let rec = |epoch, total| EpochRecord {
            epoch,
            train_recon: total,
            train_reg: 0.0,
            total,
            wallclock_s: 0.0,
        };
        let cfg = TrainConfig::for_dataset(DatasetKind::Circles, 0);
        let flat: Vec<_> = (0..6).map(|e| rec(e, 100.0 - 0.01 * e as f64)).collect();
        assert!(should_stop(&flat, &cfg));
        let falling: Vec<_> = (0..6).map(|e| rec(e, 100.0 - e as f64)).collect();
        assert!(!should_stop(&falling, &cfg));
        assert!(!should_stop(&flat[..5], &cfg));
    }

    #[test]
    fn supervised_training_reduces_loss() {
        let (imgs, space, split) = circles16();
        let mut m = SupervisedModel::new(ModelConfig::tiny(1, 2), 0).unwrap();
        let before = supervised_error(&m, &imgs, &space, &split.train).unwrap();
        let cfg = TrainConfig {
            max_epochs: 10,
            steps_per_epoch: Some(10),
            ..quick(0)
        };
        fit_supervised(&mut m, &imgs, &space, &split, &cfg, None).unwrap();
        let after = supervised_error(&m, &imgs, &space, &split.train).unwrap();
        assert!(after < before, "{after} >= {before}");
    }
}
