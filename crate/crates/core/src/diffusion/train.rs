use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::model::ToyLdm;
use super::schedule::NoiseSchedule;
use crate::rng::Rng;
use crate::tensor::{Adam, AdamConfig, AdamStep, Graph, Tensor};
use crate::{Error, Result};

/// Optimisation settings for both training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub ae_epochs: usize,
    pub den_epochs: usize,
    pub batch_size: usize,
    pub ae_lr: f32,
    pub den_lr: f32,
    /// Probability of replacing the class with the null condition.
    pub p_uncond: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ae_epochs: 30,
            den_epochs: 60,
            batch_size: 32,
            ae_lr: 2e-3,
            den_lr: 1e-3,
            p_uncond: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean reconstruction MSE per autoencoder epoch.
    pub ae_epoch_losses: Vec<f32>,
    pub latent_scale: f32,
    /// Median noise-regression loss per denoiser epoch.
    pub den_epoch_medians: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestepSampling {
    /// Independent `t ~ U{1..T}` per row.
    Uniform,
    /// One draw per equal-width stratum of `1..=T`, lowering loss variance.
    Stratified,
}

/// Inputs and targets for one noise-regression step.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub z_t: Tensor,
    /// Timestep of each row of `z_t`; the denoiser is called with these.
    pub t: Vec<usize>,
    pub noise: Tensor,
    pub cond_ids: Vec<usize>,
}

/// Draw `t`, `ε` and condition dropout for clean latents `z0: [B, ...]`.
pub fn noised_batch(
    sched: &NoiseSchedule,
    z0: &Tensor,
    cond_ids: &[usize],
    null_id: usize,
    p_uncond: f64,
    sampling: TimestepSampling,
    rng: &mut Rng,
) -> Result<NoisedBatch> {
    let b = z0.shape().first().copied().unwrap_or(0);
    if b == 0 || z0.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    if cond_ids.len() != b {
        return Err(Error::invalid(format!("{b} latents but {} conditions", cond_ids.len())));
    }
    let steps = sched.steps();
    let t: Vec<usize> = match sampling {
        TimestepSampling::Uniform => (0..b).map(|_| 1 + rng.below(steps)).collect(),
        TimestepSampling::Stratified => (0..b)
            .map(|i| {
                let u = rng.uniform(0.0, 1.0) as f64;
                1 + (((i as f64 + u) * steps as f64 / b as f64) as usize).min(steps - 1)
            })
            .collect(),
    };
    let noise = rng.normal_tensor(z0.shape());
    let row = z0.len() / b;
    let mut z_t = z0.clone();
    for (i, &ti) in t.iter().enumerate() {
        let ab = sched.alpha_bar(ti);
        let (s, n) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let range = i * row..(i + 1) * row;
        for (z, e) in z_t.data_mut()[range.clone()].iter_mut().zip(&noise.data()[range]) {
            *z = s * *z + n * e;
        }
    }
    let cond_ids = cond_ids
        .iter()
        .map(|&c| if rng.bernoulli(p_uncond) { null_id } else { c })
        .collect();
    Ok(NoisedBatch { z_t, t, noise, cond_ids })
}

/// Noise-regression loss with an arbitrary predictor standing in for `ε_θ`.
pub fn training_loss_with(
    predict: impl FnOnce(&NoisedBatch) -> Result<Tensor>,
    sched: &NoiseSchedule,
    z0: &Tensor,
    cond_ids: &[usize],
    null_id: usize,
    p_uncond: f64,
    rng: &mut Rng,
) -> Result<f32> {
    let batch = noised_batch(sched, z0, cond_ids, null_id, p_uncond, TimestepSampling::Uniform, rng)?;
    let pred = predict(&batch)?;
    let se = pred.zip_map(&batch.noise, |p, e| (p - e) * (p - e))?;
    Ok(se.mean())
}

/// `E‖ε − ε_θ(z_t, t, c)‖²` (mean reduction) for images `x0: [B, 3, H, W]`.
pub fn training_loss(model: &ToyLdm, x0: &Tensor, cond: &[usize], p_uncond: f64, rng: &mut Rng) -> Result<f32> {
    if x0.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let ids = cond
        .iter()
        .map(|&c| model.condition_id(Some(c)))
        .collect::<Result<Vec<_>>>()?;
    let z0 = model.encode_images(x0)?;
    training_loss_with(
        |b| model.noise_prediction(&b.z_t, &b.t, &b.cond_ids),
        model.schedule(),
        &z0,
        &ids,
        model.null_condition(),
        p_uncond,
        rng,
    )
}

fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn median(values: &[f32]) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n == 0 {
        f32::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn report_skip(step: AdamStep, phase: &str) {
    if let AdamStep::SkippedNonFinite { param } = step {
        warn!("{phase}: skipped update, non-finite gradient in parameter {param}");
    }
}

/// Phase one: fit `𝓔`/`𝓓` on reconstruction MSE, then calibrate the latent scale.
pub fn train_autoencoder(model: &mut ToyLdm, images: &Tensor, cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<f32>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("no training images"));
    }
    model.latent_scale = 1.0;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.ae_lr,
            ..Default::default()
        },
        model.ae.tensors(),
    );
    let mut epoch_losses = Vec::with_capacity(cfg.ae_epochs);
    for epoch in 0..cfg.ae_epochs {
        let mut total = 0.0f64;
        for idx in batches(n, cfg.batch_size, rng) {
            let x = images.select(&idx)?;
            let mut g = Graph::<f32>::new();
            let ae = model.ae.bind(&mut g, true);
            let xv = g.constant(x);
            let z = model.encode(&mut g, &ae, xv)?;
            let recon = model.decode(&mut g, &ae, z)?;
            let loss = g.mse_loss(recon, xv)?;
            total += g.value(loss).item() as f64 * idx.len() as f64;
            g.backward(loss)?;
            let grads = model.ae.grads(&g, &ae);
            report_skip(adam.step(model.ae.tensors_mut().iter_mut(), &grads)?, "autoencoder");
        }
        let mean = (total / n as f64) as f32;
        info!("autoencoder epoch {}/{}: recon mse {mean:.5}", epoch + 1, cfg.ae_epochs);
        epoch_losses.push(mean);
    }
    let scale = model.calibrate_latent_scale(images)?;
    info!("latent scale {scale:.4}");
    Ok(epoch_losses)
}

/// Phase two: autoencoder frozen, fit `ε_θ` on cached latents.
///
/// Returns the median per-batch loss of every epoch.
pub fn train_denoiser(
    model: &mut ToyLdm,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 || labels.len() != n {
        return Err(Error::invalid(format!("{n} images but {} labels", labels.len())));
    }
    let ids = labels
        .iter()
        .map(|&c| model.condition_id(Some(c)))
        .collect::<Result<Vec<_>>>()?;
    let latents = model.encode_images(images)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.den_lr,
            ..Default::default()
        },
        model.den.tensors(),
    );
    let null = model.null_condition();
    let mut medians = Vec::with_capacity(cfg.den_epochs);
    for epoch in 0..cfg.den_epochs {
        let mut losses = Vec::new();
        for idx in batches(n, cfg.batch_size, rng) {
            let z0 = latents.select(&idx)?;
            let c: Vec<usize> = idx.iter().map(|&i| ids[i]).collect();
            let batch = noised_batch(
                model.schedule(),
                &z0,
                &c,
                null,
                cfg.p_uncond,
                TimestepSampling::Stratified,
                rng,
            )?;
            let mut g = Graph::<f32>::new();
            let den = model.den.bind(&mut g, true);
            let z = g.constant(batch.z_t);
            let eps = model.predict_noise(&mut g, &den, z, &batch.t, &batch.cond_ids)?;
            let target = g.constant(batch.noise);
            let loss = g.mse_loss(eps, target)?;
            losses.push(g.value(loss).item());
            g.backward(loss)?;
            let grads = model.den.grads(&g, &den);
            report_skip(adam.step(model.den.tensors_mut().iter_mut(), &grads)?, "denoiser");
        }
        let m = median(&losses);
        info!("denoiser epoch {}/{}: median loss {m:.5}", epoch + 1, cfg.den_epochs);
        medians.push(m);
    }
    Ok(medians)
}

/// Both phases in order.
pub fn train(model: &mut ToyLdm, images: &Tensor, labels: &[usize], cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    let mut rng = Rng::stream(seed, "train-autoencoder");
    let ae_epoch_losses = train_autoencoder(model, images, cfg, &mut rng)?;
    let mut rng = Rng::stream(seed, "train-denoiser");
    let den_epoch_medians = train_denoiser(model, images, labels, cfg, &mut rng)?;
    Ok(TrainReport {
        ae_epoch_losses,
        latent_scale: model.latent_scale,
        den_epoch_medians,
    })
}
