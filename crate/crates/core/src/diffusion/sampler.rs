use log::warn;

use super::model::{ModelConfig, ToyLdm};
use super::schedule::NoiseSchedule;
use super::{EditRequest, EditSettings};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// `n + 1` descending timesteps from `start_t` to 0 on a uniform stride.
pub fn timestep_plan(start_t: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > start_t {
        return Err(Error::invalid(format!("cannot take {n} steps from timestep {start_t}")));
    }
    Ok((0..=n)
        .rev()
        .map(|k| ((k * start_t) as f64 / n as f64).round() as usize)
        .collect())
}

/// Where an edit starts and which timesteps it visits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditPlan {
    pub start_t: usize,
    pub timesteps: Vec<usize>,
}

impl EditPlan {
    /// Img2img noises to `round(strength·T)`; inpainting always starts from `T`.
    pub fn new(steps: usize, settings: &EditSettings, inpaint: bool) -> Result<Self> {
        settings.validate(steps)?;
        let start_t = if inpaint {
            steps
        } else {
            ((settings.strength * steps as f64).round() as usize).max(1)
        };
        let n = settings.num_inference_steps.min(start_t);
        Ok(Self {
            start_t,
            timesteps: timestep_plan(start_t, n)?,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len() - 1
    }
}

/// All randomness consumed by one edit, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct EditNoise {
    pub init: Tensor,
    /// One DDIM noise draw per step.
    pub steps: Vec<Tensor>,
    /// Noise for re-noising the frozen latent region after each step.
    pub known: Vec<Tensor>,
}

impl EditNoise {
    /// Independent streams per role so img2img and inpainting share draws.
    pub fn draw(seed: u64, latent_shape: &[usize], num_steps: usize) -> Self {
        let mut init = Rng::stream(seed, "edit-init");
        let mut ddim = Rng::stream(seed, "edit-ddim");
        let mut known = Rng::stream(seed, "edit-known");
        Self {
            init: init.normal_tensor(latent_shape),
            steps: (0..num_steps).map(|_| ddim.normal_tensor(latent_shape)).collect(),
            known: (0..num_steps).map(|_| known.normal_tensor(latent_shape)).collect(),
        }
    }
}

fn ddim_coefficients(sched: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<(f64, f64, f64)> {
    if t_prev >= t || t > sched.steps() {
        return Err(Error::invalid(format!(
            "DDIM step needs T >= t > t_prev, got t = {t}, t_prev = {t_prev}"
        )));
    }
    let at = sched.alpha_bar(t);
    let ap = sched.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ap) / (1.0 - at)).sqrt() * (1.0 - at / ap).sqrt();
    let dir = (1.0 - ap - sigma * sigma).max(0.0).sqrt();
    // z_prev = √ᾱp·x̂0 + dir·ε + σ·noise with x̂0 = (z − √(1−ᾱt)·ε)/√ᾱt
    let cz = (ap / at).sqrt();
    let ce = dir - (ap * (1.0 - at) / at).sqrt();
    Ok((cz, ce, sigma))
}

/// DDIM update with an explicit noise draw.
pub fn ddim_step_with_noise(
    sched: &NoiseSchedule,
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps: &Tensor,
    eta: f64,
    noise: &Tensor,
) -> Result<Tensor> {
    let (cz, ce, sigma) = ddim_coefficients(sched, t, t_prev, eta)?;
    let (cz, ce, sigma) = (cz as f32, ce as f32, sigma as f32);
    let mixed = z_t.zip_map(eps, |z, e| cz * z + ce * e)?;
    Ok(mixed.zip_map(noise, |m, n| m + sigma * n)?)
}

/// DDIM update `z_t → z_{t_prev}`; `eta = 0` is deterministic, `eta = 1` ancestral.
pub fn ddim_step(
    sched: &NoiseSchedule,
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps: &Tensor,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let noise = rng.normal_tensor(z_t.shape());
    ddim_step_with_noise(sched, z_t, t, t_prev, eps, eta, &noise)
}

#[allow(clippy::too_many_arguments)]
fn ddim_in_graph<T: Real>(
    g: &mut Graph<T>,
    sched: &NoiseSchedule,
    z: Var,
    t: usize,
    t_prev: usize,
    eps: Var,
    eta: f64,
    noise: &Tensor,
) -> Result<Var> {
    let (cz, ce, sigma) = ddim_coefficients(sched, t, t_prev, eta)?;
    let a = g.scale(z, cz)?;
    let b = g.scale(eps, ce)?;
    let mut out = g.add(a, b)?;
    if sigma > 0.0 {
        let n = g.constant(noise.cast::<T>());
        let n = g.scale(n, sigma)?;
        out = g.add(out, n)?;
    }
    Ok(out)
}

/// Classifier-free guidance `(1−s)·ε_null + s·ε_cond`, one condition per batch row.
///
/// Rows with `None` get `ε_null` unchanged.
pub fn cfg_eps(
    model: &ToyLdm,
    z_t: &Tensor,
    t: usize,
    cond: &[Option<usize>],
    guidance_scale: f64,
) -> Result<Tensor> {
    let n = z_t.shape().first().copied().unwrap_or(0);
    if cond.len() != n {
        return Err(Error::invalid(format!("{n} latents but {} conditions", cond.len())));
    }
    let ts = vec![t; n];
    let null = vec![model.null_condition(); n];
    let e_null = model.noise_prediction(z_t, &ts, &null)?;
    if cond.iter().all(Option::is_none) {
        return Ok(e_null);
    }
    let ids = cond
        .iter()
        .map(|&c| model.condition_id(c))
        .collect::<Result<Vec<_>>>()?;
    let e_cond = model.noise_prediction(z_t, &ts, &ids)?;
    let (wn, wc) = ((1.0 - guidance_scale) as f32, guidance_scale as f32);
    let mut out = e_null.zip_map(&e_cond, |a, b| wn * a + wc * b)?;
    let row = z_t.len() / n.max(1);
    for (i, c) in cond.iter().enumerate() {
        if c.is_none() {
            out.data_mut()[i * row..(i + 1) * row].copy_from_slice(&e_null.data()[i * row..(i + 1) * row]);
        }
    }
    Ok(out)
}

fn cfg_in_graph<T: Real>(
    model: &ToyLdm,
    g: &mut Graph<T>,
    den: &crate::nn::Bound,
    z: Var,
    t: usize,
    cond: Option<usize>,
    guidance_scale: f64,
) -> Result<Var> {
    let n = g.shape(z)[0];
    let ts = vec![t; n];
    let null = vec![model.null_condition(); n];
    let e_null = model.predict_noise(g, den, z, &ts, &null)?;
    let Some(c) = cond else {
        return Ok(e_null);
    };
    let ids = vec![model.condition_id(Some(c))?; n];
    let e_cond = model.predict_noise(g, den, z, &ts, &ids)?;
    let a = g.scale(e_null, 1.0 - guidance_scale)?;
    let b = g.scale(e_cond, guidance_scale)?;
    Ok(g.add(a, b)?)
}

/// Generate `cond.len()` images from pure noise; output `[N, 3, H, W]` in `[0, 1]`.
pub fn sample_batch(
    model: &ToyLdm,
    cond: &[Option<usize>],
    steps: usize,
    guidance_scale: f64,
    eta: f64,
    seed: u64,
) -> Result<Tensor> {
    let sched = model.schedule();
    if steps == 0 || steps > sched.steps() {
        return Err(Error::invalid(format!("steps {steps} outside 1..={}", sched.steps())));
    }
    if cond.is_empty() {
        return Err(Error::invalid("nothing to sample"));
    }
    let mut rng = Rng::stream(seed, "sample");
    let mut shape = vec![cond.len()];
    shape.extend(model.config().latent_shape());
    let mut z = rng.normal_tensor(&shape);
    let plan = timestep_plan(sched.steps(), steps)?;
    for w in plan.windows(2) {
        let eps = cfg_eps(model, &z, w[0], cond, guidance_scale)?;
        z = ddim_step(sched, &z, w[0], w[1], &eps, eta, &mut rng)?;
    }
    Ok(model.decode_latents(&z)?.map(|v| v.clamp(0.0, 1.0)))
}

/// One generated image `[3, H, W]`.
pub fn sample(
    model: &ToyLdm,
    cond: Option<usize>,
    steps: usize,
    guidance_scale: f64,
    eta: f64,
    seed: u64,
) -> Result<Tensor> {
    let batch = sample_batch(model, &[cond], steps, guidance_scale, eta, seed)?;
    Ok(batch.unstack().remove(0))
}

/// Majority vote of a pixel mask over `factor×factor` blocks; ties count as editable.
pub fn latent_mask(mask: &[bool], height: usize, width: usize, factor: usize) -> Result<Vec<bool>> {
    if mask.len() != height * width || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
        return Err(Error::invalid(format!(
            "mask of {} values does not tile a {height}×{width} image in {factor}×{factor} blocks",
            mask.len()
        )));
    }
    let (h, w) = (height / factor, width / factor);
    Ok((0..h * w)
        .map(|i| {
            let (by, bx) = (i / w, i % w);
            let count = (0..factor * factor)
                .filter(|j| mask[(by * factor + j / factor) * width + bx * factor + j % factor])
                .count();
            2 * count >= factor * factor
        })
        .collect())
}

fn broadcast_mask<T: Real>(mask: &[bool], channels: usize) -> Tensor<T> {
    let area = mask.len();
    Tensor::from_fn(&[1, channels, area], |i| if mask[i % area] { T::one() } else { T::zero() })
}

fn blend<T: Real>(g: &mut Graph<T>, a: Var, b: Var, mask_a: &Tensor<T>) -> Result<Var> {
    // a where mask, b elsewhere
    let shape = g.shape(a).to_vec();
    let m = g.constant(mask_a.clone().reshape(&shape)?);
    let inv = g.constant(mask_a.map(|v| T::one() - v).reshape(&shape)?);
    let a = g.mul(a, m)?;
    let b = g.mul(b, inv)?;
    Ok(g.add(a, b)?)
}

fn check_image(config: &ModelConfig, image: &Tensor) -> Result<()> {
    if image.shape() != config.image_shape() {
        return Err(Error::invalid(format!(
            "expected image {:?}, got {:?}",
            config.image_shape(),
            image.shape()
        )));
    }
    Ok(())
}

/// Build a full edit of `x: [1, 3, H, W]` on `g` and return the edited image node.
///
/// `req.image` is not read; `x` supplies the input so callers can
/// differentiate with respect to it. With `grad_steps = Some(k)` only the last
/// `k` denoising steps carry gradient. The earlier steps run on detached
/// values and are bridged back to `𝓔(x)` through `√ᾱ_t` at the cut, which is
/// the exact Jacobian of the marginal for a perfect denoiser.
pub fn edit_in_graph<T: Real>(
    model: &ToyLdm,
    g: &mut Graph<T>,
    x: Var,
    req: &EditRequest,
    noise: &EditNoise,
    grad_steps: Option<usize>,
) -> Result<Var> {
    let config = model.config();
    let sched = model.schedule();
    let plan = EditPlan::new(sched.steps(), &req.settings, req.mask.is_some())?;
    let n = plan.num_steps();
    if noise.steps.len() < n || noise.known.len() < n {
        return Err(Error::invalid(format!("edit needs {n} noise draws per role")));
    }
    let grad_steps = grad_steps.unwrap_or(n);
    if grad_steps == 0 || grad_steps > n {
        return Err(Error::invalid(format!("gradient depth {grad_steps} outside 1..={n}")));
    }
    let detached = n - grad_steps;
    let cond = req.condition;
    model.condition_id(cond)?;

    let (pix_mask, lat_mask) = match &req.mask {
        Some(m) => {
            let lat = latent_mask(m, config.image_size, config.image_size, ModelConfig::DOWNSAMPLE)?;
            (
                Some(broadcast_mask::<T>(m, ModelConfig::IMAGE_CHANNELS)),
                Some(broadcast_mask::<T>(&lat, config.latent_channels)),
            )
        }
        None => (None, None),
    };

    let ae = model.ae.bind(g, false);
    let den = model.den.bind(g, false);
    let z0 = model.encode(g, &ae, x)?;
    let z0_detached = if detached > 0 {
        g.constant(g.value(z0).clone())
    } else {
        z0
    };
    let mut z = sched.marginal_in_graph(g, z0_detached, plan.start_t, &noise.init)?;
    for k in 0..n {
        let (t, t_prev) = (plan.timesteps[k], plan.timesteps[k + 1]);
        if detached > 0 && k == detached {
            let frozen = g.constant(g.value(z).clone());
            let zero = g.sub(z0, z0_detached)?;
            let bridge = g.scale(zero, sched.alpha_bar(t).sqrt())?;
            z = g.add(frozen, bridge)?;
        }
        let eps = cfg_in_graph(model, g, &den, z, t, cond, req.settings.guidance_scale)?;
        z = ddim_in_graph(g, sched, z, t, t_prev, eps, req.settings.eta, &noise.steps[k])?;
        if let Some(m) = &lat_mask {
            let source = if k < detached { z0_detached } else { z0 };
            let known = sched.marginal_in_graph(g, source, t_prev, &noise.known[k])?;
            z = blend(g, z, known, m)?;
        }
    }
    let out = model.decode(g, &ae, z)?;
    let mut out = g.clamp(out, 0.0, 1.0)?;
    if let Some(m) = &pix_mask {
        out = blend(g, out, x, m)?;
    }
    Ok(out)
}

/// Run an edit request; dispatches on the presence of a mask.
pub fn edit(model: &ToyLdm, req: &EditRequest) -> Result<Tensor> {
    let config = model.config();
    check_image(config, &req.image)?;
    if let Some(mask) = &req.mask {
        if mask.len() != config.image_size * config.image_size {
            return Err(Error::invalid(format!(
                "mask has {} entries for a {s}×{s} image",
                mask.len(),
                s = config.image_size
            )));
        }
        if !mask.iter().any(|&m| m) {
            warn!("inpainting mask selects no pixels; returning the input unchanged");
            return Ok(req.image.clone());
        }
    }
    let plan = EditPlan::new(model.schedule().steps(), &req.settings, req.mask.is_some())?;
    let mut lat_shape = vec![1];
    lat_shape.extend(config.latent_shape());
    let noise = EditNoise::draw(req.seed, &lat_shape, plan.num_steps());

    let mut g = Graph::<f32>::new();
    let mut shape = vec![1];
    shape.extend(config.image_shape());
    let x = g.constant(req.image.clone().reshape(&shape)?);
    let out = edit_in_graph(model, &mut g, x, req, &noise, None)?;
    Ok(g.value(out).clone().reshape(&config.image_shape())?)
}

/// Image variation: noise `𝓔(image)` to `round(strength·T)` and denoise.
pub fn img2img_edit(model: &ToyLdm, req: &EditRequest) -> Result<Tensor> {
    if req.mask.is_some() {
        return Err(Error::invalid("img2img edit takes no mask"));
    }
    edit(model, req)
}

/// Regenerate the masked region while re-imposing the frozen latents each step.
pub fn inpaint_edit(model: &ToyLdm, req: &EditRequest) -> Result<Tensor> {
    if req.mask.is_none() {
        return Err(Error::invalid("inpainting needs a mask"));
    }
    edit(model, req)
}
