//! L∞ immunization: PGD against the encoder or against the whole edit pipeline.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::diffusion::{edit_in_graph, EditNoise, EditPlan, EditRequest, ToyLdm};
use crate::rng::{derive_indexed, Rng};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Fresh sampler noise every PGD iteration.
    Resample,
    /// The edit request's own seed at every iteration.
    Fixed,
}

/// PGD hyperparameters. Only the L∞ ball is supported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub num_steps: usize,
    /// Denoising steps that carry gradient in the diffusion attack.
    pub truncation_depth: usize,
    /// Denoising steps unrolled by the diffusion attack's forward pass.
    pub sampler_steps: usize,
    pub noise_mode: NoiseMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 16.0 / 255.0,
            step_size: 2.0 / 255.0,
            num_steps: 200,
            truncation_depth: 4,
            sampler_steps: 10,
            noise_mode: NoiseMode::Resample,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::invalid(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::invalid(format!(
                "step_size {} must lie in (0, epsilon = {}]",
                self.step_size, self.epsilon
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::invalid("num_steps must be at least 1"));
        }
        if self.truncation_depth == 0 || self.truncation_depth > self.sampler_steps {
            return Err(Error::invalid(format!(
                "truncation_depth {} outside 1..=sampler_steps ({})",
                self.truncation_depth, self.sampler_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImmunizationResult {
    /// `clamp(original + delta, 0, 1)`.
    #[serde(skip)]
    pub immunized: Tensor,
    #[serde(skip)]
    pub delta: Tensor,
    /// Objective at every evaluated iterate, starting from the clean image.
    pub loss_trace: Vec<f32>,
    pub best_iteration: usize,
    pub best_loss: f32,
    pub config: AttackConfig,
    pub warnings: Vec<String>,
}

impl ImmunizationResult {
    pub fn initial_loss(&self) -> Option<f32> {
        self.loss_trace.first().copied()
    }
}

/// Clamp every coordinate to `[−ε, ε]`.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Tensor {
    let e = epsilon as f32;
    delta.map(|v| v.clamp(-e, e))
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn apply(x: &Tensor, delta: &Tensor) -> Result<Tensor> {
    Ok(x.zip_map(delta, |a, d| (a + d).clamp(0.0, 1.0))?)
}

/// Keep `x + delta` inside `[0, 1]` and `delta` inside the ball.
fn feasible(x: &Tensor, delta: &Tensor, epsilon: f64) -> Result<Tensor> {
    let d = project_linf(delta, epsilon);
    let d = x.zip_map(&d, |a, d| (a + d).clamp(0.0, 1.0) - a)?;
    Ok(project_linf(&d, epsilon))
}

/// Signed-gradient descent on `objective` inside the L∞ ball around `x`.
///
/// `objective(x', i)` returns the loss at iterate `i` and, when the flag is
/// set, its gradient with respect to `x'`. Evaluates `num_steps + 1` iterates
/// and keeps the best one.
pub fn pgd<F>(mut objective: F, x: &Tensor, cfg: &AttackConfig) -> Result<ImmunizationResult>
where
    F: FnMut(&Tensor, usize, bool) -> Result<(f32, Option<Tensor>)>,
{
    cfg.validate()?;
    let k = cfg.step_size as f32;
    let mut delta = Tensor::zeros(x.shape());
    let mut best = (f32::INFINITY, 0usize, delta.clone());
    let mut trace = Vec::with_capacity(cfg.num_steps + 1);
    let (mut rising, mut longest_rise) = (0usize, 0usize);
    for i in 0..=cfg.num_steps {
        let xi = apply(x, &delta)?;
        let last = i == cfg.num_steps;
        let (loss, grad) = objective(&xi, i, !last)?;
        if !loss.is_finite() {
            trace.push(loss);
            return Err(Error::NonFiniteObjective { iteration: i, trace });
        }
        if let Some(&prev) = trace.last() {
            rising = if loss > prev { rising + 1 } else { 0 };
            longest_rise = longest_rise.max(rising);
        }
        trace.push(loss);
        if loss < best.0 {
            best = (loss, i, delta.clone());
        }
        if last {
            break;
        }
        let grad = grad.ok_or_else(|| Error::invalid("objective returned no gradient"))?;
        if !grad.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: i, trace });
        }
        let stepped = delta.zip_map(&grad, |d, g| d - k * sign(g))?;
        delta = feasible(x, &stepped, cfg.epsilon)?;
    }
    let mut warnings = Vec::new();
    if longest_rise > cfg.num_steps / 2 {
        let msg = format!("objective increased for {longest_rise} consecutive steps");
        warn!("{msg}");
        warnings.push(msg);
    }
    let (best_loss, best_iteration, delta) = best;
    Ok(ImmunizationResult {
        immunized: apply(x, &delta)?,
        delta,
        loss_trace: trace,
        best_iteration,
        best_loss,
        config: cfg.clone(),
        warnings,
    })
}

/// Uniform mid-gray image, the default attack target.
pub fn gray_target(shape: &[usize]) -> Tensor {
    Tensor::full(shape, 0.5)
}

fn batched(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.clone().reshape(&shape)?)
}

fn check_pair(model: &ToyLdm, x: &Tensor, target: &Tensor) -> Result<()> {
    let want = model.config().image_shape();
    if x.shape() != want || target.shape() != want {
        return Err(Error::invalid(format!(
            "image and target must both be {want:?}, got {:?} and {:?}",
            x.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// `‖𝓔(x) − z_targ‖²` for `x: [1, 3, H, W]`.
pub fn encoder_objective<T: Real>(model: &ToyLdm, g: &mut Graph<T>, x: Var, z_targ: &Tensor) -> Result<Var> {
    let ae = model.autoencoder_params().bind(g, false);
    let z = model.encode(g, &ae, x)?;
    let target = g.constant(z_targ.cast::<T>());
    Ok(g.sq_dist(z, target)?)
}

/// `‖f(x) − x_targ‖²` where `f` is the edit pipeline with fixed noise.
pub fn diffusion_objective<T: Real>(
    model: &ToyLdm,
    g: &mut Graph<T>,
    x: Var,
    x_targ: &Tensor,
    req: &EditRequest,
    noise: &EditNoise,
    grad_steps: usize,
) -> Result<Var> {
    let out = edit_in_graph(model, g, x, req, noise, Some(grad_steps))?;
    let target = g.constant(batched(x_targ)?.cast::<T>());
    Ok(g.sq_dist(out, target)?)
}

fn loss_and_grad<T: Real>(
    x: &Tensor,
    need_grad: bool,
    build: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<(f32, Option<Tensor>)> {
    let mut g = Graph::<T>::new();
    let xv = g.leaf(batched(x)?.cast::<T>(), need_grad);
    let loss = build(&mut g, xv)?;
    let value = g.value(loss).item().to_f32().unwrap_or(f32::NAN);
    if !need_grad || !value.is_finite() {
        return Ok((value, None));
    }
    g.backward(loss)?;
    let grad = g.grad_or_zeros(xv).cast::<f32>().reshape(x.shape())?;
    Ok((value, Some(grad)))
}

/// Push `𝓔(x')` toward `𝓔(x_targ)` (mid-gray when `None`).
pub fn encoder_attack(
    model: &ToyLdm,
    x: &Tensor,
    x_targ: Option<&Tensor>,
    cfg: &AttackConfig,
) -> Result<ImmunizationResult> {
    let target = x_targ.cloned().unwrap_or_else(|| gray_target(x.shape()));
    check_pair(model, x, &target)?;
    let z_targ = model.encode_images(&batched(&target)?)?;
    pgd(
        |xi, _, need_grad| loss_and_grad::<f32>(xi, need_grad, |g, v| encoder_objective(model, g, v, &z_targ)),
        x,
        cfg,
    )
}

/// Pipeline settings the diffusion attack differentiates through.
fn attack_request(model: &ToyLdm, edit: &EditRequest, cfg: &AttackConfig) -> Result<(EditRequest, EditPlan)> {
    let mut req = edit.clone();
    req.settings.num_inference_steps = cfg.sampler_steps.min(model.schedule().steps());
    let plan = EditPlan::new(model.schedule().steps(), &req.settings, req.mask.is_some())?;
    Ok((req, plan))
}

/// Sampler noise for PGD iteration `i`.
pub fn attack_noise(model: &ToyLdm, edit: &EditRequest, cfg: &AttackConfig, iteration: usize) -> Result<EditNoise> {
    let (_, plan) = attack_request(model, edit, cfg)?;
    let seed = match cfg.noise_mode {
        NoiseMode::Fixed => edit.seed,
        NoiseMode::Resample => derive_indexed(edit.seed, "attack-noise", iteration as u64),
    };
    let mut shape = vec![1];
    shape.extend(model.config().latent_shape());
    Ok(EditNoise::draw(seed, &shape, plan.num_steps()))
}

/// Push the edit of `x'` toward `x_targ` (mid-gray when `None`).
///
/// Gradients flow through the last `truncation_depth` denoising steps only,
/// capped at the number of steps the edit actually takes.
pub fn diffusion_attack(
    model: &ToyLdm,
    x: &Tensor,
    x_targ: Option<&Tensor>,
    edit: &EditRequest,
    cfg: &AttackConfig,
) -> Result<ImmunizationResult> {
    cfg.validate()?;
    let target = x_targ.cloned().unwrap_or_else(|| gray_target(x.shape()));
    check_pair(model, x, &target)?;
    let (req, plan) = attack_request(model, edit, cfg)?;
    let depth = cfg.truncation_depth.min(plan.num_steps());
    pgd(
        |xi, i, need_grad| {
            let noise = attack_noise(model, edit, cfg, i)?;
            loss_and_grad::<f32>(xi, need_grad, |g, v| {
                diffusion_objective(model, g, v, &target, &req, &noise, depth)
            })
        },
        x,
        cfg,
    )
}

/// Re-evaluate the diffusion objective at `x` with iteration `i`'s noise.
pub fn diffusion_loss_at(
    model: &ToyLdm,
    x: &Tensor,
    x_targ: Option<&Tensor>,
    edit: &EditRequest,
    cfg: &AttackConfig,
    iteration: usize,
) -> Result<f32> {
    let target = x_targ.cloned().unwrap_or_else(|| gray_target(x.shape()));
    check_pair(model, x, &target)?;
    let (req, plan) = attack_request(model, edit, cfg)?;
    let noise = attack_noise(model, edit, cfg, iteration)?;
    let depth = cfg.truncation_depth.min(plan.num_steps());
    Ok(loss_and_grad::<f32>(x, false, |g, v| diffusion_objective(model, g, v, &target, &req, &noise, depth))?.0)
}

/// Uniform noise in `[−ε, ε]` per pixel, kept inside `[0, 1]`.
pub fn random_noise_baseline(x: &Tensor, epsilon: f64, seed: u64) -> Result<ImmunizationResult> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1]")));
    }
    let mut rng = Rng::stream(seed, "random-noise");
    let e = epsilon as f32;
    let raw = rng.uniform_tensor(x.shape(), -e, e);
    let delta = feasible(x, &raw, epsilon)?;
    Ok(ImmunizationResult {
        immunized: apply(x, &delta)?,
        delta,
        loss_trace: Vec::new(),
        best_iteration: 0,
        best_loss: 0.0,
        config: AttackConfig {
            epsilon,
            ..Default::default()
        },
        warnings: Vec::new(),
    })
}
