//! Latent diffusion: schedule, toy model, training, DDIM sampling and editing.

mod checkpoint;
mod model;
mod sampler;
mod schedule;
mod train;

pub use checkpoint::{Checkpoint, Entry};
pub use model::{ModelConfig, ToyLdm};
pub use sampler::{
    cfg_eps, ddim_step, ddim_step_with_noise, edit, edit_in_graph, img2img_edit, inpaint_edit, latent_mask,
    sample, sample_batch, timestep_plan, EditNoise, EditPlan,
};
pub use schedule::NoiseSchedule;
pub use train::{
    noised_batch, train, train_autoencoder, train_denoiser, training_loss, training_loss_with, NoisedBatch,
    TimestepSampling, TrainConfig, TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// `build_schedule`: linear β schedule over `steps` timesteps.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_min, beta_max)
}

/// Sampler settings shared by every edit, independent of the input image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditSettings {
    pub strength: f64,
    pub guidance_scale: f64,
    pub num_inference_steps: usize,
    pub eta: f64,
}

impl Default for EditSettings {
    fn default() -> Self {
        Self {
            strength: 0.5,
            guidance_scale: 3.0,
            num_inference_steps: 10,
            eta: 1.0,
        }
    }
}

impl EditSettings {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::invalid(format!("strength {} outside (0, 1]", self.strength)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::invalid(format!("guidance_scale {} must be >= 0", self.guidance_scale)));
        }
        if self.num_inference_steps == 0 || self.num_inference_steps > steps {
            return Err(Error::invalid(format!(
                "num_inference_steps {} outside 1..={steps}",
                self.num_inference_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// One image-variation or inpainting request.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H×W`, `true` = editable. Present means inpainting.
    pub mask: Option<Vec<bool>>,
    /// Class id, or `None` for the unconditional embedding.
    pub condition: Option<usize>,
    pub settings: EditSettings,
    pub seed: u64,
}

impl EditRequest {
    pub fn new(image: Tensor, condition: Option<usize>, settings: EditSettings, seed: u64) -> Self {
        Self {
            image,
            mask: None,
            condition,
            settings,
            seed,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = Some(mask);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_validation() {
        let ok = EditSettings::default();
        assert!(ok.validate(100).is_ok());
        for bad in [
            EditSettings { strength: 0.0, ..ok.clone() },
            EditSettings { strength: 1.2, ..ok.clone() },
            EditSettings { guidance_scale: -1.0, ..ok.clone() },
            EditSettings { num_inference_steps: 101, ..ok.clone() },
            EditSettings { num_inference_steps: 0, ..ok.clone() },
            EditSettings { eta: 1.5, ..ok.clone() },
        ] {
            assert!(bad.validate(100).is_err(), "{bad:?}");
        }
    }
}
