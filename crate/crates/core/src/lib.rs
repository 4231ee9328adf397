//! Toy latent-diffusion image editing and adversarial immunization.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode autodiff and Adam,
//! * [`diffusion`]: noise schedule, the toy autoencoder + denoiser, training,
//!   DDIM sampling, and the img2img / inpainting editors,
//! * [`immunize`]: L∞ projected gradient descent, the encoder and diffusion
//!   attacks, and the uniform-noise baseline,
//! * [`metrics`]: PSNR, SSIM, GMSD, Fréchet feature distance, k-NN
//!   precision/recall and embedding cosine similarity,
//! * [`harness`]: synthetic data, experiment configuration, the end-to-end
//!   pipeline and report emission.

pub mod diffusion;
pub mod error;
pub mod harness;
pub mod immunize;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, Tensor, Var};
