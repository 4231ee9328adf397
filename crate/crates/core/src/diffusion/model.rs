use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::nn::{Bound, Conv2d, Embedding, Linear, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Architecture and schedule hyperparameters of [`ToyLdm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    pub ae_width: usize,
    pub denoiser_width: usize,
    pub denoiser_blocks: usize,
    pub time_embed_dim: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // 1e-4..0.02 is the usual 1000-step range; rescaled by 1000/T.
        Self {
            image_size: 32,
            latent_channels: 4,
            ae_width: 32,
            denoiser_width: 48,
            denoiser_blocks: 2,
            time_embed_dim: 32,
            num_classes: 4,
            timesteps: 100,
            beta_min: 1e-3,
            beta_max: 0.2,
        }
    }
}

impl ModelConfig {
    pub const DOWNSAMPLE: usize = 4;
    pub const IMAGE_CHANNELS: usize = 3;

    pub fn latent_size(&self) -> usize {
        self.image_size / Self::DOWNSAMPLE
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [Self::IMAGE_CHANNELS, self.image_size, self.image_size]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_size(), self.latent_size()]
    }

    /// Row of the condition table reserved for the unconditional embedding.
    pub fn null_condition(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<NoiseSchedule> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(Self::DOWNSAMPLE) {
            return Err(Error::invalid(format!(
                "image_size {} must be a positive multiple of {}",
                self.image_size,
                Self::DOWNSAMPLE
            )));
        }
        if self.num_classes == 0 || self.latent_channels == 0 || self.ae_width < 2 || self.denoiser_width == 0 {
            return Err(Error::invalid("model widths and class count must be positive"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be a positive even number"));
        }
        let schedule = NoiseSchedule::linear(self.timesteps, self.beta_min, self.beta_max)?;
        if schedule.terminal_alpha_bar() >= 0.05 {
            return Err(Error::invalid(format!(
                "alpha_bar_T = {:.4} is not close enough to zero for x_T ~ N(0, I)",
                schedule.terminal_alpha_bar()
            )));
        }
        Ok(schedule)
    }
}

#[derive(Debug, Clone)]
struct EncoderNet {
    convs: [Conv2d; 4],
}

#[derive(Debug, Clone)]
struct DecoderNet {
    head: Conv2d,
    mid: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    out: Conv2d,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv_a: Conv2d,
    emb_proj: Linear,
    conv_b: Conv2d,
}

#[derive(Debug, Clone)]
struct DenoiserNet {
    time_in: Linear,
    time_out: Linear,
    cond: Embedding,
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    conv_out: Conv2d,
}

/// Encoder 𝓔, decoder 𝓓, and conditional noise predictor ε_θ.
///
/// The autoencoder and the denoiser keep separate parameter stores so the
/// two training phases can freeze one while updating the other.
#[derive(Debug, Clone)]
pub struct ToyLdm {
    config: ModelConfig,
    schedule: NoiseSchedule,
    pub(crate) ae: ParamStore,
    pub(crate) den: ParamStore,
    encoder: EncoderNet,
    decoder: DecoderNet,
    denoiser: DenoiserNet,
    /// Multiplier applied after the raw encoder so latents have unit variance.
    pub(crate) latent_scale: f32,
}

fn sinusoidal(t: usize, dim: usize) -> impl Iterator<Item = f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let sins: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).sin()).collect();
    let coss: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).cos()).collect();
    sins.into_iter().chain(coss)
}

/// Apply `f` to leading-axis chunks of `x` and stack the results, bounding peak memory.
fn map_chunks(x: &Tensor, mut f: impl FnMut(Tensor) -> Result<Tensor>) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let n = x.shape().first().copied().unwrap_or(0);
    if n <= CHUNK {
        return f(x.clone());
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        parts.extend(f(x.select(&idx)?)?.unstack());
    }
    Ok(Tensor::stack(&parts)?)
}

impl ToyLdm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let schedule = config.validate()?;
        let mut rng = Rng::stream(seed, "model-init");
        let w = config.ae_width;
        let half = w / 2;
        let cz = config.latent_channels;

        let mut ae = ParamStore::new();
        let encoder = EncoderNet {
            convs: [
                Conv2d::new(&mut ae, "enc.0", 3, half, 3, 1, &mut rng),
                Conv2d::new(&mut ae, "enc.1", half, w, 3, 2, &mut rng),
                Conv2d::new(&mut ae, "enc.2", w, w, 3, 2, &mut rng),
                Conv2d::new(&mut ae, "enc.3", w, cz, 3, 1, &mut rng),
            ],
        };
        let decoder = DecoderNet {
            head: Conv2d::new(&mut ae, "dec.head", cz, w, 3, 1, &mut rng),
            mid: Conv2d::new(&mut ae, "dec.mid", w, w, 3, 1, &mut rng),
            up1: Conv2d::new(&mut ae, "dec.up1", w, half, 3, 1, &mut rng),
            up2: Conv2d::new(&mut ae, "dec.up2", half, half, 3, 1, &mut rng),
            out: Conv2d::new(&mut ae, "dec.out", half, 3, 3, 1, &mut rng),
        };

        let d = config.denoiser_width;
        let mut den = ParamStore::new();
        let time_in = Linear::new(&mut den, "time.0", config.time_embed_dim, d, &mut rng);
        let time_out = Linear::new(&mut den, "time.1", d, d, &mut rng);
        let cond = Embedding::new(&mut den, "cond", config.num_classes + 1, d, &mut rng);
        let conv_in = Conv2d::new(&mut den, "den.in", cz, d, 3, 1, &mut rng);
        let blocks = (0..config.denoiser_blocks)
            .map(|i| ResBlock {
                conv_a: Conv2d::new(&mut den, &format!("den.block{i}.a"), d, d, 3, 1, &mut rng),
                emb_proj: Linear::new(&mut den, &format!("den.block{i}.emb"), d, d, &mut rng),
                conv_b: Conv2d::new(&mut den, &format!("den.block{i}.b"), d, d, 3, 1, &mut rng),
            })
            .collect();
        let conv_out = Conv2d::zeroed(&mut den, "den.out", d, cz, 3);

        Ok(Self {
            config,
            schedule,
            ae,
            den,
            encoder,
            decoder,
            denoiser: DenoiserNet {
                time_in,
                time_out,
                cond,
                conv_in,
                blocks,
                conv_out,
            },
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn latent_scale(&self) -> f32 {
        self.latent_scale
    }

    pub fn autoencoder_params(&self) -> &ParamStore {
        &self.ae
    }

    pub fn denoiser_params(&self) -> &ParamStore {
        &self.den
    }

    pub fn null_condition(&self) -> usize {
        self.config.null_condition()
    }

    /// Map an optional class to a condition-table row.
    pub fn condition_id(&self, cond: Option<usize>) -> Result<usize> {
        match cond {
            None => Ok(self.null_condition()),
            Some(c) if c < self.config.num_classes => Ok(c),
            Some(c) => Err(Error::invalid(format!(
                "condition {c} outside 0..{}",
                self.config.num_classes
            ))),
        }
    }

    /// `𝓔(x)` for `x: [N, 3, H, W]`, returning `[N, C_z, H/4, W/4]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, ae: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.encoder.convs.iter().enumerate() {
            h = conv.forward(g, ae, h)?;
            if i + 1 < self.encoder.convs.len() {
                h = g.silu(h)?;
            }
        }
        Ok(g.scale(h, self.latent_scale as f64)?)
    }

    /// `𝓓(z)` for `z: [N, C_z, h, w]`, returning unclamped `[N, 3, 4h, 4w]`.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, ae: &Bound, z: Var) -> Result<Var> {
        let d = &self.decoder;
        let h = g.scale(z, 1.0 / self.latent_scale as f64)?;
        let h = d.head.forward(g, ae, h)?;
        let h = g.silu(h)?;
        let h = d.mid.forward(g, ae, h)?;
        let h = g.silu(h)?;
        let h = g.upsample2x(h)?;
        let h = d.up1.forward(g, ae, h)?;
        let h = g.silu(h)?;
        let h = g.upsample2x(h)?;
        let h = d.up2.forward(g, ae, h)?;
        let h = g.silu(h)?;
        Ok(d.out.forward(g, ae, h)?)
    }

    /// `ε_θ(z_t, t, c)` with one timestep and condition row per batch element.
    pub fn predict_noise<T: Real>(
        &self,
        g: &mut Graph<T>,
        den: &Bound,
        z: Var,
        t: &[usize],
        cond_ids: &[usize],
    ) -> Result<Var> {
        let n = g.shape(z)[0];
        if t.len() != n || cond_ids.len() != n {
            return Err(Error::invalid(format!(
                "batch of {n} latents needs {n} timesteps and conditions, got {} and {}",
                t.len(),
                cond_ids.len()
            )));
        }
        let net = &self.denoiser;
        let dim = self.config.time_embed_dim;
        let temb: Vec<T> = t
            .iter()
            .flat_map(|&ti| sinusoidal(ti, dim))
            .map(T::lit)
            .collect();
        let temb = g.constant(Tensor::new(vec![n, dim], temb)?);
        let temb = net.time_in.forward(g, den, temb)?;
        let temb = g.silu(temb)?;
        let temb = net.time_out.forward(g, den, temb)?;
        let cemb = net.cond.forward(g, den, cond_ids)?;
        let emb = g.add(temb, cemb)?;
        let emb = g.silu(emb)?;

        let mut h = net.conv_in.forward(g, den, z)?;
        for block in &net.blocks {
            let r = g.silu(h)?;
            let r = block.conv_a.forward(g, den, r)?;
            let e = block.emb_proj.forward(g, den, emb)?;
            let r = g.channel_add(r, e)?;
            let r = g.silu(r)?;
            let r = block.conv_b.forward(g, den, r)?;
            h = g.add(h, r)?;
        }
        let h = g.silu(h)?;
        Ok(net.conv_out.forward(g, den, h)?)
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.image_shape() {
            return Err(Error::invalid(format!(
                "expected images [N, {:?}], got {s:?}",
                self.config.image_shape()
            )));
        }
        Ok(())
    }

    /// Batched `𝓔` without gradient tracking.
    pub fn encode_images(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        map_chunks(x, |chunk| {
            let mut g = Graph::<f32>::new();
            let ae = self.ae.bind(&mut g, false);
            let xv = g.constant(chunk);
            let z = self.encode(&mut g, &ae, xv)?;
            Ok(g.value(z).clone())
        })
    }

    /// Batched `𝓓` without gradient tracking; output is not clamped.
    pub fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        map_chunks(z, |chunk| {
            let mut g = Graph::<f32>::new();
            let ae = self.ae.bind(&mut g, false);
            let zv = g.constant(chunk);
            let x = self.decode(&mut g, &ae, zv)?;
            Ok(g.value(x).clone())
        })
    }

    /// Batched `ε_θ` without gradient tracking.
    pub fn noise_prediction(&self, z: &Tensor, t: &[usize], cond_ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let den = self.den.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let e = self.predict_noise(&mut g, &den, zv, t, cond_ids)?;
        Ok(g.value(e).clone())
    }

    /// Rescale the encoder output so latents of `images` have unit standard deviation.
    pub fn calibrate_latent_scale(&mut self, images: &Tensor) -> Result<f32> {
        self.latent_scale = 1.0;
        let z = self.encode_images(images)?;
        let mean = z.mean();
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / z.len() as f32;
        let std = var.sqrt();
        if !(std.is_finite() && std > 1e-6) {
            return Err(Error::invalid(format!("latent std {std} cannot be normalised")));
        }
        self.latent_scale = 1.0 / std;
        Ok(self.latent_scale)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        ae: ParamStore,
        den: ParamStore,
        latent_scale: f32,
    ) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.ae.len() != ae.len() || model.den.len() != den.len() {
            return Err(Error::invalid("parameter count does not match architecture"));
        }
        for (name, t) in ae.iter() {
            model.ae.set(name, t.clone()).map_err(Error::InvalidArgument)?;
        }
        for (name, t) in den.iter() {
            model.den.set(name, t.clone()).map_err(Error::InvalidArgument)?;
        }
        model.latent_scale = latent_scale;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            ae_width: 8,
            denoiser_width: 8,
            denoiser_blocks: 1,
            time_embed_dim: 8,
            num_classes: 2,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_round_trip() {
        let m = ToyLdm::new(small(), 1).unwrap();
        let x = Tensor::full(&[2, 3, 16, 16], 0.5);
        let z = m.encode_images(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 4, 4]);
        assert_eq!(m.decode_latents(&z).unwrap().shape(), &[2, 3, 16, 16]);
        let e = m.noise_prediction(&z, &[3, 50], &[0, 2]).unwrap();
        assert_eq!(e.shape(), z.shape());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ToyLdm::new(ModelConfig { image_size: 30, ..small() }, 0).is_err());
        // ᾱ_T ≈ 0.9: x_T is nowhere near Gaussian
        assert!(ToyLdm::new(ModelConfig { timesteps: 10, beta_min: 0.01, beta_max: 0.01, ..small() }, 0).is_err());
        let m = ToyLdm::new(small(), 0).unwrap();
        assert!(m.condition_id(Some(2)).is_err());
        assert_eq!(m.condition_id(None).unwrap(), 2);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ToyLdm::new(small(), 5).unwrap();
        let b = ToyLdm::new(small(), 5).unwrap();
        assert_eq!(a.ae, b.ae);
        assert_eq!(a.den, b.den);
    }
}
