//! Frozen feature extractors standing in for pretrained perception networks.

use log::info;

use crate::diffusion::{Checkpoint, Entry, ToyLdm};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Adam, AdamConfig, Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Latent avg-pool factor for [`FeatureExtractor::Encoder`].
pub const ENCODER_POOL: usize = 4;

/// Small supervised CNN; its pooled penultimate activations are the features.
#[derive(Debug, Clone)]
pub struct Classifier {
    params: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
    image_size: usize,
    num_classes: usize,
    /// Mean training feature per class.
    prototypes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 3e-3,
            width: 32,
        }
    }
}

impl Classifier {
    fn build(image_size: usize, num_classes: usize, width: usize, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "classifier-init");
        let mut params = ParamStore::new();
        let conv1 = Conv2d::new(&mut params, "cls.conv1", 3, width / 2, 3, 2, &mut rng);
        let conv2 = Conv2d::new(&mut params, "cls.conv2", width / 2, width, 3, 2, &mut rng);
        let head = Linear::new(&mut params, "cls.head", width, num_classes, &mut rng);
        Self {
            params,
            conv1,
            conv2,
            head,
            image_size,
            num_classes,
            prototypes: Vec::new(),
        }
    }

    fn width(&self) -> usize {
        self.params.iter().find(|(n, _)| *n == "cls.conv2.bias").map_or(0, |(_, t)| t.len())
    }

    fn embed<T: Real>(&self, g: &mut Graph<T>, p: &crate::nn::Bound, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let h = self.conv1.forward(g, p, x)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = g.avg_pool(h, self.image_size / 4)?;
        Ok(g.reshape(h, &[n, self.width()])?)
    }

    /// Train on `images: [N, 3, S, S]` and record class prototypes.
    pub fn train(
        images: &Tensor,
        labels: &[usize],
        num_classes: usize,
        cfg: &ClassifierConfig,
        seed: u64,
    ) -> Result<(Self, Vec<f32>)> {
        let &[n, 3, s, s2] = images.shape() else {
            return Err(Error::invalid(format!("expected [N, 3, S, S], got {:?}", images.shape())));
        };
        if s != s2 || s % 4 != 0 || n != labels.len() || n == 0 {
            return Err(Error::invalid("classifier needs square images with S % 4 == 0 and one label each"));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::invalid("label outside the class range"));
        }
        let mut model = Self::build(s, num_classes, cfg.width, seed);
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            model.params.tensors(),
        );
        let mut rng = Rng::stream(seed, "classifier-batches");
        let mut losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let mut total = 0.0f64;
            for idx in order.chunks(cfg.batch_size.max(1)) {
                let x = images.select(idx)?;
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let mut g = Graph::<f32>::new();
                let p = model.params.bind(&mut g, true);
                let xv = g.constant(x);
                let f = model.embed(&mut g, &p, xv)?;
                let logits = model.head.forward(&mut g, &p, f)?;
                let loss = g.cross_entropy(logits, &y)?;
                total += g.value(loss).item() as f64 * idx.len() as f64;
                g.backward(loss)?;
                let grads = model.params.grads(&g, &p);
                adam.step(model.params.tensors_mut().iter_mut(), &grads)?;
            }
            let mean = (total / n as f64) as f32;
            info!("classifier epoch {}/{}: cross-entropy {mean:.4}", epoch + 1, cfg.epochs);
            losses.push(mean);
        }
        model.prototypes = model.class_means(images, labels)?;
        Ok((model, losses))
    }

    fn class_means(&self, images: &Tensor, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
        let feats = self.features(images)?;
        let mut sums = vec![vec![0.0; self.width()]; self.num_classes];
        let mut counts = vec![0usize; self.num_classes];
        for (f, &l) in feats.iter().zip(labels) {
            sums[l].iter_mut().zip(f).for_each(|(s, v)| *s += v);
            counts[l] += 1;
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            if c == 0 {
                return Err(Error::invalid("every class needs at least one training image"));
            }
            // rounded to f32 so checkpoints reproduce them exactly
            s.iter_mut().for_each(|v| *v = (*v / c as f64) as f32 as f64);
        }
        Ok(sums)
    }

    fn forward_batch(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(images.clone());
        let f = self.embed(&mut g, &p, xv)?;
        let logits = self.head.forward(&mut g, &p, f)?;
        Ok((g.value(f).clone(), g.value(logits).clone()))
    }

    /// Penultimate features, one vector per image.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let w = self.width();
        let mut out = Vec::new();
        for chunk in chunks(images)? {
            let (f, _) = self.forward_batch(&chunk)?;
            out.extend(f.data().chunks(w).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for chunk in chunks(images)? {
            let (_, logits) = self.forward_batch(&chunk)?;
            out.extend(logits.data().chunks(self.num_classes).map(|r| {
                (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(0)
            }));
        }
        Ok(out)
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        if pred.len() != labels.len() || pred.is_empty() {
            return Err(Error::invalid("one label per image required"));
        }
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn prototype(&self, class: usize) -> Result<&[f64]> {
        self.prototypes
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("unknown condition {class}")))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        let meta = serde_json::json!({
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "width": self.width(),
        });
        ck.push_text("__classifier__", meta.to_string());
        for (name, t) in self.params.iter() {
            ck.push_tensor(name, t.clone());
        }
        for (k, p) in self.prototypes.iter().enumerate() {
            ck.push_tensor(
                format!("prototype/{k}"),
                Tensor::new(vec![p.len()], p.iter().map(|&v| v as f32).collect())?,
            );
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let Some(Entry::Text(meta)) = ck.get("__classifier__") else {
            return Err(Error::invalid("not a classifier checkpoint"));
        };
        let meta: serde_json::Value = serde_json::from_str(meta)?;
        let field = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::invalid(format!("classifier checkpoint lacks {k}")))
        };
        let mut model = Self::build(field("image_size")?, field("num_classes")?, field("width")?, 0);
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let Some(Entry::Tensor(t)) = ck.get(&name) else {
                return Err(Error::invalid(format!("classifier checkpoint lacks {name}")));
            };
            model.params.set(&name, t.clone()).map_err(Error::InvalidArgument)?;
        }
        model.prototypes = (0..model.num_classes)
            .map(|k| match ck.get(&format!("prototype/{k}")) {
                Some(Entry::Tensor(t)) => Ok(t.data().iter().map(|&v| v as f64).collect()),
                _ => Err(Error::invalid(format!("classifier checkpoint lacks prototype {k}"))),
            })
            .collect::<Result<_>>()?;
        Ok(model)
    }
}

fn chunks(images: &Tensor) -> Result<Vec<Tensor>> {
    let n = images.shape().first().copied().unwrap_or(0);
    (0..n)
        .step_by(64)
        .map(|s| Ok(images.select(&(s..(s + 64).min(n)).collect::<Vec<_>>())?))
        .collect()
}

/// Image → feature vector, deterministic.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum FeatureExtractor {
    /// The frozen diffusion encoder, latent average-pooled by [`ENCODER_POOL`].
    Encoder(ToyLdm),
    Classifier(Classifier),
}

impl FeatureExtractor {
    /// Features of `images: [N, 3, H, W]`.
    pub fn extract(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Classifier(c) => c.features(images),
            Self::Encoder(model) => {
                let z = model.encode_images(images)?;
                let &[n, c, h, w] = z.shape() else {
                    return Err(Error::invalid("encoder output is not [N, C, h, w]"));
                };
                let p = ENCODER_POOL.min(h).min(w);
                let (ho, wo) = (h / p, w / p);
                let d = z.data();
                Ok((0..n)
                    .map(|i| {
                        let mut f = Vec::with_capacity(c * ho * wo);
                        for ch in 0..c {
                            for by in 0..ho {
                                for bx in 0..wo {
                                    let mut s = 0.0f64;
                                    for y in by * p..(by + 1) * p {
                                        for x in bx * p..(bx + 1) * p {
                                            s += d[((i * c + ch) * h + y) * w + x] as f64;
                                        }
                                    }
                                    f.push(s / (p * p) as f64);
                                }
                            }
                        }
                        f
                    })
                    .collect())
            }
        }
    }

    /// Features of a list of `[3, H, W]` images.
    pub fn extract_list(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        self.extract(&Tensor::stack(images)?)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine between each image's classifier feature and its condition's prototype.
pub fn embedding_cosine(images: &[Tensor], conditions: &[usize], classifier: &Classifier) -> Result<Vec<f64>> {
    if images.len() != conditions.len() {
        return Err(Error::invalid(format!(
            "{} images but {} conditions",
            images.len(),
            conditions.len()
        )));
    }
    let protos = conditions
        .iter()
        .map(|&c| classifier.prototype(c))
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let feats = classifier.features(&Tensor::stack(images)?)?;
    Ok(feats.iter().zip(protos).map(|(f, p)| cosine(f, p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-12);
    }

    fn toy_data() -> (Tensor, Vec<usize>) {
        // class 0 bright left half, class 1 bright right half
        let n = 32;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut rng = Rng::new(3);
        let images = Tensor::from_fn(&[n, 3, 8, 8], |i| {
            let (img, x) = (i / 192, i % 8);
            let bright = (x < 4) == (labels[img] == 0);
            if bright { 0.8 } else { 0.2 }
        });
        let noise = rng.uniform_tensor(images.shape(), -0.05, 0.05);
        (images.zip_map(&noise, |a, b| a + b).unwrap(), labels)
    }

    #[test]
    fn classifier_learns_and_round_trips() {
        let (x, y) = toy_data();
        let cfg = ClassifierConfig {
            epochs: 30,
            width: 8,
            ..Default::default()
        };
        let (clf, losses) = Classifier::train(&x, &y, 2, &cfg, 1).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert_eq!(clf.accuracy(&x, &y).unwrap(), 1.0);
        let back = Classifier::from_checkpoint(&Checkpoint::from_bytes(&clf.to_checkpoint().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.features(&x).unwrap(), clf.features(&x).unwrap());
        assert_eq!(back.prototypes, clf.prototypes);
        let cos = embedding_cosine(&x.unstack(), &y, &clf).unwrap();
        assert!(cos.iter().all(|c| (-1.0..=1.0).contains(c)));
        assert!(embedding_cosine(&x.unstack()[..1], &[2], &clf).is_err());
    }
}
