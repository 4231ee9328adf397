//! Labelled renders of coloured geometric shapes.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "diamond"];
pub const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.85, 0.1]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    /// Class `k` is shape `k % 4` in colour `(k + k / 4) % 4`.
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Of `samples_per_class`, how many go to the evaluation split.
    pub eval_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 250,
            eval_per_class: 25,
            image_size: 32,
            seed: 0,
        }
    }
}

/// Images `[N, 3, S, S]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        Ok(self.images.select(&[i])?.unstack().remove(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: LabeledImages,
    pub eval: LabeledImages,
}

pub fn class_name(k: usize) -> String {
    format!("{} {}", COLORS[(k + k / 4) % 4].0, SHAPES[k % 4])
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        // upward triangle with apex at -r and base at +0.7r
        2 => dy >= -r && dy <= 0.7 * r && dx.abs() <= (dy + r) / 1.7 * 0.95,
        _ => dx.abs() + dy.abs() <= r,
    }
}

/// Render one image of class `k`; values are multiples of 1/255.
fn render(k: usize, size: usize, rng: &mut Rng) -> Tensor {
    let shape = k % 4;
    let color = COLORS[(k + k / 4) % 4].1;
    let s = size as f32;
    let r = s * rng.uniform(0.22, 0.34);
    let cx = s * 0.5 + rng.uniform(-0.15, 0.15) * s;
    let cy = s * 0.5 + rng.uniform(-0.15, 0.15) * s;
    let bg = rng.uniform(0.05, 0.35);
    let tint: Vec<f32> = (0..3).map(|_| rng.uniform(-0.06, 0.06)).collect();
    let fg: Vec<f32> = (0..3).map(|c| (color[c] + tint[c]).clamp(0.0, 1.0)).collect();
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampling for soft edges
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if inside(shape, x as f32 + ox - cx, y as f32 + oy - cy, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let v = cover * fg[c] + (1.0 - cover) * bg;
                data[c * plane + y * size + x] = (v * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("sized buffer")
}

/// Deterministic, class-balanced dataset; labels cycle `0, 1, …, K−1`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    if spec.num_classes < 2 || spec.num_classes > SHAPES.len() * COLORS.len() {
        return Err(Error::invalid(format!(
            "num_classes {} outside 2..={}",
            spec.num_classes,
            SHAPES.len() * COLORS.len()
        )));
    }
    if spec.image_size < 8 {
        return Err(Error::invalid(format!(
            "image_size {} is too small to draw shapes",
            spec.image_size
        )));
    }
    if spec.samples_per_class == 0 || spec.eval_per_class > spec.samples_per_class {
        return Err(Error::invalid("eval_per_class must not exceed samples_per_class"));
    }
    let root = Rng::stream(spec.seed, "dataset");
    let total = spec.num_classes * spec.samples_per_class;
    let eval_count = spec.num_classes * spec.eval_per_class;
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    let (mut train_labels, mut eval_labels) = (Vec::new(), Vec::new());
    for i in 0..total {
        let k = i % spec.num_classes;
        let img = render(k, spec.image_size, &mut root.child_indexed("image", i as u64));
        // the first eval_per_class rounds of classes form the evaluation split
        if i < eval_count {
            eval.push(img);
            eval_labels.push(k);
        } else {
            train.push(img);
            train_labels.push(k);
        }
    }
    let pack = |imgs: Vec<Tensor>, labels: Vec<usize>| -> Result<LabeledImages> {
        let images = if imgs.is_empty() {
            Tensor::zeros(&[0, 3, spec.image_size, spec.image_size])
        } else {
            Tensor::stack(&imgs)?
        };
        Ok(LabeledImages { images, labels })
    };
    Ok(SyntheticDataset {
        train: pack(train, train_labels)?,
        eval: pack(eval, eval_labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            samples_per_class: 30,
            eval_per_class: 5,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_balance() {
        let d = generate_dataset(&DatasetSpec::default()).unwrap();
        assert_eq!(d.train.len() + d.eval.len(), 1000);
        for k in 0..4 {
            let n = d.train.labels.iter().chain(&d.eval.labels).filter(|&&l| l == k).count();
            assert_eq!(n, 250);
        }
        assert_eq!(d.eval.images.shape(), &[100, 3, 32, 32]);
    }

    #[test]
    fn deterministic_and_quantised() {
        let a = generate_dataset(&small()).unwrap();
        assert_eq!(a, generate_dataset(&small()).unwrap());
        let other = generate_dataset(&DatasetSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train.images, other.train.images);
        for &v in a.train.images.data() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn rejects_impossible_specs() {
        assert!(generate_dataset(&DatasetSpec { num_classes: 1, ..small() }).is_err());
        assert!(generate_dataset(&DatasetSpec { num_classes: 17, ..small() }).is_err());
        assert!(generate_dataset(&DatasetSpec { image_size: 4, ..small() }).is_err());
        assert!(generate_dataset(&DatasetSpec { eval_per_class: 31, ..small() }).is_err());
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        let d = generate_dataset(&small()).unwrap();
        let dim = 3 * 32 * 32;
        let mut centroids = vec![vec![0.0f64; dim]; 4];
        let mut counts = [0usize; 4];
        for (i, &l) in d.train.labels.iter().enumerate() {
            let row = &d.train.images.data()[i * dim..(i + 1) * dim];
            for (c, v) in centroids[l].iter_mut().zip(row) {
                *c += *v as f64;
            }
            counts[l] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let correct = d
            .eval
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| {
                let row = &d.eval.images.data()[i * dim..(i + 1) * dim];
                let dist = |c: &Vec<f64>| c.iter().zip(row).map(|(a, b)| (a - *b as f64).powi(2)).sum::<f64>();
                let best = (0..4).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best == l
            })
            .count();
        assert!(correct as f64 / d.eval.len() as f64 > 0.6);
    }
}
