//! Similarity metrics between clean and immunized edits.

pub mod distribution;
pub mod features;
pub mod image;

use serde::{Deserialize, Serialize};

pub use distribution::{frechet_distance, precision_recall, COVARIANCE_SHRINKAGE, DEFAULT_NEIGHBORS};
pub use features::{cosine, embedding_cosine, Classifier, ClassifierConfig, FeatureExtractor};
pub use image::{gmsd, psnr, ssim, PSNR_CAP_DB};

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub gmsd: f64,
}

impl PairMetrics {
    pub fn between(a: &Tensor, b: &Tensor) -> Result<Self> {
        Ok(Self {
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
            gmsd: gmsd(a, b)?,
        })
    }
}

/// Mean and sample standard deviation (n − 1); std is 0 for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }

    /// Standard error of the mean.
    pub fn standard_error(&self) -> f64 {
        self.std / (self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAggregates {
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub gmsd: Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distributional {
    pub frechet_distance: f64,
    /// Bootstrap standard deviation of the Fréchet distance.
    pub frechet_std: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub cosine_mean: f64,
    pub cosine_median: f64,
    pub cosine_q1: f64,
    pub cosine_q3: f64,
    pub cosine_iqr: f64,
}

impl CosineSummary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no cosine values"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
        Ok(Self {
            cosine_mean: v.iter().sum::<f64>() / v.len() as f64,
            cosine_median: quantile(&v, 0.5),
            cosine_q1: q1,
            cosine_q3: q3,
            cosine_iqr: q3 - q1,
        })
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub neighbors: usize,
    /// Resamples for the Fréchet standard deviation; 0 disables it.
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            bootstrap: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub per_pair: Vec<PairMetrics>,
    pub aggregate: PairAggregates,
    pub distributional: Distributional,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<CosineSummary>,
}

/// Compare immunized edits with their same-seed clean counterparts.
///
/// `originals` is only used to check the pairing; metrics are computed
/// between the two edit sets.
pub fn evaluate_immunization(
    clean_edits: &[Tensor],
    immunized_edits: &[Tensor],
    originals: &[Tensor],
    fx: &FeatureExtractor,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let n = clean_edits.len();
    if immunized_edits.len() != n || originals.len() != n {
        return Err(Error::invalid(format!(
            "length mismatch: {n} clean, {} immunized, {} originals",
            immunized_edits.len(),
            originals.len()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two edit pairs"));
    }
    let per_pair = clean_edits
        .iter()
        .zip(immunized_edits)
        .map(|(a, b)| PairMetrics::between(a, b))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&PairMetrics) -> f64| Aggregate::of(&per_pair.iter().map(f).collect::<Vec<_>>());
    let aggregate = PairAggregates {
        psnr: col(|p| p.psnr),
        ssim: col(|p| p.ssim),
        gmsd: col(|p| p.gmsd),
    };

    let fa = fx.extract_list(clean_edits)?;
    let fb = fx.extract_list(immunized_edits)?;
    let frechet = frechet_distance(&fa, &fb)?;
    let (precision, recall) = precision_recall(&fb, &fa, opts.neighbors.min(n - 1))?;
    let frechet_std = bootstrap_frechet(&fa, &fb, opts.bootstrap, opts.seed)?;
    Ok(MetricsReport {
        count: n,
        per_pair,
        aggregate,
        distributional: Distributional {
            frechet_distance: frechet,
            frechet_std,
            precision,
            recall,
        },
        embedding: None,
    })
}

/// Sample std of the Fréchet distance over paired resamplings.
///
/// The sets are paired, so one index draw selects from both; independent
/// draws would add the spread between two unrelated resamples of each set.
pub fn bootstrap_frechet(fa: &[Vec<f64>], fb: &[Vec<f64>], rounds: usize, seed: u64) -> Result<f64> {
    if rounds < 2 {
        return Ok(0.0);
    }
    if fa.len() != fb.len() {
        return Err(Error::invalid("paired bootstrap needs equally long feature sets"));
    }
    let mut rng = Rng::stream(seed, "bootstrap");
    let values = (0..rounds)
        .map(|_| {
            let idx: Vec<usize> = (0..fa.len()).map(|_| rng.below(fa.len())).collect();
            let a: Vec<Vec<f64>> = idx.iter().map(|&i| fa[i].clone()).collect();
            let b: Vec<Vec<f64>> = idx.iter().map(|&i| fb[i].clone()).collect();
            frechet_distance(&a, &b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Aggregate::of(&values).std)
}
