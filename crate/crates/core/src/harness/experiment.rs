//! Experiment configuration and the end-to-end immunization run.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::dataset::{generate_dataset, DatasetSpec};
use super::io::{load_png, quantize, save_png};
use crate::diffusion::{edit, train, Checkpoint, EditRequest, EditSettings, Entry, ModelConfig, ToyLdm, TrainConfig};
use crate::immunize::{diffusion_attack, encoder_attack, random_noise_baseline, AttackConfig, ImmunizationResult, NoiseMode};
use crate::metrics::{Classifier, ClassifierConfig, EvalOptions};
use crate::rng::derive_indexed;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Tolerance of the post-hoc L∞ budget scan.
pub const BUDGET_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Edits of the unmodified image; compared against themselves.
    Clean,
    Random,
    Encoder,
    Diffusion,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Clean, Method::Random, Method::Encoder, Method::Diffusion];

    pub fn name(self) -> &'static str {
        match self {
            Method::Clean => "clean",
            Method::Random => "random",
            Method::Encoder => "encoder",
            Method::Diffusion => "diffusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub encoder: AttackConfig,
    pub diffusion: AttackConfig,
    /// L∞ radius of the uniform-noise baseline.
    pub random_epsilon: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        let base = AttackConfig::default();
        Self {
            random_epsilon: base.epsilon,
            encoder: base.clone(),
            // the edit under attack reuses the pair's seed, so the attack can target it
            diffusion: AttackConfig {
                noise_mode: NoiseMode::Fixed,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Psnr,
    Ssim,
    Gmsd,
    FrechetDistance,
    Precision,
    Recall,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Psnr,
        MetricKind::Ssim,
        MetricKind::Gmsd,
        MetricKind::FrechetDistance,
        MetricKind::Precision,
        MetricKind::Recall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Psnr => "psnr",
            MetricKind::Ssim => "ssim",
            MetricKind::Gmsd => "gmsd",
            MetricKind::FrechetDistance => "frechet_distance",
            MetricKind::Precision => "precision",
            MetricKind::Recall => "recall",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSpec {
    pub num_images: usize,
    /// Edit conditions per image; image `i` gets `(label + j) % K` for `j < n`.
    pub conditions_per_image: usize,
    pub metrics: Vec<MetricKind>,
    pub options: EvalOptions,
    /// Directory of PNGs to immunize instead of the synthetic evaluation split.
    pub image_dir: Option<PathBuf>,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            num_images: 15,
            conditions_per_image: 4,
            metrics: MetricKind::ALL.to_vec(),
            options: EvalOptions::default(),
            image_dir: None,
        }
    }
}

impl EvaluationSpec {
    pub fn num_pairs(&self) -> usize {
        self.num_images * self.conditions_per_image
    }
}

/// Everything a run depends on. Serialized verbatim into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    /// Load this checkpoint instead of training, when it exists.
    pub checkpoint: Option<PathBuf>,
    pub edit: EditSettings,
    pub attack: AttackSpec,
    pub evaluation: EvaluationSpec,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            checkpoint: None,
            edit: EditSettings {
                strength: 0.6,
                eta: 0.0,
                ..Default::default()
            },
            attack: AttackSpec::default(),
            evaluation: EvaluationSpec::default(),
            output_dir: PathBuf::from("run"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.model.validate()?;
        self.edit.validate(schedule.steps())?;
        self.attack.encoder.validate()?;
        self.attack.diffusion.validate()?;
        if !(self.attack.random_epsilon > 0.0 && self.attack.random_epsilon <= 1.0) {
            return Err(Error::invalid("attack.random_epsilon outside (0, 1]"));
        }
        if self.dataset.num_classes != self.model.num_classes {
            return Err(Error::invalid(format!(
                "dataset has {} classes but the model expects {}",
                self.dataset.num_classes, self.model.num_classes
            )));
        }
        if self.dataset.image_size != self.model.image_size {
            return Err(Error::invalid("dataset and model image sizes differ"));
        }
        let ev = &self.evaluation;
        if ev.num_images == 0 || ev.conditions_per_image == 0 || ev.conditions_per_image > self.model.num_classes {
            return Err(Error::invalid(format!(
                "evaluation needs images > 0 and 1..={} conditions per image",
                self.model.num_classes
            )));
        }
        if ev.num_pairs() < 2 {
            return Err(Error::invalid("evaluation needs at least two edit pairs"));
        }
        if ev.image_dir.is_none() && ev.num_images > self.dataset.num_classes * self.dataset.eval_per_class {
            return Err(Error::invalid("more evaluation images requested than the split holds"));
        }
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One clean/immunized edit pair family: an image, a condition and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image: usize,
    pub label: usize,
    pub condition: usize,
    pub seed: u64,
}

impl PairRecord {
    pub fn stem(&self) -> String {
        format!("img{:02}_c{}", self.image, self.condition)
    }
}

/// Index of persisted artifacts, rewritten after every image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pairs: Vec<PairRecord>,
    pub complete: bool,
}

/// Machine-readable record of a failed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub image: Option<usize>,
    pub message: String,
}

/// Fixed file layout inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }
    pub fn training(&self) -> PathBuf {
        self.root.join("training.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn failure(&self) -> PathBuf {
        self.root.join("failure.json")
    }
    pub fn original(&self, image: usize) -> PathBuf {
        self.root.join("images").join(format!("img{image:02}_original.png"))
    }
    /// Immunized input; the diffusion attack is per pair, the others per image.
    pub fn immunized(&self, pair: &PairRecord, method: Method) -> PathBuf {
        let name = match method {
            Method::Diffusion => format!("{}_diffusion.png", pair.stem()),
            m => format!("img{:02}_{}.png", pair.image, m.name()),
        };
        self.root.join("images").join(name)
    }
    pub fn edited(&self, pair: &PairRecord, method: Method) -> PathBuf {
        self.root.join("edits").join(format!("{}_{}.png", pair.stem(), method.name()))
    }
    pub fn deltas(&self, image: usize) -> PathBuf {
        self.root.join("deltas").join(format!("img{image:02}.ckpt"))
    }
    pub fn traces(&self, image: usize) -> PathBuf {
        self.root.join("traces").join(format!("img{image:02}.json"))
    }
    pub fn grid(&self, pair: &PairRecord) -> PathBuf {
        self.root.join("grids").join(format!("{}.png", pair.stem()))
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn cosine_json(&self) -> PathBuf {
        self.root.join("cosine.json")
    }

    fn create(&self) -> Result<()> {
        for sub in ["images", "edits", "deltas", "traces", "grids"] {
            let dir = self.root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

/// Round to 8 bits without leaving the ε-ball around the (8-bit) original.
pub fn quantize_within(original: &Tensor, immunized: &Tensor, epsilon: f64) -> Result<Tensor> {
    let q = quantize(immunized);
    let step = 1.0 / 255.0;
    let limit = epsilon + BUDGET_TOLERANCE;
    Ok(q.zip_map(original, |v, o| {
        let d = (v - o) as f64;
        if d.abs() <= limit {
            v
        } else {
            // back one level toward the original
            (v - step * d.signum() as f32).clamp(0.0, 1.0)
        }
    })?)
}

/// Trained model and classifier, from checkpoints when available.
pub fn prepare_models(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<(ToyLdm, Classifier)> {
    let dataset = generate_dataset(&cfg.dataset)?;
    let model = match cfg.checkpoint.as_deref().filter(|p| p.exists()) {
        Some(path) => {
            info!("loading model checkpoint {}", path.display());
            let model = ToyLdm::load(path)?;
            if model.config() != &cfg.model {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: "model configuration differs from the experiment's".into(),
                });
            }
            model
        }
        None => {
            let mut model = ToyLdm::new(cfg.model.clone(), derive_indexed(cfg.seed, "model-init", 0))?;
            let report = train(
                &mut model,
                &dataset.train.images,
                &dataset.train.labels,
                &cfg.train,
                derive_indexed(cfg.seed, "train", 0),
            )?;
            write_json(&layout.training(), &report)?;
            model
        }
    };
    model.save(&layout.model())?;
    let (classifier, _) = Classifier::train(
        &dataset.train.images,
        &dataset.train.labels,
        cfg.model.num_classes,
        &cfg.classifier,
        derive_indexed(cfg.seed, "classifier", 0),
    )?;
    classifier.save(&layout.classifier())?;
    Ok((model, classifier))
}

/// Images to immunize and their labels.
fn evaluation_images(cfg: &ExperimentConfig, classifier: &Classifier) -> Result<Vec<(Tensor, usize)>> {
    let n = cfg.evaluation.num_images;
    match &cfg.evaluation.image_dir {
        None => {
            let data = generate_dataset(&cfg.dataset)?;
            (0..n).map(|i| Ok((data.eval.image(i)?, data.eval.labels[i]))).collect()
        }
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            if paths.len() < n {
                return Err(Error::invalid(format!(
                    "{} holds {} PNGs, {n} requested",
                    dir.display(),
                    paths.len()
                )));
            }
            let want = cfg.model.image_shape();
            paths[..n]
                .iter()
                .map(|p| {
                    let img = load_png(p)?;
                    if img.shape() != want {
                        return Err(Error::Image {
                            path: p.clone(),
                            reason: format!("expected {:?}, got {:?}", want, img.shape()),
                        });
                    }
                    // unlabeled input: take the classifier's guess
                    let label = classifier.predict(&Tensor::stack(std::slice::from_ref(&img))?)?[0];
                    Ok((img, label))
                })
                .collect()
        }
    }
}

#[derive(Serialize)]
struct TraceFile<'a> {
    encoder: &'a ImmunizationResult,
    diffusion: Vec<(usize, &'a ImmunizationResult)>,
}

fn check_budget(original: &Tensor, immunized: &Tensor, epsilon: f64, what: &str) -> Result<()> {
    let dev = original.max_abs_diff(immunized) as f64;
    if dev > epsilon + BUDGET_TOLERANCE {
        return Err(Error::invalid(format!("{what}: L∞ deviation {dev} exceeds ε = {epsilon}")));
    }
    Ok(())
}

/// Immunize and edit one image under every method; persist all artifacts.
fn run_image(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    model: &ToyLdm,
    index: usize,
    image: &Tensor,
    label: usize,
) -> Result<Vec<PairRecord>> {
    let k = cfg.model.num_classes;
    let seed = derive_indexed(cfg.seed, "image", index as u64);
    save_png(image, &layout.original(index))?;
    let pairs: Vec<PairRecord> = (0..cfg.evaluation.conditions_per_image)
        .map(|j| PairRecord {
            image: index,
            label,
            condition: (label + j) % k,
            seed,
        })
        .collect();

    let encoder = encoder_attack(model, image, None, &cfg.attack.encoder)?;
    let random = random_noise_baseline(image, cfg.attack.random_epsilon, seed)?;
    let mut deltas = Checkpoint::default();
    deltas.push_tensor("encoder", encoder.delta.clone());
    deltas.push_tensor("random", random.delta.clone());
    let per_image = [
        (Method::Encoder, &encoder, cfg.attack.encoder.epsilon),
        (Method::Random, &random, cfg.attack.random_epsilon),
    ];
    for (method, result, eps) in per_image {
        let q = quantize_within(image, &result.immunized, eps)?;
        check_budget(image, &q, eps, method.name())?;
        save_png(&q, &layout.immunized(&pairs[0], method))?;
    }

    let mut diffusion_results = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let request = |x: &Tensor| EditRequest::new(x.clone(), Some(pair.condition), cfg.edit.clone(), seed);
        let diffusion = diffusion_attack(model, image, None, &request(image), &cfg.attack.diffusion)?;
        let eps = cfg.attack.diffusion.epsilon;
        let q = quantize_within(image, &diffusion.immunized, eps)?;
        check_budget(image, &q, eps, "diffusion")?;
        save_png(&q, &layout.immunized(pair, Method::Diffusion))?;
        deltas.push_tensor(format!("diffusion/c{}", pair.condition), diffusion.delta.clone());
        for method in Method::ALL {
            // edit exactly what was persisted
            let input = match method {
                Method::Clean => image.clone(),
                m => load_png(&layout.immunized(pair, m))?,
            };
            save_png(&edit(model, &request(&input))?, &layout.edited(pair, method))?;
        }
        diffusion_results.push((pair.condition, diffusion));
    }
    deltas.save(&layout.deltas(index))?;
    write_json(
        &layout.traces(index),
        &TraceFile {
            encoder: &encoder,
            diffusion: diffusion_results.iter().map(|(c, r)| (*c, r)).collect(),
        },
    )?;
    Ok(pairs)
}

fn record_failure(layout: &RunLayout, stage: &str, image: Option<usize>, err: &Error) {
    let record = FailureRecord {
        stage: stage.to_string(),
        image,
        message: err.to_string(),
    };
    if let Err(e) = write_json(&layout.failure(), &record) {
        warn!("could not write failure record: {e}");
    }
}

/// Train (or load), immunize, edit, and emit the report. Returns the run directory.
///
/// On failure the artifacts produced so far stay on disk next to
/// `failure.json`, and the error is returned.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.output_dir);
    layout.create()?;
    // a stale record from an earlier attempt would misdescribe this run
    let _ = fs::remove_file(layout.failure());
    cfg.save(&layout.config())?;

    let (model, classifier) = prepare_models(cfg, &layout).inspect_err(|e| record_failure(&layout, "train", None, e))?;
    let images = evaluation_images(cfg, &classifier).inspect_err(|e| record_failure(&layout, "dataset", None, e))?;

    let mut manifest = Manifest::default();
    for (i, (image, label)) in images.iter().enumerate() {
        info!("image {}/{}", i + 1, images.len());
        let pairs =
            run_image(cfg, &layout, &model, i, image, *label).inspect_err(|e| record_failure(&layout, "immunize", Some(i), e))?;
        manifest.pairs.extend(pairs);
        write_json(&layout.manifest(), &manifest)?;
    }
    manifest.complete = true;
    write_json(&layout.manifest(), &manifest)?;
    super::report::emit_report(&layout.root).inspect_err(|e| record_failure(&layout, "report", None, e))?;
    Ok(layout.root)
}

/// Largest L∞ deviation of any persisted immunized image from its original.
pub fn audit_budget(run_dir: &Path) -> Result<Vec<(PathBuf, f64)>> {
    let layout = RunLayout::new(run_dir);
    let manifest: Manifest = read_json(&layout.manifest())?;
    let mut out = Vec::new();
    for pair in &manifest.pairs {
        let original = load_png(&layout.original(pair.image))?;
        for method in [Method::Random, Method::Encoder, Method::Diffusion] {
            let path = layout.immunized(pair, method);
            let dev = original.max_abs_diff(&load_png(&path)?) as f64;
            out.push((path, dev));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.dedup_by(|a, b| a.0 == b.0);
    Ok(out)
}

/// Deltas stored for one image, by name.
pub fn load_deltas(run_dir: &Path, image: usize) -> Result<Vec<(String, Tensor)>> {
    let ck = Checkpoint::load(&RunLayout::new(run_dir).deltas(image))?;
    Ok(ck
        .entries
        .into_iter()
        .filter_map(|(name, e)| match e {
            Entry::Tensor(t) => Some((name, t)),
            Entry::Text(_) => None,
        })
        .collect())
}
