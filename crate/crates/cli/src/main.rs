//! `immunize`: train the toy editor, edit images, immunize them and report.

mod overrides;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use immunize_core::diffusion::{edit, sample_batch, train, EditRequest, EditSettings, ToyLdm};
use immunize_core::harness::io::{grid, load_png, save_png};
use immunize_core::harness::{emit_report, generate_dataset, run_pipeline, ExperimentConfig};
use immunize_core::immunize::{
    diffusion_attack, encoder_attack, random_noise_baseline, AttackConfig, ImmunizationResult, NoiseMode,
};
use immunize_core::metrics::{evaluate_immunization, EvalOptions, FeatureExtractor};
use immunize_core::Tensor;

use overrides::{parse_assignment, parse_fraction};

#[derive(Parser, Debug)]
#[command(name = "immunize", version, about = "Toy latent-diffusion editing and adversarial immunization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the autoencoder and denoiser on the synthetic dataset.
    Train(TrainArgs),
    /// Draw class-conditional samples into a PNG grid.
    Sample(SampleArgs),
    /// Edit an image toward a class, optionally inside a mask.
    Edit(EditArgs),
    /// Add an L∞-bounded perturbation that disrupts later edits.
    Immunize(ImmunizeArgs),
    /// Compare two directories of edits pairwise.
    Evaluate(EvaluateArgs),
    /// Recompute the report files of a run directory.
    Report(ReportArgs),
    /// Run the full experiment: train, immunize, edit, evaluate, report.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment configuration (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set edit.strength=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let mut doc = serde_json::to_value(&base)?;
        for (k, v) in &self.set {
            overrides::apply(&mut doc, k, v).with_context(|| format!("--set {k}={v}"))?;
        }
        serde_json::from_value(doc).context("applying overrides")
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Class to sample; omit for unconditional samples.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 3.0)]
    guidance_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct EditFlags {
    /// Target class of the edit; omit for the unconditional embedding.
    #[arg(long)]
    condition: Option<usize>,
    #[arg(long, default_value_t = EditSettings::default().strength)]
    strength: f64,
    #[arg(long, default_value_t = EditSettings::default().guidance_scale)]
    guidance_scale: f64,
    #[arg(long, default_value_t = EditSettings::default().num_inference_steps)]
    num_inference_steps: usize,
    #[arg(long, default_value_t = EditSettings::default().eta)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// PNG mask; pixels brighter than mid-gray are editable. Turns the edit into inpainting.
    #[arg(long)]
    mask: Option<PathBuf>,
}

impl EditFlags {
    fn request(&self, image: Tensor) -> Result<EditRequest> {
        let settings = EditSettings {
            strength: self.strength,
            guidance_scale: self.guidance_scale,
            num_inference_steps: self.num_inference_steps,
            eta: self.eta,
        };
        let mut req = EditRequest::new(image, self.condition, settings, self.seed);
        if let Some(path) = &self.mask {
            let mask = read_mask(path, req.image.shape())?;
            req = req.with_mask(mask);
        }
        Ok(req)
    }
}

fn read_mask(path: &Path, image_shape: &[usize]) -> Result<Vec<bool>> {
    let m = load_png(path)?;
    if m.shape()[1..] != image_shape[1..] {
        bail!("mask {} is {:?}, image is {:?}", path.display(), m.shape(), image_shape);
    }
    let plane = m.shape()[1] * m.shape()[2];
    let d = m.data();
    Ok((0..plane).map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0 > 0.5).collect())
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    edit: EditFlags,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum AttackKind {
    Encoder,
    Diffusion,
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum NoiseModeArg {
    Resample,
    Fixed,
}

#[derive(Args, Debug)]
struct ImmunizeArgs {
    #[arg(long, value_enum)]
    attack: AttackKind,
    /// Required by the encoder and diffusion attacks.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Immunized image (PNG).
    #[arg(long)]
    out: PathBuf,
    /// Target image; mid-gray when omitted.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, value_parser = parse_fraction, default_value = "16/255")]
    epsilon: f64,
    #[arg(long, value_parser = parse_fraction, default_value = "2/255")]
    step_size: f64,
    #[arg(long, default_value_t = AttackConfig::default().num_steps)]
    num_steps: usize,
    #[arg(long, default_value_t = AttackConfig::default().truncation_depth)]
    truncation_depth: usize,
    #[arg(long, default_value_t = AttackConfig::default().sampler_steps)]
    sampler_steps: usize,
    #[arg(long, value_enum, default_value_t = NoiseModeArg::Resample)]
    noise_mode: NoiseModeArg,
    /// Loss trace, delta statistics and configuration as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// The edit the diffusion attack differentiates through.
    #[command(flatten)]
    edit: EditFlags,
}

impl ImmunizeArgs {
    fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            step_size: self.step_size,
            num_steps: self.num_steps,
            truncation_depth: self.truncation_depth,
            sampler_steps: self.sampler_steps,
            noise_mode: match self.noise_mode {
                NoiseModeArg::Resample => NoiseMode::Resample,
                NoiseModeArg::Fixed => NoiseMode::Fixed,
            },
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Model whose encoder supplies the Fréchet / precision-recall features.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of clean edits.
    #[arg(long)]
    clean: PathBuf,
    /// Directory of immunized edits with the same file names.
    #[arg(long)]
    immunized: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = EvalOptions::default().neighbors)]
    neighbors: usize,
    #[arg(long, default_value_t = EvalOptions::default().bootstrap)]
    bootstrap: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directory written by `pipeline`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, required = true)]
    seed: u64,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn load_model(path: &Path) -> Result<ToyLdm> {
    ToyLdm::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = generate_dataset(&cfg.dataset)?;
    let mut model = ToyLdm::new(cfg.model.clone(), cfg.seed)?;
    let report = train(&mut model, &data.train.images, &data.train.labels, &cfg.train, cfg.seed)?;
    model.save(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let conds = vec![a.class; a.count];
    let batch = sample_batch(&model, &conds, a.steps, a.guidance_scale, a.eta, a.seed)?;
    save_png(&grid(&batch.unstack(), a.count.clamp(1, 8))?, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_edit(a: EditArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let req = a.edit.request(load_png(&a.input)?)?;
    if req.mask.as_ref().is_some_and(|m| m.iter().all(|&b| !b)) {
        warn!("mask selects no pixels; the output equals the input");
    }
    save_png(&edit(&model, &req)?, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_immunize(a: ImmunizeArgs) -> Result<()> {
    let cfg = a.attack_config();
    let image = load_png(&a.input)?;
    let target = a.target.as_deref().map(load_png).transpose()?;
    let model = || -> Result<ToyLdm> {
        let path = a.checkpoint.as_deref().context("--checkpoint is required for this attack")?;
        load_model(path)
    };
    let result: ImmunizationResult = match a.attack {
        AttackKind::Encoder => encoder_attack(&model()?, &image, target.as_ref(), &cfg)?,
        AttackKind::Diffusion => {
            let req = a.edit.request(image.clone())?;
            diffusion_attack(&model()?, &image, target.as_ref(), &req, &cfg)?
        }
        AttackKind::Random => random_noise_baseline(&image, cfg.epsilon, a.edit.seed)?,
    };
    for w in &result.warnings {
        warn!("{w}");
    }
    let stored = immunize_core::harness::quantize_within(&image, &result.immunized, cfg.epsilon)?;
    save_png(&stored, &a.out)?;
    if let Some(path) = &a.report {
        let doc = serde_json::json!({
            "result": &result,
            "max_abs_delta": result.delta.max_abs(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    info!(
        "loss {:?} -> best {} at iteration {}",
        result.initial_loss(),
        result.best_loss,
        result.best_iteration
    );
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let fx = FeatureExtractor::Encoder(load_model(&a.checkpoint)?);
    let clean_paths = png_files(&a.clean)?;
    let mut clean = Vec::new();
    let mut immunized = Vec::new();
    for p in &clean_paths {
        let other = a.immunized.join(p.file_name().expect("listed file"));
        if !other.exists() {
            bail!("{} has no counterpart in {}", p.display(), a.immunized.display());
        }
        clean.push(load_png(p)?);
        immunized.push(load_png(&other)?);
    }
    let opts = EvalOptions {
        neighbors: a.neighbors,
        bootstrap: a.bootstrap,
        seed: 0,
    };
    let report = evaluate_immunization(&clean, &immunized, &clean, &fx, &opts)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let files = emit_report(&a.run)?;
    println!("{}", files.metrics_csv.display());
    println!("{}", files.metrics_json.display());
    println!("{}", files.cosine_json.display());
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    cfg.seed = a.seed;
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = Some(c);
    }
    let dir = run_pipeline(&cfg)?;
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Immunize(a) => cmd_immunize(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
