//! `vgdm` — phantom generation, training, sampling, evaluation and checkpoint
//! inspection for the diffusion segmentation pipeline.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! abort. Every command is deterministic given its flags, including `--seed`.

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::{Array2, Array3, Axis};

use vgdm_core::data::{
    generate_phantom, load_dataset, normalize_intensity, read_volume, save_sample, write_manifest,
    write_volume, DataError, PhantomSpec, Sample,
};
use vgdm_core::denoiser::DenoiserError;
use vgdm_core::losses::LossError;
use vgdm_core::metrics::{
    dice_score, evaluate_with_predictions, pr_curve, MetricError, DEFAULT_THRESHOLD,
};
use vgdm_core::sampler::{derive_seed, sample_mask, SamplerError};
use vgdm_core::schedule::{make_linear_schedule, ScheduleError};
use vgdm_core::training::{
    load_checkpoint, save_checkpoint, sha256_hex, train, training_log_csv, CheckpointError,
    TrainError,
};
use vgdm_core::MaskPrediction;

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "vgdm",
    version,
    about = "Diffusion-based tumor segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset directory.
    Phantom {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Square image side in pixels.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser on a dataset directory.
    Train {
        /// key=value run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path; the training log CSV lands alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a segmentation mask for one input volume.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image volume (`*_img.vgdv`).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Output prefix: writes `<out>_prob.vgdv` and `<out>_msk.vgdv`.
        #[arg(long)]
        out: PathBuf,
        /// Optional ground-truth mask volume; prints Dice against it.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a dataset and write the report CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV output path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional pooled precision-recall curve CSV (plot data).
        #[arg(long)]
        pr_curve: Option<PathBuf>,
    },
    /// Print a checkpoint summary.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Data(m) => write!(f, "{m}"),
            CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<vgdm_core::data::VolumeError> for CliError {
    fn from(e: vgdm_core::data::VolumeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DenoiserError> for CliError {
    fn from(e: DenoiserError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => CliError::Config(m),
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom { n, size, seed, out } => cmd_phantom(n, size, seed, &out),
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Sample {
            ckpt,
            input,
            seed,
            threshold,
            out,
            gt,
        } => cmd_sample(&ckpt, &input, seed, threshold, &out, gt.as_deref()),
        Command::Eval {
            ckpt,
            data,
            report,
            seed,
            pr_curve,
        } => cmd_eval(&ckpt, &data, &report, seed, pr_curve.as_deref()),
        Command::Inspect { ckpt } => cmd_inspect(&ckpt),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn cmd_phantom(n: usize, size: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let spec = PhantomSpec::default_for(size);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let item_seed = derive_seed(seed, i as u64);
        let mut sample = generate_phantom(&spec, item_seed)?;
        sample.id = format!("p{i:03}");
        save_sample(out, &sample)?;
        entries.push((sample.id, item_seed));
    }
    write_manifest(out, &entries)?;
    println!(
        "wrote {n} samples ({size}x{size}, {} channels) to {}",
        spec.channels,
        out.display()
    );
    Ok(())
}

fn load_prepared_dataset(dir: &Path, normalize: bool) -> Result<Vec<Sample>, CliError> {
    let mut samples = load_dataset(dir)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!(
            "no samples found in {}",
            dir.display()
        )));
    }
    if normalize {
        for s in &mut samples {
            for c in 0..s.channels() {
                let channel = s.image.index_axis(Axis(0), c).to_owned();
                let foreground = channel.mapv(|v| v != 0.0);
                let normalized = normalize_intensity(&channel, &foreground)?;
                s.image.index_axis_mut(Axis(0), c).assign(&normalized);
            }
        }
    }
    Ok(samples)
}

fn cmd_train(config_path: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let rc = RunConfig::parse_file(config_path)?;
    let samples = load_prepared_dataset(data, rc.normalize)?;
    let size = samples[0].size();
    let channels = samples[0].channels();
    let config = rc.denoiser_config(size, channels + 1);
    config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let tc = rc.train_config();

    let outcome = train(&samples, &config, &tc)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(out, &outcome.checkpoint)?;
    let log_path = out.with_extension("log.csv");
    std::fs::write(&log_path, training_log_csv(&outcome.log))?;

    for row in &outcome.log {
        println!(
            "step {}/{}: total={:.6} mse={:.6} bce={:.6} dice={:.6} boundary={:.6}",
            row.step,
            tc.steps,
            row.losses.total,
            row.losses.mse,
            row.losses.bce,
            row.losses.dice,
            row.losses.boundary
        );
    }
    println!("checkpoint: {}", out.display());
    println!("log: {}", log_path.display());
    println!("checkpoint sha256: {}", sha256_hex(out)?);
    Ok(())
}

fn read_image_volume(path: &Path) -> Result<Array3<f32>, CliError> {
    let (volume, _) = read_volume(path)?;
    let (_, h, w) = volume.dim();
    if h != w {
        return Err(CliError::Data(format!(
            "input volume {} is {h}x{w}, expected a square slice",
            path.display()
        )));
    }
    Ok(volume)
}

fn read_mask_volume(path: &Path) -> Result<Array2<u8>, CliError> {
    let (volume, _) = read_volume(path)?;
    let (c, h, w) = volume.dim();
    if c != 1 {
        return Err(CliError::Data(format!(
            "mask volume {} has {c} channels, expected 1",
            path.display()
        )));
    }
    let mut mask = Array2::<u8>::zeros((h, w));
    for ((_, y, x), v) in volume.indexed_iter() {
        if *v != 0.0 && *v != 1.0 {
            return Err(CliError::Data(format!(
                "mask volume {} has non-binary value {v}",
                path.display()
            )));
        }
        mask[[y, x]] = (*v != 0.0) as u8;
    }
    Ok(mask)
}

fn cmd_sample(
    ckpt_path: &Path,
    input: &Path,
    seed: u64,
    threshold: f64,
    out: &Path,
    gt: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let condition = read_image_volume(input)?;
    let (c, h, _) = condition.dim();
    if h != ckpt.config.image_size || c + 1 != ckpt.config.in_channels {
        return Err(CliError::Data(format!(
            "input {} is {c}x{h}x{h} but the checkpoint expects {} condition channels at {}x{}",
            input.display(),
            ckpt.config.in_channels - 1,
            ckpt.config.image_size,
            ckpt.config.image_size
        )));
    }
    if threshold > 1.0 {
        eprintln!("warning: threshold {threshold} exceeds 1; the mask will be empty");
    }
    if threshold < 0.0 {
        eprintln!("warning: threshold {threshold} is below 0; the mask will be all-foreground");
    }

    let schedule = make_linear_schedule(
        ckpt.schedule_timesteps,
        ckpt.schedule_beta_start,
        ckpt.schedule_beta_end,
    )?;
    let prediction: MaskPrediction<f32> = sample_mask(
        &condition,
        ckpt.eval_params(),
        &ckpt.config,
        &schedule,
        seed,
        threshold,
    )?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let stem = out.to_string_lossy();
    let prob_path = PathBuf::from(format!("{stem}_prob.vgdv"));
    let mask_path = PathBuf::from(format!("{stem}_msk.vgdv"));
    let (size, _) = prediction.prob.dim();
    let prob_vol = Array3::from_shape_fn((1, size, size), |(_, y, x)| prediction.prob[[y, x]]);
    let mask_vol =
        Array3::from_shape_fn((1, size, size), |(_, y, x)| prediction.mask[[y, x]] as f32);
    write_volume(&prob_path, &prob_vol).map_err(DataError::from)?;
    write_volume(&mask_path, &mask_vol).map_err(DataError::from)?;
    println!("wrote {} and {}", prob_path.display(), mask_path.display());

    if let Some(gt_path) = gt {
        let gt_mask = read_mask_volume(gt_path)?;
        let dice = dice_score(&prediction.mask, &gt_mask)?;
        println!("dice={dice:.6}");
    }
    Ok(())
}

fn cmd_eval(
    ckpt_path: &Path,
    data: &Path,
    report_path: &Path,
    seed: u64,
    pr_curve_path: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let samples = load_prepared_dataset(data, false)?;
    let size = samples[0].size();
    let channels = samples[0].channels();
    if size != ckpt.config.image_size || channels + 1 != ckpt.config.in_channels {
        return Err(CliError::Data(format!(
            "dataset is {channels}x{size}x{size} but the checkpoint expects {} condition channels at {}x{}",
            ckpt.config.in_channels - 1,
            ckpt.config.image_size,
            ckpt.config.image_size
        )));
    }
    let schedule = make_linear_schedule(
        ckpt.schedule_timesteps,
        ckpt.schedule_beta_start,
        ckpt.schedule_beta_end,
    )?;
    let (report, predictions) =
        evaluate_with_predictions(&samples, ckpt.eval_params(), &ckpt.config, &schedule, seed)?;

    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(report_path, report.to_csv())?;

    if let Some(pr_path) = pr_curve_path {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (sample, (prob, _)) in samples.iter().zip(predictions.iter()) {
            scores.extend(prob.iter().cloned());
            labels.extend(sample.mask.iter().cloned());
        }
        let points = pr_curve(&scores, &labels)?;
        let mut csv = String::from("threshold,precision,recall\n");
        for (t, p, r) in points {
            csv.push_str(&format!("{t:.6},{p:.6},{r:.6}\n"));
        }
        std::fs::write(pr_path, csv)?;
        println!("wrote pr curve to {}", pr_path.display());
    }

    let agg = &report.aggregate;
    println!(
        "aggregate: dice={:.6} iou={:.6} hd95={} auprc={} (hd95 undefined on {}/{} samples)",
        agg.dice,
        agg.iou,
        agg.hd95
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "undefined".into()),
        agg.auprc
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "undefined".into()),
        report.hd95_undefined,
        report.samples.len()
    );
    for note in &report.notes {
        println!("note: {note}");
    }
    println!("wrote report to {}", report_path.display());
    Ok(())
}

fn cmd_inspect(ckpt_path: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let c = &ckpt.config;
    println!("version: {}", ckpt.version);
    println!(
        "config: image_size={} in_channels={} patch_size={} embed_dim={} depth={} num_heads={} window_size={} mlp_ratio={}",
        c.image_size, c.in_channels, c.patch_size, c.embed_dim, c.depth, c.num_heads,
        c.window_size, c.mlp_ratio
    );
    println!(
        "schedule: timesteps={} beta_start={} beta_end={}",
        ckpt.schedule_timesteps, ckpt.schedule_beta_start, ckpt.schedule_beta_end
    );
    println!("parameters: {}", ckpt.param_count());
    println!("step: {}", ckpt.step);
    println!("optimizer moments: {}", ckpt.opt.is_some());
    println!("ema shadow: {}", ckpt.ema.is_some());
    let digest: String = ckpt.rng_digest.iter().map(|b| format!("{b:02x}")).collect();
    println!("rng digest: {digest}");
    Ok(())
}
