//! Command-line front end: synthesize datasets, train avatars, render and
//! score views, and export point clouds. Exit codes: 0 success, 2 usage or
//! settings error, 3 data error, 4 numeric failure during optimization.

mod settings;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gsavatar::io::{
    export_ply, generate_dataset, load_checkpoint, load_template, save_checkpoint, save_png,
    Dataset, Image, Split, SynthConfig,
};
use gsavatar::render::{render, RenderSettings};
use gsavatar::skinning::Pose;
use gsavatar::training::{evaluate, fit, initialize, StepRecord, TrainConfig};
use gsavatar::Error;

#[derive(Parser)]
#[command(name = "gsavatar", version, about = "Animatable 3D Gaussian avatars")]
struct Cli {
    /// Worker threads for rendering and gradients; 1 is the reference mode,
    /// and every thread count produces bit-identical results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera dataset with known ground truth.
    Synth(SynthArgs),
    /// Train an avatar, starting fresh from a template or resuming a
    /// checkpoint.
    Train(TrainArgs),
    /// Render dataset views from a trained checkpoint to PNG files.
    Render(RenderArgs),
    /// Score a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Export the posed point cloud as an ASCII PLY file.
    Export(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to create the dataset in.
    #[arg(long)]
    out: PathBuf,
    /// Animation frames to generate.
    #[arg(long, default_value_t = 24)]
    frames: usize,
    /// Training cameras on the ring (one extra held-out camera is added).
    #[arg(long, default_value_t = 6)]
    cameras: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Gaussians in the ground-truth model.
    #[arg(long, default_value_t = 5000)]
    points: usize,
    /// Amplitude of time-varying global dimming in [0, 1); 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    dimming: f64,
    /// Standard deviation of template vertex noise, in meters.
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: f64,
    /// Seed for every random choice in the dataset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint to write; training resumes from it when it already exists.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Skinned template to initialize from (required for a fresh run).
    #[arg(long)]
    template: Option<PathBuf>,
    /// Config file of `key = value` lines; flags and --set override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting, repeatable; see the config file keys.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Total epochs to train to (a resumed checkpoint continues up to this).
    #[arg(long)]
    epochs: Option<usize>,
    /// First 1-based epoch that trains the ambient occlusion field.
    #[arg(long)]
    ao_start_epoch: Option<usize>,
    /// Weight of the structural term in the loss, in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Appearance source: `hash` (field over canonical space) or `uv`
    /// (texture atlas; the template must carry uv coordinates).
    #[arg(long, value_enum)]
    sh_mode: Option<ShMode>,
    /// Disable the ambient occlusion factor entirely.
    #[arg(long)]
    no_ao: bool,
    /// Seed for initialization and epoch shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics log path (JSON lines, one per step); defaults next to the
    /// checkpoint.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset providing cameras, poses, and the background color.
    #[arg(long)]
    dataset: PathBuf,
    /// Camera id to render from.
    #[arg(long)]
    camera: String,
    /// Single frame index; omit to render every frame.
    #[arg(long)]
    frame: Option<usize>,
    /// Directory for the output PNGs.
    #[arg(long)]
    out: PathBuf,
    /// Force the ambient occlusion factor to 1 (novel-pose mode).
    #[arg(long)]
    no_ao: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or manifest file.
    #[arg(long)]
    dataset: PathBuf,
    /// Camera split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Also write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force the ambient occlusion factor to 1 before scoring.
    #[arg(long)]
    no_ao: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PLY path.
    #[arg(long)]
    out: PathBuf,
    /// Dataset supplying the pose (rest pose when omitted).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Frame whose pose to export, when a dataset is given.
    #[arg(long, default_value_t = 0)]
    frame: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShMode {
    Hash,
    Uv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<settings::SettingError> for CliError {
    fn from(e: settings::SettingError) -> Self {
        CliError::Usage(e.0)
    }
}

impl CliError {
    fn report(&self) -> (String, u8) {
        match self {
            CliError::Usage(msg) => (msg.clone(), 2),
            CliError::Core(e) => {
                let code = match e {
                    Error::Config(_) => 2,
                    Error::Numeric(_) => 4,
                    _ => 3,
                };
                (e.to_string(), code)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        // Ignore the error from a pool that already exists (tests call in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Export(args) => cmd_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (msg, code) = e.report();
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

/// Accepts either the dataset directory or its manifest file.
fn manifest_path(dataset: &Path) -> PathBuf {
    if dataset.is_dir() {
        dataset.join("manifest.json")
    } else {
        dataset.to_path_buf()
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        n_frames: args.frames,
        n_train_cameras: args.cameras,
        image_size: args.size,
        n_points: args.points,
        dimming: args.dimming,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    generate_dataset(&cfg, &args.out)?;
    println!(
        "dataset: {} cameras ({} train + 1 test), {} frames, {} points -> {}",
        args.cameras + 1,
        args.cameras,
        args.frames,
        args.points,
        args.out.display()
    );
    Ok(())
}

/// Dedicated train flags, folded into the same assignment stream as --set.
fn flag_assignments(args: &TrainArgs) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if let Some(v) = args.epochs {
        out.push(("epochs".into(), v.to_string()));
    }
    if let Some(v) = args.ao_start_epoch {
        out.push(("ao_start_epoch".into(), v.to_string()));
    }
    if let Some(v) = args.lambda {
        out.push(("lambda".into(), v.to_string()));
    }
    if let Some(mode) = args.sh_mode {
        let v = match mode {
            ShMode::Hash => "hash",
            ShMode::Uv => "uv",
        };
        out.push(("sh_mode".into(), v.into()));
    }
    if args.no_ao {
        out.push(("ao_enabled".into(), "false".into()));
    }
    if let Some(v) = args.seed {
        out.push(("seed".into(), v.to_string()));
    }
    out
}

fn apply_overrides(cfg: &mut TrainConfig, args: &TrainArgs) -> Result<(), CliError> {
    if let Some(path) = &args.config {
        settings::load_file(cfg, path)?;
    }
    for pair in &args.set {
        let (key, value) = settings::split_pair(pair)?;
        settings::apply(cfg, key, value)?;
    }
    for (key, value) in flag_assignments(args) {
        settings::apply(cfg, &key, &value)?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let dataset = Dataset::load(&manifest_path(&args.dataset))?;
    let mut ckpt = if args.checkpoint.exists() {
        let mut ckpt = load_checkpoint(&args.checkpoint)?;
        apply_overrides(&mut ckpt.train_config, &args)?;
        println!(
            "resuming {} at epoch {} of {}",
            args.checkpoint.display(),
            ckpt.epochs_done + 1,
            ckpt.train_config.epochs
        );
        ckpt
    } else {
        let template_path = args.template.as_ref().ok_or_else(|| {
            CliError::Usage("a fresh run needs --template (no checkpoint to resume)".into())
        })?;
        let template = load_template(template_path)?;
        let mut cfg = TrainConfig::default();
        apply_overrides(&mut cfg, &args)?;
        let ckpt = initialize(&template, &cfg)?;
        println!(
            "initialized {} points from {}",
            ckpt.avatar.model.n_points(),
            template_path.display()
        );
        ckpt
    };

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_extension("metrics.jsonl"));
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path).map_err(
        |e| Error::data_at(&metrics_path, format!("cannot create metrics log: {e}")),
    )?);

    // Per-epoch running means, printed as each epoch completes.
    let mut epoch_stats: Option<(usize, f64, f64, usize)> = None;
    let flush_epoch = |stats: &Option<(usize, f64, f64, usize)>| {
        if let Some((epoch, loss, psnr, n)) = stats {
            println!(
                "epoch {epoch}: mean loss {:.6}, mean psnr {:.2} dB over {n} steps",
                loss / *n as f64,
                psnr / *n as f64
            );
        }
    };
    let mut log_error = None;
    fit(&mut ckpt, &dataset, |r: &StepRecord| {
        if log_error.is_none() {
            if let Err(e) = serde_json::to_writer(&mut metrics, r)
                .map_err(std::io::Error::from)
                .and_then(|()| writeln!(metrics))
            {
                log_error = Some(e);
            }
        }
        match &mut epoch_stats {
            Some((epoch, loss, psnr, n)) if *epoch == r.epoch => {
                *loss += r.loss;
                *psnr += r.psnr;
                *n += 1;
            }
            other => {
                flush_epoch(&*other);
                *other = Some((r.epoch, r.loss, r.psnr, 1));
            }
        }
    })?;
    flush_epoch(&epoch_stats);
    if let Some(e) = log_error {
        return Err(Error::data_at(&metrics_path, format!("metrics log write failed: {e}")).into());
    }
    metrics
        .flush()
        .map_err(|e| Error::data_at(&metrics_path, format!("metrics log write failed: {e}")))?;

    save_checkpoint(&ckpt, &args.checkpoint)?;
    println!(
        "checkpoint written to {} ({} epochs done)",
        args.checkpoint.display(),
        ckpt.epochs_done
    );
    Ok(())
}

/// Render settings for viewing a checkpoint against a dataset.
fn view_settings(ckpt_cfg: &TrainConfig, dataset: &Dataset, no_ao: bool) -> RenderSettings {
    RenderSettings {
        background: dataset.background,
        sh_source: ckpt_cfg.sh_source,
        ao_enabled: ckpt_cfg.ao_enabled && !no_ao,
    }
}

fn cmd_render(args: RenderArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&manifest_path(&args.dataset))?;
    let cam = dataset
        .camera(&args.camera)
        .ok_or_else(|| Error::data(format!("no camera `{}` in the dataset", args.camera)))?;
    let frames: Vec<usize> = match args.frame {
        Some(f) if f >= dataset.frames.len() => {
            return Err(Error::data(format!(
                "frame {f} out of range; the dataset has {}",
                dataset.frames.len()
            ))
            .into())
        }
        Some(f) => vec![f],
        None => (0..dataset.frames.len()).collect(),
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::data_at(&args.out, format!("cannot create output dir: {e}")))?;
    let settings = view_settings(&ckpt.train_config, &dataset, args.no_ao);
    for f in frames {
        let pose = dataset.pose(f, 0)?;
        let buffers = render(&ckpt.avatar, &pose, &cam.camera, &settings)?;
        let image = Image::new(cam.camera.width, cam.camera.height, buffers.color)?;
        let path = args.out.join(format!("{}_f{f:03}.png", cam.id));
        save_png(&image, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&manifest_path(&args.dataset))?;
    let settings = view_settings(&ckpt.train_config, &dataset, args.no_ao);
    let report = evaluate(
        &ckpt.avatar,
        &dataset,
        args.split.into(),
        &settings,
        &ckpt.train_config.loss,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::data(format!("report serialization failed: {e}")))?;
    // Tolerate a reader that stops early (e.g. piping into `head`).
    if let Err(e) = writeln!(std::io::stdout(), "{json}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(Error::data(format!("cannot write report: {e}")).into());
        }
    }
    if let Some(out) = &args.out {
        std::fs::write(out, &json)
            .map_err(|e| Error::data_at(out, format!("cannot write report: {e}")))?;
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let pose = match &args.dataset {
        Some(ds) => Dataset::load(&manifest_path(ds))?.pose(args.frame, 0)?,
        None => Pose::rest(ckpt.avatar.model.skeleton.n_bones()),
    };
    export_ply(&ckpt.avatar, &pose, ckpt.train_config.sh_source, &args.out)?;
    println!(
        "wrote {} ({} points)",
        args.out.display(),
        ckpt.avatar.model.n_points()
    );
    Ok(())
}
