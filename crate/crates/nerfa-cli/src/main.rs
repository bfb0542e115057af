//! Command-line front end for training, rendering, and inspecting view
//! synthesis models.
//!
//! One command per process. Exit codes: 0 on success, 1 for usage and
//! configuration errors, 2 for IO and file-format errors, 3 for numerical
//! aborts (non-finite loss, failed gradient verification).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nerfa::gradcheck::{full_model_check, op_suite, FD_TOLERANCE};
use nerfa::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use nerfa::io::config::RunConfig;
use nerfa::io::{atomic_write, blender::load_blender_dataset, image_file::write_png};
use nerfa::metrics::{psnr, ssim};
use nerfa::model::{count_madds, ModelConfig, Variant};
use nerfa::optim::Adam;
use nerfa::scene::{generate_toy_scene, Scene, Split, ToySceneSpec, View};
use nerfa::train::{render_image, train};
use nerfa::{Error, NerfaModel, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "nerfa",
    version,
    about = "Ray-attention view synthesis: train, render, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a CSV training log.
    Train(TrainArgs),
    /// Render scene views from a checkpoint to PNG files.
    Render(RenderArgs),
    /// Report per-view PSNR and SSIM for a checkpoint against a scene.
    Eval(EvalArgs),
    /// Train every attention variant on the toy scene and compare them.
    Ablate(AblateArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print attention multiply-add counts for a given problem size.
    Madds(MaddsArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Flat `key = value` config file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path; the training log goes to `<out>.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint written with optimizer state. The config
    /// stored in the checkpoint applies; not combinable with --config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// `toy` for the generated sphere scene, or a dataset directory.
    #[arg(long, default_value = "toy")]
    scene: String,
    /// Total iteration count, overriding the config value.
    #[arg(long)]
    iterations: Option<u64>,
    /// Record a log row every this many steps.
    #[arg(long, default_value_t = 100)]
    eval_every: u64,
    /// Side length of generated toy images.
    #[arg(long, default_value_t = 16)]
    toy_size: usize,
    /// Number of generated toy views.
    #[arg(long, default_value_t = 4)]
    toy_views: usize,
}

#[derive(clap::Args)]
struct RenderArgs {
    /// Checkpoint to render from.
    #[arg(long)]
    ckpt: PathBuf,
    /// `toy` for the generated sphere scene, or a dataset directory.
    #[arg(long, default_value = "toy")]
    scene: String,
    /// Render only the first N views instead of all of them.
    #[arg(long)]
    views: Option<usize>,
    /// Directory for the output files render_000.png, render_001.png, ...
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Side length of generated toy images.
    #[arg(long, default_value_t = 16)]
    toy_size: usize,
    /// Number of generated toy views.
    #[arg(long, default_value_t = 4)]
    toy_views: usize,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// `toy` for the generated sphere scene, or a dataset directory.
    #[arg(long, default_value = "toy")]
    scene: String,
    /// Restrict to one split: train, val, test, or all.
    #[arg(long, default_value = "all")]
    split: String,
    /// Side length of generated toy images.
    #[arg(long, default_value_t = 16)]
    toy_size: usize,
    /// Number of generated toy views.
    #[arg(long, default_value_t = 4)]
    toy_views: usize,
}

#[derive(clap::Args)]
struct AblateArgs {
    /// Shared hyperparameters for every run; the `variant` key is ignored
    /// because each variant is trained in turn.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Iteration count, overriding the config value.
    #[arg(long)]
    iterations: Option<u64>,
    /// Side length of generated toy images.
    #[arg(long, default_value_t = 16)]
    toy_size: usize,
    /// Number of generated toy views.
    #[arg(long, default_value_t = 4)]
    toy_views: usize,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// Seed for the random inputs and parameters under test.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct MaddsArgs {
    /// Pixels (rays) per batch.
    #[arg(long, default_value_t = 128)]
    n_p: usize,
    /// Samples per ray.
    #[arg(long, default_value_t = 64)]
    n_r: usize,
    /// Token width.
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Layers per transformer stage.
    #[arg(long, default_value_t = 1)]
    layers: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes on stdout; anything
            // else is a usage error with the rendered usage text on stderr.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let outcome = match &cli.command {
        Command::Train(args) => run_train(args),
        Command::Render(args) => run_render(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Madds(args) => run_madds(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Shape(_)
        | Error::Config(_)
        | Error::Domain(_)
        | Error::Bounds(_)
        | Error::Contract(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERIC,
    }
}

/// Resolves `toy` to the procedural sphere scene, anything else to a
/// dataset directory on disk.
fn load_scene(spec: &str, seed: u64, toy_size: usize, toy_views: usize) -> Result<Scene> {
    if spec == "toy" {
        generate_toy_scene(seed, &ToySceneSpec::new(toy_size, toy_views))
    } else {
        load_blender_dataset(Path::new(spec))
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".csv");
    PathBuf::from(name)
}

fn run_train(args: &TrainArgs) -> Result<u8> {
    let (mut config, mut model, mut adam) = match (&args.resume, &args.config) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--resume and --config are mutually exclusive; a resumed run \
                 keeps the config stored in its checkpoint"
                    .into(),
            ))
        }
        (Some(path), None) => {
            let Checkpoint {
                config,
                model,
                adam,
                step,
            } = load_checkpoint(path)?;
            let adam = adam.ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint {} was saved without optimizer state and \
                     cannot be resumed",
                    path.display()
                ))
            })?;
            println!("resuming from step {step}");
            (config, model, adam)
        }
        (None, config) => {
            let config = read_config(config.as_deref())?;
            let model = NerfaModel::new(config.model_config())?;
            let adam = Adam::for_model(&model);
            (config, model, adam)
        }
    };
    if let Some(n) = args.iterations {
        config.iterations = n;
    }

    let scene = load_scene(&args.scene, config.seed, args.toy_size, args.toy_views)?;
    let log = train(
        &mut model,
        &mut adam,
        &scene,
        &config.train_config(args.eval_every),
    )?;

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_checkpoint(&args.out, &config, &model, Some(&adam))?;
    let log_file = log_path(&args.out);
    atomic_write(&log_file, log.to_csv().as_bytes())?;

    println!(
        "trained {} to step {} ({} parameters)",
        config.variant.name(),
        adam.steps(),
        model.param_count()
    );
    if let Some(last) = log.records().last() {
        println!(
            "final eval: step {} loss {:.6} psnr {:.2} dB",
            last.step, last.loss, last.psnr
        );
    }
    println!("checkpoint: {}", args.out.display());
    println!("log: {}", log_file.display());
    Ok(0)
}

/// Views to operate on: all of them, or the first `limit`.
fn selected_views<'s>(scene: &'s Scene, limit: Option<usize>) -> Result<Vec<&'s View>> {
    let views: Vec<&View> = scene.views().iter().collect();
    match limit {
        None => Ok(views),
        Some(n) if n <= views.len() => Ok(views.into_iter().take(n).collect()),
        Some(n) => Err(Error::Config(format!(
            "asked for {n} views but the scene has only {}",
            views.len()
        ))),
    }
}

fn run_render(args: &RenderArgs) -> Result<u8> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let scene = load_scene(
        &args.scene,
        ckpt.config.seed,
        args.toy_size,
        args.toy_views,
    )?;
    let views = selected_views(&scene, args.views)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    for (i, view) in views.iter().enumerate() {
        let image = render_image(
            &ckpt.model,
            &view.camera,
            ckpt.config.near,
            ckpt.config.far,
            ckpt.config.n_r,
            ckpt.config.n_p,
        )?;
        let path = args.out_dir.join(format!("render_{i:03}.png"));
        write_png(&image, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn split_filter(name: &str) -> Result<Option<Split>> {
    match name {
        "all" => Ok(None),
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        other => Err(Error::Config(format!(
            "unknown split {other:?}, expected train, val, test, or all"
        ))),
    }
}

fn run_eval(args: &EvalArgs) -> Result<u8> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let scene = load_scene(
        &args.scene,
        ckpt.config.seed,
        args.toy_size,
        args.toy_views,
    )?;
    let filter = split_filter(&args.split)?;
    let views: Vec<&View> = scene
        .views()
        .iter()
        .filter(|v| filter.map_or(true, |s| v.split == s))
        .collect();
    if views.is_empty() {
        return Err(Error::Config(format!(
            "no views in split {:?}",
            args.split
        )));
    }

    println!("view  split  psnr_db    ssim");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (i, view) in views.iter().enumerate() {
        let image = render_image(
            &ckpt.model,
            &view.camera,
            ckpt.config.near,
            ckpt.config.far,
            ckpt.config.n_r,
            ckpt.config.n_p,
        )?;
        let p = psnr(&image, &view.image);
        let s = ssim(&image, &view.image)?;
        psnr_sum += p;
        ssim_sum += s;
        println!("{i:>4}  {:<5}  {p:>8.3}  {s:.4}", view.split.name());
    }
    let n = views.len() as f64;
    println!(
        "mean         {:>8.3}  {:.4}",
        psnr_sum / n,
        ssim_sum / n
    );
    Ok(0)
}

fn run_ablate(args: &AblateArgs) -> Result<u8> {
    let mut base = read_config(args.config.as_deref())?;
    if let Some(n) = args.iterations {
        base.iterations = n;
    }
    let scene = load_scene("toy", base.seed, args.toy_size, args.toy_views)?;

    println!(
        "toy scene: {0}x{0} px, {1} views, {2} iterations per variant",
        args.toy_size, args.toy_views, base.iterations
    );
    println!("variant  psnr_db    ssim");
    for variant in Variant::attention_variants() {
        let mut config = base.clone();
        config.variant = variant;
        let mut model = NerfaModel::new(config.model_config())?;
        let mut adam = Adam::for_model(&model);
        train(&mut model, &mut adam, &scene, &config.train_config(u64::MAX))?;

        let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
        for view in scene.views() {
            let image = render_image(
                &model,
                &view.camera,
                config.near,
                config.far,
                config.n_r,
                config.n_p,
            )?;
            psnr_sum += psnr(&image, &view.image);
            ssim_sum += ssim(&image, &view.image)?;
        }
        let n = scene.views().len() as f64;
        println!(
            "{:<7}  {:>8.3}  {:.4}",
            variant.name(),
            psnr_sum / n,
            ssim_sum / n
        );
    }
    Ok(0)
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<u8> {
    let mut checks = op_suite(args.seed)?;
    checks.push(full_model_check(args.seed)?);

    let mut failures = 0;
    for check in &checks {
        let status = if check.passed() { "PASS" } else { "FAIL" };
        if !check.passed() {
            failures += 1;
        }
        println!(
            "{status} {:<24} max rel err {:.3e}",
            check.name, check.max_error
        );
    }
    if failures > 0 {
        eprintln!(
            "{failures} of {} gradient checks exceeded tolerance {FD_TOLERANCE:e}",
            checks.len()
        );
        return Ok(EXIT_NUMERIC);
    }
    println!(
        "all {} gradient checks passed (tolerance {FD_TOLERANCE:e})",
        checks.len()
    );
    Ok(0)
}

fn run_madds(args: &MaddsArgs) -> Result<u8> {
    let config = ModelConfig {
        variant: Variant::Nerfa,
        d: args.d,
        heads: 1,
        layers: args.layers,
        freq_pos: 1,
        freq_dir: 1,
        attention_mode: nerfa::attention::AttentionMode::Projected,
        seed: 0,
    };
    config.validate()?;
    let counts = count_madds(&config, args.n_p, args.n_r);

    println!(
        "attention multiply-adds at n_p={} n_r={} d={} layers={}",
        args.n_p, args.n_r, args.d, args.layers
    );
    println!("stage   scaling          madds");
    println!("global  n_p^2 n_r^2 d    {}", counts.global);
    println!("ray     n_p n_r^2 d      {}", counts.ray);
    println!("pixel   n_p^2 d          {}", counts.pixel);
    println!(
        "full model (ray + pixel) is {:.1}x cheaper than global attention",
        counts.global as f64 / (counts.ray + counts.pixel) as f64
    );
    Ok(0)
}
