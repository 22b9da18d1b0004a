//! `palette-styler` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use palette_styler::depth_eval::{evaluate_corpus, read_manifest};
use palette_styler::imaging::resize_short_side;
use palette_styler::stylizer::{interpolate_styles, spatial_control, stylize, stylize_multi, Mask};
use palette_styler::training::{parse_key_values, train, TRAIN_CONFIG_KEYS};
use palette_styler::{
    load_encoder, load_image, save_image, Checkpoint, EncoderParams, ImageTensor, PaletteMode,
    StyleConfig, StyleModel, TrainConfig,
};

/// Environment variable naming the directory that holds `vgg19.safetensors`.
const CACHE_ENV: &str = "PALETTE_STYLER_CACHE";
const VGG_FILE: &str = "vgg19.safetensors";

#[derive(Parser, Debug)]
#[command(
    name = "palette-styler",
    version,
    about = "Feature-palette style transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the attention block and decoder.
    Train(TrainArgs),
    /// Stylize a content image with one style image.
    Stylize(StylizeArgs),
    /// Stylize with one palette entry from each of several style images.
    StylizeMulti(MultiArgs),
    /// Blend two styles in feature space.
    Interpolate(InterpolateArgs),
    /// Apply a different style to each mask region.
    Spatial(SpatialArgs),
    /// Depth-preservation error over a manifest of depth-map pairs.
    EvalDepth(EvalDepthArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Content image.
    #[arg(long)]
    content: PathBuf,
    /// Output image path.
    #[arg(long)]
    out: PathBuf,
    /// VGG-19 weights (default: $PALETTE_STYLER_CACHE/vgg19.safetensors, else ~/.cache/palette-styler/vgg19.safetensors).
    #[arg(long)]
    weights_vgg: Option<PathBuf>,
    /// Trained checkpoint (attention block and decoder).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Palette size per style image.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Patch side in `relu4_1` positions (one position spans 8 pixels).
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
    /// Patches sampled per style image.
    #[arg(long, default_value_t = 100)]
    num_patches: usize,
    /// Palette entry representation.
    #[arg(long, default_value = "centroid", value_parser = ["centroid", "nearest"])]
    palette_mode: String,
    /// Short side the inputs are resized to; 0 keeps the original size.
    #[arg(long, default_value_t = 512)]
    input_size: usize,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Key-value config file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StylizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Style image.
    #[arg(long)]
    style: PathBuf,
}

#[derive(Args, Debug)]
struct MultiArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Style image; repeat for each style.
    #[arg(long, required = true)]
    style: Vec<PathBuf>,
    /// Comma-separated palette index per style (default: seeded random).
    #[arg(long, value_delimiter = ',')]
    select: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// The two style images, in order.
    #[arg(long, required = true)]
    style: Vec<PathBuf>,
    /// Weight of the second style in [0, 1].
    #[arg(long)]
    w: f64,
}

#[derive(Args, Debug)]
struct SpatialArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Style image; repeat once per mask.
    #[arg(long, required = true)]
    style: Vec<PathBuf>,
    /// Binary mask image (white = region); the masks must partition the content.
    #[arg(long, required = true)]
    masks: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of content images.
    #[arg(long)]
    content_dir: PathBuf,
    /// Directory of style images.
    #[arg(long)]
    style_dir: PathBuf,
    /// Output directory for the loss log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// VGG-19 weights (default: $PALETTE_STYLER_CACHE/vgg19.safetensors, else ~/.cache/palette-styler/vgg19.safetensors).
    #[arg(long)]
    weights_vgg: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long, default_value_t = TrainConfig::default().total_iters)]
    iters: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    /// Content/style pairs per step.
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    batch: usize,
    /// Content loss weight.
    #[arg(long, default_value_t = TrainConfig::default().lambda_c)]
    lambda_c: f64,
    /// Style loss weight.
    #[arg(long, default_value_t = TrainConfig::default().lambda_s)]
    lambda_s: f64,
    /// Checkpoint interval in steps.
    #[arg(long, default_value_t = TrainConfig::default().checkpoint_every)]
    checkpoint_every: usize,
    /// Clusters per style palette.
    #[arg(long, default_value_t = TrainConfig::default().cluster_k)]
    k: usize,
    /// Patch side in `relu4_1` positions (one position spans 8 pixels).
    #[arg(long, default_value_t = TrainConfig::default().patch_size)]
    patch_size: usize,
    /// Patches sampled per style crop.
    #[arg(long, default_value_t = TrainConfig::default().num_patches)]
    num_patches: usize,
    /// Short side images are resized to before cropping.
    #[arg(long, default_value_t = TrainConfig::default().input_size)]
    input_size: usize,
    /// Square crop side.
    #[arg(long, default_value_t = TrainConfig::default().crop)]
    crop: usize,
    /// Seed for initialization, pairing, crops and palettes.
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    /// Key-value config file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalDepthArgs {
    /// CSV manifest with columns pair_id,content_depth_path,stylized_depth_path.
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV with per-pair and aggregate errors.
    #[arg(long)]
    out: PathBuf,
    /// Min-max normalize each depth map before comparing.
    #[arg(long)]
    normalize: bool,
}

/// Flags whose value can also come from the config file, as `(arg id, key)`.
const MODEL_KEYS: [(&str, &str); 6] = [
    ("k", "k"),
    ("patch_size", "patch_size"),
    ("num_patches", "num_patches"),
    ("palette_mode", "palette_mode"),
    ("input_size", "input_size"),
    ("seed", "seed"),
];

const TRAIN_KEYS: [(&str, &str); 12] = [
    ("iters", "total_iters"),
    ("lr", "lr"),
    ("batch", "batch"),
    ("lambda_c", "lambda_c"),
    ("lambda_s", "lambda_s"),
    ("checkpoint_every", "checkpoint_every"),
    ("k", "cluster_k"),
    ("patch_size", "patch_size"),
    ("num_patches", "num_patches"),
    ("input_size", "input_size"),
    ("crop", "crop"),
    ("seed", "seed"),
];

/// Inference settings after merging defaults, config file and flags.
#[derive(Debug)]
struct Settings {
    style: StyleConfig,
    input_size: usize,
    seed: u64,
}

impl Settings {
    fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let bad = |e: &dyn std::fmt::Display| anyhow!("invalid value `{value}` for `{key}`: {e}");
        match key {
            "k" => self.style.k = value.parse().map_err(|e| bad(&e))?,
            "patch_size" => self.style.patch_size = value.parse().map_err(|e| bad(&e))?,
            "num_patches" => self.style.num_patches = value.parse().map_err(|e| bad(&e))?,
            "palette_mode" => self.style.palette_mode = value.parse::<PaletteMode>()?,
            "input_size" => self.input_size = value.parse().map_err(|e| bad(&e))?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            _ if TRAIN_CONFIG_KEYS.contains(&key) => log::debug!("ignoring training key `{key}`"),
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }
}

fn explicit(matches: &ArgMatches, id: &str) -> Option<String> {
    if matches.value_source(id) != Some(ValueSource::CommandLine) {
        return None;
    }
    let raw: Vec<String> = matches
        .get_raw(id)?
        .map(|v| v.to_string_lossy().into_owned())
        .collect();
    Some(raw.join(","))
}

fn read_config(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_key_values(&text).with_context(|| format!("parsing {}", path.display()))
}

fn model_settings(args: &ModelArgs, matches: &ArgMatches) -> anyhow::Result<Settings> {
    let mut s = Settings {
        style: StyleConfig::default(),
        input_size: 512,
        seed: 0,
    };
    if let Some(path) = &args.config {
        for (key, value) in read_config(path)? {
            s.set(&key, &value)
                .with_context(|| format!("in {}", path.display()))?;
        }
    }
    for (id, key) in MODEL_KEYS {
        if let Some(v) = explicit(matches, id) {
            s.set(key, &v)?;
        }
    }
    Ok(s)
}

fn train_config(args: &TrainArgs, matches: &ArgMatches) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for (id, key) in TRAIN_KEYS {
        if let Some(v) = explicit(matches, id) {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn vgg_path(explicit: Option<&Path>) -> anyhow::Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        return Ok(PathBuf::from(dir).join(VGG_FILE));
    }
    let home = std::env::var_os("HOME")
        .ok_or_else(|| anyhow!("no --weights-vgg given and neither {CACHE_ENV} nor HOME is set"))?;
    Ok(PathBuf::from(home)
        .join(".cache/palette-styler")
        .join(VGG_FILE))
}

fn load_vgg(explicit: Option<&Path>) -> anyhow::Result<EncoderParams<f32>> {
    let path = vgg_path(explicit)?;
    load_encoder(&path).with_context(|| format!("loading VGG-19 weights from {}", path.display()))
}

fn load_model(args: &ModelArgs) -> anyhow::Result<StyleModel<f32>> {
    let encoder = load_vgg(args.weights_vgg.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    Ok(StyleModel::from_checkpoint(encoder, &ckpt))
}

fn load_input(path: &Path, input_size: usize) -> anyhow::Result<ImageTensor> {
    let img = load_image(path)?;
    if input_size == 0 {
        return Ok(img);
    }
    Ok(resize_short_side(&img, input_size)?)
}

fn write_output(img: &ImageTensor, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_image(img, path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Loads everything an inference subcommand needs.
struct Inference {
    settings: Settings,
    model: StyleModel<f32>,
    content: ImageTensor,
    styles: Vec<ImageTensor>,
    rng: ChaCha8Rng,
}

impl Inference {
    fn prepare(args: &ModelArgs, styles: &[PathBuf], matches: &ArgMatches) -> anyhow::Result<Self> {
        let settings = model_settings(args, matches)?;
        settings.style.validate()?;
        let model = load_model(args)?;
        let content = load_input(&args.content, settings.input_size)?;
        let styles = styles
            .iter()
            .map(|p| load_input(p, settings.input_size))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let rng = ChaCha8Rng::seed_from_u64(settings.seed);
        Ok(Self {
            settings,
            model,
            content,
            styles,
            rng,
        })
    }
}

fn run_command(command: &Command, matches: &ArgMatches) -> anyhow::Result<()> {
    match command {
        Command::Train(args) => {
            let cfg = train_config(args, matches)?;
            let encoder = load_vgg(args.weights_vgg.as_deref())?;
            let summary = train(encoder, &args.content_dir, &args.style_dir, &cfg, &args.out)?;
            log::info!(
                "trained {} steps; final checkpoint {}",
                summary.losses.len(),
                summary.final_checkpoint.display()
            );
        }
        Command::Stylize(args) => {
            let mut job =
                Inference::prepare(&args.model, std::slice::from_ref(&args.style), matches)?;
            let out = stylize(
                &job.content,
                &job.styles[0],
                &job.model,
                &job.settings.style,
                &mut job.rng,
            )?;
            write_output(&out, &args.model.out)?;
        }
        Command::StylizeMulti(args) => {
            let mut job = Inference::prepare(&args.model, &args.style, matches)?;
            let out = stylize_multi(
                &job.content,
                &job.styles,
                &job.model,
                &job.settings.style,
                args.select.as_deref(),
                &mut job.rng,
            )?;
            write_output(&out, &args.model.out)?;
        }
        Command::Interpolate(args) => {
            let mut job = Inference::prepare(&args.model, &args.style, matches)?;
            let out = interpolate_styles(
                &job.content,
                &job.styles[0],
                &job.styles[1],
                args.w,
                &job.model,
                &job.settings.style,
                &mut job.rng,
            )?;
            write_output(&out, &args.model.out)?;
        }
        Command::Spatial(args) => {
            let mut job = Inference::prepare(&args.model, &args.style, matches)?;
            let (h, w) = (job.content.height(), job.content.width());
            let masks = args
                .masks
                .iter()
                .map(|p| Ok(Mask::from_image(&load_image(p)?).resize_nearest(h, w)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let out = spatial_control(
                &job.content,
                &job.styles,
                &masks,
                &job.model,
                &job.settings.style,
                &mut job.rng,
            )?;
            write_output(&out, &args.model.out)?;
        }
        Command::EvalDepth(args) => {
            let pairs = read_manifest(&args.manifest)?;
            let report = evaluate_corpus(&pairs, args.normalize)?;
            if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
            }
            report.save_csv(&args.out)?;
            println!("{}", report.summary_line());
        }
    }
    Ok(())
}

/// Count checks clap cannot express for repeatable flags.
fn check_counts(command: &Command) -> Result<(), clap::Error> {
    let err = |msg: String| Err(Cli::command().error(ErrorKind::WrongNumberOfValues, msg));
    match command {
        Command::Interpolate(a) if a.style.len() != 2 => err(format!(
            "interpolate takes exactly two --style images, got {}",
            a.style.len()
        )),
        Command::Spatial(a) if a.style.len() != a.masks.len() => err(format!(
            "spatial takes one --style per --masks, got {} styles and {} masks",
            a.style.len(),
            a.masks.len()
        )),
        Command::StylizeMulti(a) if a.select.as_ref().is_some_and(|s| s.len() != a.style.len()) => {
            err(format!(
                "--select lists {} indices for {} styles",
                a.select.as_ref().map_or(0, Vec::len),
                a.style.len()
            ))
        }
        _ => Ok(()),
    }
}

fn parse(argv: impl IntoIterator<Item = OsString>) -> Result<(Command, ArgMatches), clap::Error> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    check_counts(&cli.command)?;
    let sub = matches
        .subcommand()
        .map(|(_, m)| m.clone())
        .expect("a subcommand is required");
    Ok((cli.command, sub))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (command, matches) = match parse(std::env::args_os()) {
        Ok(parsed) => parsed,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run_command(&command, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
