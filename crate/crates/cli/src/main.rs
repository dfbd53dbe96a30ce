use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use graphcnn::checkpoint::{digest, Checkpoint};
use graphcnn::config::RunConfig;
use graphcnn::data::{load_image, load_manifest, save_image, GrayImage};
use graphcnn::eval::{
    check_pairable, denoise_image, evaluate, mask_image, trace_receptive_field, AblationReport, TileSpec,
};
use graphcnn::graph::NlgConfig;
use graphcnn::network::{count_parameters, GraphCnnModel, NetworkConfig};
use graphcnn::rng::Stream;
use graphcnn::tensor::Tensor;
use graphcnn::train::{check_model_gradients, Trainer};
use graphcnn::Error;

#[derive(Parser)]
#[command(name = "graphcnn", version, about = "Graph-convolutional image denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the images listed in a manifest.
    Train(TrainArgs),
    /// Denoise one image with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Add noise to clean images, denoise them and report PSNR.
    Eval(EvalArgs),
    /// Write the receptive field of one output pixel, layer by layer.
    TraceRf(TraceArgs),
    /// Check analytic gradients of a small model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate k = 0 against k > 0 with otherwise equal settings.
    Ablate(AblateArgs),
    /// Print parameter counts per tensor and per module.
    Params(ParamsArgs),
}

/// Overrides applied on top of the configuration file.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Noise standard deviation on the 8-bit scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbors per pixel in the non-local graph.
    #[arg(long)]
    k: Option<usize>,
    /// Search window radius; the window is (2r+1) pixels wide.
    #[arg(long)]
    window: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.sigma {
            cfg.train.sigma = s;
        }
        if let Some(s) = self.seed {
            cfg.network.seed = s;
        }
        if let Some(k) = self.k {
            cfg.network.nlg.k = k;
        }
        if let Some(w) = self.window {
            cfg.network.nlg.window_radius = w;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of training images, one path per line.
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory for metrics.tsv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DenoiseArgs {
    /// Noisy input image (PGM or PNG).
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output image; the format follows the extension.
    #[arg(long)]
    out: PathBuf,
    /// Denoise in overlapping tiles of this size.
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest of clean evaluation images.
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the sigma the checkpoint was trained with.
    #[arg(long)]
    sigma: Option<f64>,
    /// Defaults to the checkpoint's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tile: Option<usize>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output pixel as ROW,COL.
    #[arg(long)]
    pixel: Pixel,
    /// Deepest graph-convolutional layer to trace; defaults to all.
    #[arg(long)]
    layers: Option<usize>,
    /// Directory for one mask image per layer.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Network configuration; defaults to a small six-channel model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Build the graphs once and hold them fixed during differencing.
    #[arg(long)]
    fixed_graph: bool,
    /// Side of the random square input.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblateArgs {
    /// Manifest of training images.
    manifest: PathBuf,
    /// Manifest of evaluation images; defaults to the training manifest.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tile: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy)]
struct Pixel(usize, usize);

impl FromStr for Pixel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (r, c) = s.split_once(',').ok_or_else(|| format!("expected ROW,COL, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        Ok(Pixel(parse(r)?, parse(c)?))
    }
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> graphcnn::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn announce(cfg: &RunConfig) -> graphcnn::Result<()> {
    eprintln!("# seed = {}", cfg.network.seed);
    eprintln!("# resolved configuration");
    eprint!("{}", cfg.to_toml()?);
    Ok(())
}

fn tile_spec(tile: Option<usize>) -> Option<TileSpec> {
    tile.map(|t| TileSpec { tile: t, overlap: 16.min(t / 4) })
}

fn named_images(manifest: &Path) -> graphcnn::Result<Vec<(String, GrayImage)>> {
    Ok(load_manifest(manifest)?
        .into_iter()
        .map(|(p, img)| (p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into()), img))
        .collect())
}

fn train(args: TrainArgs) -> graphcnn::Result<()> {
    let images: Vec<GrayImage> = load_manifest(&args.manifest)?.into_iter().map(|(_, i)| i).collect();
    let mut trainer = match &args.checkpoint {
        Some(path) => {
            let o = &args.overrides;
            if args.config.is_some() || o.sigma.is_some() || o.seed.is_some() || o.k.is_some() || o.window.is_some() {
                return Err(Error::Config(
                    "a resumed run keeps its checkpoint's configuration; drop the overrides".into(),
                ));
            }
            Trainer::resume(&Checkpoint::load(path)?, &images)?
        }
        None => Trainer::new(load_config(args.config.as_deref(), &args.overrides)?, &images)?,
    };
    announce(&trainer.cfg)?;
    eprintln!(
        "# {} patches, {} steps per epoch, {} steps total, starting at step {}",
        trainer.patches().len(),
        trainer.steps_per_epoch(),
        trainer.total_steps(),
        trainer.state.step
    );
    trainer.run(Some(&args.out), |r| eprintln!("{}", r.to_line()))?;
    println!("{}", args.out.join("final.gcnn").display());
    Ok(())
}

fn load_model(path: &Path) -> graphcnn::Result<(RunConfig, GraphCnnModel<f32>, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    Ok((ck.config()?, ck.to_model()?, digest(&bytes)))
}

fn denoise(args: DenoiseArgs) -> graphcnn::Result<()> {
    let (cfg, model, _) = load_model(&args.checkpoint)?;
    announce(&cfg)?;
    let noisy = load_image(&args.input)?;
    let out = denoise_image(&model, &noisy, tile_spec(args.tile))?;
    save_image(&out, &args.out)
}

fn write_or_print(text: &str, out: Option<&Path>) -> graphcnn::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io { path: p.into(), source: e }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval(args: EvalArgs) -> graphcnn::Result<()> {
    let (mut cfg, model, ck_digest) = load_model(&args.checkpoint)?;
    let sigma = args.sigma.unwrap_or(cfg.train.sigma);
    let seed = args.seed.unwrap_or(cfg.network.seed);
    cfg.train.sigma = sigma;
    cfg.network.seed = seed;
    announce(&cfg)?;
    let report = evaluate(&model, &ck_digest, &named_images(&args.manifest)?, sigma, seed, tile_spec(args.tile))?;
    write_or_print(&report.to_tsv(), args.out.as_deref())
}

fn trace_rf(args: TraceArgs) -> graphcnn::Result<()> {
    let (cfg, model, _) = load_model(&args.checkpoint)?;
    announce(&cfg)?;
    let image = load_image(&args.input)?;
    let upto = args.layers.unwrap_or_else(|| cfg.network.depth());
    let masks = trace_receptive_field(&model, &image, (args.pixel.0, args.pixel.1), upto)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    println!("layer\tpixels");
    for (l, m) in masks.iter().enumerate() {
        save_image(&mask_image(m), args.out.join(format!("layer-{}.png", l + 1)))?;
        println!("{}\t{}", l + 1, m.count());
    }
    Ok(())
}

/// Six channels, one stage with one two-layer block, k = 4 in a 7×7 window.
fn small_network() -> NetworkConfig {
    NetworkConfig {
        prepro_branch_channels: 2,
        trunk_channels: 6,
        n_graph_stages: 1,
        res_blocks_per_stage: 1,
        layers_per_res_block: 2,
        nlg: NlgConfig { k: 4, window_radius: 3, exclusion_radius: 1 },
        ..NetworkConfig::default()
    }
}

/// Returns whether every block passed.
fn gradcheck(args: GradcheckArgs) -> graphcnn::Result<bool> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig { network: small_network(), ..RunConfig::default() },
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    announce(&cfg)?;
    if !args.fixed_graph {
        eprintln!("# graphs are rebuilt for every evaluation; neighbor changes can show up as errors");
    }
    let n = args.size;
    let mut rng = Stream::new(cfg.network.seed).substream("gradcheck");
    let input = Tensor::from_fn(vec![1, 1, n, n], |_| rng.next_f64());
    let target = Tensor::from_fn(vec![1, 1, n, n], |_| 0.1 * rng.gaussian());
    let report = check_model_gradients(&cfg.network, &input, &target, args.fixed_graph, 1e-5, args.tolerance)?;
    print!("{report}");
    println!("max_rel_error\t{:.3e}", report.max_rel_error());
    if !report.passed() {
        eprintln!("error: analytic and numeric gradients disagree beyond {}", args.tolerance);
    }
    Ok(report.passed())
}

fn ablate(args: AblateArgs) -> graphcnn::Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let k = cfg.network.nlg.k;
    if k == 0 {
        return Err(Error::Config("ablation needs k > 0 to compare against k = 0".into()));
    }
    let mut base = cfg.clone();
    base.network.nlg.k = 0;
    check_pairable(&base, &cfg)?;
    announce(&cfg)?;
    let images: Vec<GrayImage> = load_manifest(&args.manifest)?.into_iter().map(|(_, i)| i).collect();
    let eval_images = named_images(args.eval.as_deref().unwrap_or(&args.manifest))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    let mut reports = Vec::new();
    for run in [base, cfg.clone()] {
        let dir = args.out.join(format!("k{}", run.network.nlg.k));
        eprintln!("# training k = {}", run.network.nlg.k);
        let mut trainer = Trainer::new(run.clone(), &images)?;
        trainer.run(Some(&dir), |r| eprintln!("{}", r.to_line()))?;
        let bytes = trainer.checkpoint()?.to_bytes();
        reports.push(evaluate(
            &trainer.state.model,
            &digest(&bytes),
            &eval_images,
            run.train.sigma,
            run.network.seed,
            tile_spec(args.tile),
        )?);
    }
    let [a, b]: [_; 2] = reports.try_into().map_err(|_| Error::Config("ablation runs missing".into()))?;
    let report = AblationReport { k: [0, k], reports: [a, b] };
    let text = report.to_tsv();
    write_or_print(&text, Some(&args.out.join("ablation.tsv")))?;
    print!("{text}");
    Ok(())
}

fn params(args: ParamsArgs) -> graphcnn::Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    announce(&cfg)?;
    let census = count_parameters(&GraphCnnModel::<f32>::new(cfg.network)?);
    println!("tensor\tparameters");
    for (name, n) in &census.entries {
        println!("{name}\t{n}");
    }
    println!();
    println!("module\tparameters");
    for (name, n) in census.modules() {
        println!("{name}\t{n}");
    }
    println!("total\t{}", census.total());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::OutOfRange(_) => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a),
        Command::TraceRf(a) => trace_rf(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(false) => return ExitCode::from(3),
            other => other.map(|_| ()),
        },
        Command::Ablate(a) => ablate(a),
        Command::Params(a) => params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
