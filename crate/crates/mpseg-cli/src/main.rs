//! `mpseg`: stage-per-command pipeline for multi-planar CNN segmentation
//! with adaptive fusion. Run `mpseg <command> --help` for the flags of one
//! stage; every run writes a manifest with the resolved configuration and
//! input/output hashes into the output directory.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use mpseg::error::Error;
use mpseg::fusion::Connectivity;
use mpseg::network::NetworkConfig;
use mpseg::pipeline::{
    read_dataset, run_augment_preview, run_evaluate, run_fuse, run_fuse_calibrate, run_phantom,
    run_predict, run_preprocess_dataset, run_preprocess_single, run_train, AugmentPreviewStage,
    CalibrateStage, EvalPair, EvaluateStage, FuseStage, PhantomStage, PredictStage,
    PreprocessStage, TrainStage,
};
use mpseg::preprocess::DiffusionParams;
use mpseg::volume::Plane;

const EXIT_CODES: &str = "\
EXIT CODES:
  0  success
  1  unexpected failure
  2  configuration error
  3  missing input file
  4  file parse error (malformed header, truncated payload, unsupported type)
  5  dimension mismatch
  6  invalid parameter
  7  data validation failure (label range, probability normalization)
  8  numerical failure (non-finite values, diverged training)
  9  I/O error";

#[derive(Parser)]
#[command(
    name = "mpseg",
    about = "Multi-planar CNN segmentation of volumetric images with adaptive decision fusion",
    after_help = EXIT_CODES,
    version
)]
struct Cli {
    /// INI-style key=value file supplying defaults for any flag (flag
    /// names with '-' replaced by '_'); explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base random seed [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for plane-level parallelism; 1 is the
    /// reproducibility reference [default: 3]
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Directory receiving artifacts and the run manifest [default: .]
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PhantomArgs {
    /// Number of phantoms to generate [default: 8]
    #[arg(long)]
    count: Option<usize>,
    /// Cubic grid size in voxels [default: 48]
    #[arg(long)]
    size: Option<usize>,
    /// Gaussian intensity noise sigma [default: 4.0]
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Geometry jitter fraction across samples [default: 0.1]
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Dataset directory (with dataset.txt) to preprocess as a whole
    #[arg(long, conflicts_with = "input")]
    data: Option<PathBuf>,
    /// Single volume to preprocess
    #[arg(long)]
    input: Option<PathBuf>,
    /// Diffusion iterations [default: 5]
    #[arg(long)]
    diff_iters: Option<usize>,
    /// Diffusion conductance kappa, intensity units [default: 30.0]
    #[arg(long)]
    diff_kappa: Option<f64>,
    /// Diffusion step size, must be in (0, 1/6] [default: 1/7]
    #[arg(long)]
    diff_lambda: Option<f64>,
    /// Skip the diffusion step [default: off]
    #[arg(long)]
    no_diffusion: bool,
    /// Histogram bins for matching [default: 256]
    #[arg(long)]
    hm_bins: Option<usize>,
    /// Histogram matching reference: a volume path, or `first` for the
    /// first dataset volume [default: off]
    #[arg(long)]
    hm_reference: Option<String>,
}

#[derive(Args)]
struct AugmentPreviewArgs {
    /// Dataset directory; the preview uses its first volume
    #[arg(long)]
    data: PathBuf,
    /// Plane to slice: axial, coronal, or sagittal [default: axial]
    #[arg(long)]
    plane: Option<String>,
    /// Slice index [default: middle slice]
    #[arg(long)]
    slice_index: Option<usize>,
    /// Augmentation multiplier [default: 4]
    #[arg(long)]
    aug_multiplier: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory (with dataset.txt)
    #[arg(long)]
    data: PathBuf,
    /// Modality tag used in model file names [default: ct]
    #[arg(long)]
    modality: Option<String>,
    /// Filters in the first stage, doubled per pool [default: 8]
    #[arg(long)]
    base_filters: Option<usize>,
    /// Training epochs [default: 60]
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD learning rate [default: 0.01]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Dataset multiplier via rotation/zoom augmentation [default: 1]
    #[arg(long)]
    aug_multiplier: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory holding {modality}_{plane}.model files
    #[arg(long)]
    models: PathBuf,
    /// Modality tag of the models [default: ct]
    #[arg(long)]
    modality: Option<String>,
    /// Input volume(s) to segment
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct FuseCalibrateArgs {
    /// Directory of per-plane prediction triples ({stem}_{plane}.prob.mhd)
    #[arg(long)]
    preds: PathBuf,
    /// Component connectivity: 6 or 26 [default: 6]
    #[arg(long)]
    connectivity: Option<String>,
}

#[derive(Args)]
struct FuseArgs {
    /// Directory of per-plane prediction triples
    #[arg(long)]
    preds: PathBuf,
    /// Weights file from fuse-calibrate
    #[arg(long)]
    weights: PathBuf,
    /// Stems to fuse [default: every triple in --preds]
    #[arg(long = "stem")]
    stems: Vec<String>,
    /// Keep only the largest component per class [default: off]
    #[arg(long)]
    largest_component: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted label volume(s); pair with --gt in order
    #[arg(long = "pred")]
    preds: Vec<PathBuf>,
    /// Ground-truth label volume(s)
    #[arg(long = "gt")]
    gts: Vec<PathBuf>,
    /// Evaluate {id}_img_fused.mhd from this directory against a dataset
    #[arg(long, requires = "data")]
    pred_dir: Option<PathBuf>,
    /// Dataset directory providing ground truth for --pred-dir
    #[arg(long)]
    data: Option<PathBuf>,
    /// Modality tag recorded in the report [default: ct]
    #[arg(long)]
    modality: Option<String>,
    /// Weights file whose hash is recorded in the report
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled phantom dataset
    Phantom(PhantomArgs),
    /// Edge-preserving smoothing and optional histogram matching
    Preprocess(PreprocessArgs),
    /// Write augmented variants of one slice for inspection
    AugmentPreview(AugmentPreviewArgs),
    /// Train the three per-plane networks from scratch
    Train(TrainArgs),
    /// Produce per-plane probability volumes for input scans
    Predict(PredictArgs),
    /// Estimate per-(plane, class) fusion weights from predictions
    FuseCalibrate(FuseCalibrateArgs),
    /// Combine per-plane predictions into a final labeling
    Fuse(FuseArgs),
    /// Compute the five-metric report against ground truth
    Evaluate(EvaluateArgs),
}

/// Flat key=value settings from --config; section headers are ignored.
struct Settings(BTreeMap<String, String>);

impl Settings {
    fn load(path: Option<&PathBuf>) -> Result<Settings, Error> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingInput(path.clone()),
                _ => Error::Io(e),
            })?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with(['#', ';', '[']) {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("config line without '=': {line:?}"))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Settings(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Error>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::Config(format!("config key {key} = {raw:?}: {e}"))
            }),
        }
    }

    /// Flag value if given, else config value, else default.
    fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Error>
    where
        T::Err: Display,
    {
        Ok(flag.or(self.get(key)?).unwrap_or(default))
    }

    fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Error>
    where
        T::Err: Display,
    {
        Ok(flag.or(self.get(key)?))
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::MissingInput(_) => 3,
        Error::MalformedHeader { .. } | Error::Truncated { .. } | Error::UnsupportedElementType { .. } => 4,
        Error::Dim(_) => 5,
        Error::Param(_) => 6,
        Error::Validation(_) => 7,
        Error::NonFinite(_) | Error::Diverged { .. } => 8,
        Error::Io(_) => 9,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let settings = Settings::load(cli.config.as_ref())?;
    let seed = settings.resolve(cli.seed, "seed", 0)?;
    let jobs = settings.resolve(cli.jobs, "jobs", 3)?;
    let out_dir = settings
        .resolve_opt(cli.output_dir, "output_dir")?
        .unwrap_or_else(|| PathBuf::from("."));

    match cli.command {
        Command::Phantom(args) => {
            let stage = PhantomStage {
                count: settings.resolve(args.count, "count", 8)?,
                seed,
                size: settings.resolve(args.size, "size", 48)?,
                noise_sigma: settings.resolve(args.noise_sigma, "noise_sigma", 4.0)?,
                jitter: settings.resolve(args.jitter, "jitter", 0.1)?,
            };
            run_phantom(&stage, &out_dir)?;
        }
        Command::Preprocess(args) => {
            let diffusion = if args.no_diffusion {
                None
            } else {
                Some(DiffusionParams {
                    iterations: settings.resolve(args.diff_iters, "diff_iters", 5)?,
                    kappa: settings.resolve(args.diff_kappa, "diff_kappa", 30.0)?,
                    lambda: settings.resolve(args.diff_lambda, "diff_lambda", 1.0 / 7.0)?,
                })
            };
            let stage = PreprocessStage {
                diffusion,
                hm_reference: settings.resolve_opt(args.hm_reference, "hm_reference")?,
                hm_bins: settings.resolve(args.hm_bins, "hm_bins", 256)?,
            };
            match (&args.data, &args.input) {
                (Some(data), None) => run_preprocess_dataset(data, &stage, &out_dir)?,
                (None, Some(input)) => run_preprocess_single(input, &stage, &out_dir)?,
                _ => {
                    return Err(Error::Config(
                        "preprocess needs exactly one of --data or --input".into(),
                    ))
                }
            };
        }
        Command::AugmentPreview(args) => {
            let plane_name = settings.resolve(args.plane, "plane", "axial".to_string())?;
            let plane = Plane::from_name(&plane_name)
                .ok_or_else(|| Error::Config(format!("unknown plane {plane_name:?}")))?;
            let stage = AugmentPreviewStage {
                plane,
                slice_index: settings.resolve_opt(args.slice_index, "slice_index")?,
                multiplier: settings.resolve(args.aug_multiplier, "aug_multiplier", 4)?,
                seed,
            };
            run_augment_preview(&args.data, &stage, &out_dir)?;
        }
        Command::Train(args) => {
            let config = NetworkConfig {
                base_filters: settings.resolve(args.base_filters, "base_filters", 8)?,
                epochs: settings.resolve(args.epochs, "epochs", 60)?,
                batch_size: settings.resolve(args.batch_size, "batch_size", 8)?,
                learning_rate: settings.resolve(args.learning_rate, "learning_rate", 0.01)?,
                momentum: settings.resolve(args.momentum, "momentum", 0.9)?,
                seed,
                ..Default::default()
            };
            let stage = TrainStage {
                modality: settings.resolve(args.modality, "modality", "ct".to_string())?,
                config,
                aug_multiplier: settings.resolve(args.aug_multiplier, "aug_multiplier", 1)?,
                jobs,
            };
            run_train(&args.data, &stage, &out_dir)?;
        }
        Command::Predict(args) => {
            let stage = PredictStage {
                modality: settings.resolve(args.modality, "modality", "ct".to_string())?,
                jobs,
            };
            run_predict(&args.models, &args.inputs, &stage, &out_dir)?;
        }
        Command::FuseCalibrate(args) => {
            let conn_name = settings.resolve(args.connectivity, "connectivity", "6".to_string())?;
            let connectivity = Connectivity::from_str(&conn_name)
                .ok_or_else(|| Error::Config(format!("connectivity must be 6 or 26, got {conn_name:?}")))?;
            run_fuse_calibrate(&args.preds, &CalibrateStage { connectivity }, &out_dir)?;
        }
        Command::Fuse(args) => {
            let stage = FuseStage {
                stems: args.stems,
                largest_component: args.largest_component,
            };
            run_fuse(&args.preds, &args.weights, &stage, &out_dir)?;
        }
        Command::Evaluate(args) => {
            let mut pairs = Vec::new();
            if let (Some(pred_dir), Some(data)) = (&args.pred_dir, &args.data) {
                for entry in read_dataset(data)? {
                    let img_stem = entry
                        .image
                        .file_stem()
                        .map(|s| s.to_string_lossy().to_string())
                        .unwrap_or_default();
                    pairs.push(EvalPair {
                        id: entry.id.clone(),
                        pred: pred_dir.join(format!("{img_stem}_fused.mhd")),
                        gt: entry.labels.clone(),
                    });
                }
            }
            if args.preds.len() != args.gts.len() {
                return Err(Error::Config(format!(
                    "evaluate got {} --pred but {} --gt",
                    args.preds.len(),
                    args.gts.len()
                )));
            }
            for (pred, gt) in args.preds.iter().zip(&args.gts) {
                let id = pred
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| "volume".into());
                pairs.push(EvalPair {
                    id,
                    pred: pred.clone(),
                    gt: gt.clone(),
                });
            }
            let stage = EvaluateStage {
                modality: settings.resolve(args.modality, "modality", "ct".to_string())?,
                weights_path: args.weights,
            };
            run_evaluate(&pairs, &stage, &out_dir)?;
        }
    }
    Ok(())
}
