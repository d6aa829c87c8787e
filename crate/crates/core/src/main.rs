//! Command-line front end: phantom generation, training, segmentation,
//! evaluation, and config-driven experiments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use tissuebench::arch::{build_spec, count_parameters, Dimensionality, Family};
use tissuebench::experiment::{run_experiment, ExperimentConfig};
use tissuebench::nifti;
use tissuebench::phantom::{generate_phantom, PhantomConfig};
use tissuebench::report::emit_report;
use tissuebench::sampling::OverlapLevel;
use tissuebench::stats::evaluate_case;
use tissuebench::train::{train_model, TrainConfig};
use tissuebench::volume::LabelMap;
use tissuebench::{Error, Model, Result};

#[derive(Parser)]
#[command(
    name = "tissuebench",
    about = "Patch-based FCNN benchmarking for brain-MRI tissue segmentation",
    version
)]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom cases as NIfTI files.
    Phantom(PhantomArgs),
    /// Train one architecture on a case directory and save a checkpoint.
    Train(TrainArgs),
    /// Segment a case with a trained checkpoint.
    Segment(SegmentArgs),
    /// Compare a segmentation against a ground truth (per-class DSC).
    Evaluate(EvaluateArgs),
    /// Run a config-driven study (overlap / modality / dimensionality).
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Number of cases.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Cubic volume extent in voxels.
    #[arg(long, default_value_t = 64)]
    dims: usize,
    /// Gaussian intensity noise inside the brain mask.
    #[arg(long, default_value_t = 0.0)]
    sigma: f32,
    /// 1 (T1-like) or 2 (T1+T2-like).
    #[arg(long, default_value_t = 1)]
    modalities: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Case directory as produced by `phantom`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 1)]
    modalities: usize,
    /// dm | kk | unet | uresnet
    #[arg(long)]
    family: String,
    /// 2d | 3d
    #[arg(long)]
    dim: String,
    /// null | medium | high
    #[arg(long, default_value = "medium")]
    overlap_train: String,
    #[arg(long, default_value_t = 20)]
    max_epochs: usize,
    #[arg(long, default_value_t = 2)]
    patience: usize,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    /// Cap on training samples per epoch.
    #[arg(long)]
    max_samples_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (checkpoint + training report).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    /// Model checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Case directory containing the target case.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    case_id: String,
    #[arg(long, default_value_t = 1)]
    modalities: usize,
    /// null | medium | high
    #[arg(long, default_value = "high")]
    overlap: String,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth label NIfTI.
    #[arg(long)]
    gt: PathBuf,
    /// Segmentation label NIfTI.
    #[arg(long)]
    seg: PathBuf,
    /// Optional JSON output path (stdout otherwise).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .expect("rayon pool initialized once");
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom(args) => {
            for i in 0..args.count {
                let case = generate_phantom(&PhantomConfig::new(
                    args.seed.wrapping_add(i as u64),
                    [args.dims; 3],
                    args.sigma,
                    args.modalities,
                ))?;
                nifti::save_case(&case, &args.output)?;
                println!("wrote case {}", case.case_id);
            }
            Ok(())
        }
        Command::Train(args) => {
            let family: Family = args.family.parse()?;
            let dim: Dimensionality = args.dim.parse()?;
            let overlap: OverlapLevel = args.overlap_train.parse()?;
            let cases = nifti::load_case_directory(&args.dataset, args.modalities)?;
            let cases: Result<Vec<_>> = cases.iter().map(|c| c.preprocessed()).collect();
            let cases = cases?;
            let spec = build_spec(family, dim, args.modalities, None)?;
            println!(
                "training {} ({} parameters) on {} cases",
                spec.label(),
                count_parameters(&spec)?,
                cases.len()
            );
            let defaults = TrainConfig::default_for(family);
            let config = TrainConfig {
                max_epochs: args.max_epochs,
                patience: args.patience,
                val_fraction: args.val_fraction,
                batch_size: args.batch_size.unwrap_or(defaults.batch_size),
                learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
                seed: args.seed,
                max_samples_per_epoch: args.max_samples_per_epoch,
                fan_in_lr_cap: defaults.fan_in_lr_cap,
            };
            let (train_cases, val_cases) =
                tissuebench::train::split_dataset(&cases, config.val_fraction, config.seed)?;
            let mut train_samples = Vec::new();
            for c in &train_cases {
                train_samples.extend(tissuebench::experiment::samples_for_case(
                    c, &spec, overlap,
                )?);
            }
            let mut val_samples = Vec::new();
            for c in &val_cases {
                val_samples.extend(tissuebench::experiment::samples_for_case(c, &spec, overlap)?);
            }
            let mut model = Model::instantiate(&spec, args.seed)?;
            let report = train_model(&mut model, &train_samples, &val_samples, &config)?;
            std::fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
            let ckpt = args.output.join(format!("{}.tbm", spec.label()));
            model.save(&ckpt)?;
            let report_path = args.output.join("train_report.json");
            std::fs::write(
                &report_path,
                serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n",
            )
            .map_err(|e| Error::io(&report_path, e))?;
            println!(
                "trained {} epochs (best {} @ val loss {:.6}); checkpoint at {}",
                report.epochs_run,
                report.best_epoch,
                report.best_val_loss,
                ckpt.display()
            );
            Ok(())
        }
        Command::Segment(args) => {
            let overlap: OverlapLevel = args.overlap.parse()?;
            let model = Model::load(&args.model)?;
            let case = nifti::load_saved_case(&args.case_id, &args.dataset, args.modalities)?
                .preprocessed()?;
            let seg = tissuebench::fusion::segment_case(&model, &case, overlap)?;
            std::fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
            let out = args.output.join(format!("{}_seg.nii.gz", args.case_id));
            nifti::write_u8_grid(&out, &seg.labels, case.volumes[0].spacing)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate(args) => {
            let gt_grid = nifti::read_int_grid(&args.gt)?;
            let seg_grid = nifti::read_int_grid(&args.seg)?;
            let to_labels = |g: ndarray::Array3<i64>| -> Result<LabelMap> {
                let mut out = ndarray::Array3::<u8>::zeros(g.dim());
                for (dst, &v) in out.iter_mut().zip(g.iter()) {
                    if !(0..=3).contains(&v) {
                        return Err(Error::InvalidArgument(format!(
                            "label {v} outside 0..=3; map labels before evaluating"
                        )));
                    }
                    *dst = v as u8;
                }
                LabelMap::new(out)
            };
            let gt = to_labels(gt_grid)?;
            let seg = to_labels(seg_grid)?;
            let result = evaluate_case("case", &gt, &seg)?;
            let doc = serde_json::to_string_pretty(&result).map_err(Error::from)? + "\n";
            match args.output {
                Some(path) => {
                    std::fs::write(&path, doc).map_err(|e| Error::io(&path, e))?;
                    println!("wrote {}", path.display());
                }
                None => print!("{doc}"),
            }
            Ok(())
        }
        Command::Experiment(args) => {
            let mut config = ExperimentConfig::from_toml_file(&args.config)?;
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            if let Some(output) = args.output {
                config.output_dir = output;
            }
            let bundle = run_experiment(&config)?;
            let paths = emit_report(&bundle, &config.output_dir)?;
            println!("wrote {}", paths.metrics_csv.display());
            println!("wrote {}", paths.summary_json.display());
            println!("wrote {}", paths.plot_svg.display());
            for p in paths.provenance {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}
