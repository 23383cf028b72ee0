use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affect_core::dataset::{
    curate, generate_synthetic, load_dataset, read_annotations, save_dataset, write_annotations, CurationRules,
    ANNOTATIONS_FILE,
};
use affect_core::metrics::{format_table, MetricReport};
use affect_core::model::DdamfnModel;
use affect_core::nn::Checkpoint;
use affect_core::thresholds::{default_grid, optimize_thresholds, ThresholdSet};
use affect_core::train::{evaluate, predict_set, run_schedule, save_run, TrainConfig, TrainData, TrainMode};
use affect_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "affect", version, about = "Multitask facial affect toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Drop frames with invalid markers and write the kept annotations.
    Curate {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 112)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the two-stage schedule from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's mode.
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Write the report JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tune per-AU thresholds on a dataset directory.
    OptimizeThresholds {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the threshold grid from this training config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare metric reports side by side.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) | Error::Domain(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> affect_core::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_model(path: &Path) -> affect_core::Result<DdamfnModel> {
    DdamfnModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn run(command: Command) -> affect_core::Result<()> {
    match command {
        Command::Curate { annotations, out } => {
            let records = read_annotations(&annotations)?;
            let (kept, report) = curate(&records, &CurationRules::default());
            fs::create_dir_all(&out)?;
            write_annotations(&kept, fs::File::create(out.join(ANNOTATIONS_FILE))?)?;
            write_json(&out.join("curation_report.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Synth {
            n,
            seed,
            image_size,
            out,
        } => {
            let samples = generate_synthetic(n, seed, image_size)?;
            save_dataset(&out, &samples)?;
            println!("wrote {n} frames ({image_size}x{image_size}) to {}", out.display());
        }
        Command::Train { config, mode } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            let base = config.parent().unwrap_or(Path::new("."));
            let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            let train_dir = cfg
                .train_data
                .as_deref()
                .map(resolve)
                .ok_or_else(|| Error::Config("config needs train_data".into()))?;
            let (train, report) = load_dataset(&train_dir, &cfg.curation)?;
            eprintln!("train: kept {} of {} frames", report.kept, report.total_in);
            let val = match cfg.val_data.as_deref().map(resolve) {
                Some(dir) => load_dataset(&dir, &cfg.curation)?.0,
                None => train.clone(),
            };
            let mut model = DdamfnModel::new(cfg.model_config(), cfg.seed)?;
            let log = run_schedule(
                &mut model,
                TrainData {
                    train: &train,
                    val: &val,
                },
                &cfg,
            )?;
            let out_dir = resolve(&cfg.out_dir);
            save_run(&out_dir, &model, &log)?;
            let final_report = evaluate(&mut model, &val, &ThresholdSet::default())?;
            write_json(&out_dir.join("metrics.json"), &final_report)?;
            print!("{}", format_table(&[("final".into(), &final_report)]));
            println!("saved {}", out_dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            thresholds,
            out,
        } => {
            let mut model = load_model(&checkpoint)?;
            let thresholds = match thresholds {
                Some(p) => ThresholdSet::load(p)?,
                None => ThresholdSet::default(),
            };
            let (samples, _) = load_dataset(&data, &CurationRules::default())?;
            let report = evaluate(&mut model, &samples, &thresholds)?;
            let label = checkpoint
                .file_stem()
                .map_or("model".into(), |s| s.to_string_lossy().into_owned());
            match out {
                Some(path) => write_json(&path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            print!("{}", format_table(&[(label, &report)]));
        }
        Command::OptimizeThresholds {
            checkpoint,
            data,
            out,
            config,
        } => {
            let grid = match config {
                Some(path) => TrainConfig::load(path)?.threshold_grid,
                None => default_grid(),
            };
            let mut model = load_model(&checkpoint)?;
            let (samples, _) = load_dataset(&data, &CurationRules::default())?;
            let preds = predict_set(&mut model, &samples)?;
            let search = optimize_thresholds(&preds.au_probs, &preds.truth_au, &grid)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            search.thresholds.save(&out)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!(
                "AU macro F1 {:.4} at 0.5 -> {:.4} tuned; thresholds written to {}",
                mean(&search.f1_before),
                mean(&search.f1_after),
                out.display()
            );
        }
        Command::Report { metrics } => {
            let mut rows = Vec::new();
            for path in &metrics {
                let report: MetricReport = serde_json::from_str(&fs::read_to_string(path)?)?;
                let label = path
                    .file_stem()
                    .map_or(String::new(), |s| s.to_string_lossy().into_owned());
                rows.push((label, report));
            }
            let refs: Vec<(String, &MetricReport)> = rows.iter().map(|(l, r)| (l.clone(), r)).collect();
            print!("{}", format_table(&refs));
        }
    }
    Ok(())
}
