//! Command-line front end for the compression pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dnas_harness::ablation::run_ablations;
use dnas_harness::artifacts::{read_json, write_json};
use dnas_harness::config::ExperimentConfig;
use dnas_harness::data::save_raw_tensor_file;
use dnas_harness::error::{HarnessError, Result};
use dnas_harness::pipeline::{load_unet, MetricsFile, Pipeline, CONFIG_JSON, METRICS_JSON};
use dnas_harness::report::stage_report;

#[derive(Parser)]
#[command(
    name = "dnas",
    about = "Block-wise kernel-size search and distillation for small diffusion U-Nets",
    version
)]
struct Cli {
    /// Experiment configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,

    /// Skip stages whose artifacts already exist.
    #[arg(long, global = true, default_value_t = false)]
    stage_resume: bool,

    /// Override whether the middle block participates in the search.
    #[arg(long, global = true)]
    search_middle: Option<bool>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the effective configuration to stdout.
    PrintConfig,
    /// Train the teacher network.
    TrainTeacher,
    /// Train the weight-sharing supernet block by block.
    TrainSupernet,
    /// Search each block under the relaxation sweep.
    Search,
    /// Retrain the searched subnet under the dynamic joint loss.
    Retrain,
    /// Draw samples from a retrained checkpoint.
    Sample {
        /// Checkpoint to sample (defaults to the pipeline's student).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output path for the sample batch.
        #[arg(long, default_value = "samples.dtns")]
        out: PathBuf,
    },
    /// Compute metrics for the teacher and student samples.
    Evaluate,
    /// Run the ablation battery (needs a completed pipeline).
    Ablate,
    /// Emit the summary report from computed metrics.
    Report,
    /// Run every stage in order.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(path) => ExperimentConfig::load(path),
        None => {
            // A config snapshot in the out-dir wins over compiled defaults
            // when resuming.
            let snapshot = cli.out_dir.join(CONFIG_JSON);
            if cli.stage_resume && snapshot.exists() {
                ExperimentConfig::load(&snapshot)
            } else {
                Ok(ExperimentConfig::default())
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    if let Some(sm) = cli.search_middle {
        config.search.search_middle = sm;
    }
    let pipeline = Pipeline::new(config.clone(), cli.seed, &cli.out_dir, cli.stage_resume)?;

    match cli.command {
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&config)?);
        }
        Command::TrainTeacher => {
            let (_, record) = pipeline.stage_teacher()?;
            if record.is_none() {
                println!("teacher checkpoint already present; skipped");
            } else {
                println!(
                    "teacher trained -> {}",
                    cli.out_dir.join("teacher.dnas").display()
                );
            }
        }
        Command::TrainSupernet => {
            let teacher = pipeline.load_teacher()?;
            let (_, record) = pipeline.stage_supernet(&teacher)?;
            if record.is_none() {
                println!("supernet checkpoint already present; skipped");
            } else {
                println!(
                    "supernet trained -> {}",
                    cli.out_dir.join("supernet.dnas").display()
                );
            }
        }
        Command::Search => {
            let teacher = pipeline.load_teacher()?;
            let supernet = pipeline.load_supernet_artifact()?;
            let (arch, _) = pipeline.stage_search(&teacher, &supernet)?;
            println!(
                "searched architecture at r = {}: {:?}",
                config.search.retrain_r,
                dnas_harness::artifacts::arch_to_json(&arch)
            );
        }
        Command::Retrain => {
            let teacher = pipeline.load_teacher()?;
            let arch = pipeline.load_searched_arch(config.search.retrain_r)?;
            pipeline.stage_retrain(&teacher, &arch)?;
            println!(
                "student retrained -> {}",
                cli.out_dir.join("student_dynamic.dnas").display()
            );
        }
        Command::Sample { model, out } => {
            let unet_cfg = config.unet_config();
            let net = match model {
                Some(path) => load_unet(&unet_cfg, &path)?,
                None => pipeline.load_student()?,
            };
            let samples = pipeline.sample_model(&net, "sample-cli")?;
            save_raw_tensor_file(&samples, &out)?;
            println!("{} samples -> {}", samples.shape()[0], out.display());
        }
        Command::Evaluate => {
            let teacher = pipeline.load_teacher()?;
            let student = pipeline.load_student()?;
            let (ts, ss, _) = pipeline.stage_sample(&teacher, &student)?;
            let (metrics, _) = pipeline.stage_evaluate(&teacher, &student, &ts, &ss)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate => {
            let teacher = pipeline.load_teacher()?;
            let supernet = pipeline.load_supernet_artifact()?;
            let arch = pipeline.load_searched_arch(config.search.retrain_r)?;
            let metrics_path = cli.out_dir.join(METRICS_JSON);
            if !metrics_path.exists() {
                return Err(HarnessError::StageDependency(format!(
                    "{} (produced by the evaluate stage)",
                    metrics_path.display()
                )));
            }
            let metrics: MetricsFile = read_json(&metrics_path)?;
            let file = run_ablations(&pipeline, &teacher, &supernet, &arch, &metrics)?;
            for row in &file.rows {
                println!(
                    "{:<16} macs={} ({:+}%) mmd2={:.6} frechet={:.6}",
                    row.variant,
                    row.metrics.macs,
                    -row.reduction_percent,
                    row.metrics.mmd2,
                    row.metrics.frechet_diag
                );
            }
        }
        Command::Report => {
            let metrics_path = cli.out_dir.join(METRICS_JSON);
            if !metrics_path.exists() {
                return Err(HarnessError::StageDependency(format!(
                    "{} (produced by the evaluate stage)",
                    metrics_path.display()
                )));
            }
            let metrics: MetricsFile = read_json(&metrics_path)?;
            stage_report(&pipeline, &metrics)?;
            println!("report -> {}", cli.out_dir.join("report.csv").display());
        }
        Command::Pipeline => {
            let manifest = pipeline.run()?;
            write_json(&cli.out_dir.join("manifest.json"), &manifest)?;
            println!(
                "pipeline complete: {} stages, artifacts in {}",
                manifest.stages.len(),
                cli.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
