//! Retrains the searched architecture of an existing run directory under
//! the dynamic, fixed-0.5, and no-distillation schedules and prints their
//! metrics side by side. Useful for eyeballing schedule effects without the
//! full ablation battery.

use std::path::PathBuf;

use dnas_core::retrain::BetaSchedule;
use dnas_harness::config::ExperimentConfig;
use dnas_harness::data::load_dataset;
use dnas_harness::metrics::mmd2_rbf;
use dnas_harness::pipeline::Pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config_path = PathBuf::from(args.next().expect("usage: <config> <out_dir> <seed>"));
    let out_dir = PathBuf::from(args.next().expect("usage: <config> <out_dir> <seed>"));
    let seed: u64 = args.next().expect("usage: <config> <out_dir> <seed>").parse()?;

    let config = ExperimentConfig::load(&config_path)?;
    let pipeline = Pipeline::new(config.clone(), seed, &out_dir, true)?;
    let teacher = pipeline.load_teacher()?;
    let arch = pipeline.load_searched_arch(config.search.retrain_r)?;
    let reference = load_dataset(&config.dataset)?;

    let teacher_samples = pipeline.sample_model(&teacher, "sample-teacher")?;
    println!(
        "teacher          mmd2={:.4}",
        mmd2_rbf(&teacher_samples, &reference)?
    );
    for (tag, schedule) in [
        ("dynamic", config.beta_schedule()),
        ("fixed-0.5", BetaSchedule::Fixed { value: 0.5 }),
        ("no-dis", BetaSchedule::Fixed { value: 1.0 }),
    ] {
        let student = pipeline.retrain_variant(
            &teacher,
            &arch,
            schedule,
            &format!("cmp_{tag}.dnas"),
            &format!("cmp_{tag}_log.csv"),
        )?;
        let samples = pipeline.sample_model(&student, "sample-student")?;
        let metrics = pipeline.metrics_for(&samples, &reference, &student)?;
        println!(
            "{tag:<16} mmd2={:.4} frechet={:.2} probe_l_ori={:.4}",
            metrics.mmd2, metrics.frechet_diag, metrics.probe_l_ori
        );
    }
    Ok(())
}
