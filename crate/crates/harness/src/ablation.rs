//! Ablation battery: random cost-matched architecture, retraining without
//! distillation, the fixed-weight joint loss, and the global evolutionary
//! search baseline, all with matched budgets and seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dnas_core::retrain::BetaSchedule;
use dnas_core::rng::{derive_seed, Rng};
use dnas_core::search::{
    cost_of_arch, evolutionary_global_search, random_arch_matching_cost, EvolutionConfig,
    SupernetLandscape,
};
use dnas_core::unet::{teacher_arch, SubnetArch, Supernet, UNet};

use crate::artifacts::{arch_to_json, atomic_write, write_json, ArchJson};
use crate::data::load_dataset;
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::pipeline::{MetricsFile, Pipeline};

pub const ABLATION_CSV: &str = "ablation_report.csv";
pub const ABLATION_JSON: &str = "ablation_report.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub arch: ArchJson,
    pub metrics: MetricsReport,
    pub reduction_percent: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationFile {
    pub rows: Vec<AblationRow>,
    /// Per-block relative losses of the base arch under the global
    /// objective: the magnitude imbalance the block-local search avoids.
    pub evolution_per_block_base_rel: Vec<f64>,
}

/// Runs the four ablation variants next to the already-retrained dynamic
/// student. Every retraining variant shares the student seed, data order,
/// and (t, eps) stream; only the schedule or architecture differs.
pub fn run_ablations(
    pipeline: &Pipeline,
    teacher: &UNet,
    supernet: &Supernet,
    searched_arch: &SubnetArch,
    main_metrics: &MetricsFile,
) -> Result<AblationFile> {
    let unet_cfg = pipeline.config.unet_config();
    let searched_cost = cost_of_arch(&unet_cfg, searched_arch)?.total_macs;
    let teacher_cost = cost_of_arch(&unet_cfg, &teacher_arch(&unet_cfg))?.total_macs;

    // Architecture variants.
    let mut rng = Rng::stream(derive_seed(pipeline.seed, "ablate-random"), "arch");
    let random_arch = random_arch_matching_cost(&unet_cfg, searched_cost, 2.0, &mut rng)?;

    let fixture = pipeline.capture_fixture(teacher)?;
    let evolution = {
        let mut landscape = SupernetLandscape::new(supernet, &fixture);
        evolutionary_global_search(
            &mut landscape,
            &EvolutionConfig {
                seed: derive_seed(pipeline.seed, "ablate-evolution"),
                ..Default::default()
            },
        )?
    };

    let main_schedule = pipeline.config.beta_schedule();
    let variants: Vec<(String, SubnetArch, BetaSchedule)> = vec![
        (
            "fixed-beta-0.5".into(),
            searched_arch.clone(),
            BetaSchedule::Fixed { value: 0.5 },
        ),
        (
            "no-dis".into(),
            searched_arch.clone(),
            BetaSchedule::Fixed { value: 1.0 },
        ),
        ("random-arch".into(), random_arch, main_schedule),
        ("evolutionary".into(), evolution.best.clone(), main_schedule),
    ];

    let reference = load_dataset(&pipeline.config.dataset)?;
    let results: Vec<Result<AblationRow>> = variants
        .into_par_iter()
        .map(|(variant, arch, schedule)| {
            let ckpt = format!("ablation_{variant}.dnas");
            let log = format!("ablation_{variant}_log.csv");
            let student = pipeline.retrain_variant(teacher, &arch, schedule, &ckpt, &log)?;
            // All variants share the sampling seed for a paired comparison.
            let samples = pipeline.sample_model(&student, "sample-student")?;
            let metrics = pipeline.metrics_for(&samples, &reference, &student)?;
            Ok(AblationRow {
                variant,
                arch: arch_to_json(&arch),
                reduction_percent: dnas_core::search::reduction_percent(
                    metrics.macs as f64,
                    teacher_cost as f64,
                ),
                metrics,
            })
        })
        .collect();

    let mut rows = vec![
        AblationRow {
            variant: "teacher".into(),
            arch: arch_to_json(&teacher_arch(&unet_cfg)),
            metrics: main_metrics.teacher.clone(),
            reduction_percent: 0,
        },
        AblationRow {
            variant: "student-dynamic".into(),
            arch: main_metrics.student_arch.clone(),
            metrics: main_metrics.student.clone(),
            reduction_percent: dnas_core::search::reduction_percent(
                main_metrics.student.macs as f64,
                teacher_cost as f64,
            ),
        },
    ];
    for r in results {
        rows.push(r?);
    }

    let file = AblationFile {
        rows,
        evolution_per_block_base_rel: evolution.per_block_base_rel,
    };
    write_json(&pipeline.out_dir.join(ABLATION_JSON), &file)?;
    let mut csv = String::from("variant,macs,reduction_percent,mmd2,frechet_diag,probe_l_ori\n");
    for row in &file.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.variant,
            row.metrics.macs,
            row.reduction_percent,
            row.metrics.mmd2,
            row.metrics.frechet_diag,
            row.metrics.probe_l_ori
        ));
    }
    atomic_write(&pipeline.out_dir.join(ABLATION_CSV), csv.as_bytes())?;
    Ok(file)
}
