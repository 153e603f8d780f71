//! Final summary emission: one row per model, identical numbers in CSV and
//! JSON, MACs formatted with their reduction against the teacher.

use serde::{Deserialize, Serialize};

use dnas_core::search::{format_macs_reduction, reduction_percent};

use crate::artifacts::{atomic_write, write_json, StageRecord};
use crate::error::Result;
use crate::pipeline::{MetricsFile, Pipeline, REPORT_CSV, REPORT_JSON};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub macs: u64,
    pub macs_display: String,
    pub params: u64,
    pub reduction_percent: i64,
    pub mmd2: f64,
    pub frechet_diag: f64,
    pub probe_l_ori: f64,
    pub constraint_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str =
    "model,macs,macs_display,params,reduction_percent,mmd2,frechet_diag,probe_l_ori,constraint_ok";

fn csv_row(row: &ReportRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        row.model,
        row.macs,
        row.macs_display,
        row.params,
        row.reduction_percent,
        row.mmd2,
        row.frechet_diag,
        row.probe_l_ori,
        row.constraint_ok as u8
    )
}

pub fn build_rows(pipeline: &Pipeline, metrics: &MetricsFile) -> Result<Vec<ReportRow>> {
    // Desk models sit in the mega-MAC range; display in millions.
    let to_m = |macs: u64| macs as f64 / 1e6;
    let teacher_m = to_m(metrics.teacher.macs);
    let constraint_ok = pipeline.verify_constraint_from_audit(metrics.retrain_r)?;
    Ok(vec![
        ReportRow {
            model: "teacher".into(),
            macs: metrics.teacher.macs,
            macs_display: format_macs_reduction(teacher_m, teacher_m),
            params: metrics.teacher.params,
            reduction_percent: 0,
            mmd2: metrics.teacher.mmd2,
            frechet_diag: metrics.teacher.frechet_diag,
            probe_l_ori: metrics.teacher.probe_l_ori,
            constraint_ok: true,
        },
        ReportRow {
            model: format!("student(r={})", metrics.retrain_r),
            macs: metrics.student.macs,
            macs_display: format_macs_reduction(to_m(metrics.student.macs), teacher_m),
            params: metrics.student.params,
            reduction_percent: reduction_percent(
                metrics.student.macs as f64,
                metrics.teacher.macs as f64,
            ),
            mmd2: metrics.student.mmd2,
            frechet_diag: metrics.student.frechet_diag,
            probe_l_ori: metrics.student.probe_l_ori,
            constraint_ok,
        },
    ])
}

/// Writes report.csv and report.json from evaluated metrics.
pub fn stage_report(pipeline: &Pipeline, metrics: &MetricsFile) -> Result<Option<StageRecord>> {
    let rows = build_rows(pipeline, metrics)?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&csv_row(row));
    }
    let csv_path = pipeline.out_dir.join(REPORT_CSV);
    atomic_write(&csv_path, csv.as_bytes())?;
    write_json(&pipeline.out_dir.join(REPORT_JSON), &ReportFile { rows })?;
    Ok(Some(StageRecord {
        name: "report".into(),
        seed: 0,
        wall_ms: 0,
        artifacts: vec![
            crate::artifacts::ArtifactRecord {
                name: REPORT_CSV.into(),
                fnv64: format!("{:016x}", crate::artifacts::fnv64_file(&csv_path)?),
            },
            crate::artifacts::ArtifactRecord {
                name: REPORT_JSON.into(),
                fnv64: format!(
                    "{:016x}",
                    crate::artifacts::fnv64_file(&pipeline.out_dir.join(REPORT_JSON))?
                ),
            },
        ],
    }))
}
