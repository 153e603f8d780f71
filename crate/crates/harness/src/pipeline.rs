//! Stage orchestration: teacher -> supernet -> search -> retrain -> sample ->
//! evaluate -> report, each stage a pure function of (artifacts, config,
//! seed) with the outputs persisted and resumable.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dnas_core::checkpoint::{self, Checkpoint};
use dnas_core::diffusion::{
    ancestral_sample, ddim_sample, make_linear_schedule, DenoiseModel, NoiseSchedule,
};
use dnas_core::retrain::{retrain, RetrainConfig, RetrainLogRow, RetrainSink};
use dnas_core::rng::derive_seed;
use dnas_core::search::{
    capture_search_fixture, cost_of_arch, search_all, SearchConfig, SearchResult,
};
use dnas_core::tensor::Tensor;
use dnas_core::unet::{
    teacher_arch, train_denoiser, train_supernet_block, BlockTrainReport, DenoiseTrainOpts,
    SubnetArch, Supernet, SupernetTrainOpts, TeacherFeatures, UNet, UNetConfig,
};

use crate::artifacts::{
    arch_from_json, atomic_write, fnv64_file, read_audit_csv, read_json, write_audit_csv,
    write_json, ArtifactRecord, RunManifest, SearchResultFile, StageRecord,
};
use crate::config::{ExperimentConfig, SamplerKind};
use crate::data::{load_dataset, save_raw_tensor_file, load_raw_tensor_file, DataStream};
use crate::error::{HarnessError, Result};
use crate::metrics::{frechet_diag, mmd2_rbf, probe_noise_loss, MetricsReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CONFIG_JSON: &str = "config.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const TEACHER_CKPT: &str = "teacher.dnas";
pub const TEACHER_LOG: &str = "teacher_log.csv";
pub const SUPERNET_CKPT: &str = "supernet.dnas";
pub const SUPERNET_REPORT: &str = "supernet_report.json";
pub const SEARCH_SUMMARY: &str = "search_summary.json";
pub const STUDENT_CKPT: &str = "student_dynamic.dnas";
pub const RETRAIN_LOG: &str = "retrain_dynamic_log.csv";
pub const SAMPLES_TEACHER: &str = "samples_teacher.dtns";
pub const SAMPLES_STUDENT: &str = "samples_student.dtns";
pub const METRICS_JSON: &str = "metrics.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

pub fn search_json_name(r: f64) -> String {
    format!("search_r{r:.2}.json")
}

pub fn audit_csv_name(r: f64) -> String {
    format!("audit_r{r:.2}.csv")
}

/// Requires an upstream artifact to exist.
fn require(dir: &Path, name: &str, produced_by: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(HarnessError::StageDependency(format!(
            "{} (produced by the {produced_by} stage)",
            path.display()
        )));
    }
    Ok(path)
}

// ---- model persistence -------------------------------------------------

pub fn save_unet(model: &UNet, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        arch: model.arch.clone(),
        params: model.params.clone(),
    };
    checkpoint::save(&ckpt, path).map_err(HarnessError::from)
}

fn is_supernet_store(params: &dnas_core::tensor::ParamStore) -> bool {
    params.iter().any(|p| p.name.contains(".k1."))
}

/// Loads a standalone network; refuses supernet checkpoints, whose
/// weight-sharing slots are not a trained subnet.
pub fn load_unet(config: &UNetConfig, path: &Path) -> Result<UNet> {
    let ckpt = checkpoint::load(path).map_err(HarnessError::from)?;
    if is_supernet_store(&ckpt.params) {
        return Err(HarnessError::Config(format!(
            "{} is a supernet checkpoint; retrain the searched architecture \
             from scratch before sampling or evaluating it",
            path.display()
        )));
    }
    Ok(UNet {
        config: config.clone(),
        arch: ckpt.arch,
        params: ckpt.params,
    })
}

pub fn save_supernet(supernet: &Supernet, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        arch: teacher_arch(&supernet.config),
        params: supernet.params.clone(),
    };
    checkpoint::save(&ckpt, path).map_err(HarnessError::from)
}

pub fn load_supernet(config: &UNetConfig, path: &Path) -> Result<Supernet> {
    let ckpt = checkpoint::load(path).map_err(HarnessError::from)?;
    if !is_supernet_store(&ckpt.params) {
        return Err(HarnessError::Config(format!(
            "{} does not hold supernet weight-sharing parameters",
            path.display()
        )));
    }
    Ok(Supernet {
        config: config.clone(),
        params: ckpt.params,
    })
}

// ---- stage outputs -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupernetReportFile {
    pub per_block: Vec<SupernetBlockRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupernetBlockRow {
    pub block: usize,
    pub steps: usize,
    pub probe_loss_start: f64,
    pub probe_loss_end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSummaryRow {
    pub r: f64,
    pub total_macs: u64,
    pub total_params: u64,
    pub reduction_percent: i64,
    /// Re-verified from the persisted audit table at report time.
    pub constraint_ok: bool,
    /// Base (teacher-shaped) loss per block: the cross-block magnitude
    /// spread the block-local search is immune to.
    pub per_block_base_loss: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSummaryFile {
    pub teacher_macs: u64,
    pub teacher_params: u64,
    pub retrain_r: f64,
    pub rows: Vec<SearchSummaryRow>,
}

/// Spread of the per-block baseline evaluation losses (min/mean/max), the
/// magnitude imbalance the block-local search is immune to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockLossStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl BlockLossStats {
    pub fn from_losses(losses: &[f64]) -> Self {
        let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        BlockLossStats { min, mean, max }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub teacher: MetricsReport,
    pub student: MetricsReport,
    pub student_arch: crate::artifacts::ArchJson,
    pub retrain_r: f64,
    pub block_loss_stats: BlockLossStats,
}

// ---- the pipeline ---------------------------------------------------------

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub resume: bool,
}

struct StageTimer {
    name: &'static str,
    seed: u64,
    started: Instant,
    artifacts: Vec<(String, bool)>, // (file name, deterministic)
}

impl StageTimer {
    fn new(name: &'static str, seed: u64) -> Self {
        StageTimer {
            name,
            seed,
            started: Instant::now(),
            artifacts: Vec::new(),
        }
    }

    fn artifact(&mut self, name: impl Into<String>) {
        self.artifacts.push((name.into(), true));
    }

    fn artifact_timed(&mut self, name: impl Into<String>) {
        self.artifacts.push((name.into(), false));
    }

    fn finish(self, dir: &Path) -> Result<StageRecord> {
        let mut artifacts = Vec::with_capacity(self.artifacts.len());
        for (name, deterministic) in self.artifacts {
            let hash = if deterministic {
                format!("{:016x}", fnv64_file(&dir.join(&name))?)
            } else {
                String::new()
            };
            artifacts.push(ArtifactRecord { name, fnv64: hash });
        }
        Ok(StageRecord {
            name: self.name.to_string(),
            seed: self.seed,
            wall_ms: self.started.elapsed().as_millis(),
            artifacts,
        })
    }
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, seed: u64, out_dir: &Path, resume: bool) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(out_dir).map_err(crate::error::io_err(out_dir))?;
        Ok(Pipeline {
            config,
            seed,
            out_dir: out_dir.to_path_buf(),
            resume,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(
            self.config.diffusion.timesteps,
            self.config.diffusion.beta_start,
            self.config.diffusion.beta_end,
        )
        .map_err(HarnessError::from)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn data_stream(&self, label: &str) -> Result<DataStream> {
        DataStream::new(&self.config.dataset, derive_seed(self.seed, label))
    }

    // -- teacher ------------------------------------------------------------

    pub fn stage_teacher(&self) -> Result<(UNet, Option<StageRecord>)> {
        let ckpt_path = self.path(TEACHER_CKPT);
        if self.resume && ckpt_path.exists() {
            return Ok((self.load_teacher()?, None));
        }
        let mut timer = StageTimer::new("teacher", derive_seed(self.seed, "teacher"));
        let unet_cfg = self.config.unet_config();
        let sched = self.schedule()?;
        let mut model = UNet::init(
            &unet_cfg,
            &teacher_arch(&unet_cfg),
            derive_seed(self.seed, "teacher-init"),
        )?;
        let mut data = self.data_stream("teacher-data")?;
        let log = train_denoiser(
            &mut model,
            &mut data,
            &sched,
            &DenoiseTrainOpts {
                steps: self.config.teacher.steps,
                batch_size: self.config.teacher.batch_size,
                lr: self.config.teacher.lr,
                seed: derive_seed(self.seed, "teacher-train"),
                log_every: 100,
            },
        )?;
        save_unet(&model, &ckpt_path)?;
        let mut csv = String::from("step,loss\n");
        for (step, loss) in &log {
            csv.push_str(&format!("{step},{loss}\n"));
        }
        atomic_write(&self.path(TEACHER_LOG), csv.as_bytes())?;
        timer.artifact(TEACHER_CKPT);
        timer.artifact(TEACHER_LOG);
        Ok((model, Some(timer.finish(&self.out_dir)?)))
    }

    pub fn load_teacher(&self) -> Result<UNet> {
        let path = require(&self.out_dir, TEACHER_CKPT, "train-teacher")?;
        load_unet(&self.config.unet_config(), &path)
    }

    // -- supernet -----------------------------------------------------------

    pub fn stage_supernet(&self, teacher: &UNet) -> Result<(Supernet, Option<StageRecord>)> {
        let ckpt_path = self.path(SUPERNET_CKPT);
        if self.resume && ckpt_path.exists() {
            return Ok((self.load_supernet_artifact()?, None));
        }
        let mut timer = StageTimer::new("supernet", derive_seed(self.seed, "supernet"));
        let unet_cfg = self.config.unet_config();
        let sched = self.schedule()?;
        let init = Supernet::init(&unet_cfg, derive_seed(self.seed, "supernet-init"))?;
        let opts = SupernetTrainOpts {
            steps: self.config.supernet.steps_per_block,
            batch_size: self.config.supernet.batch_size,
            lr: self.config.supernet.lr,
            seed: derive_seed(self.seed, "supernet-train"),
            probe_batches: self.config.supernet.probe_batches,
        };
        // Blocks are independent given per-block seeds; train them in
        // parallel on clones and merge the trained parameters back.
        let results: Vec<Result<(Supernet, BlockTrainReport)>> = (0..unet_cfg.block_count())
            .into_par_iter()
            .map(|block| {
                let mut clone = init.clone();
                let mut data = self.data_stream(&format!("supernet-data-{block}"))?;
                let report =
                    train_supernet_block(&mut clone, teacher, block, &mut data, &sched, &opts)?;
                Ok((clone, report))
            })
            .collect();
        let mut supernet = init;
        let mut rows = Vec::new();
        for (block, result) in results.into_iter().enumerate() {
            let (trained, report) = result?;
            supernet.adopt_block_params(block, &trained)?;
            rows.push(SupernetBlockRow {
                block,
                steps: report.steps,
                probe_loss_start: report.probe_loss_start,
                probe_loss_end: report.probe_loss_end,
            });
        }
        save_supernet(&supernet, &ckpt_path)?;
        write_json(&self.path(SUPERNET_REPORT), &SupernetReportFile { per_block: rows })?;
        timer.artifact(SUPERNET_CKPT);
        timer.artifact(SUPERNET_REPORT);
        Ok((supernet, Some(timer.finish(&self.out_dir)?)))
    }

    pub fn load_supernet_artifact(&self) -> Result<Supernet> {
        let path = require(&self.out_dir, SUPERNET_CKPT, "train-supernet")?;
        load_supernet(&self.config.unet_config(), &path)
    }

    // -- search ---------------------------------------------------------------

    pub fn capture_fixture(&self, teacher: &UNet) -> Result<Vec<TeacherFeatures>> {
        let sched = self.schedule()?;
        let mut data = self.data_stream("search-data")?;
        capture_search_fixture(
            teacher,
            &mut data,
            &sched,
            self.config.search.eval_batches,
            self.config.search.batch_size,
            derive_seed(self.seed, "search-eval"),
        )
        .map_err(HarnessError::from)
    }

    pub fn stage_search(
        &self,
        teacher: &UNet,
        supernet: &Supernet,
    ) -> Result<(SubnetArch, Option<StageRecord>)> {
        let summary_path = self.path(SEARCH_SUMMARY);
        let retrain_r = self.config.search.retrain_r;
        if self.resume && summary_path.exists() {
            return Ok((self.load_searched_arch(retrain_r)?, None));
        }
        let mut timer = StageTimer::new("search", derive_seed(self.seed, "search-eval"));
        let unet_cfg = self.config.unet_config();
        let teacher_cost = cost_of_arch(&unet_cfg, &teacher_arch(&unet_cfg))?;
        let fixture = self.capture_fixture(teacher)?;

        let mut rows = Vec::new();
        let mut selected = None;
        for &r in &self.config.search.r_values {
            let result: SearchResult = search_all(
                supernet,
                &fixture,
                &SearchConfig {
                    r,
                    eval_batches: self.config.search.eval_batches,
                    eval_seed: derive_seed(self.seed, "search-eval"),
                    enumeration_cap: self.config.search.enumeration_cap,
                    search_middle: self.config.search.search_middle,
                },
            )?;
            let cost = cost_of_arch(&unet_cfg, &result.arch)?;
            let file = SearchResultFile::from_result(
                &result,
                cost.total_macs,
                cost.total_params,
                teacher_cost.total_macs,
            );
            write_json(&self.path(&search_json_name(r)), &file)?;
            write_audit_csv(&self.path(&audit_csv_name(r)), &result.audits)?;
            timer.artifact(search_json_name(r));
            timer.artifact(audit_csv_name(r));

            let constraint_ok = result
                .per_block
                .iter()
                .all(|b| b.selected_loss <= r * b.base_loss);
            rows.push(SearchSummaryRow {
                r,
                total_macs: cost.total_macs,
                total_params: cost.total_params,
                reduction_percent: file.reduction_percent,
                constraint_ok,
                per_block_base_loss: result.per_block.iter().map(|b| b.base_loss).collect(),
            });
            if (r - retrain_r).abs() < 1e-12 {
                selected = Some(result.arch.clone());
            }
        }
        write_json(
            &summary_path,
            &SearchSummaryFile {
                teacher_macs: teacher_cost.total_macs,
                teacher_params: teacher_cost.total_params,
                retrain_r,
                rows,
            },
        )?;
        timer.artifact(SEARCH_SUMMARY);
        let arch = selected.expect("retrain_r validated to be in the sweep");
        Ok((arch, Some(timer.finish(&self.out_dir)?)))
    }

    pub fn load_searched_arch(&self, r: f64) -> Result<SubnetArch> {
        let path = require(&self.out_dir, &search_json_name(r), "search")?;
        let file: SearchResultFile = read_json(&path)?;
        arch_from_json(&file.arch)
    }

    /// Post-hoc constraint verification straight from the persisted audit
    /// table of one relaxation value.
    pub fn verify_constraint_from_audit(&self, r: f64) -> Result<bool> {
        let audit = read_audit_csv(&require(&self.out_dir, &audit_csv_name(r), "search")?)?;
        let result: SearchResultFile =
            read_json(&require(&self.out_dir, &search_json_name(r), "search")?)?;
        for (block, choices) in result.arch.iter().enumerate() {
            let base_loss = audit
                .iter()
                .find(|row| row.block == block && row.choices.iter().all(|&k| k == 3))
                .map(|row| row.loss)
                .ok_or_else(|| HarnessError::Other("audit lacks the base row".into()))?;
            let selected = audit
                .iter()
                .find(|row| {
                    row.block == block
                        && row.choices.len() == choices.len()
                        && row.choices.iter().zip(choices.iter()).all(|(&a, &b)| a == b as usize)
                })
                .ok_or_else(|| HarnessError::Other("audit lacks the selected row".into()))?;
            if selected.loss > r * base_loss {
                return Ok(false);
            }
        }
        Ok(true)
    }

    // -- retrain ------------------------------------------------------------

    pub fn retrain_config(
        &self,
        schedule: dnas_core::retrain::BetaSchedule,
        seed_label: &str,
    ) -> RetrainConfig {
        RetrainConfig {
            gamma: self.config.retrain.gamma,
            schedule,
            total_steps: self.config.retrain.total_steps,
            batch_size: self.config.retrain.batch_size,
            lr: self.config.retrain.lr,
            seed: derive_seed(self.seed, seed_label),
            log_every: self.config.retrain.log_every,
            checkpoint_every: 0,
        }
    }

    /// Retrains `arch` under `schedule`, writing the checkpoint and log at
    /// the given names. Used for both the main student and the ablations.
    pub fn retrain_variant(
        &self,
        teacher: &UNet,
        arch: &SubnetArch,
        schedule: dnas_core::retrain::BetaSchedule,
        ckpt_name: &str,
        log_name: &str,
    ) -> Result<UNet> {
        let sched = self.schedule()?;
        // Matched seeds across variants: the data order, (t, eps) draws, and
        // student init are shared so variants differ only where intended.
        let config = self.retrain_config(schedule, "retrain");
        let mut data = self.data_stream("retrain-data")?;
        struct NoCkpt;
        impl RetrainSink for NoCkpt {
            fn on_checkpoint(&mut self, _: usize, _: &UNet) -> dnas_core::Result<()> {
                Ok(())
            }
        }
        let (student, log) = retrain(arch, teacher, &mut data, &sched, &config, &mut NoCkpt)?;
        save_unet(&student, &self.path(ckpt_name))?;
        write_retrain_log(&self.path(log_name), &log)?;
        Ok(student)
    }

    pub fn stage_retrain(
        &self,
        teacher: &UNet,
        arch: &SubnetArch,
    ) -> Result<(UNet, Option<StageRecord>)> {
        let ckpt_path = self.path(STUDENT_CKPT);
        if self.resume && ckpt_path.exists() {
            return Ok((self.load_student()?, None));
        }
        let mut timer = StageTimer::new("retrain", derive_seed(self.seed, "retrain"));
        let student = self.retrain_variant(
            teacher,
            arch,
            self.config.beta_schedule(),
            STUDENT_CKPT,
            RETRAIN_LOG,
        )?;
        timer.artifact(STUDENT_CKPT);
        timer.artifact_timed(RETRAIN_LOG);
        Ok((student, Some(timer.finish(&self.out_dir)?)))
    }

    pub fn load_student(&self) -> Result<UNet> {
        let path = require(&self.out_dir, STUDENT_CKPT, "retrain")?;
        load_unet(&self.config.unet_config(), &path)
    }

    // -- sampling -------------------------------------------------------------

    /// Draws `eval.samples` images from the model with a per-batch seed
    /// stream; batches run in parallel.
    pub fn sample_model<M: DenoiseModel + Sync>(
        &self,
        model: &M,
        sample_label: &str,
    ) -> Result<Tensor> {
        let sched = self.schedule()?;
        let eval = &self.config.eval;
        let (c, s) = (self.config.dataset.channels, self.config.dataset.image_size);
        let total = eval.samples;
        let per = eval.sample_batch.max(1);
        let batches = total.div_ceil(per);
        let seed = derive_seed(self.seed, sample_label);
        let outputs: Vec<Result<Tensor>> = (0..batches)
            .into_par_iter()
            .map(|i| {
                let n = per.min(total - i * per);
                let batch_seed = derive_seed(seed, &format!("batch{i}"));
                let out = match eval.sampler {
                    SamplerKind::Ddim => ddim_sample(
                        model,
                        &sched,
                        eval.ddim_steps,
                        &[n, c, s, s],
                        batch_seed,
                    ),
                    SamplerKind::Ancestral => {
                        ancestral_sample(model, &sched, &[n, c, s, s], batch_seed)
                    }
                };
                out.map_err(HarnessError::from)
            })
            .collect();
        let mut data = Vec::with_capacity(total * c * s * s);
        for out in outputs {
            data.extend_from_slice(out?.data());
        }
        Tensor::from_vec(&[total, c, s, s], data).map_err(HarnessError::from)
    }

    pub fn stage_sample(
        &self,
        teacher: &UNet,
        student: &UNet,
    ) -> Result<(Tensor, Tensor, Option<StageRecord>)> {
        let teacher_path = self.path(SAMPLES_TEACHER);
        let student_path = self.path(SAMPLES_STUDENT);
        if self.resume && teacher_path.exists() && student_path.exists() {
            return Ok((
                load_raw_tensor_file(&teacher_path)?,
                load_raw_tensor_file(&student_path)?,
                None,
            ));
        }
        let mut timer = StageTimer::new("sample", derive_seed(self.seed, "sample"));
        let teacher_samples = self.sample_model(teacher, "sample-teacher")?;
        let student_samples = self.sample_model(student, "sample-student")?;
        save_raw_tensor_file(&teacher_samples, &teacher_path)?;
        save_raw_tensor_file(&student_samples, &student_path)?;
        timer.artifact(SAMPLES_TEACHER);
        timer.artifact(SAMPLES_STUDENT);
        Ok((teacher_samples, student_samples, Some(timer.finish(&self.out_dir)?)))
    }

    // -- evaluation -----------------------------------------------------------

    pub fn metrics_for(
        &self,
        samples: &Tensor,
        reference: &Tensor,
        model: &UNet,
    ) -> Result<MetricsReport> {
        let sched = self.schedule()?;
        let cost = cost_of_arch(&model.config, &model.arch)?;
        let probe_n = reference.shape()[0].min(64);
        let per = reference.numel() / reference.shape()[0];
        let probe = Tensor::from_vec(
            &[
                probe_n,
                reference.shape()[1],
                reference.shape()[2],
                reference.shape()[3],
            ],
            reference.data()[..probe_n * per].to_vec(),
        )
        .map_err(HarnessError::from)?;
        Ok(MetricsReport {
            mmd2: mmd2_rbf(samples, reference)?,
            frechet_diag: frechet_diag(samples, reference)?,
            macs: cost.total_macs,
            params: cost.total_params,
            probe_l_ori: probe_noise_loss(
                model,
                &probe,
                &sched,
                derive_seed(self.seed, "probe-ori"),
                4,
            )?,
        })
    }

    pub fn stage_evaluate(
        &self,
        teacher: &UNet,
        student: &UNet,
        teacher_samples: &Tensor,
        student_samples: &Tensor,
    ) -> Result<(MetricsFile, Option<StageRecord>)> {
        let metrics_path = self.path(METRICS_JSON);
        if self.resume && metrics_path.exists() {
            return Ok((read_json(&metrics_path)?, None));
        }
        let mut timer = StageTimer::new("evaluate", derive_seed(self.seed, "evaluate"));
        let reference = load_dataset(&self.config.dataset)?;
        let summary: SearchSummaryFile =
            read_json(&require(&self.out_dir, SEARCH_SUMMARY, "search")?)?;
        let base_losses = &summary
            .rows
            .iter()
            .find(|r| (r.r - self.config.search.retrain_r).abs() < 1e-12)
            .ok_or_else(|| HarnessError::Other("summary lacks the retrain r".into()))?
            .per_block_base_loss;
        let file = MetricsFile {
            teacher: self.metrics_for(teacher_samples, &reference, teacher)?,
            student: self.metrics_for(student_samples, &reference, student)?,
            student_arch: crate::artifacts::arch_to_json(&student.arch),
            retrain_r: self.config.search.retrain_r,
            block_loss_stats: BlockLossStats::from_losses(base_losses),
        };
        write_json(&metrics_path, &file)?;
        timer.artifact(METRICS_JSON);
        Ok((file, Some(timer.finish(&self.out_dir)?)))
    }

    // -- full pipeline ----------------------------------------------------------

    pub fn run(&self) -> Result<RunManifest> {
        write_json(&self.path(CONFIG_JSON), &self.config)?;
        let mut stages = Vec::new();
        let push = |record: Option<StageRecord>, stages: &mut Vec<StageRecord>| {
            if let Some(r) = record {
                stages.push(r);
            }
        };

        let (teacher, rec) = self.stage_teacher()?;
        push(rec, &mut stages);
        let (supernet, rec) = self.stage_supernet(&teacher)?;
        push(rec, &mut stages);
        let (arch, rec) = self.stage_search(&teacher, &supernet)?;
        push(rec, &mut stages);
        let (student, rec) = self.stage_retrain(&teacher, &arch)?;
        push(rec, &mut stages);
        let (teacher_samples, student_samples, rec) = self.stage_sample(&teacher, &student)?;
        push(rec, &mut stages);
        let (metrics, rec) =
            self.stage_evaluate(&teacher, &student, &teacher_samples, &student_samples)?;
        push(rec, &mut stages);
        let rec = crate::report::stage_report(self, &metrics)?;
        push(rec, &mut stages);

        let manifest = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            master_seed: self.seed,
            config: self.config.clone(),
            stages,
        };
        write_json(&self.path(MANIFEST_JSON), &manifest)?;
        Ok(manifest)
    }
}

pub fn write_retrain_log(path: &Path, log: &[RetrainLogRow]) -> Result<()> {
    let mut csv = String::from("step,beta,l_dis,l_ori,l_total,wall_ms\n");
    for row in log {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.step, row.beta, row.l_dis, row.l_ori, row.l_total, row.wall_ms
        ));
    }
    atomic_write(path, csv.as_bytes())
}

/// Re-runs a manifest's configuration into a fresh directory and reports
/// whether every deterministic artifact hash matches.
pub fn rerun_matches(manifest: &RunManifest, fresh_dir: &Path) -> Result<bool> {
    let pipeline = Pipeline::new(
        manifest.config.clone(),
        manifest.master_seed,
        fresh_dir,
        false,
    )?;
    let again = pipeline.run()?;
    Ok(manifest.deterministic_hashes() == again.deterministic_hashes())
}
