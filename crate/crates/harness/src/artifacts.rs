//! On-disk artifact helpers: atomic writes, content hashing, CSV emission,
//! and the JSON mirrors of search results and run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dnas_core::search::{BlockSearchAudit, SearchResult};
use dnas_core::unet::{BlockArch, Kernel, SubnetArch};

use crate::error::{io_err, HarnessError, Result};

/// FNV-1a over a file's bytes; used to compare artifacts across reruns.
pub fn fnv64_file(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(h)
}

/// Write-temp-then-rename so readers never observe partial files.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Other(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Other(format!("parse {}: {e}", path.display())))
}

/// Kernel-size lists per block, the JSON form of an architecture.
pub type ArchJson = Vec<Vec<u8>>;

pub fn arch_to_json(arch: &SubnetArch) -> ArchJson {
    arch.blocks()
        .iter()
        .map(|b| b.choices().iter().map(|k| k.size() as u8).collect())
        .collect()
}

pub fn arch_from_json(spec: &ArchJson) -> Result<SubnetArch> {
    let blocks = spec
        .iter()
        .map(|b| {
            b.iter()
                .map(|&k| {
                    Kernel::from_size(k as usize).ok_or_else(|| {
                        HarnessError::Config(format!("kernel size {k} not in {{1,3,5}}"))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(BlockArch::new)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubnetArch::from_blocks(blocks))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSearchRow {
    pub block: usize,
    pub base_loss: f64,
    pub selected_loss: f64,
    pub selected_cost: u64,
    pub candidates_evaluated: usize,
}

/// JSON form of one relaxation value's search outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResultFile {
    pub r: f64,
    pub arch: ArchJson,
    pub total_macs: u64,
    pub total_params: u64,
    pub teacher_macs: u64,
    pub reduction_percent: i64,
    pub per_block: Vec<BlockSearchRow>,
}

impl SearchResultFile {
    pub fn from_result(
        result: &SearchResult,
        total_macs: u64,
        total_params: u64,
        teacher_macs: u64,
    ) -> Self {
        SearchResultFile {
            r: result.r,
            arch: arch_to_json(&result.arch),
            total_macs,
            total_params,
            teacher_macs,
            reduction_percent: dnas_core::search::reduction_percent(
                total_macs as f64,
                teacher_macs as f64,
            ),
            per_block: result
                .per_block
                .iter()
                .map(|b| BlockSearchRow {
                    block: b.block,
                    base_loss: b.base_loss,
                    selected_loss: b.selected_loss,
                    selected_cost: b.selected_cost,
                    candidates_evaluated: b.candidates_evaluated,
                })
                .collect(),
        }
    }
}

/// One row per evaluated candidate, every block of one search run.
pub fn write_audit_csv(path: &Path, audits: &[BlockSearchAudit]) -> Result<()> {
    let mut out = String::from("block,choices,loss,cost,satisfied\n");
    for audit in audits {
        for cand in &audit.candidates {
            let choices: Vec<String> = cand
                .arch
                .choices()
                .iter()
                .map(|k| k.size().to_string())
                .collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                audit.block,
                choices.join("|"),
                cand.loss,
                cand.cost,
                cand.satisfied as u8
            ));
        }
    }
    atomic_write(path, out.as_bytes())
}

#[derive(Debug, Clone, Deserialize)]
pub struct AuditCsvRow {
    pub block: usize,
    pub choices: Vec<usize>,
    pub loss: f64,
    pub cost: u64,
    pub satisfied: bool,
}

pub fn read_audit_csv(path: &Path) -> Result<Vec<AuditCsvRow>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(HarnessError::Other(format!(
                "{}: malformed audit row {i}",
                path.display()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| HarnessError::Other(format!("bad number {s:?} in audit row {i}")))
        };
        rows.push(AuditCsvRow {
            block: parse(parts[0])? as usize,
            choices: parts[1]
                .split('|')
                .map(|c| parse(c).map(|v| v as usize))
                .collect::<Result<_>>()?,
            loss: parse(parts[2])?,
            cost: parse(parts[3])? as u64,
            satisfied: parts[4].trim() == "1",
        });
    }
    Ok(rows)
}

/// What a stage left on disk, with content hashes for the deterministic
/// artifacts ("" hash for files carrying wall-clock noise).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    /// FNV-1a of the file contents, hex; empty for non-deterministic files.
    pub fnv64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seed: u64,
    pub wall_ms: u128,
    pub artifacts: Vec<ArtifactRecord>,
}

/// Everything needed to re-execute a run and check it reproduced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub master_seed: u64,
    pub config: crate::config::ExperimentConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    /// Hashes of all deterministic artifacts, in stage order.
    pub fn deterministic_hashes(&self) -> Vec<(String, String)> {
        self.stages
            .iter()
            .flat_map(|s| s.artifacts.iter())
            .filter(|a| !a.fnv64.is_empty())
            .map(|a| (a.name.clone(), a.fnv64.clone()))
            .collect()
    }
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
