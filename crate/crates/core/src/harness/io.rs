//! Run artifacts: metrics CSV and JSON, trajectory JSON-lines, checkpoints.
//! Every file is written to a temporary sibling and renamed into place.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::metrics::MetricsReport;
use crate::net::{read_checkpoint, write_checkpoint, ModelParams};
use crate::trajectory::TrajectoryRecord;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const TRAJECTORY_JSONL: &str = "trajectory.jsonl";
pub const CHECKPOINT: &str = "checkpoint.txt";
pub const CONFIG_COPY: &str = "config.toml";

pub const CSV_HEADER: &str =
    "variant,seed,shots,mAcc,mAcc_star,mF1,mF1_star,final_erm_loss,final_penalty,wall_clock_s";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn csv_row(r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.variant, r.seed, r.shots, r.macc, r.macc_star, r.mf1, r.mf1_star, r.final_erm_loss, r.final_penalty, r.wall_clock_s
    )
}

pub fn metrics_csv<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

pub fn trajectory_jsonl(log: &[TrajectoryRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn checkpoint_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    Ok(buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(fs::File::open(path)?))
}

/// Paths written by [`write_run`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub trajectory: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn write_run(
    dir: &Path,
    report: &MetricsReport,
    log: &[TrajectoryRecord],
    params: &ModelParams,
    config_toml: &str,
) -> Result<RunArtifacts> {
    let a = RunArtifacts {
        metrics_csv: dir.join(METRICS_CSV),
        metrics_json: dir.join(METRICS_JSON),
        trajectory: dir.join(TRAJECTORY_JSONL),
        checkpoint: dir.join(CHECKPOINT),
    };
    write_atomic(&a.metrics_csv, metrics_csv([report]).as_bytes())?;
    write_atomic(&a.metrics_json, serde_json::to_string_pretty(report)?.as_bytes())?;
    write_atomic(&a.trajectory, trajectory_jsonl(log)?.as_bytes())?;
    write_atomic(&a.checkpoint, &checkpoint_bytes(params)?)?;
    write_atomic(&dir.join(CONFIG_COPY), config_toml.as_bytes())?;
    Ok(a)
}
