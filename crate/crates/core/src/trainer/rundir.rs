use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Hyper, RunRecord};
use crate::checkpoint::{save_config, save_prompt, save_weights};
use crate::error::Result;
use crate::model::ModelWeights;
use crate::schedule::Schedule;

/// Paths written by [`write_run_dir`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub stage_prompts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct HyperFile<'a> {
    hyper: &'a Hyper,
}

/// Writes `config.json`, `hyper.json`, `schedule.json`, `weights.bin`,
/// `prompt_stage<i>.bin`, `record.csv` and `metrics.csv` into `dir`.
pub fn write_run_dir(
    dir: &Path,
    weights: &ModelWeights,
    schedule: &Schedule,
    hyper: &Hyper,
    record: &mut RunRecord,
) -> Result<RunFiles> {
    std::fs::create_dir_all(dir)?;
    save_config(&dir.join("config.json"), &weights.config)?;
    std::fs::write(dir.join("hyper.json"), serde_json::to_string_pretty(&HyperFile { hyper })? + "\n")?;
    std::fs::write(dir.join("schedule.json"), serde_json::to_string_pretty(schedule)? + "\n")?;
    save_weights(&dir.join("weights.bin"), weights)?;
    let mut stage_prompts = Vec::new();
    for (i, p) in record.stage_prompts.iter().enumerate() {
        let path = dir.join(format!("prompt_stage{}.bin", i + 1));
        save_prompt(&path, p)?;
        stage_prompts.push(path);
    }
    if let Some(last) = stage_prompts.last() {
        record.prompt_checkpoint = Some(last.file_name().unwrap().to_string_lossy().into_owned());
    }
    std::fs::write(dir.join("record.csv"), record.record_csv())?;
    std::fs::write(dir.join("metrics.csv"), record.metrics_csv())?;
    Ok(RunFiles {
        dir: dir.to_path_buf(),
        stage_prompts,
    })
}
