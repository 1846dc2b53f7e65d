use std::collections::BTreeMap;
use std::path::Path;

use patchmil::head::LossMode;
use patchmil::proposals::{load_proposals, sliding_window, ProposalSet};
use patchmil::synth::DatasetManifest;
use patchmil::train::{parse_schedule, TrainConfig};
use patchmil::{Error, Result};

pub const DEFAULT_TEST_SCALES: [u32; 3] = [64, 96, 128];
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Optional JSON config file; any field a flag also sets loses to the flag.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schedule: Option<String>,
    pub batch: Option<usize>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub mode: Option<String>,
    pub train_scales: Option<Vec<u32>>,
    pub flip: Option<bool>,
    pub dis_weight: Option<f64>,
    pub seed: Option<u64>,
    pub test_scales: Option<Vec<u32>>,
    pub iou_threshold: Option<f64>,
    pub proposals: Option<String>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::data(format!("config {}: {}", p.display(), e)))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::invalid(format!("config {}: {}", p.display(), e)))
        }
    }
}

pub fn parse_mode(s: &str) -> Result<LossMode> {
    match s {
        "multi-task" => Ok(LossMode::MultiTask),
        "cls" => Ok(LossMode::ClsOnly),
        "dis" => Ok(LossMode::DisOnly),
        _ => Err(Error::invalid(format!(
            "mode '{}' is not one of multi-task|cls|dis",
            s
        ))),
    }
}

pub fn mode_name(mode: LossMode) -> &'static str {
    match mode {
        LossMode::MultiTask => "multi-task",
        LossMode::ClsOnly => "cls",
        LossMode::DisOnly => "dis",
    }
}

/// Flag-level training knobs; `None` means the flag was not given.
#[derive(Debug, Default, Clone)]
pub struct TrainOverrides {
    pub schedule: Option<String>,
    pub batch: Option<usize>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub mode: Option<String>,
    pub scales: Option<Vec<u32>>,
    pub no_flip: bool,
    pub dis_weight: Option<f64>,
    pub seed: Option<u64>,
}

/// defaults < config file < flags.
pub fn merged_train_config(file: &FileConfig, flags: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(s) = flags.schedule.as_deref().or(file.schedule.as_deref()) {
        cfg.schedule = parse_schedule(s)?;
    }
    if let Some(b) = flags.batch.or(file.batch) {
        cfg.batch_size = b;
    }
    if let Some(m) = flags.momentum.or(file.momentum) {
        cfg.momentum = m;
    }
    if let Some(w) = flags.weight_decay.or(file.weight_decay) {
        cfg.weight_decay = w;
    }
    if let Some(m) = flags.mode.as_deref().or(file.mode.as_deref()) {
        cfg.mode = parse_mode(m)?;
    }
    if let Some(s) = flags.scales.clone().or_else(|| file.train_scales.clone()) {
        cfg.train_scales = s;
    }
    if flags.no_flip {
        cfg.flip = false;
    } else if let Some(f) = file.flip {
        cfg.flip = f;
    }
    if let Some(d) = flags.dis_weight.or(file.dis_weight) {
        cfg.dis_weight = d;
    }
    if let Some(s) = flags.seed.or(file.seed) {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `sw` for generated sliding windows, anything else is a proposal CSV path.
pub fn build_proposals(
    source: &str,
    manifest: &DatasetManifest,
) -> Result<BTreeMap<String, ProposalSet>> {
    if source == "sw" {
        return Ok(manifest
            .images
            .iter()
            .map(|r| {
                let set = sliding_window(&r.id, r.width as u32, r.height as u32);
                (r.id.clone(), set)
            })
            .collect());
    }
    load_proposals(Path::new(source))
}

pub fn resolve_test_scales(flag: Option<&Vec<u32>>, file: &FileConfig) -> Vec<u32> {
    flag.cloned()
        .or_else(|| file.test_scales.clone())
        .unwrap_or_else(|| DEFAULT_TEST_SCALES.to_vec())
}

pub fn resolve_proposals_source(flag: Option<&str>, file: &FileConfig) -> String {
    flag.map(str::to_string)
        .or_else(|| file.proposals.clone())
        .unwrap_or_else(|| "sw".to_string())
}
