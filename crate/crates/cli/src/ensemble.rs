//! Ensemble directories: `member_NN.warp` prompt checkpoints plus a
//! `manifest.json` naming the task, template, learning rate, run seeds and
//! member files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use warp_core::fewshot::Ensemble;

use crate::checkpoint::{load_warp, save_warp, WarpCheckpoint};
use crate::error::{format_err, io_err, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub template: String,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub members: Vec<String>,
}

pub fn save_ensemble(dir: &Path, e: &Ensemble<f32>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let width = e.len().saturating_sub(1).to_string().len().max(2);
    let mut members = Vec::with_capacity(e.len());
    for (i, params) in e.members.iter().enumerate() {
        let file = format!("member_{i:0width$}.warp");
        let ckpt = WarpCheckpoint { task: e.task.clone(), template: e.template.clone(), params: params.clone() };
        save_warp(&dir.join(&file), &ckpt)?;
        members.push(file);
    }
    let m = Manifest { task: e.task.clone(), template: e.template.clone(), lr: e.lr, seeds: e.seeds.clone(), members };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_ensemble(dir: &Path) -> Result<Ensemble<f32>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    let mut members = Vec::with_capacity(m.members.len());
    for file in &m.members {
        let c = load_warp(&dir.join(file))?;
        if c.task != m.task || c.template != m.template {
            return Err(format_err(&path, format!("member `{file}` belongs to another task or template")));
        }
        members.push(c.params);
    }
    Ensemble::new(m.task, m.template, m.lr, m.seeds, members).map_err(|e| format_err(&path, e.to_string()))
}
