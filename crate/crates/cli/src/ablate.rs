use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use apaseg_core::blocks::{BlockVariant, FusionMode, ProjectionOp};
use apaseg_core::network::{format_axis_weights, param_count, AxisWeightRow};
use apaseg_core::train::{TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::commands::score;
use crate::config::{load_splits, read_json, relative_to, TrainFile, TrainOverrides};

pub const RESULTS_FILE: &str = "ablation.json";
pub const TABLE_FILE: &str = "ablation.txt";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Matrix {
    /// Dataset directory, relative to the matrix file.
    pub data: Option<PathBuf>,
    /// Results directory, relative to the matrix file.
    pub out: PathBuf,
    /// Settings shared by every run; the grid overrides `net`.
    pub train: TrainConfig,
    pub variants: Vec<BlockVariant>,
    pub projection_ops: Vec<ProjectionOp>,
    pub fusion_modes: Vec<FusionMode>,
    pub overlap: f64,
    pub classes: Vec<u8>,
}

impl Default for Matrix {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("ablation"),
            train: TrainConfig::default(),
            variants: BlockVariant::ALL.to_vec(),
            projection_ops: ProjectionOp::ALL.to_vec(),
            fusion_modes: vec![FusionMode::Mean, FusionMode::Learned],
            overlap: 0.5,
            classes: vec![1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCell {
    pub variant: BlockVariant,
    /// `None` for variants that do not project.
    pub projection_op: Option<ProjectionOp>,
    pub fusion_mode: FusionMode,
}

impl RunCell {
    pub fn label(&self) -> String {
        let op = self.projection_op.map_or("-".to_string(), |o| format!("{o:?}"));
        format!("{}/{op}/{}", enum_name(&self.variant), enum_name(&self.fusion_mode))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u8,
    pub dsc: f64,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(flatten)]
    pub cell: RunCell,
    pub params: usize,
    pub final_loss: f64,
    pub scores: Vec<ClassScore>,
    pub seconds: f64,
    pub axis_weights: Vec<AxisWeightRow>,
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// Grid cells in run order. Variants that ignore the projection op get a
/// single cell per fusion mode.
pub fn cells(m: &Matrix) -> Vec<RunCell> {
    let mut out = Vec::new();
    for &variant in &m.variants {
        let ops: Vec<Option<ProjectionOp>> =
            if variant.projects() { m.projection_ops.iter().copied().map(Some).collect() } else { vec![None] };
        for op in ops {
            for &fusion_mode in &m.fusion_modes {
                out.push(RunCell { variant, projection_op: op, fusion_mode });
            }
        }
    }
    out
}

pub fn format_table(rows: &[AblationRow], classes: &[u8]) -> String {
    let mut s = format!("{:<10}{:<14}{:<9}{:>9}{:>10}", "variant", "projection", "fusion", "params", "loss");
    for c in classes {
        s.push_str(&format!("{:>9}{:>9}", format!("dsc{c}"), format!("hd95_{c}")));
    }
    s.push_str(&format!("{:>9}\n", "secs"));
    for r in rows {
        let op = r.cell.projection_op.map_or("-".to_string(), |o| format!("{o:?}"));
        s.push_str(&format!(
            "{:<10}{:<14}{:<9}{:>9}{:>10.5}",
            enum_name(&r.cell.variant),
            op,
            enum_name(&r.cell.fusion_mode),
            r.params,
            r.final_loss
        ));
        for c in classes {
            match r.scores.iter().find(|x| x.class == *c) {
                Some(x) => {
                    let hd = x.hd95.map_or("-".to_string(), |v| format!("{v:.2}"));
                    s.push_str(&format!("{:>9.4}{:>9}", x.dsc, hd));
                }
                None => s.push_str(&format!("{:>9}{:>9}", "-", "-")),
            }
        }
        s.push_str(&format!("{:>9.1}\n", r.seconds));
    }
    s
}

pub fn run(matrix_path: &Path, out: Option<&Path>, overrides: &TrainOverrides) -> Result<bool> {
    let m: Matrix = read_json(Some(matrix_path))?;
    let mut file = TrainFile { data: m.data.as_ref().map(|d| relative_to(Some(matrix_path), d)), train: m.train.clone() };
    overrides.apply(&mut file);
    let Some(data) = file.data.clone() else {
        bail!("no dataset: set `data` in the matrix or pass --data");
    };
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| relative_to(Some(matrix_path), &m.out));
    let grid = cells(&m);
    if grid.is_empty() {
        bail!("the matrix has no cells");
    }
    let (train_cases, val_cases) = load_splits(&data)?;
    if train_cases.is_empty() {
        bail!("no training cases in {}", data.display());
    }
    let eval_cases = if val_cases.is_empty() { &train_cases } else { &val_cases };
    log::info!(
        "{} runs; scoring on {} {} cases",
        grid.len(),
        eval_cases.len(),
        if val_cases.is_empty() { "training" } else { "validation" }
    );

    let mut rows = Vec::new();
    for cell in grid {
        let mut cfg = file.train.clone();
        cfg.net.variant = cell.variant;
        cfg.net.projection_op = cell.projection_op.unwrap_or(cfg.net.projection_op);
        cfg.net.fusion_mode = cell.fusion_mode;
        cfg.validate()?;
        let t0 = Instant::now();
        let mut trainer = Trainer::new(&cfg, &train_cases)?;
        let log = trainer.run(None, |_| {})?;
        let report =
            score(&trainer.net, &trainer.store, eval_cases, cfg.patch.patch_shape, m.overlap, &m.classes)?;
        let row = AblationRow {
            params: param_count(&trainer.store),
            final_loss: log.last().map_or(f64::NAN, |e| e.loss),
            scores: report
                .classes
                .iter()
                .map(|c| ClassScore { class: c.class, dsc: c.mean_dsc, hd95: c.mean_hd95 })
                .collect(),
            seconds: t0.elapsed().as_secs_f64(),
            axis_weights: trainer.net.axis_weights(&trainer.store),
            cell,
        };
        log::info!("{} loss {:.5} in {:.1}s", row.cell.label(), row.final_loss, row.seconds);
        rows.push(row);
    }

    let mut text = format_table(&rows, &m.classes);
    for r in &rows {
        text.push_str(&format!("\naxis weights, {}\n", r.cell.label()));
        text.push_str(&format_axis_weights(&r.axis_weights));
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join(RESULTS_FILE), serde_json::to_string_pretty(&rows)?)?;
    fs::write(out.join(TABLE_FILE), &text)?;
    print!("{text}");
    println!("results in {}", out.display());
    Ok(true)
}
