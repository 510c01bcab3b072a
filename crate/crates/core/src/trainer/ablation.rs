//! NAL ablation grid: one model per (weight, negative source, loss type).

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainData};
use crate::dataset::TrainingExample;
use crate::error::Result;
use crate::evaluation::{format_report, hit_at_k_all, predict, RunMetrics};
use crate::losses::{NalConfig, NalLossType, NegativeMode};
use crate::model::Kernel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub w_nal: f64,
    pub mode: NegativeMode,
    pub loss: NalLossType,
}

impl AblationCell {
    pub fn name(&self) -> String {
        if self.w_nal == 0.0 {
            return "w_nal=0".into();
        }
        let mode = match self.mode {
            NegativeMode::InBatch => "in_batch",
            NegativeMode::Impression => "impression",
        };
        let loss = match self.loss {
            NalLossType::SampledSoftmax => "ssm",
            NalLossType::CrossEntropy => "ce",
        };
        format!("w_nal={:e} {mode} {loss}", self.w_nal)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub w_nal: Vec<f64>,
    pub modes: Vec<NegativeMode>,
    pub losses: Vec<NalLossType>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            w_nal: vec![0.0, 1e-4, 1e-3, 1e-2, 1e-1],
            modes: vec![NegativeMode::InBatch, NegativeMode::Impression],
            losses: vec![NalLossType::SampledSoftmax, NalLossType::CrossEntropy],
        }
    }
}

impl AblationGrid {
    /// Grid cells; a zero weight makes mode and loss irrelevant, so it
    /// appears once.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &w_nal in &self.w_nal {
            for &mode in &self.modes {
                for &loss in &self.losses {
                    let cell = AblationCell { w_nal, mode, loss };
                    if w_nal != 0.0 || !out.iter().any(|c: &AblationCell| c.w_nal == 0.0) {
                        out.push(cell);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub k: usize,
    pub rows: Vec<(AblationCell, RunMetrics)>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let runs: Vec<RunMetrics> = self.rows.iter().map(|(_, m)| m.clone()).collect();
        let base = self.rows.iter().find(|(c, _)| c.w_nal == 0.0).map(|(_, m)| m.name.as_str());
        format_report(&runs, self.k, base)
    }
}

pub fn run_ablation(
    data: &TrainData<'_>,
    eval: &[TrainingExample],
    base: &TrainConfig,
    grid: &AblationGrid,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for cell in grid.cells() {
        let cfg = TrainConfig {
            nal: Some(NalConfig {
                w_nal: cell.w_nal,
                mode: cell.mode,
                loss: cell.loss,
                ..base.nal.clone().unwrap_or_default()
            }),
            use_sequence: true,
            ..base.clone()
        };
        let out = train(data, &cfg)?;
        let items = predict(&out.model, eval, &data.users, &cfg.nn, Kernel::Fused, cfg.parallelism)?;
        rows.push((
            cell,
            RunMetrics {
                name: cell.name(),
                hit: hit_at_k_all(&items, 3, &cfg.head),
            },
        ));
    }
    Ok(AblationTable { k: 3, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_one_zero_row() {
        let cells = AblationGrid::default().cells();
        assert_eq!(cells.len(), 1 + 4 * 4);
        assert_eq!(cells.iter().filter(|c| c.w_nal == 0.0).count(), 1);
    }

    #[test]
    fn single_cell_grid_gives_single_row() {
        let d = super::super::tests::small_data();
        let (train_ex, eval_ex) = d.split(4);
        let data = TrainData {
            examples: &train_ex,
            users: d.store.index(),
        };
        let grid = AblationGrid {
            w_nal: vec![1e-2],
            modes: vec![NegativeMode::Impression],
            losses: vec![NalLossType::SampledSoftmax],
        };
        let base = TrainConfig {
            steps: 2,
            batch_size: 8,
            ..Default::default()
        };
        let t = run_ablation(&data, &eval_ex, &base, &grid).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.render().lines().count(), 2);
    }
}
