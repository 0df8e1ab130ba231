use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Main,
    /// JTT identification run.
    Stage1,
    /// JTT upweighted retraining.
    Stage2,
    /// Head-only retraining on a balanced set.
    Finetune,
}

/// Diagnostics of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean unweighted per-sample task loss over the epoch's stream.
    pub train_loss: f64,
    /// Mean per-sample loss of each subgroup over the epoch.
    pub group_losses: Vec<Option<f64>>,
    /// Subgroup weights at the end of the epoch (GDRO-style methods).
    pub group_weights: Option<Vec<f64>>,
    /// Subgroup weights averaged over the epoch's steps.
    pub mean_group_weights: Option<Vec<f64>>,
    /// Losses as seen by the adversary (adjusted when enabled).
    pub adversary_losses: Option<Vec<Option<f64>>>,
    /// Largest `|Σq − 1|` observed after any step of the epoch.
    pub max_simplex_error: Option<f64>,
    pub val_accuracy: Option<Vec<Option<f64>>>,
    pub val_average: Option<f64>,
    pub val_worst: Option<f64>,
    /// Per-subgroup accuracy of the domain head on the validation rows.
    pub domain_accuracy: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned by model selection, if any.
    pub selected: Option<(Stage, usize)>,
    /// JTT: error-set size per subgroup.
    pub error_set_counts: Option<Vec<usize>>,
    /// Fine-tuning set drew with replacement.
    pub finetune_with_replacement: Option<bool>,
}

impl Trajectory {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(s: &str) -> Result<Vec<EpochRecord>> {
        s.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |e| e.stage == stage)
    }

    /// Mean over epochs of `mean_group_weights`, for the given stage.
    pub fn mean_weights(&self, stage: Stage) -> Option<Vec<f64>> {
        let rows: Vec<&Vec<f64>> = self
            .stage(stage)
            .filter_map(|e| e.mean_group_weights.as_ref())
            .collect();
        let first = rows.first()?;
        let mut acc = vec![0.0; first.len()];
        for r in &rows {
            for (a, v) in acc.iter_mut().zip(r.iter()) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= rows.len() as f64;
        }
        Some(acc)
    }
}
