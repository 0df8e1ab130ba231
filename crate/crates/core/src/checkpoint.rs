//! JSON checkpoint: `{"layers": [{"name", "rows", "cols", "data"}], "seed", "method"}`.
//!
//! Floats are written in shortest round-trip form, so save → load is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layers: Vec<Layer>,
    pub seed: u64,
    pub method: String,
}

impl Checkpoint {
    pub fn from_graphs<'a>(
        graphs: impl IntoIterator<Item = &'a Graph>,
        seed: u64,
        method: &str,
    ) -> Self {
        let layers = graphs
            .into_iter()
            .flat_map(|g| g.params())
            .map(|p| Layer {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect();
        Checkpoint {
            layers,
            seed,
            method: method.to_owned(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        for l in &ckpt.layers {
            if l.data.len() != l.rows * l.cols {
                return Err(Error::shape(
                    "checkpoint layer",
                    l.rows * l.cols,
                    l.data.len(),
                ));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Checkpoint::from_json(&s)
    }
}
