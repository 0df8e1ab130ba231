use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::SgdConfig;
use crate::error::{Error, Result};

use super::model::ArchConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Iw,
    Gdro,
    GdroAdj,
    Jtt,
    Dann,
    Dfr,
    Proposed,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Erm,
        Method::Iw,
        Method::Gdro,
        Method::GdroAdj,
        Method::Jtt,
        Method::Dann,
        Method::Dfr,
        Method::Proposed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Iw => "iw",
            Method::Gdro => "gdro",
            Method::GdroAdj => "gdro_adj",
            Method::Jtt => "jtt",
            Method::Dann => "dann",
            Method::Dfr => "dfr",
            Method::Proposed => "proposed",
        }
    }

    pub fn has_domain_head(self) -> bool {
        matches!(self, Method::Dann | Method::Proposed)
    }

    /// Model selection used when the config leaves it unset.
    pub fn default_selection(self) -> Selection {
        match self {
            Method::Erm | Method::Dfr | Method::Jtt => Selection::Average,
            _ => Selection::WorstGroup,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method id `{s}`")))
    }
}

/// Which validation metric picks the returned epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    WorstGroup,
    Average,
    Last,
}

/// How JTT builds its error set from the stage-1 model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum ErrorSetRule {
    Misclassified,
    /// The given fraction of training samples with the largest loss.
    TopLoss {
        fraction: f64,
    },
}

/// Training hyperparameters. None of the defaults come from a published
/// setting; they are chosen for the desk-scale models here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adversary step size for the subgroup weights.
    pub eta_q: f64,
    /// Group-adjustment scale `C` in `C/√N_g`.
    pub adj_c: f64,
    /// JTT stage-1 epochs.
    pub jtt_epochs: usize,
    pub jtt_lambda: f64,
    pub jtt_error_rule: ErrorSetRule,
    pub dann_lambda: f64,
    /// Proposed method: use adjusted losses in the adversary.
    pub proposed_adjust: bool,
    pub per_group_finetune: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
    pub finetune_warm_start: bool,
    pub selection: Option<Selection>,
    pub arch: ArchConfig,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            epochs: 30,
            batch_size: 512,
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 1e-3,
            eta_q: 0.05,
            adj_c: 1.0,
            jtt_epochs: 1,
            jtt_lambda: 20.0,
            jtt_error_rule: ErrorSetRule::Misclassified,
            dann_lambda: 1.0,
            proposed_adjust: true,
            per_group_finetune: 100,
            finetune_epochs: 200,
            finetune_lr: 0.1,
            finetune_batch_size: 512,
            finetune_warm_start: false,
            selection: None,
            arch: ArchConfig::default(),
        }
    }
}

impl MethodConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn finetune_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.finetune_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn selection_for(&self, method: Method) -> Selection {
        self.selection.unwrap_or_else(|| method.default_selection())
    }

    pub fn validate(&self, method: Method) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidArgument(format!("{field}: {why}")));
        self.sgd().validate()?;
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.eta_q >= 0.0 && self.eta_q.is_finite()) {
            return bad("eta_q", "must be finite and >= 0");
        }
        if !(self.adj_c >= 0.0 && self.adj_c.is_finite()) {
            return bad("adj_c", "must be finite and >= 0");
        }
        if !(self.dann_lambda >= 0.0 && self.dann_lambda.is_finite()) {
            return bad("dann_lambda", "must be finite and >= 0");
        }
        if method == Method::Jtt {
            if !(self.jtt_lambda > 0.0 && self.jtt_lambda.is_finite()) {
                return bad("jtt_lambda", "must be > 0");
            }
            if let ErrorSetRule::TopLoss { fraction } = self.jtt_error_rule {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return bad("jtt_error_rule.fraction", "must be in (0, 1]");
                }
            }
        }
        if matches!(method, Method::Dfr | Method::Proposed) {
            if self.per_group_finetune == 0 {
                return bad("per_group_finetune", "must be >= 1");
            }
            if self.finetune_batch_size == 0 {
                return bad("finetune_batch_size", "must be >= 1");
            }
            self.finetune_sgd().validate()?;
        }
        if self.arch.repr_dim == 0 || self.arch.domain_hidden == 0 || self.arch.hidden.contains(&0)
        {
            return bad("arch", "layer widths must be >= 1");
        }
        Ok(())
    }
}
