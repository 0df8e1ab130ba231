use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use debias_core::datasets::{
    generate_with_holdout, load_csv, split, CsvSchema, Dataset, HoldoutCounts, SplitSet,
    SubgroupSpec,
};
use debias_core::experiment::{default_group_name, BenchmarkPreset, EvalConfig};
use debias_core::methods::{Method, MethodConfig};
use debias_core::som::SomConfig;

pub const OUTPUT_ENV: &str = "DEBIAS_OUTPUT_DIR";

/// Raised for anything wrong with the config itself; maps to exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("invalid config: {0}")]
pub struct ValidationError(pub String);

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ValidationError(msg.into()).into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub methods: Vec<MethodEntry>,
    #[serde(default)]
    pub eval: EvalBlock,
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// The built-in two-class, two-attribute benchmark.
    Preset { name: String },
    Synthetic {
        spec: SubgroupSpec,
        dim_core: usize,
        dim_spurious: usize,
        /// Separately generated validation/test sets; without it the
        /// generated rows are split by `[split]`.
        #[serde(default)]
        holdout: Option<HoldoutCounts>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub stratify: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: [0.6, 0.2, 0.2],
            stratify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub id: String,
    #[serde(default)]
    pub config: MethodConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    /// One name per subgroup, in id order (`label * num_attributes + attribute`).
    pub group_names: Option<Vec<String>>,
    /// Names of bias-conflicting subgroups.
    pub bias_conflicting: Option<Vec<String>>,
    pub som: Option<SomConfig>,
    pub metric: Option<debias_core::experiment::MetricKind>,
    pub auc_negatives: Option<debias_core::metrics::AucNegatives>,
    pub som_split: Option<debias_core::experiment::SomSplit>,
}

/// A validated config with everything resolved.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: RunConfig,
    pub output_dir: PathBuf,
    pub methods: Vec<(Method, MethodConfig)>,
    pub group_names: Vec<String>,
    pub eval: EvalConfig,
    /// Directory the config file lives in; relative dataset paths resolve here.
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        match toml::from_str(&text) {
            Ok(c) => Ok(c),
            Err(e) => invalid(format!("{}: {}", path.display(), e.message())),
        }
    }
}

fn preset(name: &str) -> Result<BenchmarkPreset> {
    match name {
        "isic_analog" => Ok(BenchmarkPreset::isic_analog()),
        other => invalid(format!("dataset.name: unknown preset `{other}`")),
    }
}

/// `(classes, attributes)` of the configured dataset, without building it.
fn shape(cfg: &RunConfig, base: &Path) -> Result<(usize, usize)> {
    match &cfg.dataset {
        DatasetConfig::Preset { name } => {
            let p = preset(name)?;
            Ok((p.spec.num_classes, p.spec.num_attributes))
        }
        DatasetConfig::Synthetic { spec, .. } => {
            if let Err(e) = spec.validate() {
                return invalid(format!("dataset.spec: {e}"));
            }
            Ok((spec.num_classes, spec.num_attributes))
        }
        DatasetConfig::Csv { path, schema } => {
            let ds = match load_csv(&base.join(path), schema) {
                Ok(ds) => ds,
                Err(e) => return invalid(format!("dataset.path: {e}")),
            };
            Ok((ds.num_classes(), ds.num_attributes()))
        }
    }
}

pub fn plan(config: RunConfig, config_path: &Path) -> Result<Plan> {
    let base_dir = config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    if config.seeds.is_empty() {
        return invalid("seeds: need at least one seed");
    }
    let mut seen = config.seeds.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != config.seeds.len() {
        return invalid("seeds: duplicate seed");
    }
    if config.workers == 0 {
        return invalid("workers: must be >= 1");
    }
    if config.methods.is_empty() {
        return invalid("methods: need at least one method");
    }
    let mut methods = Vec::new();
    for (k, entry) in config.methods.iter().enumerate() {
        let method: Method = match entry.id.parse() {
            Ok(m) => m,
            Err(_) => return invalid(format!("methods[{k}].id: unknown method id `{}`", entry.id)),
        };
        if methods.iter().any(|(m, _)| *m == method) {
            return invalid(format!("methods[{k}].id: `{}` listed twice", entry.id));
        }
        if let Err(e) = entry.config.validate(method) {
            return invalid(format!("methods[{k}] ({}): {e}", entry.id));
        }
        methods.push((method, entry.config.clone()));
    }
    let s = &config.split.fractions;
    if s.iter().any(|f| !(*f >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid("split.fractions: must be nonnegative and sum to 1");
    }

    let (classes, attributes) = shape(&config, &base_dir)?;
    let groups = classes * attributes;
    let group_names = match &config.eval.group_names {
        Some(names) if names.len() != groups => {
            return invalid(format!(
                "eval.group_names: expected {groups} names, got {}",
                names.len()
            ))
        }
        Some(names) => names.clone(),
        None => (0..groups)
            .map(|g| default_group_name(g, attributes))
            .collect(),
    };
    let mut eval = match &config.dataset {
        DatasetConfig::Preset { name } => preset(name)?.eval_config(),
        _ => EvalConfig::default(),
    };
    if let Some(bc) = &config.eval.bias_conflicting {
        eval.bias_conflicting = Vec::new();
        for name in bc {
            match group_names.iter().position(|n| n == name) {
                Some(g) => eval.bias_conflicting.push(g),
                None => {
                    return invalid(format!("eval.bias_conflicting: no subgroup named `{name}`"))
                }
            }
        }
    }
    if let Some(som) = config.eval.som {
        if som.height == 0 || som.width == 0 || !(som.alpha0 > 0.0) || !(som.sigma0 > 0.0) {
            return invalid("eval.som: grid must be non-empty and alpha0, sigma0 > 0");
        }
        eval.som = som;
    }
    if let Some(m) = config.eval.metric {
        eval.metric = m;
    }
    if let Some(n) = config.eval.auc_negatives {
        eval.auc_negatives = n;
    }
    if let Some(s) = config.eval.som_split {
        eval.som_split = s;
    }

    let output_dir = match std::env::var_os(OUTPUT_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ if config.output_dir.is_relative() => base_dir.join(&config.output_dir),
        _ => config.output_dir.clone(),
    };
    Ok(Plan {
        config,
        output_dir,
        methods,
        group_names,
        eval,
        base_dir,
    })
}

impl Plan {
    /// Dataset and splits for one seed.
    pub fn build(&self, seed: u64) -> debias_core::Result<(Dataset, SplitSet)> {
        let sp = &self.config.split;
        match &self.config.dataset {
            DatasetConfig::Preset { name } => {
                // validated in `plan`
                preset(name).expect("known preset").build(seed)
            }
            DatasetConfig::Synthetic {
                spec,
                dim_core,
                dim_spurious,
                holdout: Some(h),
            } => generate_with_holdout(spec, h, *dim_core, *dim_spurious, seed),
            DatasetConfig::Synthetic {
                spec,
                dim_core,
                dim_spurious,
                holdout: None,
            } => {
                let ds = debias_core::datasets::generate(spec, *dim_core, *dim_spurious, seed)?;
                let s = split(&ds, sp.fractions, seed, sp.stratify)?;
                Ok((ds, s))
            }
            DatasetConfig::Csv { path, schema } => {
                let ds = load_csv(&self.base_dir.join(path), schema)?;
                let s = split(&ds, sp.fractions, seed, sp.stratify)?;
                Ok((ds, s))
            }
        }
    }
}
