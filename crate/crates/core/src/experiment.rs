//! One `(seed, method)` cell: train, evaluate on test, map representations
//! onto a SOM, and flatten the results into a metric row.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasets::{Dataset, HoldoutCounts, SplitSet, SubgroupSpec};
use crate::error::{Error, Result};
use crate::methods::{self, extract_representations, Method, MethodConfig, ModelStack, Trajectory};
use crate::metrics::{
    class_partition, disparity, error_set_composition, subgroup_accuracy, subgroup_auc_metrics,
    AucNegatives, DisparityReport, ErrorSetComposition, SubgroupMetrics,
};
use crate::som::{purity, som_assign, som_fit, Occupancy, PurityReport, SomConfig, SomGrid};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Accuracy for two classes, AUC otherwise.
    #[default]
    Auto,
    Accuracy,
    Auc,
}

impl MetricKind {
    pub fn resolve(self, num_classes: usize) -> MetricKind {
        match self {
            MetricKind::Auto if num_classes > 2 => MetricKind::Auc,
            MetricKind::Auto => MetricKind::Accuracy,
            k => k,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Auto => "auto",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Auc => "auc",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SomSplit {
    #[default]
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub som: SomConfig,
    pub som_split: SomSplit,
    pub metric: MetricKind,
    pub auc_negatives: AucNegatives,
    /// Subgroup ids treated as bias-conflicting.
    pub bias_conflicting: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            som: SomConfig::default(),
            som_split: SomSplit::Test,
            metric: MetricKind::Auto,
            auc_negatives: AucNegatives::AttributeSlice,
            bias_conflicting: Vec::new(),
        }
    }
}

/// SOM lattice plus where the evaluated rows landed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomSummary {
    pub grid: SomGrid,
    pub occupancy: Occupancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub method: Method,
    pub metric: MetricKind,
    pub metrics: SubgroupMetrics,
    /// Subgroup accuracy regardless of `metric`, for cross-checks.
    pub accuracy: SubgroupMetrics,
    pub disparity: DisparityReport,
    pub purity: PurityReport,
    pub som: SomSummary,
    /// Per-subgroup test accuracy of the domain head, when present.
    pub domain_probe: Option<SubgroupMetrics>,
    /// Per-subgroup mean probability the domain head gives the true
    /// attribute. Unlike argmax accuracy it reads 0.5 for an indifferent head.
    pub domain_confidence: Option<SubgroupMetrics>,
    pub error_set: Option<ErrorSetComposition>,
    pub finetune_with_replacement: Option<bool>,
    pub encoder_checksum: u64,
}

/// Everything one cell produces.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub result: CellResult,
    pub trajectory: Trajectory,
    pub checkpoint: Checkpoint,
    pub model: ModelStack,
}

/// Per-subgroup accuracy of the domain head at predicting the attribute.
pub fn domain_probe_accuracy(
    model: &ModelStack,
    ds: &Dataset,
    indices: &[usize],
) -> Result<Option<SubgroupMetrics>> {
    match model.predict_domain(ds, indices)? {
        Some(pred) => Ok(Some(subgroup_accuracy(
            &pred,
            &ds.attributes_of(indices),
            &ds.groups_of(indices),
            ds.num_groups(),
        )?)),
        None => Ok(None),
    }
}

/// Per-subgroup mean softmax probability of the true attribute.
pub fn domain_probe_confidence(
    model: &ModelStack,
    ds: &Dataset,
    indices: &[usize],
) -> Result<Option<SubgroupMetrics>> {
    let Some(logits) = model.domain_logits(&ds.batch(indices))? else {
        return Ok(None);
    };
    let p = crate::autodiff::softmax(&logits);
    let mut sum = vec![0.0; ds.num_groups()];
    let mut count = vec![0usize; ds.num_groups()];
    for (r, &i) in indices.iter().enumerate() {
        sum[ds.group(i)] += p.get(r, ds.attribute(i));
        count[ds.group(i)] += 1;
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(Some(SubgroupMetrics::from_values(values)?))
}

/// Test-set metrics of a trained model.
pub fn evaluate(
    model: &ModelStack,
    ds: &Dataset,
    indices: &[usize],
    eval: &EvalConfig,
) -> Result<(MetricKind, SubgroupMetrics, SubgroupMetrics)> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let labels = ds.labels_of(indices);
    let groups = ds.groups_of(indices);
    let accuracy = subgroup_accuracy(
        &model.predict(ds, indices)?,
        &labels,
        &groups,
        ds.num_groups(),
    )?;
    let kind = eval.metric.resolve(ds.num_classes());
    let metrics = match kind {
        MetricKind::Auc => subgroup_auc_metrics(
            &model.class_scores(ds, indices)?,
            &labels,
            &ds.attributes_of(indices),
            ds.num_classes(),
            ds.num_attributes(),
            eval.auc_negatives,
        )?,
        _ => accuracy.clone(),
    };
    Ok((kind, metrics, accuracy))
}

/// Fit a SOM on the encoder's representations of `indices` and score purity.
pub fn representation_purity(
    model: &ModelStack,
    ds: &Dataset,
    indices: &[usize],
    som: &SomConfig,
    seed: u64,
) -> Result<(PurityReport, SomSummary)> {
    let z = extract_representations(model, ds, indices)?;
    let grid = som_fit(&z, som, seed)?;
    let occupancy = som_assign(&grid, &z, &ds.groups_of(indices), ds.num_groups())?;
    let report = purity(&occupancy)?;
    Ok((report, SomSummary { grid, occupancy }))
}

pub fn run_cell(
    ds: &Dataset,
    splits: &SplitSet,
    method: Method,
    cfg: &MethodConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<CellOutput> {
    let out = methods::train(method, ds, splits, cfg, seed)?;
    let model = out.model;
    let (metric, metrics, accuracy) = evaluate(&model, ds, &splits.test, eval)?;
    let disparity = disparity(
        &metrics,
        &class_partition(ds.num_classes(), ds.num_attributes()),
    );
    let som_rows = match eval.som_split {
        SomSplit::Test => &splits.test,
        SomSplit::Train => &splits.train,
    };
    let (purity, som) = representation_purity(&model, ds, som_rows, &eval.som, seed)?;
    let domain_probe = domain_probe_accuracy(&model, ds, &splits.test)?;
    let domain_confidence = domain_probe_confidence(&model, ds, &splits.test)?;
    let error_set = match &out.error_set {
        Some(set) if !set.is_empty() => {
            let groups: Vec<usize> = (0..ds.len()).map(|i| ds.group(i)).collect();
            Some(error_set_composition(
                set,
                &groups,
                ds.num_groups(),
                &eval.bias_conflicting,
            )?)
        }
        _ => None,
    };
    let result = CellResult {
        seed,
        method,
        metric,
        metrics,
        accuracy,
        disparity,
        purity,
        som,
        domain_probe,
        domain_confidence,
        error_set,
        finetune_with_replacement: out.trajectory.finetune_with_replacement,
        encoder_checksum: model.encoder_checksum(),
    };
    Ok(CellOutput {
        checkpoint: model.checkpoint(seed, method.as_str()),
        trajectory: out.trajectory,
        result,
        model,
    })
}

/// Default name of subgroup `g`: `y{label}_a{attribute}`.
pub fn default_group_name(g: usize, num_attributes: usize) -> String {
    format!("y{}_a{}", g / num_attributes, g % num_attributes)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Flat `(column, value)` pairs for the summary table. Floats use the
/// shortest round-trip representation.
pub fn metric_row(result: &CellResult, group_names: &[String]) -> Vec<(String, String)> {
    let mut row = vec![
        ("seed".to_owned(), result.seed.to_string()),
        ("method".to_owned(), result.method.to_string()),
        ("metric".to_owned(), result.metric.as_str().to_owned()),
        ("average".to_owned(), result.metrics.average.to_string()),
        ("worst".to_owned(), result.metrics.worst.to_string()),
        (
            "worst_group".to_owned(),
            group_names
                .get(result.metrics.worst_group)
                .cloned()
                .unwrap_or_else(|| result.metrics.worst_group.to_string()),
        ),
    ];
    for (g, name) in group_names.iter().enumerate() {
        row.push((
            format!("{}:{name}", result.metric.as_str()),
            fmt_opt(result.metrics.get(g)),
        ));
    }
    row.push((
        "delta_best_worst".to_owned(),
        result.disparity.delta_best_worst.to_string(),
    ));
    row.push((
        "delta_avg_worst".to_owned(),
        result.disparity.delta_avg_worst.to_string(),
    ));
    for (c, d) in result.disparity.class_deltas.iter().enumerate() {
        row.push((format!("delta_class{c}"), fmt_opt(*d)));
    }
    row.push((
        "delta_class_mean".to_owned(),
        fmt_opt(result.disparity.class_delta_mean),
    ));
    row.push((
        "purity".to_owned(),
        result.purity.overall_purity.to_string(),
    ));
    row.push((
        "purity_unweighted".to_owned(),
        result.purity.unweighted_purity.to_string(),
    ));
    for (g, name) in group_names.iter().enumerate() {
        row.push((
            format!("domain_acc:{name}"),
            fmt_opt(result.domain_probe.as_ref().and_then(|d| d.get(g))),
        ));
    }
    for (g, name) in group_names.iter().enumerate() {
        row.push((
            format!("domain_conf:{name}"),
            fmt_opt(result.domain_confidence.as_ref().and_then(|d| d.get(g))),
        ));
    }
    row.push((
        "error_set_bc_share".to_owned(),
        fmt_opt(result.error_set.as_ref().map(|e| e.bias_conflicting_share)),
    ));
    row.push((
        "encoder_checksum".to_owned(),
        format!("{:016x}", result.encoder_checksum),
    ));
    row
}

/// Synthetic stand-in for a two-class, two-attribute dataset in which the
/// attribute almost never co-occurs with class 1: training counts
/// `[[4843, 4890], [5205, 100]]`, subgroup 3 `(y=1, a=1)` is bias-conflicting.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkPreset {
    pub spec: SubgroupSpec,
    pub holdout: HoldoutCounts,
    pub dim_core: usize,
    pub dim_spurious: usize,
    pub bias_conflicting: Vec<usize>,
    pub bias_aligning_positive: usize,
}

impl BenchmarkPreset {
    pub fn isic_analog() -> Self {
        BenchmarkPreset {
            spec: SubgroupSpec {
                num_classes: 2,
                num_attributes: 2,
                counts: vec![vec![4843, 4890], vec![5205, 100]],
                core_separation: 3.0,
                spurious_strength: 8.0,
                noise_sigma: 1.0,
                hard_fraction: 0.1,
            },
            holdout: HoldoutCounts {
                val: vec![vec![400, 400], vec![400, 100]],
                test: vec![vec![500, 500], vec![500, 500]],
            },
            dim_core: 4,
            dim_spurious: 4,
            bias_conflicting: vec![3],
            bias_aligning_positive: 1,
        }
    }

    pub fn build(&self, seed: u64) -> Result<(Dataset, SplitSet)> {
        crate::datasets::generate_with_holdout(
            &self.spec,
            &self.holdout,
            self.dim_core,
            self.dim_spurious,
            seed,
        )
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            bias_conflicting: self.bias_conflicting.clone(),
            ..EvalConfig::default()
        }
    }
}
