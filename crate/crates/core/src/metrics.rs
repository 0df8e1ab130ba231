//! Subgroup accuracy/AUC, disparity gaps, and training diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-subgroup values with their group-average and minimum.
///
/// `average` is the unweighted mean over present subgroups, not the sample
/// mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMetrics {
    /// Indexed by subgroup id; `None` where the subgroup is absent or the
    /// metric is undefined.
    pub values: Vec<Option<f64>>,
    pub average: f64,
    pub worst: f64,
    /// Lowest id among the subgroups attaining `worst`.
    pub worst_group: usize,
    pub best: f64,
}

impl SubgroupMetrics {
    pub fn from_values(values: Vec<Option<f64>>) -> Result<Self> {
        let present: Vec<(usize, f64)> = values
            .iter()
            .enumerate()
            .filter_map(|(g, v)| v.map(|v| (g, v)))
            .collect();
        if present.is_empty() {
            return Err(Error::Empty("no subgroup has a defined metric"));
        }
        let average = present.iter().map(|(_, v)| v).sum::<f64>() / present.len() as f64;
        let (worst_group, worst) =
            present
                .iter()
                .copied()
                .fold((usize::MAX, f64::INFINITY), |acc, (g, v)| {
                    if v < acc.1 {
                        (g, v)
                    } else {
                        acc
                    }
                });
        let best = present
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(SubgroupMetrics {
            values,
            average,
            worst,
            worst_group,
            best,
        })
    }

    pub fn get(&self, g: usize) -> Option<f64> {
        self.values.get(g).copied().flatten()
    }

    /// Mean of the present values among `groups`.
    pub fn slice_mean(&self, groups: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = groups.iter().filter_map(|&g| self.get(g)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Accuracy per subgroup id in `0..num_groups`.
pub fn subgroup_accuracy(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> Result<SubgroupMetrics> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::shape(
            "subgroup_accuracy",
            labels.len(),
            format!("{} predictions, {} groups", predictions.len(), groups.len()),
        ));
    }
    let mut correct = vec![0usize; num_groups];
    let mut total = vec![0usize; num_groups];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
        if g >= num_groups {
            return Err(Error::InvalidArgument(format!(
                "group id {g} >= {num_groups}"
            )));
        }
        total[g] += 1;
        if p == y {
            correct[g] += 1;
        }
    }
    SubgroupMetrics::from_values(
        correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect(),
    )
}

/// Negative set for [`subgroup_auc`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucNegatives {
    /// Other-class samples sharing the attribute value.
    #[default]
    AttributeSlice,
    /// Other-class samples from every attribute value.
    All,
}

/// Mann–Whitney AUC: probability a random positive outranks a random
/// negative, ties counted one half. `None` if either side is empty.
pub fn mann_whitney_auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based average rank of the tie block
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let p = positives.len() as f64;
    let n = negatives.len() as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUC of class `class` among samples with attribute `attribute`.
///
/// `scores[i]` is the score for class `class` on sample `i`.
pub fn subgroup_auc(
    scores: &[f64],
    labels: &[usize],
    attributes: &[usize],
    class: usize,
    attribute: usize,
    negatives: AucNegatives,
) -> Option<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for ((&s, &y), &a) in scores.iter().zip(labels).zip(attributes) {
        if y == class {
            if a == attribute {
                pos.push(s);
            }
        } else if a == attribute || negatives == AucNegatives::All {
            neg.push(s);
        }
    }
    mann_whitney_auc(&pos, &neg)
}

/// Per-subgroup AUCs; `class_scores[i][c]` is the class-`c` score of sample `i`.
pub fn subgroup_auc_metrics(
    class_scores: &[Vec<f64>],
    labels: &[usize],
    attributes: &[usize],
    num_classes: usize,
    num_attributes: usize,
    negatives: AucNegatives,
) -> Result<SubgroupMetrics> {
    let values = (0..num_classes * num_attributes)
        .map(|g| {
            let (c, a) = (g / num_attributes, g % num_attributes);
            let scores: Vec<f64> = class_scores.iter().map(|row| row[c]).collect();
            subgroup_auc(&scores, labels, attributes, c, a, negatives)
        })
        .collect();
    SubgroupMetrics::from_values(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub delta_best_worst: f64,
    pub delta_avg_worst: f64,
    /// `max − min` within each class's subgroups; `None` for classes with
    /// fewer than one present subgroup.
    pub class_deltas: Vec<Option<f64>>,
    pub class_delta_mean: Option<f64>,
}

/// Gaps between best, group-average and worst subgroup values.
/// `class_partition[c]` lists the subgroup ids belonging to class `c`.
pub fn disparity(metrics: &SubgroupMetrics, class_partition: &[Vec<usize>]) -> DisparityReport {
    let class_deltas: Vec<Option<f64>> = class_partition
        .iter()
        .map(|groups| {
            let vals: Vec<f64> = groups.iter().filter_map(|&g| metrics.get(g)).collect();
            if vals.is_empty() {
                return None;
            }
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            Some(max - min)
        })
        .collect();
    let defined: Vec<f64> = class_deltas.iter().flatten().copied().collect();
    DisparityReport {
        delta_best_worst: metrics.best - metrics.worst,
        delta_avg_worst: (metrics.average - metrics.worst).max(0.0),
        class_delta_mean: (!defined.is_empty())
            .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        class_deltas,
    }
}

/// Subgroup ids of each class for a `(class, attribute)` grid.
pub fn class_partition(num_classes: usize, num_attributes: usize) -> Vec<Vec<usize>> {
    (0..num_classes)
        .map(|c| {
            (0..num_attributes)
                .map(|a| c * num_attributes + a)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSetComposition {
    pub size: usize,
    /// Share of the error set per subgroup id.
    pub fractions: Vec<f64>,
    pub bias_conflicting_share: f64,
}

/// Subgroup make-up of an error set. `groups` maps dataset index to subgroup.
pub fn error_set_composition(
    error_set: &[usize],
    groups: &[usize],
    num_groups: usize,
    bias_conflicting: &[usize],
) -> Result<ErrorSetComposition> {
    if error_set.is_empty() {
        return Err(Error::Empty("error set"));
    }
    let mut counts = vec![0usize; num_groups];
    for &i in error_set {
        let g = *groups
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("index {i} outside group map")))?;
        counts[g] += 1;
    }
    let n = error_set.len() as f64;
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let bc = counts
        .iter()
        .enumerate()
        .filter(|(g, _)| bias_conflicting.contains(g))
        .map(|(_, &c)| c)
        .sum::<usize>() as f64
        / n;
    Ok(ErrorSetComposition {
        size: error_set.len(),
        fractions,
        bias_conflicting_share: bc,
    })
}
