//! Adversarial subgroup weights for group DRO.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point on the probability simplex over subgroups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights(Vec<f64>);

impl GroupWeights {
    pub fn uniform(n: usize) -> Self {
        GroupWeights(vec![1.0 / n as f64; n])
    }

    pub fn new(q: Vec<f64>) -> Result<Self> {
        let w = GroupWeights(q);
        if w.simplex_error() > 1e-9 || w.0.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "not on the simplex: {:?}",
                w.0
            )));
        }
        Ok(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `|Σq − 1|`, or infinity if any weight is negative or non-finite.
    pub fn simplex_error(&self) -> f64 {
        if self.0.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return f64::INFINITY;
        }
        (self.0.iter().sum::<f64>() - 1.0).abs()
    }
}

/// Exponentiated-gradient ascent step:
/// `q'_g = q_g·exp(η·L_g) / Σ_h q_h·exp(η·L_h)`, computed in the log domain.
pub fn gdro_weight_update(q: &GroupWeights, losses: &[f64], eta_q: f64) -> Result<GroupWeights> {
    let present: Vec<Option<f64>> = losses.iter().map(|&l| Some(l)).collect();
    gdro_weight_update_partial(q, &present, eta_q)
}

/// [`gdro_weight_update`] restricted to subgroups with a loss. Absent
/// subgroups keep their weight exactly; present ones share the remaining mass.
pub fn gdro_weight_update_partial(
    q: &GroupWeights,
    losses: &[Option<f64>],
    eta_q: f64,
) -> Result<GroupWeights> {
    if losses.len() != q.len() {
        return Err(Error::shape("gdro_weight_update", q.len(), losses.len()));
    }
    if !eta_q.is_finite() {
        return Err(Error::NonFinite("eta_q"));
    }
    if losses.iter().flatten().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("group losses"));
    }
    let present_mass: f64 =
        q.0.iter()
            .zip(losses)
            .filter(|(_, l)| l.is_some())
            .map(|(w, _)| w)
            .sum();
    if present_mass <= 0.0 {
        return Ok(q.clone());
    }
    let logits: Vec<Option<f64>> =
        q.0.iter()
            .zip(losses)
            .map(|(&w, l)| {
                l.map(|l| {
                    if w > 0.0 {
                        w.ln() + eta_q * l
                    } else {
                        f64::NEG_INFINITY
                    }
                })
            })
            .collect();
    let max = logits
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<Option<f64>> = logits.iter().map(|l| l.map(|l| (l - max).exp())).collect();
    let z: f64 = unnorm.iter().flatten().sum();
    let absent_mass = 1.0 - present_mass;
    let out: Vec<f64> =
        q.0.iter()
            .zip(&unnorm)
            .map(|(&w, u)| match u {
                Some(u) => u / z * (1.0 - absent_mass),
                None => w,
            })
            .collect();
    Ok(GroupWeights(out))
}

/// `L_g + C/√N_g`, the loss the adversary sees under group adjustment.
pub fn adjusted_group_loss(loss: f64, group_size: usize, c: f64) -> Result<f64> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group size must be >= 1".into()));
    }
    Ok(loss + c / (group_size as f64).sqrt())
}

/// Mean loss per subgroup over a batch; `None` for subgroups not in the batch.
pub fn group_losses(per_sample: &[f64], groups: &[usize], num_groups: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; num_groups];
    let mut count = vec![0usize; num_groups];
    for (&l, &g) in per_sample.iter().zip(groups) {
        sum[g] += l;
        count[g] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect()
}
