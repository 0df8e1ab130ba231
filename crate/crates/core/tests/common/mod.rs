#![allow(dead_code)]

use debias_core::autodiff::{per_sample_xent, GradReversal, Graph, GraphBuilder, Op};
use debias_core::datasets::{
    generate_with_holdout, Dataset, HoldoutCounts, SplitSet, SubgroupSpec,
};
use debias_core::methods::{ArchConfig, MethodConfig};
use debias_core::Tensor2;
use rand::Rng;

pub fn spec(counts: Vec<Vec<usize>>, core: f64, spur: f64, sigma: f64, hard: f64) -> SubgroupSpec {
    SubgroupSpec {
        num_classes: counts.len(),
        num_attributes: counts[0].len(),
        counts,
        core_separation: core,
        spurious_strength: spur,
        noise_sigma: sigma,
        hard_fraction: hard,
    }
}

/// A few hundred rows with a mild spurious correlation, train/val/test drawn
/// separately.
pub fn small_biased(seed: u64) -> (Dataset, SplitSet) {
    let s = spec(vec![vec![120, 60], vec![60, 20]], 3.0, 4.0, 1.0, 0.1);
    let holdout = HoldoutCounts {
        val: vec![vec![20, 20], vec![20, 20]],
        test: vec![vec![30, 30], vec![30, 30]],
    };
    generate_with_holdout(&s, &holdout, 2, 2, seed).unwrap()
}

pub fn small_balanced(seed: u64, core: f64) -> (Dataset, SplitSet) {
    let s = spec(vec![vec![60, 60], vec![60, 60]], core, 2.0, 1.0, 0.0);
    let holdout = HoldoutCounts {
        val: vec![vec![25, 25], vec![25, 25]],
        test: vec![vec![25, 25], vec![25, 25]],
    };
    generate_with_holdout(&s, &holdout, 2, 2, seed).unwrap()
}

pub fn fast_cfg() -> MethodConfig {
    MethodConfig {
        epochs: 4,
        batch_size: 32,
        jtt_epochs: 1,
        per_group_finetune: 10,
        finetune_epochs: 5,
        finetune_batch_size: 16,
        arch: ArchConfig {
            hidden: vec![8],
            repr_dim: 6,
            domain_hidden: 4,
        },
        ..MethodConfig::default()
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// Random dense/ReLU chain with at most one reversal node somewhere inside.
/// Returns the graph and the reversal strength (1 when absent).
pub fn random_net<R: Rng>(rng: &mut R) -> (Graph, f64) {
    let input = rng.random_range(1..=4);
    let layers = rng.random_range(1..=3);
    let reversal_at = rng.random_range(0..=layers);
    let lambda = rng.random_range(0.1..2.0);
    let with_reversal = rng.random_bool(0.7);
    let mut b = GraphBuilder::new("net", input);
    for l in 0..layers {
        if with_reversal && l == reversal_at {
            b = b.reversal(GradReversal::new(lambda).unwrap());
        }
        b = b.dense(rng.random_range(1..=5), rng);
        if l + 1 < layers {
            b = b.relu();
        }
    }
    if with_reversal && reversal_at == layers {
        b = b.reversal(GradReversal::new(lambda).unwrap());
    }
    let g = b.build();
    (g, if with_reversal { lambda } else { 1.0 })
}

/// Sign-and-scale factor each parameter's gradient picks up from reversal
/// nodes downstream of it: `-λ` per reversal.
pub fn reversal_factors(g: &Graph) -> (Vec<f64>, f64) {
    let mut factors = vec![1.0; g.params().len()];
    let mut downstream = 1.0;
    for op in g.ops().iter().rev() {
        match op {
            Op::Dense { weight, bias } => {
                factors[*weight] = downstream;
                factors[*bias] = downstream;
            }
            Op::Relu => {}
            Op::Reversal(r) => downstream *= -r.lambda(),
        }
    }
    (factors, downstream)
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±h step crossed a ReLU kink.
    pub skipped: usize,
}

impl GradCheck {
    fn merge(&mut self, other: GradCheck) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

const H: f64 = 1e-5;
/// Relative error is taken against `max(|a|, |n|, REL_FLOOR)`.
const REL_FLOOR: f64 = 1e-4;
/// A second difference above this means the step left the linear piece.
const KINK: f64 = 1e-8;

fn compare(analytic: f64, plus: f64, minus: f64, center: f64, factor: f64, acc: &mut GradCheck) {
    if (plus - 2.0 * center + minus).abs() > KINK {
        acc.skipped += 1;
        return;
    }
    let numeric = factor * (plus - minus) / (2.0 * H);
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    acc.max_rel_err = acc.max_rel_err.max((analytic - numeric).abs() / denom);
    acc.checked += 1;
}

/// Check `backward_xent` of `g` on a random batch against central differences
/// of the weighted cross-entropy, for every parameter and input coordinate.
/// Parameters upstream of a reversal must come out scaled by `-λ`.
pub fn check_xent_gradients<R: Rng>(g: &mut Graph, rng: &mut R) -> GradCheck {
    let batch = rng.random_range(1..=4);
    let x = random_tensor(rng, batch, g.input_width(), 1.5);
    let classes = g.output_width();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let weights: Vec<f64> = (0..batch).map(|_| rng.random_range(0.1..1.0)).collect();
    let loss = |g: &Graph, x: &Tensor2| -> f64 {
        let l = per_sample_xent(&g.infer(x).unwrap(), &labels).unwrap();
        l.iter().zip(&weights).map(|(l, w)| l * w).sum()
    };

    g.forward(&x).unwrap();
    let bp = g.backward_xent(&labels, &weights).unwrap();
    let (factors, input_factor) = reversal_factors(g);
    let center = loss(g, &x);
    let mut acc = GradCheck::default();

    let base: Vec<Tensor2> = g.params().iter().map(|p| p.value.clone()).collect();
    for (pi, grad) in bp.grads.iter().enumerate() {
        for k in 0..base[pi].data().len() {
            let mut vals = base.clone();
            vals[pi].data_mut()[k] += H;
            g.set_params(vals.clone()).unwrap();
            let plus = loss(g, &x);
            vals[pi].data_mut()[k] -= 2.0 * H;
            g.set_params(vals).unwrap();
            let minus = loss(g, &x);
            compare(grad.data()[k], plus, minus, center, factors[pi], &mut acc);
        }
    }
    g.set_params(base).unwrap();

    let mut input_acc = GradCheck::default();
    for k in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[k] += H;
        let plus = loss(g, &xp);
        xp.data_mut()[k] -= 2.0 * H;
        let minus = loss(g, &xp);
        compare(
            bp.input_grad.data()[k],
            plus,
            minus,
            center,
            input_factor,
            &mut input_acc,
        );
    }
    acc.merge(input_acc);
    acc
}
