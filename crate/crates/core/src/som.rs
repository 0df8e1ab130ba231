//! Kohonen self-organizing map over representation vectors and the
//! subgroup purity of its nodes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor2;

/// Neighborhood width never decays below this, so `h` stays well defined.
const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SomConfig {
    pub height: usize,
    pub width: usize,
    pub epochs: usize,
    pub alpha0: f64,
    pub sigma0: f64,
}

impl Default for SomConfig {
    fn default() -> Self {
        SomConfig {
            height: 8,
            width: 8,
            epochs: 10,
            alpha0: 0.5,
            sigma0: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Node-major (`row * width + col`), `dim` values per node.
    pub prototypes: Vec<f64>,
}

impl SomGrid {
    pub fn nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn prototype(&self, node: usize) -> &[f64] {
        &self.prototypes[node * self.dim..(node + 1) * self.dim]
    }

    pub fn position(&self, node: usize) -> (usize, usize) {
        (node / self.width, node % self.width)
    }

    /// Best-matching unit: smallest squared distance, lowest index on ties.
    pub fn bmu(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for node in 0..self.nodes() {
            let d = sq_dist(self.prototype(node), z);
            if d < best_d {
                best_d = d;
                best = node;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Classic online Kohonen training.
///
/// Prototypes start as randomly chosen rows of `z`. Each epoch visits the rows
/// in a fresh random order; at global step `t` of `T`, the learning rate and
/// neighborhood width decay linearly, `α = α0·(1 − t/T)`,
/// `σ = max(σ0·(1 − t/T), σ_min)`, and every node moves by
/// `α · exp(−d²_lattice / 2σ²) · (z − w)`.
pub fn som_fit(z: &Tensor2, config: &SomConfig, seed: u64) -> Result<SomGrid> {
    if z.rows() == 0 || z.cols() == 0 {
        return Err(Error::Empty("representation matrix"));
    }
    if config.height == 0 || config.width == 0 {
        return Err(Error::InvalidArgument(
            "SOM grid must have at least one node".into(),
        ));
    }
    if !(config.alpha0 > 0.0 && config.sigma0 > 0.0) {
        return Err(Error::InvalidArgument(
            "alpha0 and sigma0 must be > 0".into(),
        ));
    }
    let mut rng = rng::stream(seed, "som");
    let dim = z.cols();
    let nodes = config.height * config.width;
    let mut prototypes = Vec::with_capacity(nodes * dim);
    if z.rows() >= nodes {
        let mut rows: Vec<usize> = (0..z.rows()).collect();
        rows.shuffle(&mut rng);
        for &r in &rows[..nodes] {
            prototypes.extend_from_slice(z.row(r));
        }
    } else {
        for _ in 0..nodes {
            prototypes.extend_from_slice(z.row(rng.random_range(0..z.rows())));
        }
    }
    let mut grid = SomGrid {
        height: config.height,
        width: config.width,
        dim,
        prototypes,
    };

    let total = (config.epochs * z.rows()) as f64;
    let mut order: Vec<usize> = (0..z.rows()).collect();
    let mut t = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &r in &order {
            let frac = 1.0 - t as f64 / total;
            let alpha = config.alpha0 * frac;
            let sigma = (config.sigma0 * frac).max(SIGMA_FLOOR);
            let x = z.row(r);
            let bmu = grid.bmu(x);
            let (br, bc) = grid.position(bmu);
            let denom = 2.0 * sigma * sigma;
            for node in 0..nodes {
                let (nr, nc) = (node / config.width, node % config.width);
                let d2 = (nr as f64 - br as f64).powi(2) + (nc as f64 - bc as f64).powi(2);
                let h = (-d2 / denom).exp();
                let step = alpha * h;
                if step == 0.0 {
                    continue;
                }
                let w = &mut grid.prototypes[node * dim..(node + 1) * dim];
                for (wv, &xv) in w.iter_mut().zip(x) {
                    *wv += step * (xv - *wv);
                }
            }
            t += 1;
        }
    }
    Ok(grid)
}

/// Samples per `(node, subgroup)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occupancy {
    pub num_groups: usize,
    /// `counts[node][group]`
    pub counts: Vec<Vec<usize>>,
    /// BMU of every mapped row, in input order.
    pub assignments: Vec<usize>,
}

impl Occupancy {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

pub fn som_assign(
    grid: &SomGrid,
    z: &Tensor2,
    groups: &[usize],
    num_groups: usize,
) -> Result<Occupancy> {
    if z.cols() != grid.dim {
        return Err(Error::shape("som_assign", grid.dim, z.cols()));
    }
    if groups.len() != z.rows() {
        return Err(Error::shape("som_assign groups", z.rows(), groups.len()));
    }
    let mut counts = vec![vec![0usize; num_groups]; grid.nodes()];
    let mut assignments = Vec::with_capacity(z.rows());
    for (r, &g) in groups.iter().enumerate() {
        if g >= num_groups {
            return Err(Error::InvalidArgument(format!(
                "group id {g} >= {num_groups}"
            )));
        }
        let node = grid.bmu(z.row(r));
        counts[node][g] += 1;
        assignments.push(node);
    }
    Ok(Occupancy {
        num_groups,
        counts,
        assignments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// `None` for empty nodes.
    pub per_node_purity: Vec<Option<f64>>,
    /// Majority subgroup of each occupied node (lowest id on ties).
    pub per_node_majority: Vec<Option<usize>>,
    /// `Σ_node max_g count / N`
    pub overall_purity: f64,
    /// Plain mean of per-node purity over occupied nodes.
    pub unweighted_purity: f64,
    pub group_totals: Vec<usize>,
}

pub fn purity(occupancy: &Occupancy) -> Result<PurityReport> {
    let n = occupancy.total();
    if n == 0 {
        return Err(Error::Empty("occupancy"));
    }
    let mut majority_sum = 0usize;
    let mut per_node_purity = Vec::with_capacity(occupancy.counts.len());
    let mut per_node_majority = Vec::with_capacity(occupancy.counts.len());
    let mut group_totals = vec![0usize; occupancy.num_groups];
    for node in &occupancy.counts {
        let count: usize = node.iter().sum();
        for (t, &c) in group_totals.iter_mut().zip(node) {
            *t += c;
        }
        if count == 0 {
            per_node_purity.push(None);
            per_node_majority.push(None);
            continue;
        }
        let (arg, &max) =
            node.iter().enumerate().fold(
                (0, &0usize),
                |acc, (g, c)| if *c > *acc.1 { (g, c) } else { acc },
            );
        majority_sum += max;
        per_node_purity.push(Some(max as f64 / count as f64));
        per_node_majority.push(Some(arg));
    }
    let occupied: Vec<f64> = per_node_purity.iter().flatten().copied().collect();
    Ok(PurityReport {
        overall_purity: majority_sum as f64 / n as f64,
        unweighted_purity: occupied.iter().sum::<f64>() / occupied.len() as f64,
        per_node_purity,
        per_node_majority,
        group_totals,
    })
}
