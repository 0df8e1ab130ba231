//! Synthetic subgroup datasets, CSV ingestion, splits and resampled views.
//!
//! A subgroup is the `(class, attribute)` cell; its id is
//! `g = y * num_attributes + a`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor2;

/// Scale applied to the class mean of "hard" samples. Zero puts them at the
/// origin of the core block, leaving only noise there.
pub const HARD_CORE_SCALE: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subgroup {
    pub label: usize,
    pub attribute: usize,
}

impl Subgroup {
    pub fn id(self, num_attributes: usize) -> usize {
        self.label * num_attributes + self.attribute
    }

    pub fn from_id(g: usize, num_attributes: usize) -> Self {
        Subgroup {
            label: g / num_attributes,
            attribute: g % num_attributes,
        }
    }
}

/// Immutable sample store. Features are row-major `len × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    attributes: Vec<usize>,
    num_classes: usize,
    num_attributes: usize,
}

impl Dataset {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        attributes: Vec<usize>,
        num_classes: usize,
        num_attributes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if attributes.len() != n || features.len() != n * dim {
            return Err(Error::shape(
                "Dataset::new",
                format!("{n} labels, {n} attributes, {} features", n * dim),
                format!(
                    "{} labels, {} attributes, {} features",
                    n,
                    attributes.len(),
                    features.len()
                ),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: num_classes,
            });
        }
        if let Some(&a) = attributes.iter().find(|&&a| a >= num_attributes) {
            return Err(Error::InvalidArgument(format!(
                "attribute {a} out of range for {num_attributes} attributes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Dataset {
            dim,
            features,
            labels,
            attributes,
            num_classes,
            num_attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_attributes
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn attribute(&self, i: usize) -> usize {
        self.attributes[i]
    }

    pub fn group(&self, i: usize) -> usize {
        self.labels[i] * self.num_attributes + self.attributes[i]
    }

    pub fn subgroup(&self, i: usize) -> Subgroup {
        Subgroup {
            label: self.labels[i],
            attribute: self.attributes[i],
        }
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn attributes_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.attributes[i]).collect()
    }

    pub fn groups_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.group(i)).collect()
    }

    /// Feature rows for `indices` as a `len × dim` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.x(i));
        }
        Tensor2::from_vec(indices.len(), self.dim, data).expect("sized by construction")
    }

    /// Sample count per subgroup id among `indices`.
    pub fn group_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups()];
        for &i in indices {
            counts[self.group(i)] += 1;
        }
        counts
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Row-concatenate datasets with identical layout.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut attributes = Vec::new();
        for p in parts {
            if (p.dim, p.num_classes, p.num_attributes)
                != (first.dim, first.num_classes, first.num_attributes)
            {
                return Err(Error::shape(
                    "Dataset::concat",
                    format!("{:?}", (first.dim, first.num_classes, first.num_attributes)),
                    format!("{:?}", (p.dim, p.num_classes, p.num_attributes)),
                ));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
            attributes.extend_from_slice(&p.attributes);
        }
        Dataset::new(
            first.dim,
            features,
            labels,
            attributes,
            first.num_classes,
            first.num_attributes,
        )
    }

    /// Stable byte encoding, used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.features.len() * 8 + self.len() * 16);
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (&y, &a) in self.labels.iter().zip(&self.attributes) {
            out.extend_from_slice(&(y as u64).to_le_bytes());
            out.extend_from_slice(&(a as u64).to_le_bytes());
        }
        out
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub num_classes: usize,
    pub num_attributes: usize,
    /// `counts[y][a]`
    pub counts: Vec<Vec<usize>>,
    pub core_separation: f64,
    pub spurious_strength: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub hard_fraction: f64,
}

impl SubgroupSpec {
    /// Counts from per-attribute class percentages: `counts[y][a] =
    /// round(percent[y][a] / 100 · per_attribute_total)`. Approximates tables
    /// that publish within-attribute class shares rather than counts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_percentages(
        percent: &[Vec<f64>],
        per_attribute_total: usize,
        core_separation: f64,
        spurious_strength: f64,
        noise_sigma: f64,
        hard_fraction: f64,
    ) -> Result<Self> {
        let num_classes = percent.len();
        let num_attributes = percent.first().map_or(0, Vec::len);
        let counts = percent
            .iter()
            .map(|row| {
                if row.len() != num_attributes {
                    return Err(Error::InvalidSpec("ragged percentage table".into()));
                }
                row.iter()
                    .map(|&p| {
                        if !(p >= 0.0) {
                            return Err(Error::InvalidSpec(format!("negative percentage {p}")));
                        }
                        Ok((p / 100.0 * per_attribute_total as f64).round() as usize)
                    })
                    .collect()
            })
            .collect::<Result<Vec<Vec<usize>>>>()?;
        let spec = SubgroupSpec {
            num_classes,
            num_attributes,
            counts,
            core_separation,
            spurious_strength,
            noise_sigma,
            hard_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_attributes
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn count(&self, g: usize) -> usize {
        let s = Subgroup::from_id(g, self.num_attributes);
        self.counts[s.label][s.attribute]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        if self.num_attributes < 1 {
            return Err(Error::InvalidSpec(
                "need at least one attribute value".into(),
            ));
        }
        if self.counts.len() != self.num_classes
            || self.counts.iter().any(|r| r.len() != self.num_attributes)
        {
            return Err(Error::InvalidSpec(format!(
                "counts must be {} x {}",
                self.num_classes, self.num_attributes
            )));
        }
        if self.total() == 0 {
            return Err(Error::InvalidSpec("zero total count".into()));
        }
        let nonzero = self.counts.iter().flatten().filter(|&&c| c > 0).count();
        if nonzero < 2 {
            return Err(Error::InvalidSpec(
                "at least two subgroups must be nonempty".into(),
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec("noise_sigma must be > 0".into()));
        }
        if !(self.core_separation >= 0.0 && self.core_separation.is_finite()) {
            return Err(Error::InvalidSpec("core_separation must be >= 0".into()));
        }
        if !(self.spurious_strength >= 0.0 && self.spurious_strength.is_finite()) {
            return Err(Error::InvalidSpec("spurious_strength must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::InvalidSpec("hard_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Same generator parameters with different counts.
    pub fn with_counts(&self, counts: Vec<Vec<usize>>) -> SubgroupSpec {
        SubgroupSpec {
            counts,
            ..self.clone()
        }
    }
}

/// `k` points in `dim` dimensions whose nearest pairs are `separation` apart.
///
/// Two points sit at `±separation/2` along the all-ones diagonal. With
/// `k ≤ dim` they are scaled basis vectors; otherwise they lie on a circle in
/// the first two coordinates (or a line when `dim == 1`).
fn block_means(k: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if k == 1 {
        return vec![vec![0.0; dim]];
    }
    if k == 2 {
        let c = separation / 2.0 / (dim as f64).sqrt();
        return vec![vec![-c; dim], vec![c; dim]];
    }
    if k <= dim {
        let s = separation / std::f64::consts::SQRT_2;
        return (0..k)
            .map(|i| {
                let mut m = vec![0.0; dim];
                m[i] = s;
                m
            })
            .collect();
    }
    if dim == 1 {
        let mid = (k - 1) as f64 / 2.0;
        return (0..k)
            .map(|i| vec![(i as f64 - mid) * separation])
            .collect();
    }
    let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
    (0..k)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            let mut m = vec![0.0; dim];
            m[0] = radius * t.cos();
            m[1] = radius * t.sin();
            m
        })
        .collect()
}

/// Draw `spec.counts[y][a]` samples per subgroup as
/// `x = [core_mean(y) + ε, spurious_mean(a) + ε]`, `ε ~ N(0, σ²)`.
///
/// Within each subgroup the first `round(hard_fraction · n)` samples have their
/// core mean scaled by [`HARD_CORE_SCALE`]. Rows are emitted subgroup by
/// subgroup in ascending id.
pub fn generate(
    spec: &SubgroupSpec,
    dim_core: usize,
    dim_spurious: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if dim_core == 0 || dim_spurious == 0 {
        return Err(Error::InvalidSpec(
            "feature block dimensions must be >= 1".into(),
        ));
    }
    let core = block_means(spec.num_classes, dim_core, spec.core_separation);
    let spur = block_means(spec.num_attributes, dim_spurious, spec.spurious_strength);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidSpec(format!("noise: {e}")))?;
    let mut rng = rng::stream(seed, "generate");

    let dim = dim_core + dim_spurious;
    let total = spec.total();
    let mut features = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    let mut attributes = Vec::with_capacity(total);
    for g in 0..spec.num_groups() {
        let Subgroup {
            label: y,
            attribute: a,
        } = Subgroup::from_id(g, spec.num_attributes);
        let n = spec.counts[y][a];
        let n_hard = (spec.hard_fraction * n as f64).round() as usize;
        for k in 0..n {
            let scale = if k < n_hard { HARD_CORE_SCALE } else { 1.0 };
            for &m in &core[y] {
                features.push(scale * m + noise.sample(&mut rng));
            }
            for &m in &spur[a] {
                features.push(m + noise.sample(&mut rng));
            }
            labels.push(y);
            attributes.push(a);
        }
    }
    Dataset::new(
        dim,
        features,
        labels,
        attributes,
        spec.num_classes,
        spec.num_attributes,
    )
}

/// Counts for separately drawn validation and test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutCounts {
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

/// Generate train (from `spec.counts`), validation and test sets with
/// independent streams and return them concatenated with the split indices.
pub fn generate_with_holdout(
    spec: &SubgroupSpec,
    holdout: &HoldoutCounts,
    dim_core: usize,
    dim_spurious: usize,
    seed: u64,
) -> Result<(Dataset, SplitSet)> {
    let train = generate(
        spec,
        dim_core,
        dim_spurious,
        rng::derive_seed(seed, "train-set"),
    )?;
    let val = generate(
        &spec.with_counts(holdout.val.clone()),
        dim_core,
        dim_spurious,
        rng::derive_seed(seed, "val-set"),
    )?;
    let test = generate(
        &spec.with_counts(holdout.test.clone()),
        dim_core,
        dim_spurious,
        rng::derive_seed(seed, "test-set"),
    )?;
    let (n_train, n_val, n_test) = (train.len(), val.len(), test.len());
    let ds = Dataset::concat(&[train, val, test])?;
    let splits = SplitSet {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n_train + n_val + n_test).collect(),
    };
    Ok((ds, splits))
}

/// Column naming for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default = "default_attribute_column")]
    pub attribute_column: String,
    /// Explicit feature columns; `None` means every other column, in file order.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub num_attributes: Option<usize>,
}

fn default_label_column() -> String {
    "label".into()
}

fn default_attribute_column() -> String {
    "attribute".into()
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: default_label_column(),
            attribute_column: default_attribute_column(),
            feature_columns: None,
            num_classes: None,
            num_attributes: None,
        }
    }
}

/// Read a headered CSV. Row numbers in errors are 1-based data rows
/// (the header is row 0).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: path.to_owned(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let find = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let label_col = find(&schema.label_column)?;
    let attr_col = find(&schema.attribute_column)?;
    let feature_cols: Vec<usize> = match &schema.feature_columns {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&i| i != label_col && i != attr_col)
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::MissingColumn("f0".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut attributes = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| Error::CsvRow {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| {
            rec.get(c).ok_or_else(|| Error::CsvRow {
                row,
                message: format!("missing field {}", &headers[c]),
            })
        };
        for &c in &feature_cols {
            let s = field(c)?;
            let v: f64 = s.parse().map_err(|_| Error::CsvRow {
                row,
                message: format!("non-numeric value `{s}` in column `{}`", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvRow {
                    row,
                    message: format!("non-finite value in column `{}`", &headers[c]),
                });
            }
            features.push(v);
        }
        for (c, out) in [(label_col, &mut labels), (attr_col, &mut attributes)] {
            let s = field(c)?;
            let v: usize = s.parse().map_err(|_| Error::CsvRow {
                row,
                message: format!(
                    "expected a nonnegative integer in `{}`, got `{s}`",
                    &headers[c]
                ),
            })?;
            out.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("csv has no data rows"));
    }
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
    let num_attributes = schema
        .num_attributes
        .unwrap_or_else(|| attributes.iter().max().map_or(0, |m| m + 1));
    Dataset::new(
        feature_cols.len(),
        features,
        labels,
        attributes,
        num_classes,
        num_attributes,
    )
}

/// Index lists into one [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition the dataset into train/val/test.
///
/// Stratified splits cut each subgroup independently (subgroups visited in
/// ascending id); per-part sizes are `floor(f·n)` for train and val, with the
/// remainder in test. A part with positive fraction that rounds to zero takes
/// one sample from the largest part.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64, stratify: bool) -> Result<SplitSet> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = rng::stream(seed, "split");
    let mut out = SplitSet {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let pools: Vec<Vec<usize>> = if stratify {
        let mut by_group = vec![Vec::new(); ds.num_groups()];
        for i in 0..ds.len() {
            by_group[ds.group(i)].push(i);
        }
        let parts = fractions.iter().filter(|&&f| f > 0.0).count();
        for (g, members) in by_group.iter().enumerate() {
            if !members.is_empty() && members.len() < parts {
                return Err(Error::SubgroupTooSmall {
                    group: g,
                    available: members.len(),
                    needed: parts,
                });
            }
        }
        by_group.into_iter().filter(|m| !m.is_empty()).collect()
    } else {
        vec![ds.all_indices()]
    };
    for mut pool in pools {
        pool.shuffle(&mut rng);
        let n = pool.len();
        // largest remainder, so each part is within one row of its share
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut sizes = [0usize; 3];
        for p in 0..3 {
            sizes[p] = exact[p].floor() as usize;
        }
        let mut order: Vec<usize> = (0..3).filter(|&p| fractions[p] > 0.0).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor()))
        });
        let mut left = n - sizes.iter().sum::<usize>();
        for &p in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[p] += 1;
            left -= 1;
        }
        for p in 0..3 {
            if fractions[p] > 0.0 && sizes[p] == 0 {
                let donor = (0..3)
                    .max_by_key(|&q| (sizes[q], usize::MAX - q))
                    .expect("3 parts");
                if sizes[donor] > 1 {
                    sizes[donor] -= 1;
                    sizes[p] += 1;
                }
            }
        }
        let (a, rest) = pool.split_at(sizes[0]);
        let (b, c) = rest.split_at(sizes[1]);
        out.train.extend_from_slice(a);
        out.val.extend_from_slice(b);
        out.test.extend_from_slice(c);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancedSubset {
    pub indices: Vec<usize>,
    /// Set when some subgroup had fewer than `per_group` members.
    pub with_replacement: bool,
}

/// Exactly `per_group` indices from every subgroup of the dataset.
pub fn balanced_subset(
    ds: &Dataset,
    indices: &[usize],
    per_group: usize,
    seed: u64,
) -> Result<BalancedSubset> {
    if per_group == 0 {
        return Err(Error::InvalidArgument("per_group must be >= 1".into()));
    }
    let mut rng = rng::stream(seed, "balanced-subset");
    let mut by_group = vec![Vec::new(); ds.num_groups()];
    for &i in indices {
        by_group[ds.group(i)].push(i);
    }
    let mut out = Vec::with_capacity(per_group * by_group.len());
    let mut with_replacement = false;
    for (g, members) in by_group.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::AbsentSubgroup { group: g });
        }
        if members.len() >= per_group {
            members.shuffle(&mut rng);
            out.extend_from_slice(&members[..per_group]);
        } else {
            with_replacement = true;
            for _ in 0..per_group {
                out.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    Ok(BalancedSubset {
        indices: out,
        with_replacement,
    })
}

/// Every present subgroup padded with replacement draws to the size of the
/// largest. Original members are kept once each.
pub fn upsample_to_max(ds: &Dataset, indices: &[usize], seed: u64) -> Result<Vec<usize>> {
    let mut by_group = vec![Vec::new(); ds.num_groups()];
    for &i in indices {
        by_group[ds.group(i)].push(i);
    }
    let target = by_group.iter().map(Vec::len).max().unwrap_or(0);
    if target == 0 {
        return Err(Error::Empty("no subgroup present"));
    }
    let mut rng = rng::stream(seed, "upsample");
    let mut out = Vec::with_capacity(target * by_group.len());
    for members in by_group.iter().filter(|m| !m.is_empty()) {
        out.extend_from_slice(members);
        for _ in members.len()..target {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    Ok(out)
}
