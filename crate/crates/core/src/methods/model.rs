use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{per_sample_xent, xent_grad, GradReversal, Gradients, Graph, GraphBuilder};
use crate::checkpoint::Checkpoint;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Encoder hidden widths before the representation layer.
    pub hidden: Vec<usize>,
    pub repr_dim: usize,
    pub domain_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: vec![32],
            repr_dim: 16,
            domain_hidden: 16,
        }
    }
}

/// Encoder (features → representation), task head (representation → class
/// logits) and, for adversarial methods, a domain head (representation →
/// attribute logits) behind a gradient-reversal node.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStack {
    pub encoder: Graph,
    pub task_head: Graph,
    pub domain_head: Option<Graph>,
}

/// Gradients of one weighted step for each part of the stack.
#[derive(Debug, Clone)]
pub struct StackGradients {
    pub encoder: Gradients,
    pub task_head: Gradients,
    pub domain_head: Option<Gradients>,
    /// Per-sample task cross-entropy at the current parameters.
    pub task_losses: Vec<f64>,
    pub domain_losses: Option<Vec<f64>>,
}

/// Encoder is an MLP with ReLU on its output, so representations are
/// nonnegative.
fn build_encoder<R: Rng + ?Sized>(input_dim: usize, arch: &ArchConfig, rng: &mut R) -> Graph {
    let mut b = GraphBuilder::new("encoder", input_dim);
    for &w in &arch.hidden {
        b = b.dense(w, rng).relu();
    }
    b.dense(arch.repr_dim, rng).relu().build()
}

pub(crate) fn build_task_head<R: Rng + ?Sized>(
    arch: &ArchConfig,
    num_classes: usize,
    rng: &mut R,
) -> Graph {
    GraphBuilder::new("task_head", arch.repr_dim)
        .dense(num_classes, rng)
        .build()
}

fn build_domain_head<R: Rng + ?Sized>(
    arch: &ArchConfig,
    num_attributes: usize,
    reversal: GradReversal,
    rng: &mut R,
) -> Graph {
    GraphBuilder::new("domain_head", arch.repr_dim)
        .reversal(reversal)
        .dense(arch.domain_hidden, rng)
        .relu()
        .dense(num_attributes, rng)
        .build()
}

impl ModelStack {
    /// Builds encoder, task head, then the optional domain head, all from
    /// `rng` in that order.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        num_classes: usize,
        num_attributes: usize,
        arch: &ArchConfig,
        reversal: Option<GradReversal>,
        rng: &mut R,
    ) -> Self {
        let encoder = build_encoder(input_dim, arch, rng);
        let task_head = build_task_head(arch, num_classes, rng);
        let domain_head = reversal.map(|r| build_domain_head(arch, num_attributes, r, rng));
        ModelStack {
            encoder,
            task_head,
            domain_head,
        }
    }

    pub fn for_dataset<R: Rng + ?Sized>(
        ds: &Dataset,
        arch: &ArchConfig,
        reversal: Option<GradReversal>,
        rng: &mut R,
    ) -> Self {
        ModelStack::new(
            ds.dim(),
            ds.num_classes(),
            ds.num_attributes(),
            arch,
            reversal,
            rng,
        )
    }

    pub fn representations(&self, x: &Tensor2) -> Result<Tensor2> {
        self.encoder.infer(x)
    }

    pub fn task_logits(&self, x: &Tensor2) -> Result<Tensor2> {
        self.task_head.infer(&self.encoder.infer(x)?)
    }

    pub fn domain_logits(&self, x: &Tensor2) -> Result<Option<Tensor2>> {
        match &self.domain_head {
            Some(d) => Ok(Some(d.infer(&self.encoder.infer(x)?)?)),
            None => Ok(None),
        }
    }

    /// Forward and backward for one batch.
    ///
    /// `task_weights` maps per-sample task losses to the weights of
    /// `Σ_i w_i · xent_i`; it sees the losses at the current parameters, so
    /// adaptive schemes can update their state first. The domain loss (when
    /// there is a domain head and `attributes` is given) is the batch mean.
    pub fn gradients(
        &mut self,
        x: &Tensor2,
        labels: &[usize],
        attributes: Option<&[usize]>,
        task_weights: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<StackGradients> {
        let z = self.encoder.forward(x)?;
        let logits = self.task_head.forward(&z)?;
        let task_losses = per_sample_xent(&logits, labels)?;
        let w = task_weights(&task_losses)?;
        let head_bp = self.task_head.backward(&xent_grad(&logits, labels, &w)?)?;
        let mut dz = head_bp.input_grad;

        let mut domain_grads = None;
        let mut domain_losses = None;
        if let (Some(head), Some(attrs)) = (self.domain_head.as_mut(), attributes) {
            let dlogits = head.forward(&z)?;
            let losses = per_sample_xent(&dlogits, attrs)?;
            let dw = vec![1.0 / attrs.len() as f64; attrs.len()];
            let bp = head.backward(&xent_grad(&dlogits, attrs, &dw)?)?;
            dz.add_assign(&bp.input_grad)?;
            domain_grads = Some(bp.grads);
            domain_losses = Some(losses);
        }
        let enc_bp = self.encoder.backward(&dz)?;
        Ok(StackGradients {
            encoder: enc_bp.grads,
            task_head: head_bp.grads,
            domain_head: domain_grads,
            task_losses,
            domain_losses,
        })
    }

    pub fn predict(&self, ds: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
        Ok(self.task_logits(&ds.batch(indices))?.argmax_rows())
    }

    /// Softmax class probabilities per sample.
    pub fn class_scores(&self, ds: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        let p = crate::autodiff::softmax(&self.task_logits(&ds.batch(indices))?);
        Ok((0..p.rows()).map(|r| p.row(r).to_vec()).collect())
    }

    pub fn predict_domain(&self, ds: &Dataset, indices: &[usize]) -> Result<Option<Vec<usize>>> {
        Ok(self
            .domain_logits(&ds.batch(indices))?
            .map(|l| l.argmax_rows()))
    }

    fn graphs(&self) -> impl Iterator<Item = &Graph> {
        std::iter::once(&self.encoder)
            .chain(std::iter::once(&self.task_head))
            .chain(self.domain_head.iter())
    }

    /// FNV-1a over the encoder's parameter bits.
    pub fn encoder_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.encoder.params() {
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn checkpoint(&self, seed: u64, method: &str) -> Checkpoint {
        Checkpoint::from_graphs(self.graphs(), seed, method)
    }

    /// Load parameter values from a checkpoint into a stack of the same
    /// architecture.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut layers = ckpt.layers.iter();
        let mut graphs: Vec<&mut Graph> = vec![&mut self.encoder, &mut self.task_head];
        if let Some(d) = self.domain_head.as_mut() {
            graphs.push(d);
        }
        for g in graphs {
            let mut values = Vec::with_capacity(g.params().len());
            for p in g.params() {
                let layer = layers.next().ok_or_else(|| {
                    Error::InvalidArgument(format!("checkpoint lacks `{}`", p.name))
                })?;
                if layer.name != p.name {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint layer `{}` where `{}` was expected",
                        layer.name, p.name
                    )));
                }
                values.push(Tensor2::from_vec(
                    layer.rows,
                    layer.cols,
                    layer.data.clone(),
                )?);
            }
            g.set_params(values)?;
        }
        if layers.next().is_some() {
            return Err(Error::InvalidArgument("checkpoint has extra layers".into()));
        }
        Ok(())
    }
}

/// Encoder output for the given rows.
pub fn extract_representations(
    model: &ModelStack,
    ds: &Dataset,
    indices: &[usize],
) -> Result<Tensor2> {
    model.representations(&ds.batch(indices))
}
