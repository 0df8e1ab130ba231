use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Identity on the forward pass; multiplies the upstream gradient by `-lambda`
/// on the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradReversal {
    lambda: f64,
}

impl GradReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reversal strength must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(GradReversal { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `x · W + b` with `W: in × out` and `b: 1 × out`, both indices into the
    /// graph's parameter list.
    Dense {
        weight: usize,
        bias: usize,
    },
    Relu,
    Reversal(GradReversal),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
}

/// Per-parameter gradients, aligned with [`Graph::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor2>);

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = &Tensor2> {
        self.0.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|g| g.data().iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone)]
struct Tape {
    inputs: Vec<Tensor2>,
    output: Tensor2,
    version: u64,
}

/// Result of a backward pass: parameter gradients plus the gradient with
/// respect to the graph input, which callers chain into upstream graphs.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub grads: Gradients,
    pub input_grad: Tensor2,
}

/// A chain of primitive ops over a named parameter set.
///
/// `forward` records a tape; `backward` consumes it. Any parameter update bumps
/// the version, which makes an outstanding tape stale.
#[derive(Debug, Clone)]
pub struct Graph {
    ops: Vec<Op>,
    params: Vec<Param>,
    input_width: usize,
    output_width: usize,
    tape: Option<Tape>,
    version: u64,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.ops == other.ops && self.params == other.params
    }
}

pub struct GraphBuilder {
    prefix: String,
    ops: Vec<Op>,
    params: Vec<Param>,
    input_width: usize,
    width: usize,
    dense_count: usize,
}

impl GraphBuilder {
    pub fn new(prefix: impl Into<String>, input_width: usize) -> Self {
        GraphBuilder {
            prefix: prefix.into(),
            ops: Vec::new(),
            params: Vec::new(),
            input_width,
            width: input_width,
            dense_count: 0,
        }
    }

    /// Dense layer with He-uniform weights (`U(±√(6/fan_in))`) and zero bias.
    pub fn dense<R: Rng + ?Sized>(self, out: usize, rng: &mut R) -> Self {
        let fan_in = self.width;
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let weight = Tensor2::from_vec(fan_in, out, data).expect("sized by construction");
        self.push_dense(weight, Tensor2::zeros(1, out))
    }

    /// Dense layer with explicit values.
    pub fn dense_with(self, weight: Tensor2, bias: Tensor2) -> Result<Self> {
        if weight.rows() != self.width {
            return Err(Error::shape(
                "GraphBuilder::dense_with",
                self.width,
                weight.rows(),
            ));
        }
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::shape(
                "GraphBuilder::dense_with bias",
                format!("(1, {})", weight.cols()),
                format!("{:?}", bias.shape()),
            ));
        }
        Ok(self.push_dense(weight, bias))
    }

    fn push_dense(mut self, weight: Tensor2, bias: Tensor2) -> Self {
        let idx = self.dense_count;
        self.width = weight.cols();
        let w = self.params.len();
        self.params.push(Param {
            name: format!("{}.dense{idx}.weight", self.prefix),
            value: weight,
        });
        self.params.push(Param {
            name: format!("{}.dense{idx}.bias", self.prefix),
            value: bias,
        });
        self.ops.push(Op::Dense {
            weight: w,
            bias: w + 1,
        });
        self.dense_count += 1;
        self
    }

    pub fn relu(mut self) -> Self {
        self.ops.push(Op::Relu);
        self
    }

    pub fn reversal(mut self, reversal: GradReversal) -> Self {
        self.ops.push(Op::Reversal(reversal));
        self
    }

    pub fn build(self) -> Graph {
        Graph {
            ops: self.ops,
            params: self.params,
            input_width: self.input_width,
            output_width: self.width,
            tape: None,
            version: 0,
        }
    }
}

impl Graph {
    pub fn builder(prefix: impl Into<String>, input_width: usize) -> GraphBuilder {
        GraphBuilder::new(prefix, input_width)
    }

    /// Dense stack `widths[0] → widths[1] → …` with ReLU between layers (none
    /// after the last).
    pub fn mlp<R: Rng + ?Sized>(prefix: &str, widths: &[usize], rng: &mut R) -> Graph {
        assert!(widths.len() >= 2, "an mlp needs input and output widths");
        let mut b = GraphBuilder::new(prefix, widths[0]);
        for (i, &w) in widths[1..].iter().enumerate() {
            if i > 0 {
                b = b.relu();
            }
            b = b.dense(w, rng);
        }
        b.build()
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    /// Replace parameter values, keeping names. Invalidates any tape.
    pub fn set_params(&mut self, values: Vec<Tensor2>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(
                "Graph::set_params",
                self.params.len(),
                values.len(),
            ));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(
                    "Graph::set_params",
                    format!("{:?}", p.value.shape()),
                    format!("{:?}", v.shape()),
                ));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        self.touch();
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        self.touch();
        &mut self.params
    }

    fn touch(&mut self) {
        self.version = self.version.wrapping_add(1);
    }

    /// Overwrite the strength of every reversal node.
    pub fn set_reversal(&mut self, reversal: GradReversal) {
        for op in &mut self.ops {
            if let Op::Reversal(r) = op {
                *r = reversal;
            }
        }
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.input_width {
            return Err(Error::shape(
                "forward input width",
                self.input_width,
                x.cols(),
            ));
        }
        Ok(())
    }

    fn apply(&self, op: &Op, x: &Tensor2) -> Result<Tensor2> {
        match op {
            Op::Dense { weight, bias } => {
                let mut y = x.matmul(&self.params[*weight].value)?;
                let b = self.params[*bias].value.data();
                for r in 0..y.rows() {
                    for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                        *v += bv;
                    }
                }
                Ok(y)
            }
            Op::Relu => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok(y)
            }
            Op::Reversal(_) => Ok(x.clone()),
        }
    }

    /// Forward pass that records a tape for [`Graph::backward`].
    pub fn forward(&mut self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        self.tape = None;
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut cur = x.clone();
        for op in &self.ops {
            let next = self.apply(op, &cur)?;
            inputs.push(cur);
            cur = next;
        }
        if !cur.is_finite() {
            return Err(Error::NonFinite("forward output"));
        }
        self.tape = Some(Tape {
            inputs,
            output: cur.clone(),
            version: self.version,
        });
        Ok(cur)
    }

    /// Tape-free forward pass; safe to call on a shared snapshot.
    pub fn infer(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for op in &self.ops {
            cur = self.apply(op, &cur)?;
        }
        if !cur.is_finite() {
            return Err(Error::NonFinite("forward output"));
        }
        Ok(cur)
    }

    /// Logits recorded by the last forward pass, if the tape is live.
    pub fn tape_output(&self) -> Option<&Tensor2> {
        self.tape
            .as_ref()
            .filter(|t| t.version == self.version)
            .map(|t| &t.output)
    }

    /// Reverse pass from `upstream = ∂loss/∂output`. Consumes the tape.
    pub fn backward(&mut self, upstream: &Tensor2) -> Result<Backprop> {
        let tape = self.tape.take().ok_or(Error::StaleTape)?;
        if tape.version != self.version {
            return Err(Error::StaleTape);
        }
        if upstream.shape() != tape.output.shape() {
            return Err(Error::shape(
                "backward upstream",
                format!("{:?}", tape.output.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads: Vec<Tensor2> = self
            .params
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let mut g = upstream.clone();
        for (op, input) in self.ops.iter().zip(&tape.inputs).rev() {
            g = match op {
                Op::Dense { weight, bias } => {
                    grads[*weight] = input.t_matmul(&g)?;
                    grads[*bias] = g.sum_rows();
                    g.matmul_t(&self.params[*weight].value)?
                }
                Op::Relu => {
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(input.data()) {
                        if xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    d
                }
                Op::Reversal(r) => {
                    let mut d = g;
                    d.scale(-r.lambda);
                    d
                }
            };
        }
        if !g.is_finite() || grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(Backprop {
            grads: Gradients(grads),
            input_grad: g,
        })
    }

    /// Gradients of `Σ_i loss_weights[i] · xent_i` for the taped logits.
    pub fn backward_xent(&mut self, labels: &[usize], loss_weights: &[f64]) -> Result<Backprop> {
        let logits = self.tape_output().ok_or(Error::StaleTape)?;
        let upstream = super::loss::xent_grad(logits, labels, loss_weights)?;
        self.backward(&upstream)
    }
}
