use crate::error::{Error, Result};
use crate::tensor::Tensor2;

use super::graph::{Gradients, Graph};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum SGD with coupled L2 decay:
/// `g' = g + wd·w; v ← μ·v + g'; w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Tensor2>,
}

impl Sgd {
    pub fn new(config: SgdConfig, graph: &Graph) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: graph
                .params()
                .iter()
                .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        })
    }

    pub fn config(&self) -> SgdConfig {
        self.config
    }

    pub fn step(&mut self, graph: &mut Graph, grads: &Gradients) -> Result<()> {
        let params = graph.params();
        if grads.0.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::shape("sgd_step", params.len(), grads.0.len()));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{:?}", p.value.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), v) in graph
            .params_mut()
            .iter_mut()
            .zip(grads.iter())
            .zip(&mut self.velocity)
        {
            for ((w, &gv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                let d = gv + weight_decay * *w;
                *vv = momentum * *vv + d;
                *w -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::GraphBuilder;

    fn scalar_graph(w: f64) -> Graph {
        GraphBuilder::new("s", 1)
            .dense_with(
                Tensor2::from_vec(1, 1, vec![w]).unwrap(),
                Tensor2::zeros(1, 1),
            )
            .unwrap()
            .build()
    }

    fn grads(g: f64) -> Gradients {
        Gradients(vec![
            Tensor2::from_vec(1, 1, vec![g]).unwrap(),
            Tensor2::zeros(1, 1),
        ])
    }

    fn weight(g: &Graph) -> f64 {
        g.params()[0].value.data()[0]
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut g = scalar_graph(0.37);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = Sgd::new(cfg, &g).unwrap();
        opt.step(&mut g, &grads(0.0)).unwrap();
        assert_eq!(weight(&g), 0.37);
    }

    #[test]
    fn plain_step_arithmetic() {
        let mut g = scalar_graph(1.0);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut opt = Sgd::new(cfg, &g).unwrap();
        opt.step(&mut g, &grads(0.5)).unwrap();
        assert!((weight(&g) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps_unrolled() {
        // v1 = g1, w1 = w0 - lr g1; v2 = 0.9 g1 + g2, w2 = w1 - lr v2
        let (w0, g1, g2, lr) = (2.0, 0.5, -0.25, 0.1);
        let w1 = w0 - lr * g1;
        let w2 = w1 - lr * (0.9 * g1 + g2);
        let mut g = scalar_graph(w0);
        let cfg = SgdConfig {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = Sgd::new(cfg, &g).unwrap();
        opt.step(&mut g, &grads(g1)).unwrap();
        assert!((weight(&g) - w1).abs() < 1e-15);
        opt.step(&mut g, &grads(g2)).unwrap();
        assert!((weight(&g) - w2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let g = scalar_graph(1.0);
        assert!(Sgd::new(
            SgdConfig {
                lr: 0.0,
                momentum: 0.0,
                weight_decay: 0.0
            },
            &g
        )
        .is_err());
        assert!(Sgd::new(
            SgdConfig {
                lr: 0.1,
                momentum: 1.0,
                weight_decay: 0.0
            },
            &g
        )
        .is_err());
        let mut g = scalar_graph(1.0);
        let mut opt = Sgd::new(
            SgdConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            &g,
        )
        .unwrap();
        let bad = Gradients(vec![Tensor2::zeros(2, 1), Tensor2::zeros(1, 1)]);
        assert!(opt.step(&mut g, &bad).is_err());
    }
}
