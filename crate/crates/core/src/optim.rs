//! Adam and plain SGD over any [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter groups excluded from updates, matched by tensor-name prefix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Freeze {
    pub text: bool,
    pub tst: bool,
    pub fusion: bool,
}

impl Freeze {
    pub fn is_frozen(&self, name: &str) -> bool {
        (self.text && name.starts_with("text."))
            || (self.tst && name.starts_with("tst."))
            || (self.fusion && name.starts_with("fusion."))
    }
}

/// Moment estimates, in the parameter set's tensor order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new<P: ParamSet>(config: OptimizerConfig, params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        let state = match config.kind {
            OptimizerKind::Adam => OptimizerState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
            OptimizerKind::Sgd => OptimizerState::default(),
        };
        Self { config, state }
    }

    pub fn step<P: ParamSet, G: ParamSet>(&mut self, params: &mut P, grads: &G, freeze: &Freeze) {
        let lr = self.config.learning_rate;
        let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
        let grads = grads.tensors();
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            if freeze.is_frozen(&names[i]) {
                continue;
            }
            let g = grads[i].data;
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (w, &gv) in p.iter_mut().zip(g) {
                        *w -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.state.m[i];
                    let v = &mut self.state.v[i];
                    for k in 0..p.len() {
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        p[k] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
