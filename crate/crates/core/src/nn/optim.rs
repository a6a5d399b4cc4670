use serde::{Deserialize, Serialize};

use super::tensor::{GradientMap, ParamSet};
use crate::error::{Error, Result};

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    Ok(())
}

/// `θ - lr·g` as a new parameter set; `params` is left untouched.
pub fn sgd_step(params: &ParamSet, grads: &GradientMap, lr: f64) -> Result<ParamSet> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut ParamSet, grads: &GradientMap, lr: f64) -> Result<()> {
    check_lr(lr)?;
    params.check_same_layout(grads)?;
    if lr == 0.0 {
        return Ok(());
    }
    params.add_scaled(grads, -lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lr(self.lr())?;
        if let OptimizerConfig::Adam {
            beta1, beta2, eps, ..
        } = *self
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config(format!("invalid Adam settings {self:?}")));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Optimizer {
        Optimizer {
            config: *self,
            state: None,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

/// Stateful optimizer applying updates in place.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: Option<AdamState>,
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientMap) -> Result<()> {
        match self.config {
            OptimizerConfig::Sgd { lr } => sgd_step_in_place(params, grads, lr),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                params.check_same_layout(grads)?;
                let st = self.state.get_or_insert_with(|| AdamState {
                    m: params.zeros_like(),
                    v: params.zeros_like(),
                    t: 0,
                });
                st.t += 1;
                let c1 = 1.0 - beta1.powi(st.t);
                let c2 = 1.0 - beta2.powi(st.t);
                let names: Vec<String> = params.names().map(str::to_string).collect();
                for name in names {
                    let g = grads.get(&name)?.data();
                    let m = st.m.get_mut(&name)?.data_mut();
                    for (mi, gi) in m.iter_mut().zip(g) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    }
                    let v = st.v.get_mut(&name)?.data_mut();
                    for (vi, gi) in v.iter_mut().zip(g) {
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    }
                    let m = st.m.get(&name)?.data();
                    let v = st.v.get(&name)?.data();
                    let p = params.get_mut(&name)?.data_mut();
                    for i in 0..p.len() {
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
                Ok(())
            }
        }
    }
}
