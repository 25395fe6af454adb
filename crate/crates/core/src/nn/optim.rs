use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized optimizer state: scalar hyper-state plus named moment tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub tensors: Vec<(String, Tensor)>,
}

pub trait Optimizer {
    fn step(&mut self, grads: &GradStore) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
    fn state(&self) -> Result<OptimizerState>;
    fn load_state(&mut self, state: &OptimizerState) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum.
pub struct Sgd {
    cfg: SgdConfig,
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    steps: u64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, cfg: SgdConfig) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            cfg,
            vars,
            velocity,
            steps: 0,
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let mut g = g.clone();
            if self.cfg.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.cfg.weight_decay)?)?;
            }
            let update = match vel.take() {
                Some(v) if self.cfg.momentum != 0.0 => ((v * self.cfg.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor() - (&update * self.cfg.lr)?)?)?;
            *vel = Some(update);
        }
        self.steps += 1;
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    fn state(&self) -> Result<OptimizerState> {
        let tensors = self
            .velocity
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().map(|t| (format!("velocity.{i}"), t.clone())))
            .collect();
        Ok(OptimizerState {
            step: self.steps,
            lr: self.cfg.lr,
            tensors,
        })
    }

    fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        self.steps = state.step;
        self.cfg.lr = state.lr;
        for (i, v) in self.velocity.iter_mut().enumerate() {
            *v = state
                .tensors
                .iter()
                .find(|(n, _)| *n == format!("velocity.{i}"))
                .map(|(_, t)| t.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam {
    cfg: AdamConfig,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| Ok(v.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            cfg,
            vars,
            m,
            v,
            t: 0,
        })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((var, m), v) in self.vars.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / c1)?;
            let v_hat = (&*v / c2)?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (delta * lr)?)?)?;
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    fn state(&self) -> Result<OptimizerState> {
        let mut tensors = Vec::with_capacity(2 * self.m.len());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            tensors.push((format!("m.{i}"), m.clone()));
            tensors.push((format!("v.{i}"), v.clone()));
        }
        Ok(OptimizerState {
            step: self.t,
            lr: self.cfg.lr,
            tensors,
        })
    }

    fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        let find = |name: String| {
            state
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing {name}")))
        };
        for i in 0..self.m.len() {
            let m = find(format!("m.{i}"))?;
            let v = find(format!("v.{i}"))?;
            if m.dims() != self.m[i].dims() {
                return Err(Error::Checkpoint(format!("optimizer moment {i} has wrong shape")));
            }
            self.m[i] = m.to_dtype(self.m[i].dtype())?;
            self.v[i] = v.to_dtype(self.v[i].dtype())?;
        }
        self.t = state.step;
        self.cfg.lr = state.lr;
        Ok(())
    }
}
