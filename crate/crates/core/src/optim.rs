//! Parameter update rules shared by inner and outer loops.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

fn check_shape(p: &Tensor, g: &Tensor, name: &str) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::contract(format!(
            "gradient for `{name}` has shape {:?}, parameter has {:?}",
            g.shape(),
            p.shape()
        )));
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

/// `p <- p - lr * g` for every parameter covered by `grads`.
pub fn sgd_step(params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
    check_lr(lr)?;
    for (name, g) in grads.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        check_shape(p, g, name)?;
        for (x, d) in p.values_mut().iter_mut().zip(g.values()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }

    pub(crate) fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("t".to_string(), Tensor::scalar(self.step as f64)),
            (
                "hyper".to_string(),
                Tensor::vector(vec![self.config.beta1, self.config.beta2, self.config.epsilon]),
            ),
        ];
        out.extend(self.first.iter().map(|(n, t)| (format!("m/{n}"), t.clone())));
        out.extend(self.second.iter().map(|(n, t)| (format!("v/{n}"), t.clone())));
        out
    }

    pub(crate) fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("adam state: {m}"));
        let mut state = AdamState {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
            config: AdamConfig::default(),
        };
        let mut seen_t = false;
        for (name, t) in entries {
            if name == "t" {
                state.step = t.item().map_err(|_| bad("t"))? as u64;
                seen_t = true;
            } else if name == "hyper" {
                let h = t.values();
                if h.len() != 3 {
                    return Err(bad("hyper"));
                }
                state.config = AdamConfig {
                    beta1: h[0],
                    beta2: h[1],
                    epsilon: h[2],
                };
            } else if let Some(n) = name.strip_prefix("m/") {
                state.first.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("v/") {
                state.second.insert(n.to_string(), t);
            } else {
                return Err(bad(&format!("unexpected entry `{name}`")));
            }
        }
        if !seen_t {
            return Err(bad("missing step counter"));
        }
        Ok(state)
    }
}

/// One bias-corrected Adam step over the parameters covered by `grads`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    check_lr(lr)?;
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        check_shape(p, g, name)?;
        match state.first.get(name) {
            Some(m) => check_shape(p, m, name)?,
            None => {
                return Err(Error::contract(format!("adam state has no entry for `{name}`")));
            }
        }
    }
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).unwrap().values_mut();
        let m = state.first.get_mut(name).unwrap().values_mut();
        let v = state.second.get_mut(name).unwrap().values_mut();
        for i in 0..p.len() {
            let gi = g.values()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::contract(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// An update rule with its learning rate, optional clipping and state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    lr: f64,
    clip_norm: Option<f64>,
    adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip_norm: Option<f64>, params: &ParamStore) -> Self {
        let adam = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some(AdamState::new(params, AdamConfig::default())),
        };
        Optimizer {
            lr,
            clip_norm,
            adam,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        if self.adam.is_some() {
            OptimizerKind::Adam
        } else {
            OptimizerKind::Sgd
        }
    }

    pub fn adam_state(&self) -> Option<&AdamState> {
        self.adam.as_ref()
    }

    /// Clips (if configured) and applies one update.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: Grads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric { op: "gradient" });
        }
        if let Some(max) = self.clip_norm {
            grads.clip_global_norm(max);
        }
        match &mut self.adam {
            Some(state) => adam_step(params, &grads, state, self.lr),
            None => sgd_step(params, &grads, self.lr),
        }
    }
}
