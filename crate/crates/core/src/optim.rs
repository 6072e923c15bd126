//! SGD with per-group momentum and weight decay, and cosine learning-rate
//! annealing.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ParamKind};
use crate::scalar::Scalar;

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupKind {
    /// Conv and classifier kernels.
    Weights,
    /// BN affine parameters and biases.
    NoDecay,
    Compactors,
}

impl GroupKind {
    pub fn of(kind: ParamKind) -> Self {
        match kind {
            ParamKind::Kernel => GroupKind::Weights,
            ParamKind::Bias | ParamKind::Gamma | ParamKind::Beta => GroupKind::NoDecay,
            ParamKind::Compactor => GroupKind::Compactors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSettings {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub kind: GroupKind,
    pub settings: GroupSettings,
}

/// Momentum SGD. Velocity buffers are keyed by parameter name and created
/// lazily at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub groups: Vec<ParamGroup>,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(groups: Vec<ParamGroup>) -> Result<Self> {
        for g in &groups {
            if !(0.0..1.0).contains(&g.settings.momentum) {
                return Err(Error::InvalidArgument(format!(
                    "momentum {} outside [0, 1)",
                    g.settings.momentum
                )));
            }
        }
        Ok(Self {
            groups,
            velocity: BTreeMap::new(),
        })
    }

    /// Weights: momentum 0.9, decay 1e-4. BN/bias: momentum 0.9, no decay.
    /// Compactors: the given momentum, no decay.
    pub fn with_defaults(compactor_momentum: f64) -> Result<Self> {
        Self::new(vec![
            ParamGroup {
                kind: GroupKind::Weights,
                settings: GroupSettings {
                    momentum: 0.9,
                    weight_decay: 1e-4,
                },
            },
            ParamGroup {
                kind: GroupKind::NoDecay,
                settings: GroupSettings {
                    momentum: 0.9,
                    weight_decay: 0.0,
                },
            },
            ParamGroup {
                kind: GroupKind::Compactors,
                settings: GroupSettings {
                    momentum: compactor_momentum,
                    weight_decay: 0.0,
                },
            },
        ])
    }

    pub fn settings(&self, kind: GroupKind) -> GroupSettings {
        self.groups
            .iter()
            .find(|g| g.kind == kind)
            .map(|g| g.settings)
            .unwrap_or(GroupSettings {
                momentum: 0.0,
                weight_decay: 0.0,
            })
    }

    /// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`, then clears the gradients.
    pub fn step(&mut self, model: &mut ModelGraph<T>, lr: f64) {
        let lr = T::lit(lr);
        let settings: Vec<(GroupKind, T, T)> = self
            .groups
            .iter()
            .map(|g| {
                (
                    g.kind,
                    T::lit(g.settings.momentum),
                    T::lit(g.settings.weight_decay),
                )
            })
            .collect();
        for p in model.params_mut() {
            let kind = GroupKind::of(p.kind);
            let (mu, wd) = settings
                .iter()
                .find(|s| s.0 == kind)
                .map(|s| (s.1, s.2))
                .unwrap_or((T::zero(), T::zero()));
            let v = self
                .velocity
                .entry(p.name)
                .or_insert_with(|| vec![T::zero(); p.value.len()]);
            sgd_update(p.value, p.grad, v, mu, wd, lr);
            p.grad.fill(T::zero());
        }
    }
}

/// One momentum-SGD update of a single tensor; the gradient is left intact.
pub fn sgd_update<T: Scalar>(param: &mut [T], grad: &[T], velocity: &mut [T], momentum: T, weight_decay: T, lr: T) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub total_epochs: usize,
}

/// `initial · ½ · (1 + cos(π · epoch / total))`.
pub fn cosine_lr(epoch: usize, sched: &LrSchedule) -> Result<f64> {
    if epoch >= sched.total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside schedule of {} epochs",
            sched.total_epochs
        )));
    }
    let t = epoch as f64 / sched.total_epochs as f64;
    Ok(sched.initial_lr * 0.5 * (1.0 + (PI * t).cos()))
}
