//! Central finite-difference checks of the analytic gradients.

use rayon::prelude::*;

use crate::error::Result;
use crate::graph::{softmax_cross_entropy, Layer, ModelGraph};
use crate::layers::Mode;
use crate::tensor::Tensor4;

/// Denominator floor of the relative error, so parameters whose true
/// gradient is numerically zero are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.relative).fold(0.0, f64::max)
    }

    /// Fraction of entries with relative error at most `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        let ok = self.entries.iter().filter(|e| e.relative <= tol).count();
        ok as f64 / self.entries.len().max(1) as f64
    }

    pub fn kinds(&self) -> Vec<String> {
        let mut k: Vec<String> = self
            .entries
            .iter()
            .map(|e| e.param.rsplit('.').next().unwrap_or_default().to_string())
            .collect();
        k.sort();
        k.dedup();
        k
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Train-mode loss, leaving `model` untouched.
pub fn loss(model: &ModelGraph<f64>, x: &Tensor4<f64>, labels: &[usize]) -> Result<f64> {
    let mut m = model.clone();
    let pass = m.forward(x, Mode::Train)?;
    Ok(softmax_cross_entropy(pass.logits(), labels, 1.0)?.0)
}

/// Compares every parameter gradient with `(L(p+h) − L(p−h)) / 2h`.
pub fn check_gradients(model: &ModelGraph<f64>, x: &Tensor4<f64>, labels: &[usize], h: f64) -> Result<GradReport> {
    let mut m = model.clone();
    m.zero_grad();
    let pass = m.forward(x, Mode::Train)?;
    m.backward(&pass, labels)?;
    let analytic: Vec<(String, Vec<f64>)> = m.params_mut().into_iter().map(|p| (p.name, p.grad.to_vec())).collect();

    let mut jobs = Vec::new();
    for (pi, (name, g)) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            jobs.push((pi, name.clone(), i, a));
        }
    }
    let entries = jobs
        .into_par_iter()
        .map(|(pi, param, index, a)| {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.params_mut()[pi].value[index] += delta;
                loss(&m, x, labels)
            };
            let numeric = (perturbed(h)? - perturbed(-h)?) / (2.0 * h);
            Ok(GradEntry {
                param,
                index,
                analytic: a,
                numeric,
                relative: relative_error(a, numeric),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradReport { entries })
}

/// Smallest `|v|` over all ReLU inputs of a train-mode pass. Central
/// differences are only trustworthy when this exceeds the largest
/// pre-activation shift a step of `h` can cause.
pub fn relu_margin(model: &ModelGraph<f64>, x: &Tensor4<f64>) -> Result<f64> {
    let mut m = model.clone();
    let pass = m.forward(x, Mode::Train)?;
    let mut margin = f64::INFINITY;
    for n in &model.nodes {
        if matches!(n.layer, Layer::Relu) {
            for &v in pass.value(n.inputs[0]).data() {
                margin = margin.min(v.abs());
            }
        }
    }
    Ok(margin)
}
