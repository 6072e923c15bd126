//! Channel removal by accuracy budget, and pruning of plain models by mask.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::FlopsModel;
use crate::graph::ModelGraph;
use crate::reparam::prune_target_channels;
use crate::resrep::{compute_metrics, kernel_metrics, MetricMap};
use crate::scalar::Scalar;
use crate::train::evaluate;

/// Row norms of the tensors that decide which channels go: compactors
/// when present, target kernels otherwise.
pub fn channel_metrics<T: Scalar>(model: &ModelGraph<T>) -> Result<MetricMap> {
    if model.has_compactors() {
        compute_metrics(model)
    } else {
        Ok(kernel_metrics(model))
    }
}

/// Silences one channel in place. With a compactor its row is zeroed;
/// otherwise the kernel row and the BN affine pair are, so the channel
/// outputs exactly zero.
pub fn zero_channel<T: Scalar>(model: &mut ModelGraph<T>, target: usize, channel: usize) -> Result<()> {
    let t = *model
        .targets
        .get(target)
        .ok_or_else(|| Error::InvalidArgument(format!("no target {target}")))?;
    if let Some(c) = model.compactor_mut(target) {
        c.q.row_mut(channel).fill(T::zero());
        return Ok(());
    }
    model.conv_mut(t.conv).expect("target conv").kernel.row_mut(channel).fill(T::zero());
    let bn = model.bn_mut(t.bn).expect("target bn");
    bn.gamma[channel] = T::zero();
    bn.beta[channel] = T::zero();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalStructure {
    pub original_widths: Vec<usize>,
    pub widths: Vec<usize>,
    /// Surviving-channel masks per target.
    pub masks: Vec<Vec<bool>>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub original_flops: u64,
    pub final_flops: u64,
    pub reduction: f64,
}

/// Greedily silences channels in ascending norm order, `granularity` at a
/// time, and stops before the first step that would drop `evalset`
/// accuracy below the starting accuracy. Never empties a layer.
pub fn minimal_structure<T: Scalar>(
    model: &ModelGraph<T>,
    evalset: &Dataset,
    granularity: usize,
    batch_size: usize,
) -> Result<(MinimalStructure, ModelGraph<T>)> {
    let flops = FlopsModel::new(model)?;
    let original_widths = flops.target_widths();
    let before = evaluate(model, evalset, batch_size)?;
    let mut masks: Vec<Vec<bool>> = original_widths.iter().map(|&w| vec![true; w]).collect();
    let mut widths = original_widths.clone();
    let mut current = model.clone();
    let mut accuracy = before;
    let order = channel_metrics(model)?.sorted();
    let mut cursor = 0;
    loop {
        let mut trial = current.clone();
        let mut trial_widths = widths.clone();
        let mut chunk = Vec::new();
        while chunk.len() < granularity.max(1) && cursor < order.len() {
            let (i, j, _) = order[cursor];
            cursor += 1;
            if trial_widths[i] > 1 {
                trial_widths[i] -= 1;
                chunk.push((i, j));
            }
        }
        if chunk.is_empty() {
            break;
        }
        for &(i, j) in &chunk {
            zero_channel(&mut trial, i, j)?;
        }
        let acc = evaluate(&trial, evalset, batch_size)?;
        if acc < before {
            break;
        }
        for &(i, j) in &chunk {
            masks[i][j] = false;
        }
        current = trial;
        widths = trial_widths;
        accuracy = acc;
    }
    let final_flops = flops.with_widths(&widths)?;
    let report = MinimalStructure {
        original_widths,
        widths,
        masks,
        accuracy_before: before,
        accuracy_after: accuracy,
        original_flops: flops.original(),
        final_flops,
        reduction: 1.0 - final_flops as f64 / flops.original() as f64,
    };
    Ok((report, current))
}

/// Physically removes every mask-0 channel of a model without compactors.
pub fn prune_by_masks<T: Scalar>(model: &ModelGraph<T>, masks: &[Vec<bool>]) -> Result<ModelGraph<T>> {
    if masks.len() != model.targets.len() {
        return Err(Error::InvalidArgument(format!("{} masks for {} targets", masks.len(), model.targets.len())));
    }
    let mut out = model.clone();
    for (t, m) in masks.iter().enumerate() {
        let keep: Vec<usize> = m.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect();
        prune_target_channels(&mut out, t, &keep)?;
    }
    out.validate()?;
    Ok(out)
}
