//! Multiply-add accounting. Only convolutions (and the classifier, as a
//! 1×1 conv) cost anything; BN, activations, pooling and adds are free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub node: usize,
    pub name: String,
    pub out_h: usize,
    pub out_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub multiply_adds: u64,
}

/// `D·C·k²·H'·W'`.
pub fn layer_flops(in_channels: usize, out_channels: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
    (out_channels * in_channels * kernel * kernel * out_h * out_w) as u64
}

/// Cost of every conv-like node. Compactors are included only when asked.
pub fn layer_costs<T: Scalar>(model: &ModelGraph<T>, include_compactors: bool) -> Result<Vec<LayerCost>> {
    let shapes = model.shapes()?;
    let mut out = Vec::new();
    for (i, node) in model.nodes.iter().enumerate() {
        let (cin, cout, k) = match &node.layer {
            Layer::Conv(c) | Layer::Linear(c) => (c.in_channels(), c.out_channels(), c.kernel_size()),
            Layer::Compactor(c) if include_compactors => (c.channels(), c.channels(), 1),
            _ => continue,
        };
        let [_, oh, ow] = shapes[i];
        out.push(LayerCost {
            node: i,
            name: node.name.clone(),
            out_h: oh,
            out_w: ow,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            multiply_adds: layer_flops(cin, cout, k, oh, ow),
        });
    }
    Ok(out)
}

/// Whole-model multiply-adds, treating compactors as already merged away.
pub fn model_flops<T: Scalar>(model: &ModelGraph<T>) -> Result<u64> {
    Ok(layer_costs(model, false)?.iter().map(|c| c.multiply_adds).sum())
}

/// Whole-model multiply-adds of a re-parameterized model run as-is.
pub fn deployed_flops<T: Scalar>(model: &ModelGraph<T>) -> Result<u64> {
    Ok(layer_costs(model, true)?.iter().map(|c| c.multiply_adds).sum())
}

/// Precomputed geometry for repeated FLOPs queries under channel masks.
#[derive(Debug, Clone)]
pub struct FlopsModel {
    costs: Vec<LayerCost>,
    /// For each target: (index into `costs` of its conv, index of its successor).
    targets: Vec<(usize, usize)>,
}

impl FlopsModel {
    pub fn new<T: Scalar>(model: &ModelGraph<T>) -> Result<Self> {
        let costs = layer_costs(model, false)?;
        let pos = |node: usize| {
            costs
                .iter()
                .position(|c| c.node == node)
                .ok_or_else(|| Error::InvalidArgument(format!("node {node} is not a conv")))
        };
        let targets = model
            .targets
            .iter()
            .map(|t| Ok((pos(t.conv)?, pos(t.successor)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { costs, targets })
    }

    pub fn original(&self) -> u64 {
        self.costs.iter().map(|c| c.multiply_adds).sum()
    }

    pub fn target_widths(&self) -> Vec<usize> {
        self.targets.iter().map(|&(c, _)| self.costs[c].out_channels).collect()
    }

    /// Cost with every target conv reduced to `widths[t]` output channels and
    /// its successor to the same number of input channels.
    pub fn with_widths(&self, widths: &[usize]) -> Result<u64> {
        if widths.len() != self.targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} widths for {} targets",
                widths.len(),
                self.targets.len()
            )));
        }
        let mut cin: Vec<usize> = self.costs.iter().map(|c| c.in_channels).collect();
        let mut cout: Vec<usize> = self.costs.iter().map(|c| c.out_channels).collect();
        for (&(conv, succ), &w) in self.targets.iter().zip(widths) {
            cout[conv] = w;
            cin[succ] = w;
        }
        Ok(self
            .costs
            .iter()
            .enumerate()
            .map(|(i, c)| layer_flops(cin[i], cout[i], c.kernel, c.out_h, c.out_w))
            .sum())
    }

    pub fn with_masks(&self, masks: &[Vec<bool>]) -> Result<u64> {
        let widths: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
        for (t, m) in masks.iter().enumerate() {
            let want = self.costs[self.targets[t].0].out_channels;
            if m.len() != want {
                return Err(Error::InvalidArgument(format!(
                    "mask {t} has {} entries for {want} channels",
                    m.len()
                )));
            }
        }
        self.with_widths(&widths)
    }
}

/// Multiply-adds the model would have after removing every mask-0 channel
/// from its target conv and from the successor's input.
pub fn deduced_flops<T: Scalar>(model: &ModelGraph<T>, masks: &[Vec<bool>]) -> Result<u64> {
    FlopsModel::new(model)?.with_masks(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNormLayer, ConvLayer};
    use crate::tensor::Tensor4;

    #[test]
    fn layer_formula() {
        assert_eq!(layer_flops(1, 1, 1, 1, 1), 1);
        assert_eq!(layer_flops(3, 16, 3, 32, 32), 442_368);
        assert_eq!(layer_flops(8, 8, 1, 5, 7), 64 * 35);
    }

    fn chain() -> ModelGraph<f32> {
        let mut g = ModelGraph::new("chain", 3, 32, 32);
        let c1 = g.push("c1", Layer::Conv(ConvLayer::new(Tensor4::zeros([16, 3, 3, 3]), None, 1, 1)), &[0]);
        let b1 = g.push("b1", Layer::BatchNorm(BatchNormLayer::new(16)), &[c1]);
        let r1 = g.push("r1", Layer::Relu, &[b1]);
        let c2 = g.push("c2", Layer::Conv(ConvLayer::new(Tensor4::zeros([16, 16, 3, 3]), None, 1, 1)), &[r1]);
        let p = g.push("gap", Layer::GlobalAvgPool, &[c2]);
        g.push("fc", Layer::Linear(ConvLayer::new(Tensor4::zeros([10, 16, 1, 1]), Some(vec![0.0; 10]), 1, 0)), &[p]);
        g.targets.push(crate::graph::Target {
            conv: c1,
            bn: b1,
            compactor: None,
            successor: c2,
        });
        g
    }

    #[test]
    fn single_conv_model() {
        let mut g = ModelGraph::<f32>::new("one", 3, 8, 8);
        g.push("c", Layer::Conv(ConvLayer::new(Tensor4::zeros([4, 3, 3, 3]), None, 1, 1)), &[0]);
        assert_eq!(model_flops(&g).unwrap(), layer_flops(3, 4, 3, 8, 8));
    }

    #[test]
    fn deduced_reduction_of_one_channel() {
        let g = chain();
        let all = vec![vec![true; 16]];
        let original = model_flops(&g).unwrap();
        assert_eq!(deduced_flops(&g, &all).unwrap(), original);
        let mut one = all.clone();
        one[0][5] = false;
        let reduction = original - deduced_flops(&g, &one).unwrap();
        assert_eq!(reduction, 3 * 9 * 1024 + 16 * 9 * 1024);
        assert!(deduced_flops(&g, &[vec![true; 15]]).is_err());
    }
}
