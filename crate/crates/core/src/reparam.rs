//! Compactor insertion and the exact conversion of conv-BN-compactor
//! sequences into a single narrower conv.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Layer, ModelGraph};
use crate::layers::{Compactor, ConvLayer};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, row_norms, transpose01, Tensor4, Vector};

/// Default row-norm threshold below which a compactor row is deleted.
pub const PRUNE_EPSILON: f64 = 1e-5;

/// A plain conv kernel with bias produced by fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConv<T> {
    pub kernel: Tensor4<T>,
    pub bias: Vector<T>,
}

/// Result of thresholding a compactor.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedCompactor<T> {
    /// Surviving rows, `D'×D×1×1`.
    pub q: Tensor4<T>,
    /// Surviving row indices, ascending.
    pub survive: Vec<usize>,
    /// Removed row indices, ascending.
    pub pruned: Vec<usize>,
}

/// Appends an identity compactor after every target conv-BN pair.
pub fn insert_compactors<T: Scalar>(model: &ModelGraph<T>) -> Result<ModelGraph<T>> {
    if model.targets.is_empty() {
        return Err(Error::InvalidArgument("model has no target layers".into()));
    }
    let mut out = model.clone();
    for ti in 0..out.targets.len() {
        let t = out.targets[ti];
        if t.compactor.is_some() {
            continue;
        }
        let conv = out
            .conv(t.conv)
            .ok_or_else(|| Error::InvalidArgument(format!("target {ti} is not a conv")))?;
        if conv.bias.is_some() {
            return Err(Error::InvalidArgument(format!(
                "target conv {} has a bias; conv-BN form required",
                out.nodes[t.conv].name
            )));
        }
        let d = conv.out_channels();
        let name = format!("{}.compactor", out.nodes[t.conv].name);
        let idx = out.insert_after(t.bn, name, Layer::Compactor(Compactor::identity(d, t.conv)));
        out.targets[ti].compactor = Some(idx);
    }
    out.validate()?;
    Ok(out)
}

/// Folds BN statistics into the preceding conv:
/// `K̄_j = (γ_j/σ_j)·K_j`, `b̄_j = β_j − μ_j·γ_j/σ_j`.
pub fn fuse_conv_bn<T: Scalar>(
    kernel: &Tensor4<T>,
    mean: &[T],
    sigma: &[T],
    gamma: &[T],
    beta: &[T],
) -> Result<FusedConv<T>> {
    let d = kernel.dims()[0];
    for (name, v) in [("mean", mean), ("sigma", sigma), ("gamma", gamma), ("beta", beta)] {
        if v.len() != d {
            return Err(shape_err(format!("fuse_conv_bn {name}"), &[v.len()], &kernel.dims()));
        }
    }
    if let Some((j, &s)) = sigma.iter().enumerate().find(|(_, &s)| s.is_nan() || s <= T::zero()) {
        return Err(Error::NonPositiveSigma {
            channel: j,
            sigma: s.f64(),
        });
    }
    let mut k = kernel.clone();
    let mut bias = Vec::with_capacity(d);
    for j in 0..d {
        let scale = gamma[j] / sigma[j];
        for v in k.row_mut(j) {
            *v *= scale;
        }
        bias.push(beta[j] - mean[j] * scale);
    }
    Ok(FusedConv { kernel: k, bias })
}

/// Splits compactor rows by `‖Q_j‖₂ < ε` and keeps the survivors.
pub fn prune_compactor<T: Scalar>(q: &Tensor4<T>, epsilon: f64) -> Result<PrunedCompactor<T>> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let eps = T::lit(epsilon);
    let norms = row_norms(q);
    let (survive, pruned): (Vec<usize>, Vec<usize>) = (0..norms.len()).partition(|&j| norms[j] >= eps);
    if survive.is_empty() {
        return Err(Error::InvalidArgument("compactor fully pruned".into()));
    }
    Ok(PrunedCompactor {
        q: q.select_rows(&survive)?,
        survive,
        pruned,
    })
}

/// Merges a pointwise `D'×D` compactor into the fused conv before it:
/// `K' = T(T(K̄) ⊛ Q')`, `b'_j = b̄ · Q'_j`.
pub fn merge_compactor<T: Scalar>(fused: &FusedConv<T>, q: &Tensor4<T>) -> Result<FusedConv<T>> {
    let [d, _, _, _] = fused.kernel.dims();
    let [dp, dq, qh, qw] = q.dims();
    if dq != d || qh != 1 || qw != 1 || fused.bias.len() != d {
        return Err(shape_err("merge_compactor kernel vs compactor", &fused.kernel.dims(), &q.dims()));
    }
    let kernel = transpose01(&conv2d(&transpose01(&fused.kernel), q, None, 1, 0)?);
    let bias = (0..dp)
        .map(|j| q.row(j).iter().zip(&fused.bias).map(|(&a, &b)| a * b).sum())
        .collect();
    Ok(FusedConv { kernel, bias })
}

/// Keeps only the successor's input channels listed in `survive`.
pub fn propagate_pruning<T: Scalar>(successor: &Tensor4<T>, survive: &[usize], original_width: usize) -> Result<Tensor4<T>> {
    if successor.dims()[1] != original_width {
        return Err(shape_err("propagate_pruning successor input width", &successor.dims(), &[original_width]));
    }
    successor.select_cols(survive)
}

/// Per-target widths before and after conversion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWidth {
    pub target: usize,
    pub name: String,
    pub original: usize,
    pub final_width: usize,
}

/// Deletes sub-ε compactor rows and folds every conv-BN-compactor sequence
/// into one conv with bias. The result has no compactors and no BN on the
/// former target layers.
pub fn convert_model<T: Scalar>(model: &ModelGraph<T>, epsilon: f64) -> Result<(ModelGraph<T>, Vec<LayerWidth>)> {
    model.validate()?;
    let mut out = model.clone();
    let mut widths = Vec::with_capacity(model.targets.len());
    let mut merged = Vec::with_capacity(model.targets.len());
    for (ti, t) in model.targets.iter().enumerate() {
        let cp = model
            .compactor(ti)
            .ok_or_else(|| Error::InvalidArgument(format!("target {ti} has no compactor")))?;
        let pruned = prune_compactor(&cp.q, epsilon).map_err(|e| match e {
            Error::InvalidArgument(_) => Error::FullyPruned { layer: ti },
            e => e,
        })?;
        let succ = out.conv_mut(t.successor).expect("validated successor");
        succ.kernel = propagate_pruning(&succ.kernel, &pruned.survive, cp.channels())?;
        succ.grad_kernel = Tensor4::zeros(succ.kernel.dims());
        widths.push(LayerWidth {
            target: ti,
            name: model.nodes[t.conv].name.clone(),
            original: cp.channels(),
            final_width: pruned.survive.len(),
        });
        merged.push(pruned.q);
    }
    for (t, q) in model.targets.iter().zip(merged) {
        let bn = model.bn(t.bn).expect("validated bn");
        let conv = out.conv(t.conv).expect("validated conv");
        let fused = fuse_conv_bn(&conv.kernel, &bn.running_mean, &bn.sigma(), &bn.gamma, &bn.beta)?;
        let m = merge_compactor(&fused, &q)?;
        let (stride, padding) = (conv.stride, conv.padding);
        out.nodes[t.conv].layer = Layer::Conv(ConvLayer::new(m.kernel, Some(m.bias), stride, padding));
    }
    let mut doomed: Vec<usize> = model
        .targets
        .iter()
        .flat_map(|t| [Some(t.bn), t.compactor])
        .flatten()
        .collect();
    doomed.sort_unstable();
    out.targets.clear();
    for idx in doomed.into_iter().rev() {
        out.remove_node(idx);
    }
    out.validate()?;
    Ok((out, widths))
}

/// Physically deletes output channels of a target conv-BN pair (no
/// compactor) and the matching successor input channels.
pub fn prune_target_channels<T: Scalar>(model: &mut ModelGraph<T>, target: usize, keep: &[usize]) -> Result<()> {
    let t = *model
        .targets
        .get(target)
        .ok_or_else(|| Error::InvalidArgument(format!("no target {target}")))?;
    if keep.is_empty() {
        return Err(Error::FullyPruned { layer: target });
    }
    if t.compactor.is_some() {
        return Err(Error::InvalidArgument("prune_target_channels expects a model without compactors".into()));
    }
    let conv = model.conv_mut(t.conv).expect("target conv");
    let width = conv.out_channels();
    conv.kernel = conv.kernel.select_rows(keep)?;
    conv.grad_kernel = Tensor4::zeros(conv.kernel.dims());
    let bn = model.bn_mut(t.bn).expect("target bn");
    *bn = bn.select(keep);
    let succ = model.conv_mut(t.successor).expect("successor conv");
    succ.kernel = propagate_pruning(&succ.kernel, keep, width)?;
    succ.grad_kernel = Tensor4::zeros(succ.kernel.dims());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fuse_identity_bn() {
        let k = Tensor4::<f64>::randn([3, 2, 3, 3], 1.0, &mut rng(1));
        let f = fuse_conv_bn(&k, &[0.0; 3], &[1.0; 3], &[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(f.kernel, k);
        assert_eq!(f.bias, vec![0.0; 3]);
    }

    #[test]
    fn fuse_scalar_channel() {
        let k = Tensor4::<f64>::randn([1, 2, 3, 3], 1.0, &mut rng(2));
        let f = fuse_conv_bn(&k, &[1.0], &[2.0], &[3.0], &[0.5]).unwrap();
        assert_eq!(f.kernel, k.scale(1.5));
        assert_eq!(f.bias, vec![-1.0]);
    }

    #[test]
    fn fuse_rejects_bad_sigma() {
        let k = Tensor4::<f64>::zeros([2, 1, 1, 1]);
        let e = fuse_conv_bn(&k, &[0.0; 2], &[1.0, 0.0], &[1.0; 2], &[0.0; 2]).unwrap_err();
        assert!(matches!(e, Error::NonPositiveSigma { channel: 1, .. }));
    }

    #[test]
    fn fused_conv_matches_eval_bn() {
        let mut r = rng(3);
        let x = Tensor4::<f32>::randn([2, 3, 6, 6], 1.0, &mut r);
        let k = Tensor4::<f32>::randn([4, 3, 3, 3], 0.5, &mut r);
        let mean: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let var: Vec<f32> = (0..4).map(|_| r.gen_range(0.2..2.0)).collect();
        let gamma: Vec<f32> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let beta: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let sigma: Vec<f32> = var.iter().map(|v| (v + 1e-5).sqrt()).collect();
        let y = conv2d(&x, &k, None, 1, 1).unwrap();
        let mut want = y.clone();
        let hw = 36;
        for (p, plane) in want.data_mut().chunks_mut(hw).enumerate() {
            let j = p % 4;
            for v in plane {
                *v = (*v - mean[j]) * gamma[j] / sigma[j] + beta[j];
            }
        }
        let f = fuse_conv_bn(&k, &mean, &sigma, &gamma, &beta).unwrap();
        let got = conv2d(&x, &f.kernel, Some(&f.bias), 1, 1).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-5);
    }

    #[test]
    fn prune_cases() {
        let q = Tensor4::<f64>::identity_pointwise(4);
        let p = prune_compactor(&q, 1e-5).unwrap();
        assert_eq!(p.survive, vec![0, 1, 2, 3]);
        assert!(p.pruned.is_empty());

        let mut q = Tensor4::<f64>::identity_pointwise(4);
        q.row_mut(0).fill(0.0);
        q.row_mut(2).iter_mut().for_each(|v| *v *= 1e-9);
        let p = prune_compactor(&q, 1e-5).unwrap();
        assert_eq!(p.pruned, vec![0, 2]);
        assert_eq!(p.survive, vec![1, 3]);
        assert_eq!(p.q.dims(), [2, 4, 1, 1]);

        assert!(prune_compactor(&Tensor4::<f64>::zeros([3, 3, 1, 1]), 1e-5).is_err());
        assert!(prune_compactor(&q, 0.0).is_err());
    }

    #[test]
    fn prune_at_median_matches_scan() {
        let q = Tensor4::<f64>::randn([9, 9, 1, 1], 1.0, &mut rng(4));
        let mut norms: Vec<f64> = (0..9)
            .map(|j| q.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let scan: Vec<usize> = (0..9).filter(|&j| norms[j] < {
            let mut s = norms.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s[4]
        }).collect();
        norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p = prune_compactor(&q, norms[4]).unwrap();
        assert_eq!(p.pruned, scan);
        assert_eq!(p.pruned.len(), 4);
    }

    #[test]
    fn merge_identity_and_selection() {
        let mut r = rng(5);
        let f = FusedConv {
            kernel: Tensor4::<f64>::randn([4, 3, 3, 3], 1.0, &mut r),
            bias: vec![0.1, 0.2, 0.3, 0.4],
        };
        assert_eq!(merge_compactor(&f, &Tensor4::identity_pointwise(4)).unwrap(), f);
        let mut sel = Tensor4::<f64>::zeros([1, 4, 1, 1]);
        sel.data_mut()[2] = 1.0;
        let m = merge_compactor(&f, &sel).unwrap();
        assert_eq!(m.kernel.data(), f.kernel.row(2));
        assert_eq!(m.bias, vec![0.3]);
        assert!(merge_compactor(&f, &Tensor4::zeros([2, 3, 1, 1])).is_err());
    }

    #[test]
    fn merge_matches_two_stage() {
        let mut r = rng(6);
        let x = Tensor4::<f64>::randn([2, 3, 7, 7], 1.0, &mut r);
        let f = FusedConv {
            kernel: Tensor4::<f64>::randn([4, 3, 3, 3], 1.0, &mut r),
            bias: vec![0.5, -0.25, 1.0, 0.0],
        };
        let q = Tensor4::<f64>::randn([2, 4, 1, 1], 1.0, &mut r);
        let two = conv2d(&conv2d(&x, &f.kernel, Some(&f.bias), 1, 1).unwrap(), &q, None, 1, 0).unwrap();
        let m = merge_compactor(&f, &q).unwrap();
        let one = conv2d(&x, &m.kernel, Some(&m.bias), 1, 1).unwrap();
        assert!(one.max_abs_diff(&two).unwrap() <= 1e-10);

        let (x32, q32) = (x.cast::<f32>(), q.cast::<f32>());
        let f32c = FusedConv {
            kernel: f.kernel.cast::<f32>(),
            bias: f.bias.iter().map(|&b| b as f32).collect(),
        };
        let two = conv2d(&conv2d(&x32, &f32c.kernel, Some(&f32c.bias), 1, 1).unwrap(), &q32, None, 1, 0).unwrap();
        let m = merge_compactor(&f32c, &q32).unwrap();
        let one = conv2d(&x32, &m.kernel, Some(&m.bias), 1, 1).unwrap();
        assert!(one.max_abs_diff(&two).unwrap() <= 1e-5);
    }

    #[test]
    fn propagate_cases() {
        let k = Tensor4::<f64>::identity_pointwise(4);
        assert_eq!(propagate_pruning(&k, &[0, 1, 2, 3], 4).unwrap(), k);
        let col = propagate_pruning(&k, &[1], 4).unwrap();
        assert_eq!(col.dims(), [4, 1, 1, 1]);
        assert_eq!(col.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert!(propagate_pruning(&k, &[0], 5).is_err());

        let mut r = rng(7);
        let k = Tensor4::<f64>::randn([3, 6, 3, 3], 1.0, &mut r);
        let keep = vec![0, 2, 5];
        let got = propagate_pruning(&k, &keep, 6).unwrap();
        for o in 0..3 {
            for (ci, &src) in keep.iter().enumerate() {
                for p in 0..3 {
                    for q in 0..3 {
                        assert_eq!(got.get(o, ci, p, q), k.get(o, src, p, q));
                    }
                }
            }
        }
    }
}
