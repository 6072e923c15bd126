//! Gradient Resetting and FLOPs-budgeted channel selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopsModel;
use crate::graph::ModelGraph;
use crate::reparam::PRUNE_EPSILON;
use crate::scalar::Scalar;
use crate::tensor::{row_norms, Tensor4};

/// Norm below which the penalty direction is treated as undefined.
pub const PENALTY_GUARD: f64 = 1e-12;

/// Every hyper-parameter of a sparsifying training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResRepConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub theta_init: usize,
    pub theta_step: usize,
    pub selection_interval: u64,
    pub warmup_epochs: usize,
    /// Fraction of the original FLOPs to remove.
    pub flops_target: f64,
    pub compactor_momentum: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub augment: bool,
}

impl Default for ResRepConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epsilon: PRUNE_EPSILON,
            theta_init: 4,
            theta_step: 4,
            selection_interval: 200,
            warmup_epochs: 5,
            flops_target: 0.5,
            compactor_momentum: 0.99,
            total_epochs: 180,
            batch_size: 64,
            initial_lr: 0.01,
            augment: true,
        }
    }
}

impl ResRepConfig {
    /// Checks the ranges the training loop relies on. `lambda = 0` and
    /// `flops_target = 0` are accepted as degenerate runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.flops_target) {
            return bad(format!("flops target must be in [0, 1), got {}", self.flops_target));
        }
        if self.theta_init == 0 {
            return bad("theta_init must be >= 1".into());
        }
        if self.selection_interval == 0 {
            return bad("selection interval must be >= 1".into());
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be >= 1".into());
        }
        if self.initial_lr.is_nan() || self.initial_lr <= 0.0 {
            return bad(format!("learning rate must be > 0, got {}", self.initial_lr));
        }
        if !(0.0..1.0).contains(&self.compactor_momentum) {
            return bad(format!("compactor momentum must be in [0, 1), got {}", self.compactor_momentum));
        }
        Ok(())
    }
}

/// `λ·F/‖F‖`, or zero when `‖F‖ < PENALTY_GUARD`.
pub fn penalty_gradient<T: Scalar>(f: &[T], lambda: f64) -> Vec<T> {
    let norm = f.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm < T::lit(PENALTY_GUARD) {
        return vec![T::zero(); f.len()];
    }
    let s = T::lit(lambda) / norm;
    f.iter().map(|&v| v * s).collect()
}

/// Row `j` becomes `objective_j · m_j + penalty_gradient(Q_j, λ)`.
pub fn reset_gradients<T: Scalar>(objective: &Tensor4<T>, q: &Tensor4<T>, mask: &[bool], lambda: f64) -> Result<Tensor4<T>> {
    if objective.dims() != q.dims() {
        return Err(crate::error::shape_err("reset_gradients", &objective.dims(), &q.dims()));
    }
    if mask.len() != q.dims()[0] {
        return Err(Error::InvalidArgument(format!("{} mask entries for {} rows", mask.len(), q.dims()[0])));
    }
    let mut out = objective.clone();
    reset_rows(out.data_mut(), q.data(), q.row_len(), mask, lambda);
    Ok(out)
}

/// In-place form of [`reset_gradients`] over flat row-major buffers.
pub(crate) fn reset_rows<T: Scalar>(grad: &mut [T], value: &[T], row_len: usize, mask: &[bool], lambda: f64) {
    for ((g, f), &keep) in grad.chunks_mut(row_len).zip(value.chunks(row_len)).zip(mask) {
        let p = penalty_gradient(f, lambda);
        for (gi, pi) in g.iter_mut().zip(p) {
            *gi = if keep { *gi + pi } else { pi };
        }
    }
}

/// Per-layer, per-channel row norms: `entries[i][j]` is channel `j` of
/// target layer `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMap {
    pub entries: Vec<Vec<f64>>,
}

impl MetricMap {
    /// `(layer, channel, value)` in ascending value, ties by position.
    pub fn sorted(&self) -> Vec<(usize, usize, f64)> {
        let mut all: Vec<(usize, usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &v)| (i, j, v)))
            .collect();
        all.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        all
    }
}

fn norms_f64<T: Scalar>(x: &Tensor4<T>) -> Vec<f64> {
    row_norms(x).into_iter().map(|v| v.f64()).collect()
}

/// Row norms of every compactor, in target order.
pub fn compute_metrics<T: Scalar>(model: &ModelGraph<T>) -> Result<MetricMap> {
    let entries = (0..model.targets.len())
        .map(|t| {
            model
                .compactor(t)
                .map(|c| norms_f64(&c.q))
                .ok_or_else(|| Error::InvalidArgument(format!("target {t} has no compactor")))
        })
        .collect::<Result<_>>()?;
    Ok(MetricMap { entries })
}

/// Row norms of every target conv kernel, in target order.
pub fn kernel_metrics<T: Scalar>(model: &ModelGraph<T>) -> MetricMap {
    let entries = model
        .targets
        .iter()
        .map(|t| norms_f64(&model.conv(t.conv).expect("target conv").kernel))
        .collect();
    MetricMap { entries }
}

/// Outcome of one selection event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// `masks[i][j] == false` marks a picked channel.
    pub masks: Vec<Vec<bool>>,
    /// Picked `(layer, channel)` pairs in picking order.
    pub picked: Vec<(usize, usize)>,
    pub original_flops: u64,
    pub deduced_flops: u64,
    /// `1 − deduced / original`.
    pub reduction: f64,
    /// Whether the FLOPs target was met.
    pub reached: bool,
}

/// Picks channels in ascending metric order until the deduced FLOPs
/// reduction reaches `flops_target` or `theta` channels are picked. The
/// last surviving channel of a layer is never picked; when the target is
/// out of reach the maximal legal masking is returned with `reached` unset.
pub fn select_channels(metrics: &MetricMap, flops: &FlopsModel, flops_target: f64, theta: usize) -> Result<Selection> {
    let mut widths: Vec<usize> = metrics.entries.iter().map(Vec::len).collect();
    if widths != flops.target_widths() {
        return Err(Error::InvalidArgument(format!(
            "metric widths {widths:?} do not match the model's {:?}",
            flops.target_widths()
        )));
    }
    let original = flops.original();
    let mut masks: Vec<Vec<bool>> = widths.iter().map(|&w| vec![true; w]).collect();
    let mut picked = Vec::new();
    let mut current = original;
    let reduction = |f: u64| 1.0 - f as f64 / original as f64;
    for (i, j, _) in metrics.sorted() {
        if reduction(current) >= flops_target || picked.len() >= theta {
            break;
        }
        if widths[i] <= 1 {
            continue;
        }
        widths[i] -= 1;
        masks[i][j] = false;
        picked.push((i, j));
        current = flops.with_widths(&widths)?;
    }
    Ok(Selection {
        masks,
        picked,
        original_flops: original,
        deduced_flops: current,
        reduction: reduction(current),
        reached: reduction(current) >= flops_target,
    })
}

/// One logged selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub iteration: u64,
    pub epoch: usize,
    pub theta: usize,
    pub masked: Vec<(usize, usize)>,
    pub deduced_flops: u64,
    pub reduction: f64,
    pub reached: bool,
}

/// `(Σ surviving², Σ to-be-pruned²)` over the rows of `tensors`.
pub fn sparsity_trace<T: Scalar>(tensors: &[&Tensor4<T>], masks: &[Vec<bool>]) -> Result<(f64, f64)> {
    if tensors.len() != masks.len() {
        return Err(Error::InvalidArgument(format!("{} masks for {} layers", masks.len(), tensors.len())));
    }
    let (mut keep, mut drop) = (0.0, 0.0);
    for (t, m) in tensors.iter().zip(masks) {
        if m.len() != t.dims()[0] {
            return Err(Error::InvalidArgument(format!("{} mask entries for {} rows", m.len(), t.dims()[0])));
        }
        for (j, &alive) in m.iter().enumerate() {
            let s: f64 = t.row(j).iter().map(|v| v.f64().powi(2)).sum();
            if alive {
                keep += s;
            } else {
                drop += s;
            }
        }
    }
    Ok((keep, drop))
}

/// Per-layer squared row norms, the raw material of a sparsity trace.
pub fn row_squares<T: Scalar>(tensors: &[&Tensor4<T>]) -> Vec<Vec<f64>> {
    tensors
        .iter()
        .map(|t| (0..t.dims()[0]).map(|j| t.row(j).iter().map(|v| v.f64().powi(2)).sum()).collect())
        .collect()
}

/// Splits logged squared row norms by `masks`.
pub fn split_squares(squares: &[Vec<f64>], masks: &[Vec<bool>]) -> (f64, f64) {
    let (mut keep, mut drop) = (0.0, 0.0);
    for (row, m) in squares.iter().zip(masks) {
        for (&s, &alive) in row.iter().zip(m) {
            if alive {
                keep += s;
            } else {
                drop += s;
            }
        }
    }
    (keep, drop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_miniconv;
    use crate::reparam::insert_compactors;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn penalty_cases() {
        assert_eq!(penalty_gradient(&[0.0f64, 0.0], 1e-4), vec![0.0, 0.0]);
        let p = penalty_gradient(&[3.0f64, 4.0], 1e-4);
        assert!((p[0] - 6e-5).abs() < 1e-18 && (p[1] - 8e-5).abs() < 1e-18);
        assert_eq!(penalty_gradient(&[1e-13f64], 1.0), vec![0.0]);
    }

    proptest! {
        #[test]
        fn penalty_has_norm_lambda(f in prop::collection::vec(-10.0f64..10.0, 1..20), lambda in 1e-6f64..1.0) {
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(n >= 1e-6);
            let p = penalty_gradient(&f, lambda);
            let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((pn - lambda).abs() <= 1e-12 * lambda.max(1.0));
        }
    }

    #[test]
    fn reset_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Tensor4::<f64>::randn([4, 4, 1, 1], 1.0, &mut rng);
        let q = Tensor4::<f64>::randn([4, 4, 1, 1], 1.0, &mut rng);
        assert_eq!(reset_gradients(&g, &q, &[true; 4], 0.0).unwrap(), g);

        let mask = [true, false, true, false];
        let lambda = 1e-3;
        let r = reset_gradients(&g, &q, &mask, lambda).unwrap();
        for (j, &keep) in mask.iter().enumerate() {
            let n = q.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..4 {
                let pen = lambda * q.row(j)[k] / n;
                let want = if keep { g.row(j)[k] + pen } else { pen };
                assert!((r.row(j)[k] - want).abs() < 1e-15);
            }
        }
        assert!(reset_gradients(&g, &q, &[true; 3], 0.0).is_err());
    }

    fn reparam_mini() -> ModelGraph<f64> {
        insert_compactors(&build_miniconv::<f64>(&[8, 16, 16]).unwrap()).unwrap()
    }

    #[test]
    fn fresh_compactor_metrics_are_one() {
        let g = reparam_mini();
        let m = compute_metrics(&g).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert!(m.entries.iter().flatten().all(|&v| v == 1.0));

        let mut g = g;
        g.compactor_mut(1).unwrap().q.row_mut(3).fill(0.0);
        let m = compute_metrics(&g).unwrap();
        assert_eq!(m.entries[1][3], 0.0);
        assert!(compute_metrics(&build_miniconv::<f64>(&[4, 4]).unwrap()).is_err());
    }

    #[test]
    fn random_metrics_match_row_norm_oracle() {
        let mut g = reparam_mini();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor4::<f64>::randn([16, 16, 1, 1], 1.0, &mut rng);
        g.compactor_mut(1).unwrap().q = q.clone();
        let m = compute_metrics(&g).unwrap();
        for j in 0..16 {
            let want = q.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((m.entries[1][j] - want).abs() < 1e-12);
        }
    }

    fn one_layer_flops() -> (ModelGraph<f64>, FlopsModel) {
        let g = insert_compactors(&build_miniconv::<f64>(&[4, 4]).unwrap()).unwrap();
        let f = FlopsModel::new(&g).unwrap();
        (g, f)
    }

    #[test]
    fn selection_sort_oracle() {
        let (_, f) = one_layer_flops();
        let m = MetricMap {
            entries: vec![vec![0.1, 0.9, 0.5, 0.7]],
        };
        let s = select_channels(&m, &f, 0.99, 2).unwrap();
        assert_eq!(s.masks, vec![vec![false, true, false, true]]);
        assert_eq!(s.picked, vec![(0, 0), (0, 2)]);
        assert!(!s.reached);

        let s = select_channels(&m, &f, 0.99, 0).unwrap();
        assert_eq!(s.masks, vec![vec![true; 4]]);
    }

    #[test]
    fn selection_never_empties_a_layer() {
        let g = insert_compactors(&build_miniconv::<f64>(&[1, 8, 4]).unwrap()).unwrap();
        let f = FlopsModel::new(&g).unwrap();
        let m = MetricMap {
            entries: vec![vec![0.0], vec![0.5; 8]],
        };
        let s = select_channels(&m, &f, 0.99, 100).unwrap();
        assert_eq!(s.masks[0], vec![true]);
        assert_eq!(s.masks[1].iter().filter(|&&b| b).count(), 1);
        assert!(!s.reached);
    }

    #[test]
    fn selection_stops_at_target_and_breaks_ties_by_position() {
        let (_, f) = one_layer_flops();
        let m = MetricMap {
            entries: vec![vec![0.5; 4]],
        };
        let s = select_channels(&m, &f, 1e-9, 4).unwrap();
        assert_eq!(s.picked, vec![(0, 0)]);
        assert!(s.reached);
        let s = select_channels(&m, &f, 0.0, 4).unwrap();
        assert!(s.picked.is_empty() && s.reached);
        assert_eq!(s.deduced_flops, f.original());
    }

    #[test]
    fn trace_cases() {
        let q = Tensor4::<f64>::identity_pointwise(4);
        assert_eq!(sparsity_trace(&[&q], &[vec![true; 4]]).unwrap(), (4.0, 0.0));
        assert_eq!(sparsity_trace(&[&q], &[vec![true, false, true, true]]).unwrap(), (3.0, 1.0));
        let sq = row_squares(&[&q]);
        assert_eq!(split_squares(&sq, &[vec![false, false, true, true]]), (2.0, 2.0));
    }

    #[test]
    fn config_validation() {
        let c = ResRepConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!((c.lambda, c.theta_init, c.theta_step, c.selection_interval, c.warmup_epochs), (1e-4, 4, 4, 200, 5));
        assert_eq!(c.compactor_momentum, 0.99);
        for bad in [
            ResRepConfig { flops_target: 1.0, ..c.clone() },
            ResRepConfig { lambda: -1.0, ..c.clone() },
            ResRepConfig { theta_init: 0, ..c.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
