//! The training loop shared by base training, ResRep and the ablation
//! variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::flops::FlopsModel;
use crate::graph::{LossOutput, ModelGraph};
use crate::layers::Mode;
use crate::optim::{cosine_lr, LrSchedule, Sgd};
use crate::resrep::{compute_metrics, kernel_metrics, reset_rows, row_squares, select_channels, ResRepConfig, SelectionEvent};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// How gradients of the target channels are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Plain SGD on the objective.
    Plain,
    /// Masked objective gradient plus penalty on compactor rows, with
    /// scheduled channel selection.
    Resrep,
    /// The same rule applied directly to the target kernels (no compactors).
    ResOnly,
    /// Compactors trained with an unmasked penalty on every row.
    RepOnly,
    /// Unmasked penalty on every target kernel row.
    GroupLasso,
}

impl TrainMode {
    pub fn uses_compactors(self) -> bool {
        matches!(self, TrainMode::Resrep | TrainMode::RepOnly)
    }

    pub fn selects(self) -> bool {
        matches!(self, TrainMode::Resrep | TrainMode::ResOnly)
    }
}

/// Resumable progress of a [`Trainer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub iteration: u64,
    /// Iteration of the next selection event, once selection has begun.
    pub next_selection: Option<u64>,
    pub theta: usize,
    pub frozen: bool,
    pub masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub surviving_sq: f64,
    pub pruned_sq: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: ModelGraph<T>,
    pub sgd: Sgd<T>,
    pub mode: TrainMode,
    pub config: ResRepConfig,
    pub seed: u64,
    pub state: TrainState,
    pub events: Vec<SelectionEvent>,
    pub logs: Vec<EpochLog>,
    /// Squared row norms of the sparsified tensors at the end of each epoch.
    pub squares: Vec<Vec<Vec<f64>>>,
    flops: FlopsModel,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelGraph<T>, mode: TrainMode, config: ResRepConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if mode != TrainMode::Plain && mode.uses_compactors() != model.has_compactors() {
            return Err(Error::InvalidArgument(format!(
                "{mode:?} training {} compactors",
                if mode.uses_compactors() { "needs" } else { "does not take" }
            )));
        }
        if mode != TrainMode::Plain && model.targets.is_empty() {
            return Err(Error::InvalidArgument("model has no target layers".into()));
        }
        let flops = FlopsModel::new(&model)?;
        let masks = flops.target_widths().iter().map(|&w| vec![true; w]).collect();
        let sgd = Sgd::with_defaults(config.compactor_momentum)?;
        let mut t = Self {
            model,
            sgd,
            mode,
            config,
            seed,
            state: TrainState {
                epoch: 0,
                iteration: 0,
                next_selection: None,
                theta: 0,
                frozen: false,
                masks,
            },
            events: Vec::new(),
            logs: Vec::new(),
            squares: Vec::new(),
            flops,
        };
        t.sync_masks();
        Ok(t)
    }

    fn sync_masks(&mut self) {
        if self.mode.uses_compactors() {
            for (i, m) in self.state.masks.iter().enumerate() {
                if let Some(c) = self.model.compactor_mut(i) {
                    c.mask = m.clone();
                }
            }
        }
    }

    pub fn set_masks(&mut self, masks: Vec<Vec<bool>>) -> Result<()> {
        if masks.iter().map(Vec::len).collect::<Vec<_>>() != self.flops.target_widths() {
            return Err(Error::InvalidArgument("mask shapes do not match the target layers".into()));
        }
        self.state.masks = masks;
        self.sync_masks();
        Ok(())
    }

    /// Tensors whose rows the penalty acts on: compactors or target kernels.
    pub fn sparsified(&self) -> Vec<&Tensor4<T>> {
        (0..self.model.targets.len())
            .map(|i| match self.model.compactor(i) {
                Some(c) if self.mode.uses_compactors() => &c.q,
                _ => &self.model.conv(self.model.targets[i].conv).expect("target conv").kernel,
            })
            .collect()
    }

    /// Rewrites the objective gradients of the sparsified rows according
    /// to the mode. Non-target gradients are never touched.
    pub fn apply_gradient_rule(&mut self) {
        let lambda = self.config.lambda;
        let masked = matches!(self.mode, TrainMode::Resrep | TrainMode::ResOnly);
        for i in 0..self.model.targets.len() {
            let all_ones;
            let mask: &[bool] = if masked {
                &self.state.masks[i]
            } else {
                all_ones = vec![true; self.state.masks[i].len()];
                &all_ones
            };
            match self.mode {
                TrainMode::Plain => return,
                TrainMode::Resrep | TrainMode::RepOnly => {
                    let c = self.model.compactor_mut(i).expect("compactor");
                    let row = c.q.row_len();
                    reset_rows(c.grad.data_mut(), c.q.data(), row, mask, lambda);
                }
                TrainMode::ResOnly | TrainMode::GroupLasso => {
                    let node = self.model.targets[i].conv;
                    let c = self.model.conv_mut(node).expect("target conv");
                    let row = c.kernel.row_len();
                    reset_rows(c.grad_kernel.data_mut(), c.kernel.data(), row, mask, lambda);
                }
            }
        }
    }

    /// Forward, backward, gradient rule and one SGD update.
    pub fn train_step(&mut self, x: &Tensor4<T>, labels: &[usize], lr: f64) -> Result<LossOutput<T>> {
        let pass = self.model.forward(x, Mode::Train)?;
        let out = self.model.backward(&pass, labels)?;
        self.apply_gradient_rule();
        self.sgd.step(&mut self.model, lr);
        Ok(out)
    }

    /// Runs a selection event if one is due at the current iteration.
    pub fn maybe_select(&mut self) -> Result<Option<SelectionEvent>> {
        if !self.mode.selects() || self.state.frozen || self.state.epoch < self.config.warmup_epochs {
            return Ok(None);
        }
        let due = match self.state.next_selection {
            None => true,
            Some(it) => self.state.iteration >= it,
        };
        if !due {
            return Ok(None);
        }
        self.state.theta = match self.state.next_selection {
            None => self.config.theta_init,
            Some(_) => self.state.theta + self.config.theta_step,
        };
        let metrics = if self.mode.uses_compactors() {
            compute_metrics(&self.model)?
        } else {
            kernel_metrics(&self.model)
        };
        let sel = select_channels(&metrics, &self.flops, self.config.flops_target, self.state.theta)?;
        self.set_masks(sel.masks)?;
        self.state.next_selection = Some(self.state.iteration + self.config.selection_interval);
        self.state.frozen = sel.reached;
        let ev = SelectionEvent {
            iteration: self.state.iteration,
            epoch: self.state.epoch,
            theta: self.state.theta,
            masked: sel.picked,
            deduced_flops: sel.deduced_flops,
            reduction: sel.reduction,
            reached: sel.reached,
        };
        self.events.push(ev.clone());
        Ok(Some(ev))
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1)
    }

    /// Runs one epoch over `data` and logs it.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.state.epoch;
        let sched = LrSchedule {
            initial_lr: self.config.initial_lr,
            total_epochs: self.config.total_epochs,
        };
        let lr = cosine_lr(epoch, &sched)?;
        let seed = self.epoch_seed(epoch);
        let order = data.order(Some(seed));
        let augmenting = self.config.augment && data.dims[1] == 32 && data.dims[2] == 32;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let (mut x, y) = data.gather::<T>(idx);
            if augmenting {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((b as u64) << 20));
                x = augment(&x, &mut rng)?;
            }
            self.maybe_select()?;
            let out = self.train_step(&x, &y, lr)?;
            loss_sum += out.loss.f64() * y.len() as f64;
            correct += out.correct;
            self.state.iteration += 1;
        }
        self.state.epoch += 1;
        let sq = row_squares(&self.sparsified());
        let (surviving_sq, pruned_sq) = crate::resrep::split_squares(&sq, &self.state.masks);
        self.squares.push(sq);
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            surviving_sq,
            pruned_sq,
        };
        self.logs.push(log.clone());
        Ok(log)
    }

    /// Trains until `until_epoch` (capped at the configured total).
    pub fn run(&mut self, data: &Dataset, until_epoch: usize) -> Result<()> {
        while self.state.epoch < until_epoch.min(self.config.total_epochs) {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    /// Sparsity trace of every logged epoch against `masks`.
    pub fn trace(&self, masks: &[Vec<bool>]) -> Vec<(usize, f64, f64)> {
        self.squares
            .iter()
            .enumerate()
            .map(|(e, sq)| {
                let (a, b) = crate::resrep::split_squares(sq, masks);
                (e, a, b)
            })
            .collect()
    }
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<T: Scalar>(model: &ModelGraph<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let order = data.order(None);
    let batches = data.batches::<T>(&order, batch_size);
    let correct = model.count_correct(&batches)?;
    Ok(correct as f64 / data.len() as f64)
}
