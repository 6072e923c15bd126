use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use resrep::checkpoint::Normalization;
use resrep::data::{load_cifar10, make_synthetic, Dataset, Split, SyntheticSpec};
use resrep::{ModelGraph, Scalar};

use crate::usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    /// Gaussian class templates plus noise, shaped like the model input.
    Synthetic,
    /// CIFAR-10 binary batches.
    Cifar10,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DataKind::Synthetic)]
    pub data: DataKind,
    /// Directory holding data_batch_{1..5}.bin and test_batch.bin.
    #[arg(long, env = "RESREP_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_samples: usize,
    /// Standard deviation of the synthetic pixel noise.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f32,
    /// Seed of the synthetic class templates.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Synthetic image shape as C,H,W (defaults to the model input).
    #[arg(long, value_delimiter = ',')]
    pub synthetic_dims: Option<Vec<usize>>,
}

impl DataArgs {
    /// Loads `split` for `model`, rejecting data whose channel count or
    /// class count the model cannot take.
    pub fn load<T: Scalar>(&self, split: Split, model: &ModelGraph<T>) -> Result<Dataset> {
        let ds = match self.data {
            DataKind::Synthetic => {
                let dims = match &self.synthetic_dims {
                    None => model.input_dims(),
                    Some(d) if d.len() == 3 && d.iter().all(|&v| v > 0) => [d[0], d[1], d[2]],
                    Some(d) => return Err(usage(format!("--synthetic-dims needs three positive values, got {d:?}"))),
                };
                let spec = SyntheticSpec {
                    num_classes: model.num_classes(),
                    dims,
                    noise: self.noise,
                };
                let (n, sample_seed) = match split {
                    Split::Train => (self.train_samples, 1),
                    Split::Test => (self.test_samples, 2),
                };
                make_synthetic(&spec, n, self.data_seed, sample_seed, split).map_err(|e| usage(e.to_string()))?
            }
            DataKind::Cifar10 => {
                let dir = self
                    .data_dir
                    .as_ref()
                    .ok_or_else(|| usage("cifar10 needs --data-dir or RESREP_DATA_DIR"))?;
                load_cifar10(dir, split).map_err(|e| usage(format!("cannot load CIFAR-10 from {}: {e}", dir.display())))?
            }
        };
        if ds.is_empty() {
            return Err(usage("dataset is empty"));
        }
        let want = model.input_dims();
        if ds.dims[0] != want[0] {
            return Err(usage(format!("data has {} channels, model expects {}", ds.dims[0], want[0])));
        }
        if ds.dims != want {
            return Err(usage(format!("data images are {:?}, model expects {want:?}", ds.dims)));
        }
        if ds.num_classes > model.num_classes() {
            return Err(usage(format!("data has {} classes, model predicts {}", ds.num_classes, model.num_classes())));
        }
        Ok(ds)
    }
}

pub fn normalization(ds: &Dataset) -> Normalization {
    Normalization {
        mean: ds.mean.clone(),
        std: ds.std.clone(),
    }
}
