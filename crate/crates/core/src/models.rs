//! Architecture builders. Every builder annotates its target layers and
//! their successors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph, Target};
use crate::layers::{BatchNormLayer, ConvLayer};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchFamily {
    /// CIFAR-style ResNet with `blocks` two-conv basic blocks per stage.
    Resnet { blocks: usize },
    /// Plain conv-BN-ReLU chain, one conv per stage.
    Miniconv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input: [usize; 3],
    pub widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(flatten)]
    pub family: ArchFamily,
}

impl ArchSpec {
    pub fn resnet56() -> Self {
        Self::resnet("resnet56", 9)
    }

    pub fn resnet110() -> Self {
        Self::resnet("resnet110", 18)
    }

    fn resnet(name: &str, blocks: usize) -> Self {
        Self {
            name: name.into(),
            input: [3, 32, 32],
            widths: vec![16, 32, 64],
            num_classes: 10,
            family: ArchFamily::Resnet { blocks },
        }
    }

    pub fn miniconv(widths: &[usize], input: [usize; 3], num_classes: usize) -> Self {
        Self {
            name: "miniconv".into(),
            input,
            widths: widths.to_vec(),
            num_classes,
            family: ArchFamily::Miniconv,
        }
    }

    /// Looks up a named architecture. `miniconv` uses widths 16/32/32 on
    /// 3×16×16 inputs.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "resnet56" => Some(Self::resnet56()),
            "resnet110" => Some(Self::resnet110()),
            "miniconv" => Some(Self::miniconv(&[16, 32, 32], [3, 16, 16], 10)),
            _ => None,
        }
    }

    /// Builds the graph with He-normal kernels drawn from `seed`.
    pub fn build<T: Scalar>(&self, seed: u64) -> Result<ModelGraph<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = match self.family {
            ArchFamily::Resnet { blocks } => build_resnet(self, blocks, &mut rng),
            ArchFamily::Miniconv => build_miniconv_graph(self, &mut rng)?,
        };
        g.validate()?;
        Ok(g)
    }
}

fn conv<T: Scalar>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Layer<T> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    Layer::Conv(ConvLayer::new(Tensor4::randn([cout, cin, k, k], std, rng), None, stride, k / 2))
}

fn head<T: Scalar>(cin: usize, classes: usize, rng: &mut ChaCha8Rng) -> Layer<T> {
    let std = (1.0 / cin as f64).sqrt();
    Layer::Linear(ConvLayer::new(
        Tensor4::randn([classes, cin, 1, 1], std, rng),
        Some(vec![T::zero(); classes]),
        1,
        0,
    ))
}

fn build_resnet<T: Scalar>(spec: &ArchSpec, blocks: usize, rng: &mut ChaCha8Rng) -> ModelGraph<T> {
    let [c, h, w] = spec.input;
    let mut g = ModelGraph::new(spec.name.clone(), c, h, w);
    let w0 = spec.widths[0];
    let stem = g.push("stem.conv", conv(c, w0, 3, 1, rng), &[0]);
    let bn = g.push("stem.bn", Layer::BatchNorm(BatchNormLayer::new(w0)), &[stem]);
    let mut x = g.push("stem.relu", Layer::Relu, &[bn]);
    let mut width = w0;
    for (s, &out) in spec.widths.iter().enumerate() {
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let p = format!("stage{}.block{}", s + 1, b);
            let c1 = g.push(format!("{p}.conv1"), conv(width, out, 3, stride, rng), &[x]);
            let b1 = g.push(format!("{p}.bn1"), Layer::BatchNorm(BatchNormLayer::new(out)), &[c1]);
            let r1 = g.push(format!("{p}.relu1"), Layer::Relu, &[b1]);
            let c2 = g.push(format!("{p}.conv2"), conv(out, out, 3, 1, rng), &[r1]);
            let b2 = g.push(format!("{p}.bn2"), Layer::BatchNorm(BatchNormLayer::new(out)), &[c2]);
            let short = if stride != 1 || width != out {
                let sc = g.push(format!("{p}.shortcut.conv"), conv(width, out, 1, stride, rng), &[x]);
                g.push(format!("{p}.shortcut.bn"), Layer::BatchNorm(BatchNormLayer::new(out)), &[sc])
            } else {
                x
            };
            let add = g.push(format!("{p}.add"), Layer::Add, &[b2, short]);
            x = g.push(format!("{p}.relu2"), Layer::Relu, &[add]);
            g.targets.push(Target {
                conv: c1,
                bn: b1,
                compactor: None,
                successor: c2,
            });
            width = out;
        }
    }
    let pool = g.push("gap", Layer::GlobalAvgPool, &[x]);
    g.push("fc", head(width, spec.num_classes, rng), &[pool]);
    g
}

fn build_miniconv_graph<T: Scalar>(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> Result<ModelGraph<T>> {
    if spec.widths.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "miniconv needs at least 2 widths, got {:?}",
            spec.widths
        )));
    }
    let [c, h, w] = spec.input;
    let mut g = ModelGraph::new(spec.name.clone(), c, h, w);
    let mut x = 0;
    let mut width = c;
    let mut pending: Option<(usize, usize)> = None;
    for (i, &out) in spec.widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let cv = g.push(format!("conv{i}"), conv(width, out, 3, stride, rng), &[x]);
        if let Some((pc, pb)) = pending.take() {
            g.targets.push(Target {
                conv: pc,
                bn: pb,
                compactor: None,
                successor: cv,
            });
        }
        let bn = g.push(format!("bn{i}"), Layer::BatchNorm(BatchNormLayer::new(out)), &[cv]);
        x = g.push(format!("relu{i}"), Layer::Relu, &[bn]);
        pending = Some((cv, bn));
        width = out;
    }
    let pool = g.push("gap", Layer::GlobalAvgPool, &[x]);
    g.push("fc", head(width, spec.num_classes, rng), &[pool]);
    Ok(g)
}

pub fn build_resnet56<T: Scalar>() -> ModelGraph<T> {
    ArchSpec::resnet56().build(0).expect("resnet56 is valid")
}

pub fn build_resnet110<T: Scalar>() -> ModelGraph<T> {
    ArchSpec::resnet110().build(0).expect("resnet110 is valid")
}

/// Plain chain on 3×16×16 inputs with 10 classes.
pub fn build_miniconv<T: Scalar>(widths: &[usize]) -> Result<ModelGraph<T>> {
    ArchSpec::miniconv(widths, [3, 16, 16], 10).build(0)
}
