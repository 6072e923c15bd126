//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RSRP" | version: u32 | meta_len: u64 | meta: UTF-8 JSON
//! tensor_count: u32
//! per tensor: name_len: u32 | name | dtype: u8 | rank: u32 | dims: u64 × rank | payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph, Node, Target};
use crate::layers::{BatchNormLayer, Compactor, ConvLayer};
use crate::models::ArchSpec;
use crate::resrep::{ResRepConfig, SelectionEvent};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor4;
use crate::train::{EpochLog, TrainMode, TrainState, Trainer};

pub const MAGIC: &[u8; 4] = b"RSRP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Base,
    Reparam,
    Converted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerMeta {
    Input { channels: usize, height: usize, width: usize },
    Conv { stride: usize, padding: usize, bias: bool },
    Linear { stride: usize, padding: usize, bias: bool },
    BatchNorm { eps: f64, momentum: f64 },
    Compactor { owner: usize, mask: Vec<bool> },
    Relu,
    GlobalAvgPool,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub name: String,
    pub inputs: Vec<usize>,
    pub layer: LayerMeta,
}

/// Training progress stored alongside a model so a run can be resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub mode: TrainMode,
    pub config: ResRepConfig,
    pub state: TrainState,
    pub events: Vec<SelectionEvent>,
    pub logs: Vec<EpochLog>,
    pub squares: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model_name: String,
    pub arch: Option<ArchSpec>,
    pub dtype: DType,
    pub seed: u64,
    pub epoch: usize,
    pub masks: Vec<Vec<bool>>,
    pub normalization: Option<Normalization>,
    pub nodes: Vec<NodeMeta>,
    pub targets: Vec<Target>,
    pub training: Option<TrainingMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: ModelGraph<T>,
    /// Optimizer velocities keyed by parameter name.
    pub velocity: BTreeMap<String, Vec<T>>,
}

struct RawTensor {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    payload: Vec<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    /// A checkpoint of a bare model: `Reparam` when it has compactors,
    /// `Base` otherwise. Converted models set their kind explicitly.
    pub fn of_model(model: &ModelGraph<T>, arch: Option<ArchSpec>, seed: u64) -> Self {
        let kind = if model.has_compactors() {
            ModelKind::Reparam
        } else {
            ModelKind::Base
        };
        let masks = model.compactors().map(|c| c.mask.clone()).collect();
        Self {
            meta: CheckpointMeta {
                kind,
                model_name: model.arch.clone(),
                arch,
                dtype: T::DTYPE,
                seed,
                epoch: 0,
                masks,
                normalization: None,
                nodes: Vec::new(),
                targets: model.targets.clone(),
                training: None,
            },
            model: model.clone(),
            velocity: BTreeMap::new(),
        }
    }

    pub fn of_trainer(trainer: &Trainer<T>, arch: Option<ArchSpec>) -> Self {
        let mut c = Self::of_model(&trainer.model, arch, trainer.seed);
        c.meta.epoch = trainer.state.epoch;
        c.meta.masks = trainer.state.masks.clone();
        c.meta.training = Some(TrainingMeta {
            mode: trainer.mode,
            config: trainer.config.clone(),
            state: trainer.state.clone(),
            events: trainer.events.clone(),
            logs: trainer.logs.clone(),
            squares: trainer.squares.clone(),
        });
        c.velocity = trainer.sgd.velocity.clone();
        c
    }

    /// Rebuilds the trainer that produced this checkpoint.
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let tm = self
            .meta
            .training
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let mut t = Trainer::new(self.model, tm.mode, tm.config, self.meta.seed)?;
        t.set_masks(tm.state.masks.clone())?;
        t.state = tm.state;
        t.events = tm.events;
        t.logs = tm.logs;
        t.squares = tm.squares;
        t.sgd.velocity = self.velocity;
        Ok(t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.dtype = T::DTYPE;
        meta.model_name = self.model.arch.clone();
        meta.targets = self.model.targets.clone();
        meta.nodes = self.model.nodes.iter().map(node_meta).collect();
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut tensors: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        for n in &self.model.nodes {
            match &n.layer {
                Layer::Conv(c) | Layer::Linear(c) => {
                    tensors.push((format!("{}.kernel", n.name), c.kernel.dims().to_vec(), c.kernel.data()));
                    if let Some(b) = &c.bias {
                        tensors.push((format!("{}.bias", n.name), vec![b.len()], b));
                    }
                }
                Layer::BatchNorm(b) => {
                    for (field, v) in [
                        ("gamma", &b.gamma),
                        ("beta", &b.beta),
                        ("running_mean", &b.running_mean),
                        ("running_var", &b.running_var),
                    ] {
                        tensors.push((format!("{}.{field}", n.name), vec![v.len()], v));
                    }
                }
                Layer::Compactor(c) => tensors.push((format!("{}.q", n.name), c.q.dims().to_vec(), c.q.data())),
                _ => {}
            }
        }
        for (name, v) in &self.velocity {
            tensors.push((format!("velocity/{name}"), vec![v.len()], v));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in &dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for &v in data {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; payloads stored at another precision are cast.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let meta = read_header(&mut r)?;
        let count = r.u32()? as usize;
        let mut raw = BTreeMap::new();
        for _ in 0..count {
            let t = r.tensor()?;
            raw.insert(t.name.clone(), t);
        }
        let mut model = build_graph::<T>(&meta, &mut raw)?;
        model.targets = meta.targets.clone();
        model.validate()?;
        let mut velocity = BTreeMap::new();
        for (name, t) in raw {
            match name.strip_prefix("velocity/") {
                Some(p) => {
                    velocity.insert(p.to_string(), t.payload.into_iter().map(T::lit).collect());
                }
                None => return Err(Error::Checkpoint(format!("unexpected tensor {name} ({:?})", t.dtype))),
            }
        }
        Ok(Self { meta, model, velocity })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Reads only the metadata block of a checkpoint file.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path)?;
    read_header(&mut Reader { bytes: &bytes, pos: 0 })
}

fn read_header(r: &mut Reader<'_>) -> Result<CheckpointMeta> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u64()? as usize;
    Ok(serde_json::from_slice(r.take(meta_len)?)?)
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn node_meta<T: Scalar>(n: &Node<T>) -> NodeMeta {
    let layer = match &n.layer {
        Layer::Input {
            channels,
            height,
            width,
        } => LayerMeta::Input {
            channels: *channels,
            height: *height,
            width: *width,
        },
        Layer::Conv(c) => LayerMeta::Conv {
            stride: c.stride,
            padding: c.padding,
            bias: c.bias.is_some(),
        },
        Layer::Linear(c) => LayerMeta::Linear {
            stride: c.stride,
            padding: c.padding,
            bias: c.bias.is_some(),
        },
        Layer::BatchNorm(b) => LayerMeta::BatchNorm {
            eps: b.eps,
            momentum: b.momentum,
        },
        Layer::Compactor(c) => LayerMeta::Compactor {
            owner: c.owner,
            mask: c.mask.clone(),
        },
        Layer::Relu => LayerMeta::Relu,
        Layer::GlobalAvgPool => LayerMeta::GlobalAvgPool,
        Layer::Add => LayerMeta::Add,
    };
    NodeMeta {
        name: n.name.clone(),
        inputs: n.inputs.clone(),
        layer,
    }
}

fn take_tensor(raw: &mut BTreeMap<String, RawTensor>, name: &str) -> Result<RawTensor> {
    raw.remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

fn take4<T: Scalar>(raw: &mut BTreeMap<String, RawTensor>, name: &str) -> Result<Tensor4<T>> {
    let t = take_tensor(raw, name)?;
    let dims: [usize; 4] = t
        .dims
        .clone()
        .try_into()
        .map_err(|_| Error::Checkpoint(format!("tensor {name} has rank {}, expected 4", t.dims.len())))?;
    Tensor4::from_vec(dims, t.payload.into_iter().map(T::lit).collect())
}

fn take_vec<T: Scalar>(raw: &mut BTreeMap<String, RawTensor>, name: &str, len: usize) -> Result<Vec<T>> {
    let t = take_tensor(raw, name)?;
    if t.payload.len() != len {
        return Err(Error::Checkpoint(format!("tensor {name} has {} entries, expected {len}", t.payload.len())));
    }
    Ok(t.payload.into_iter().map(T::lit).collect())
}

fn build_graph<T: Scalar>(meta: &CheckpointMeta, raw: &mut BTreeMap<String, RawTensor>) -> Result<ModelGraph<T>> {
    let Some(first) = meta.nodes.first() else {
        return Err(Error::Checkpoint("no nodes".into()));
    };
    let LayerMeta::Input {
        channels,
        height,
        width,
    } = first.layer
    else {
        return Err(Error::Checkpoint("first node must be the input".into()));
    };
    let mut g = ModelGraph::new(meta.model_name.clone(), channels, height, width);
    g.nodes[0].name = first.name.clone();
    for n in &meta.nodes[1..] {
        if n.inputs.iter().any(|&i| i >= g.nodes.len()) {
            return Err(Error::Checkpoint(format!("node {} reads a later node", n.name)));
        }
        let conv = |raw: &mut BTreeMap<String, RawTensor>, stride, padding, bias: bool| -> Result<ConvLayer<T>> {
            let kernel = take4::<T>(raw, &format!("{}.kernel", n.name))?;
            let d = kernel.dims()[0];
            let b = if bias {
                Some(take_vec(raw, &format!("{}.bias", n.name), d)?)
            } else {
                None
            };
            Ok(ConvLayer::new(kernel, b, stride, padding))
        };
        let layer = match &n.layer {
            LayerMeta::Input { .. } => return Err(Error::Checkpoint("second input node".into())),
            LayerMeta::Conv { stride, padding, bias } => Layer::Conv(conv(raw, *stride, *padding, *bias)?),
            LayerMeta::Linear { stride, padding, bias } => Layer::Linear(conv(raw, *stride, *padding, *bias)?),
            LayerMeta::BatchNorm { eps, momentum } => {
                let gamma: Vec<T> = take_tensor(raw, &format!("{}.gamma", n.name))?
                    .payload
                    .into_iter()
                    .map(T::lit)
                    .collect();
                let d = gamma.len();
                let mut b = BatchNormLayer::new(d);
                b.gamma = gamma;
                b.beta = take_vec(raw, &format!("{}.beta", n.name), d)?;
                b.running_mean = take_vec(raw, &format!("{}.running_mean", n.name), d)?;
                b.running_var = take_vec(raw, &format!("{}.running_var", n.name), d)?;
                b.eps = *eps;
                b.momentum = *momentum;
                Layer::BatchNorm(b)
            }
            LayerMeta::Compactor { owner, mask } => {
                let q = take4::<T>(raw, &format!("{}.q", n.name))?;
                let d = q.dims()[0];
                if mask.len() != d || q.dims() != [d, d, 1, 1] {
                    return Err(Error::Checkpoint(format!("compactor {} has inconsistent shape", n.name)));
                }
                let mut c = Compactor::identity(d, *owner);
                c.q = q;
                c.mask = mask.clone();
                Layer::Compactor(c)
            }
            LayerMeta::Relu => Layer::Relu,
            LayerMeta::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerMeta::Add => Layer::Add,
        };
        g.push(n.name.clone(), layer, &n.inputs);
    }
    Ok(g)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<RawTensor> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tag = self.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.u64()? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let bytes = self.take(count.checked_mul(dtype.size()).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let payload = match dtype {
            DType::F32 => bytes.chunks(4).map(|b| f32::read_le(b) as f64).collect(),
            DType::F64 => bytes.chunks(8).map(f64::read_le).collect(),
        };
        Ok(RawTensor {
            name,
            dtype,
            dims,
            payload,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::insert_compactors;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturbed(seed: u64) -> ModelGraph<f32> {
        let mut g = insert_compactors(&ArchSpec::miniconv(&[4, 6, 5], [3, 8, 8], 3).build::<f32>(seed).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in g.params_mut() {
            let noise = Tensor4::<f32>::randn([1, 1, 1, p.value.len()], 0.5, &mut rng);
            for (v, n) in p.value.iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
        if let Some(c) = g.compactor_mut(1) {
            c.mask[2] = false;
        }
        g
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(seed in 0u64..1000) {
            let g = perturbed(seed);
            let mut c = Checkpoint::of_model(&g, Some(ArchSpec::miniconv(&[4, 6, 5], [3, 8, 8], 3)), seed);
            c.velocity.insert("conv0.kernel".into(), vec![1.5, -0.0, f32::MIN_POSITIVE]);
            let mut back = Checkpoint::<f32>::decode(&c.encode().unwrap()).unwrap();
            prop_assert_eq!(&back.model, &g);
            prop_assert_eq!(&back.velocity, &c.velocity);
            prop_assert_eq!(back.meta.masks.clone(), c.meta.masks.clone());
            for (a, b) in back.model.params_mut().iter().zip(perturbed(seed).params_mut().iter()) {
                prop_assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn rejects_unknown_version_and_garbage() {
        let g = perturbed(1);
        let mut bytes = Checkpoint::of_model(&g, None, 0).encode().unwrap();
        assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 3]).is_err());
        bytes[4] = 9;
        match Checkpoint::<f32>::decode(&bytes) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("version")),
            other => panic!("{other:?}"),
        }
        assert!(Checkpoint::<f32>::decode(b"NOPE").is_err());
    }

    #[test]
    fn loads_at_other_precision() {
        let g = perturbed(2);
        let bytes = Checkpoint::of_model(&g, None, 0).encode().unwrap();
        let wide = Checkpoint::<f64>::decode(&bytes).unwrap();
        let back = Checkpoint::of_model(&wide.model, None, 0).encode().unwrap();
        assert_eq!(Checkpoint::<f32>::decode(&back).unwrap().model, g);
    }

    #[test]
    fn kinds_and_atomic_save() {
        let base = ArchSpec::miniconv(&[4, 4], [3, 8, 8], 3).build::<f32>(0).unwrap();
        assert_eq!(Checkpoint::of_model(&base, None, 0).meta.kind, ModelKind::Base);
        let re = insert_compactors(&base).unwrap();
        assert_eq!(Checkpoint::of_model(&re, None, 0).meta.kind, ModelKind::Reparam);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rsrp");
        Checkpoint::of_model(&re, None, 7).save(&p).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        let c = Checkpoint::<f32>::load(&p).unwrap();
        assert_eq!(c.model, re);
        assert_eq!(c.meta.seed, 7);
    }
}
