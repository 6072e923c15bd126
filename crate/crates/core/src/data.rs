//! Datasets: the CIFAR-10 binary distribution, the standard crop/flip
//! augmentation, and a synthetic template task for desk-scale runs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n·c·h·w` pixels, already normalized.
    pub images: Vec<f32>,
    pub dims: [usize; 3],
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.images[i * s..(i + 1) * s]
    }

    /// Gathers the listed samples into a batch tensor.
    pub fn gather<T: Scalar>(&self, idx: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| T::lit(v as f64)));
        }
        let [c, h, w] = self.dims;
        let x = Tensor4::from_vec([idx.len(), c, h, w], data).expect("consistent batch size");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Sample order for one epoch: a seeded shuffle, or the identity.
    pub fn order(&self, shuffle_seed: Option<u64>) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx
    }

    /// Batches in `order`; the last batch may be short.
    pub fn batches<T: Scalar>(&self, order: &[usize], batch_size: usize) -> Vec<(Tensor4<T>, Vec<usize>)> {
        order.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let s = self.sample_len();
        let mut images = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            dims: self.dims,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

/// Decodes one 3073-byte record into its label and `[0, 1]`-scaled pixels.
pub fn decode_record(record: &[u8]) -> (usize, Vec<f32>) {
    let label = record[0] as usize;
    let pixels = record[1..CIFAR_RECORD].iter().map(|&b| b as f32 / 255.0).collect();
    (label, pixels)
}

fn read_batch_file(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::DataFormat {
        message: format!("{}: {e}", path.display()),
        offset: 0,
    })?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::DataFormat {
            message: format!(
                "{}: truncated record ({} bytes is not a multiple of {CIFAR_RECORD})",
                path.display(),
                bytes.len()
            ),
            offset: whole as u64,
        });
    }
    for (r, record) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let (label, pixels) = decode_record(record);
        if label >= 10 {
            return Err(Error::DataFormat {
                message: format!("{}: label {label} out of range", path.display()),
                offset: (r * CIFAR_RECORD) as u64,
            });
        }
        labels.push(label);
        images.extend(pixels);
    }
    Ok(())
}

/// Loads the standard binary CIFAR-10 batches from `dir` and standardizes
/// each channel with the conventional CIFAR-10 statistics.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        read_batch_file(&dir.join(f), &mut images, &mut labels)?;
    }
    let plane = 32 * 32;
    for (p, chunk) in images.chunks_mut(plane).enumerate() {
        let c = p % 3;
        for v in chunk {
            *v = (*v - CIFAR_MEAN[c]) / CIFAR_STD[c];
        }
    }
    Ok(Dataset {
        images,
        dims: [3, 32, 32],
        labels,
        num_classes: 10,
        split,
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
    })
}

/// Pads one `c×32×32` image to 40×40 with zeros, crops 32×32 at
/// `(dy, dx)` and optionally mirrors it left-right.
pub fn crop_flip<T: Scalar>(img: &[T], channels: usize, dy: usize, dx: usize, flip: bool) -> Vec<T> {
    let n = 32;
    let mut out = vec![T::zero(); channels * n * n];
    for c in 0..channels {
        for y in 0..n {
            let sy = (y + dy) as isize - CIFAR_PAD as isize;
            if !(0..n as isize).contains(&sy) {
                continue;
            }
            for x in 0..n {
                let sx = (x + dx) as isize - CIFAR_PAD as isize;
                if !(0..n as isize).contains(&sx) {
                    continue;
                }
                let ox = if flip { n - 1 - x } else { x };
                out[(c * n + y) * n + ox] = img[(c * n + sy as usize) * n + sx as usize];
            }
        }
    }
    out
}

/// Random 40×40-padded crop plus a fair-coin horizontal flip per sample.
pub fn augment<T: Scalar, R: Rng + ?Sized>(batch: &Tensor4<T>, rng: &mut R) -> Result<Tensor4<T>> {
    let [n, c, h, w] = batch.dims();
    if h != 32 || w != 32 {
        return Err(Error::InvalidArgument(format!("augment expects 32x32 inputs, got {h}x{w}")));
    }
    let s = c * h * w;
    let mut out = Vec::with_capacity(n * s);
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * CIFAR_PAD);
        let dx = rng.gen_range(0..=2 * CIFAR_PAD);
        let flip = rng.gen_bool(0.5);
        out.extend(crop_flip(&batch.data()[i * s..(i + 1) * s], c, dy, dx, flip));
    }
    Tensor4::from_vec(batch.dims(), out)
}

/// Configuration of the synthetic template task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dims: [usize; 3],
    pub noise: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dims: [3, 16, 16],
            noise: 1.0,
        }
    }
}

/// Per-class Gaussian templates; shared by every split drawn from `seed`.
pub fn synthetic_templates(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: usize = spec.dims.iter().product();
    (0..spec.num_classes)
        .map(|_| (0..s).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect()
}

/// `n` samples of template-plus-noise with balanced, shuffled labels.
/// `sample_seed` draws the noise; `seed` fixes the templates, so train and
/// test splits share classes when they share `seed`.
pub fn make_synthetic(spec: &SyntheticSpec, n: usize, seed: u64, sample_seed: u64, split: Split) -> Result<Dataset> {
    if spec.num_classes == 0 || n < spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "need n >= num_classes, got n={n}, classes={}",
            spec.num_classes
        )));
    }
    let templates = synthetic_templates(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x5eed_da7a);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let s: usize = spec.dims.iter().product();
    let mut images = Vec::with_capacity(n * s);
    for &y in &labels {
        images.extend(
            templates[y]
                .iter()
                .map(|&t| t + spec.noise * rng.sample::<f32, _>(StandardNormal)),
        );
    }
    Ok(Dataset {
        images,
        dims: spec.dims,
        labels,
        num_classes: spec.num_classes,
        split,
        mean: vec![0.0; spec.dims[0]],
        std: vec![1.0; spec.dims[0]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_decoding() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        rec[1] = 255;
        let (label, px) = decode_record(&rec);
        assert_eq!(label, 7);
        assert_eq!(px[0], 1.0);
        assert_eq!(px.len(), 3072);
    }

    #[test]
    fn loads_synthetic_cifar_files() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            let mut bytes = vec![0u8; 3 * CIFAR_RECORD];
            bytes[0] = i as u8;
            fs::write(dir.path().join(format!("data_batch_{i}.bin")), bytes).unwrap();
        }
        let d = load_cifar10(dir.path(), Split::Train).unwrap();
        assert_eq!(d.len(), 15);
        assert_eq!(d.labels[0], 1);
        assert_eq!(d.labels[12], 5);
        assert!((d.images[0] - (0.0 - CIFAR_MEAN[0]) / CIFAR_STD[0]).abs() < 1e-6);

        fs::write(dir.path().join("test_batch.bin"), vec![0u8; CIFAR_RECORD + 10]).unwrap();
        match load_cifar10(dir.path(), Split::Test) {
            Err(Error::DataFormat { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("expected format error, got {other:?}"),
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(load_cifar10(empty.path(), Split::Test).is_err());
    }

    fn image(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn center_crop_without_flip_is_identity() {
        let img = image(1);
        assert_eq!(crop_flip(&img, 3, 4, 4, false), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = image(2);
        let once = crop_flip(&img, 3, 4, 4, true);
        assert_eq!(once[5], img[31 - 5]);
        assert_eq!(crop_flip(&once, 3, 4, 4, true), img);
    }

    #[test]
    fn crop_offsets_stay_in_range() {
        // A one-hot pixel moves by exactly the crop offset, so its new
        // position reveals (dy, dx).
        let mut img = vec![0.0f64; 3 * 32 * 32];
        img[16 * 32 + 16] = 1.0;
        let batch = Tensor4::from_vec([1, 3, 32, 32], img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..4000 {
            let out = augment(&batch, &mut rng).unwrap();
            let pos = out.data()[..1024].iter().position(|&v| v == 1.0).unwrap();
            let (y, x) = (pos / 32, pos % 32);
            let dy = 16 + 4 - y;
            let dx_plain = 16 + 4 - x as isize;
            let dx_flip = 16 + 4 - (31 - x) as isize;
            assert!(dy <= 8);
            assert!((0..=8).contains(&dx_plain) || (0..=8).contains(&dx_flip));
            seen.insert(dy);
        }
        assert_eq!(seen.len(), 9);
        assert!(augment(&Tensor4::<f32>::zeros([1, 3, 16, 16]), &mut rng).is_err());
    }

    #[test]
    fn synthetic_properties() {
        let spec = SyntheticSpec {
            num_classes: 10,
            dims: [3, 8, 8],
            noise: 0.0,
        };
        let a = make_synthetic(&spec, 1003, 9, 9, Split::Train).unwrap();
        let b = make_synthetic(&spec, 1003, 9, 9, Split::Train).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 10];
        for &y in &a.labels {
            counts[y] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");

        // noise-free samples are their templates: nearest template is exact
        let t = synthetic_templates(&spec, 9);
        for i in 0..a.len() {
            let x = a.image(i);
            let best = (0..10)
                .min_by(|&p, &q| {
                    let d = |k: usize| x.iter().zip(&t[k]).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
                    d(p).total_cmp(&d(q))
                })
                .unwrap();
            assert_eq!(best, a.labels[i]);
        }
        assert!(make_synthetic(&spec, 5, 1, 1, Split::Train).is_err());
    }
}
