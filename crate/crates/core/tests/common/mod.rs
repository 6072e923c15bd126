#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resrep::graph::{Layer, ModelGraph, Target};
use resrep::layers::{BatchNormLayer, Compactor, ConvLayer};
use resrep::{Scalar, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bn<T: Scalar>(d: usize, r: &mut ChaCha8Rng) -> BatchNormLayer<T> {
    let mut b = BatchNormLayer::new(d);
    for j in 0..d {
        b.gamma[j] = T::lit(r.gen_range(0.5..1.5));
        b.beta[j] = T::lit(r.gen_range(-0.5..0.5));
        b.running_mean[j] = T::lit(r.gen_range(-0.2..0.2));
        b.running_var[j] = T::lit(r.gen_range(0.5..2.0));
    }
    b
}

/// Conv-BN-compactor-ReLU, a second conv-BN, a projection shortcut into a
/// residual add, pooling and a biased classifier: every layer type once.
pub fn tiny_model<T: Scalar>(seed: u64, with_compactor: bool) -> ModelGraph<T> {
    let mut r = rng(seed);
    let mut g = ModelGraph::new("tiny", 2, 5, 5);
    let c1 = g.push("conv1", Layer::Conv(ConvLayer::new(Tensor4::randn([3, 2, 3, 3], 0.5, &mut r), None, 1, 1)), &[0]);
    let b1 = g.push("bn1", Layer::BatchNorm(bn(3, &mut r)), &[c1]);
    let mut tail = b1;
    let mut compactor = None;
    if with_compactor {
        let mut c = Compactor::identity(3, c1);
        c.q = Tensor4::randn([3, 3, 1, 1], 0.7, &mut r);
        tail = g.push("conv1.compactor", Layer::Compactor(c), &[b1]);
        compactor = Some(tail);
    }
    let r1 = g.push("relu1", Layer::Relu, &[tail]);
    let c2 = g.push("conv2", Layer::Conv(ConvLayer::new(Tensor4::randn([3, 3, 3, 3], 0.4, &mut r), None, 1, 1)), &[r1]);
    let b2 = g.push("bn2", Layer::BatchNorm(bn(3, &mut r)), &[c2]);
    let cs = g.push("short.conv", Layer::Conv(ConvLayer::new(Tensor4::randn([3, 2, 1, 1], 0.5, &mut r), None, 1, 0)), &[0]);
    let bs = g.push("short.bn", Layer::BatchNorm(bn(3, &mut r)), &[cs]);
    let add = g.push("add", Layer::Add, &[b2, bs]);
    let r2 = g.push("relu2", Layer::Relu, &[add]);
    let p = g.push("gap", Layer::GlobalAvgPool, &[r2]);
    let bias = (0..4).map(|_| T::lit(r.gen_range(-0.3..0.3))).collect();
    g.push("fc", Layer::Linear(ConvLayer::new(Tensor4::randn([4, 3, 1, 1], 0.8, &mut r), Some(bias), 1, 0)), &[p]);
    g.targets.push(Target {
        conv: c1,
        bn: b1,
        compactor,
        successor: c2,
    });
    g.validate().expect("tiny model is valid");
    g
}

pub fn batch<T: Scalar>(n: usize, dims: [usize; 3], seed: u64) -> Tensor4<T> {
    Tensor4::randn([n, dims[0], dims[1], dims[2]], 1.0, &mut rng(seed))
}

pub fn labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(0..classes)).collect()
}

/// Smallest ReLU input magnitude a gradient-check instance must have.
pub const KINK_MARGIN: f64 = 5e-3;

/// First seeded tiny model and batch whose ReLU inputs all keep
/// `KINK_MARGIN` away from zero, so a finite-difference step cannot cross
/// a kink.
pub fn smooth_instance(from_seed: u64, with_compactor: bool) -> (ModelGraph<f64>, Tensor4<f64>, Vec<usize>) {
    for seed in from_seed.. {
        let g = tiny_model::<f64>(seed, with_compactor);
        let x = batch::<f64>(4, [2, 5, 5], seed + 1000);
        if resrep::gradcheck::relu_margin(&g, &x).unwrap() >= KINK_MARGIN {
            return (g, x, labels(4, 4, seed + 2000));
        }
    }
    unreachable!()
}
