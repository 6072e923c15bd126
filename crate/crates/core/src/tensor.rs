//! Dense rank-4 tensors in `(N, C, H, W)` row-major order and the
//! convolution primitive the rest of the crate is built on.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Per-channel parameter vector (biases, BN statistics).
pub type Vector<T> = Vec<T>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(shape_err("tensor data length", &dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(dims: [usize; 4], std: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(z * std)
            })
            .collect();
        Self { dims, data }
    }

    /// A `d×d×1×1` pointwise kernel holding the identity matrix.
    pub fn identity_pointwise(d: usize) -> Self {
        let mut t = Self::zeros([d, d, 1, 1]);
        for j in 0..d {
            t.data[j * d + j] = T::one();
        }
        t
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, p: usize, q: usize) -> usize {
        ((i * self.dims[1] + j) * self.dims[2] + p) * self.dims[3] + q
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, p: usize, q: usize) -> T {
        self.data[self.offset(i, j, p, q)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, p: usize, q: usize, v: T) {
        let o = self.offset(i, j, p, q);
        self.data[o] = v;
    }

    /// Number of elements in one slice along the first axis.
    pub fn row_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let r = self.row_len();
        &mut self.data[i * r..(i + 1) * r]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|x| x * a)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err("add", &self.dims, &other.dims));
        }
        Ok(Self {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(shape_err("max_abs_diff", &self.dims, &other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|x| U::lit(x.f64())).collect(),
        }
    }

    /// Keeps the listed slices of the first axis, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let r = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * r);
        for &i in rows {
            if i >= self.dims[0] {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for dim {}",
                    self.dims[0]
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            dims: [rows.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        })
    }

    /// Keeps the listed slices of the second axis, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArgument(format!(
                "channel {bad} out of range for dim {c}"
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * cols.len() * hw);
        for i in 0..n {
            for &j in cols {
                let o = (i * c + j) * hw;
                data.extend_from_slice(&self.data[o..o + hw]);
            }
        }
        Ok(Self {
            dims: [n, cols.len(), h, w],
            data,
        })
    }
}

/// Swaps the first two axes: `(a, b, h, w) -> (b, a, h, w)`.
pub fn transpose01<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [a, b, h, w] = x.dims;
    let hw = h * w;
    let mut out = Tensor4::zeros([b, a, h, w]);
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * hw;
            let dst = (j * a + i) * hw;
            out.data[dst..dst + hw].copy_from_slice(&x.data[src..src + hw]);
        }
    }
    out
}

/// Euclidean norm of every slice along the first axis.
pub fn row_norms<T: Scalar>(x: &Tensor4<T>) -> Vector<T> {
    (0..x.dims[0])
        .map(|i| x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(
        input: &Tensor4<T>,
        kernel: &Tensor4<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = input.dims;
        let [d, kc, kh, kw] = kernel.dims;
        if kc != c {
            return Err(shape_err("conv2d input vs kernel", &input.dims, &kernel.dims));
        }
        if kh != kw {
            return Err(shape_err("conv2d non-square kernel", &kernel.dims, &[kh, kw]));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (Some(oh), Some(ow)) = (
            conv_out_size(h, kh, stride, padding),
            conv_out_size(w, kw, stride, padding),
        ) else {
            return Err(shape_err("conv2d kernel larger than padded input", &input.dims, &kernel.dims));
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            d,
            k: kh,
            oh,
            ow,
            stride,
            padding,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    /// Lowers one sample into a `(C·k·k) × (H'·W')` matrix.
    fn im2col<T: Scalar>(&self, sample: &[T], cols: &mut [T]) {
        let (k, s, pad) = (self.k, self.stride as isize, self.padding as isize);
        let sp = self.spatial();
        for c in 0..self.c {
            let plane = &sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for p in 0..k {
                for q in 0..k {
                    let row = &mut cols[((c * k + p) * k + q) * sp..((c * k + p) * k + q + 1) * sp];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s - pad + p as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s - pad + q as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a lowered gradient back into one sample.
    fn col2im<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        let (k, s, pad) = (self.k, self.stride as isize, self.padding as isize);
        let sp = self.spatial();
        for c in 0..self.c {
            let plane = &mut sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for p in 0..k {
                for q in 0..k {
                    let row = &cols[((c * k + p) * k + q) * sp..((c * k + p) * k + q + 1) * sp];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s - pad + p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = ox as isize * s - pad + q as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D convolution (cross-correlation) with optional bias
/// broadcast over every spatial position.
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.d {
            return Err(shape_err("conv2d bias vs kernel", &[b.len()], &kernel.dims));
        }
    }
    let (patch, sp) = (g.patch(), g.spatial());
    let in_len = g.c * g.h * g.w;
    let mut out = Tensor4::zeros([g.n, g.d, g.oh, g.ow]);
    out.data
        .par_chunks_mut(g.d * sp)
        .zip(input.data.par_chunks(in_len.max(1)))
        .for_each_init(
            || vec![T::zero(); if g.is_pointwise() { 0 } else { patch * sp }],
            |cols, (dst, src)| {
                let cols: &[T] = if g.is_pointwise() {
                    src
                } else {
                    g.im2col(src, cols);
                    cols
                };
                if let Some(b) = bias {
                    for (row, &bj) in dst.chunks_mut(sp).zip(b) {
                        row.fill(bj);
                    }
                }
                let beta = if bias.is_some() { T::one() } else { T::zero() };
                // SAFETY: kernel is d×patch row-major, cols is patch×sp, dst is d×sp.
                unsafe {
                    T::gemm(
                        g.d,
                        patch,
                        sp,
                        T::one(),
                        kernel.data.as_ptr(),
                        patch as isize,
                        1,
                        cols.as_ptr(),
                        sp as isize,
                        1,
                        beta,
                        dst.as_mut_ptr(),
                        sp as isize,
                        1,
                    );
                }
            },
        );
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, kernel and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub kernel: Tensor4<T>,
    pub bias: Vector<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    if grad_out.dims != [g.n, g.d, g.oh, g.ow] {
        return Err(shape_err("conv2d_backward grad_out", &grad_out.dims, &[g.n, g.d, g.oh, g.ow]));
    }
    let (patch, sp) = (g.patch(), g.spatial());
    let in_len = g.c * g.h * g.w;
    let out_len = g.d * sp;

    let mut grad_bias = vec![T::zero(); g.d];
    for sample in grad_out.data.chunks(out_len) {
        for (b, row) in grad_bias.iter_mut().zip(sample.chunks(sp)) {
            *b += row.iter().copied().sum::<T>();
        }
    }

    // Per-sample kernel partials are reduced in sample order so the result
    // does not depend on thread scheduling.
    let partials: Vec<Vec<T>> = input
        .data
        .par_chunks(in_len.max(1))
        .zip(grad_out.data.par_chunks(out_len.max(1)))
        .map(|(src, gy)| {
            let mut owned = Vec::new();
            let cols: &[T] = if g.is_pointwise() {
                src
            } else {
                owned.resize(patch * sp, T::zero());
                g.im2col(src, &mut owned);
                &owned
            };
            let mut gk = vec![T::zero(); g.d * patch];
            // SAFETY: gy is d×sp, cols^T is sp×patch, gk is d×patch.
            unsafe {
                T::gemm(
                    g.d,
                    sp,
                    patch,
                    T::one(),
                    gy.as_ptr(),
                    sp as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    sp as isize,
                    T::zero(),
                    gk.as_mut_ptr(),
                    patch as isize,
                    1,
                );
            }
            gk
        })
        .collect();
    let mut grad_kernel = Tensor4::zeros(kernel.dims);
    for p in &partials {
        for (a, &b) in grad_kernel.data.iter_mut().zip(p) {
            *a += b;
        }
    }

    let grad_input = if need_input_grad {
        let mut gi = Tensor4::zeros(input.dims);
        gi.data
            .par_chunks_mut(in_len.max(1))
            .zip(grad_out.data.par_chunks(out_len.max(1)))
            .for_each_init(
                || vec![T::zero(); patch * sp],
                |gcols, (dst, gy)| {
                    let target: &mut [T] = if g.is_pointwise() { dst } else { gcols };
                    // SAFETY: kernel^T is patch×d, gy is d×sp, target is patch×sp.
                    unsafe {
                        T::gemm(
                            patch,
                            g.d,
                            sp,
                            T::one(),
                            kernel.data.as_ptr(),
                            1,
                            patch as isize,
                            gy.as_ptr(),
                            sp as isize,
                            1,
                            T::zero(),
                            target.as_mut_ptr(),
                            sp as isize,
                            1,
                        );
                    }
                    if !g.is_pointwise() {
                        g.col2im(gcols, dst);
                    }
                },
            );
        Some(gi)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}
