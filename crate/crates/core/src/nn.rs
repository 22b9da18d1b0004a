//! Layer primitives with hand-written backward passes.
//!
//! Everything operates on a single `C x H x W` tensor; batching happens one
//! level up by looping over samples and accumulating gradients.

use rand::Rng;

use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::Tensor;

/// Variance floor for mean-variance normalization (`norm(.)` in the attention
/// block and the content loss).
pub const NORM_EPS: f64 = 1e-5;

/// Target im2col scratch size, in elements. Small enough to stay in cache,
/// which matters for the wide, shallow layers near the image.
const COL_BUDGET: usize = 1 << 18;

/// Lower bound on the GEMM width of one im2col chunk.
const MIN_CHUNK_COLS: usize = 256;

/// Reflection index for one pixel of padding. A single-pixel axis reflects
/// onto itself.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        0
    } else if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

/// Square convolution, kernel 1 (pointwise) or 3 (reflection padded), stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub(crate) c_in: usize,
    pub(crate) c_out: usize,
    pub(crate) kernel: usize,
    /// `c_out x c_in x kernel x kernel`
    pub(crate) weight: Vec<T>,
    pub(crate) bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        Self {
            c_in,
            c_out,
            kernel,
            weight: vec![T::zero(); c_out * c_in * kernel * kernel],
            bias: vec![T::zero(); c_out],
        }
    }

    /// Uniform fan-in initialization with bound `sqrt(3 * gain^2 / fan_in)`;
    /// biases start at zero.
    pub fn init_uniform(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::zeros(c_in, c_out, kernel);
        let bound = (3.0 * gain * gain / conv.fan_in() as f64).sqrt();
        for w in conv.weight.iter_mut() {
            *w = T::of(rng.random_range(-bound..bound));
        }
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c_in, self.c_out, self.kernel)
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.c_in
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut [T]; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub(crate) fn params(&self) -> [&[T]; 2] {
        [&self.weight, &self.bias]
    }

    fn rows_per_chunk(&self, h: usize, w: usize) -> usize {
        let per_row = self.c_in * 9 * w;
        (COL_BUDGET / per_row.max(1))
            .max(MIN_CHUNK_COLS.div_ceil(w))
            .clamp(1, h)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.c_in, "conv input channels");
        let (h, w) = (x.height(), x.width());
        let n = h * w;
        let mut out = Tensor::zeros(self.c_out, h, w);
        for (o, &b) in self.bias.iter().enumerate() {
            out.channel_mut(o).iter_mut().for_each(|v| *v = b);
        }
        let k = self.c_in * self.kernel * self.kernel;
        let wmat = MatRef::dense(&self.weight, self.c_out, k);
        if self.kernel == 1 {
            gemm(
                T::one(),
                wmat,
                MatRef::dense(x.data(), self.c_in, n),
                T::one(),
                MatMut::dense(out.data_mut(), self.c_out, n),
            );
            return out;
        }
        let rows = self.rows_per_chunk(h, w);
        let mut cols = vec![T::zero(); k * rows * w];
        let mut y0 = 0;
        while y0 < h {
            let r = rows.min(h - y0);
            let m = r * w;
            im2col3(x, y0, r, &mut cols[..k * m]);
            let dst = MatMut {
                data: &mut out.data_mut()[y0 * w..],
                rows: self.c_out,
                cols: m,
                rs: n,
                cs: 1,
            };
            gemm(
                T::one(),
                wmat,
                MatRef::dense(&cols[..k * m], k, m),
                T::one(),
                dst,
            );
            y0 += r;
        }
        out
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns the
    /// input gradient when `want_input` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: Option<&mut Conv2d<T>>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let (h, w) = (x.height(), x.width());
        let n = h * w;
        assert_eq!(dy.shape(), (self.c_out, h, w), "conv output gradient shape");
        let k = self.c_in * self.kernel * self.kernel;
        let wmat = MatRef::dense(&self.weight, self.c_out, k);
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            for o in 0..self.c_out {
                let s: T = dy.channel(o).iter().copied().sum();
                g.bias[o] += s;
            }
        }
        if self.kernel == 1 {
            let dymat = MatRef::dense(dy.data(), self.c_out, n);
            if let Some(g) = grad {
                gemm(
                    T::one(),
                    dymat,
                    MatRef::dense(x.data(), self.c_in, n).t(),
                    T::one(),
                    MatMut::dense(&mut g.weight, self.c_out, k),
                );
            }
            return want_input.then(|| {
                let mut dx = Tensor::zeros(self.c_in, h, w);
                gemm(
                    T::one(),
                    wmat.t(),
                    dymat,
                    T::zero(),
                    MatMut::dense(dx.data_mut(), self.c_in, n),
                );
                dx
            });
        }
        let rows = self.rows_per_chunk(h, w);
        let mut cols = vec![T::zero(); k * rows * w];
        let mut dx = want_input.then(|| Tensor::zeros(self.c_in, h, w));
        let mut y0 = 0;
        while y0 < h {
            let r = rows.min(h - y0);
            let m = r * w;
            let dychunk = MatRef {
                data: &dy.data()[y0 * w..],
                rows: self.c_out,
                cols: m,
                rs: n,
                cs: 1,
            };
            if let Some(g) = grad.as_deref_mut() {
                im2col3(x, y0, r, &mut cols[..k * m]);
                gemm(
                    T::one(),
                    dychunk,
                    MatRef::dense(&cols[..k * m], k, m).t(),
                    T::one(),
                    MatMut::dense(&mut g.weight, self.c_out, k),
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    T::one(),
                    wmat.t(),
                    dychunk,
                    T::zero(),
                    MatMut::dense(&mut cols[..k * m], k, m),
                );
                col2im3(&cols[..k * m], y0, r, dx);
            }
            y0 += r;
        }
        dx
    }
}

/// Unfolds rows `y0..y0+rows` of the reflection-padded input into a
/// `(C*9) x (rows*W)` matrix.
fn im2col3<T: Real>(x: &Tensor<T>, y0: usize, rows: usize, cols: &mut [T]) {
    let (c, h, w) = x.shape();
    let m = rows * w;
    for ci in 0..c {
        let plane = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut cols[(ci * 9 + ky * 3 + kx) * m..][..m];
                for yy in 0..rows {
                    let sy = reflect((y0 + yy + ky) as isize - 1, h);
                    let src = &plane[sy * w..(sy + 1) * w];
                    let d = &mut dst[yy * w..(yy + 1) * w];
                    if w == 1 {
                        d[0] = src[0];
                        continue;
                    }
                    match kx {
                        0 => {
                            d[0] = src[1];
                            d[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => d.copy_from_slice(src),
                        _ => {
                            d[..w - 1].copy_from_slice(&src[1..]);
                            d[w - 1] = src[w - 2];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters column gradients back onto the input,
/// folding the reflected border into the interior.
fn col2im3<T: Real>(cols: &[T], y0: usize, rows: usize, dx: &mut Tensor<T>) {
    let (c, h, w) = dx.shape();
    let m = rows * w;
    for ci in 0..c {
        let plane = dx.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &cols[(ci * 9 + ky * 3 + kx) * m..][..m];
                for yy in 0..rows {
                    let sy = reflect((y0 + yy + ky) as isize - 1, h);
                    let d = &mut plane[sy * w..(sy + 1) * w];
                    let s = &src[yy * w..(yy + 1) * w];
                    if w == 1 {
                        d[0] += s[0];
                        continue;
                    }
                    match kx {
                        0 => {
                            d[1] += s[0];
                            for (a, &b) in d[..w - 1].iter_mut().zip(&s[1..]) {
                                *a += b;
                            }
                        }
                        1 => {
                            for (a, &b) in d.iter_mut().zip(s) {
                                *a += b;
                            }
                        }
                        _ => {
                            for (a, &b) in d[1..].iter_mut().zip(&s[..w - 1]) {
                                *a += b;
                            }
                            d[w - 2] += s[w - 1];
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling, stride 2, floor semantics. Returns the pooled tensor and
/// the in-plane argmax index of every output element (first maximum wins).
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = x.channel(ci);
        let dst = out.channel_mut(ci);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[j] > plane[best] {
                        best = j;
                    }
                }
                dst[oy * ow + ox] = plane[best];
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward<T: Real>(
    input_shape: (usize, usize, usize),
    idx: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = input_shape;
    let mut dx = Tensor::zeros(c, h, w);
    let per = dy.plane();
    for ci in 0..c {
        let g = dy.channel(ci);
        let ix = &idx[ci * per..(ci + 1) * per];
        let d = dx.channel_mut(ci);
        for (&j, &v) in ix.iter().zip(g) {
            d[j as usize] += v;
        }
    }
    dx
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    Tensor::from_fn(c, 2 * h, 2 * w, |ci, y, xx| x.at(ci, y / 2, xx / 2))
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                *dx.at_mut(ci, y / 2, x / 2) += dy.at(ci, y, x);
            }
        }
    }
    dx
}

/// Per-channel spatial mean and population variance, accumulated in `f64`.
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let n = x.plane() as f64;
    let mut means = Vec::with_capacity(x.channels());
    let mut vars = Vec::with_capacity(x.channels());
    for c in 0..x.channels() {
        let ch = x.channel(c);
        // Shifting by the first value makes constant channels exact.
        let shift = ch.first().map_or(0.0, |v| v.as_f64());
        let offset = ch.iter().map(|v| v.as_f64() - shift).sum::<f64>() / n;
        let var = ch
            .iter()
            .map(|v| {
                let d = v.as_f64() - shift - offset;
                d * d
            })
            .sum::<f64>()
            / n;
        means.push(shift + offset);
        vars.push(var);
    }
    (means, vars)
}

/// Mean-variance channel normalization: `(x - mu) / sqrt(var + NORM_EPS)`.
/// Also returns the per-channel `1 / sqrt(var + NORM_EPS)` for the backward pass.
pub fn normalize_channels<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let (means, vars) = channel_moments(x);
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.channels());
    for c in 0..x.channels() {
        let s = 1.0 / (vars[c] + NORM_EPS).sqrt();
        let (mu, st) = (T::of(means[c]), T::of(s));
        out.channel_mut(c)
            .iter_mut()
            .for_each(|v| *v = (*v - mu) * st);
        inv.push(st);
    }
    (out, inv)
}

/// Backward of [`normalize_channels`] given its output `y` and inverse std.
pub fn normalize_channels_backward<T: Real>(
    y: &Tensor<T>,
    inv_std: &[T],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let n = T::of(y.plane() as f64);
    let mut dx = Tensor::zeros(y.channels(), y.height(), y.width());
    for (c, &s) in inv_std.iter().enumerate().take(y.channels()) {
        let (yc, gc) = (y.channel(c), dy.channel(c));
        let mean_g = gc.iter().copied().sum::<T>() / n;
        let mean_gy = gc.iter().zip(yc).map(|(&g, &v)| g * v).sum::<T>() / n;
        for ((d, &g), &v) in dx.channel_mut(c).iter_mut().zip(gc).zip(yc) {
            *d = s * (g - mean_g - v * mean_gy);
        }
    }
    dx
}
