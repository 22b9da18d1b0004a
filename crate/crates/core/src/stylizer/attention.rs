//! Attention coloring.
//!
//! For every stylized map `S_k`, content positions attend over stylized
//! positions through `softmax_rows(f(norm(F_c))^T g(norm(S_k)))`; the attended
//! values `h(S_k)` of all branches are summed and passed through a 3x3 merge
//! convolution. `f`, `g` and `h` are learned 1x1 maps shared by all branches.

use rand::Rng;

use crate::container::TensorStore;
use crate::error::{Error, Result};
use crate::nn::{normalize_channels, Conv2d};
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::Tensor;

/// Row-stochastic `content positions x stylized positions` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T = f32> {
    rows: usize,
    cols: usize,
    weights: Vec<T>,
}

impl<T: Real> AttentionMap<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows)
            .map(|i| (self.row(i).iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Learned parameters of the attention-coloring block.
#[derive(Clone, Debug, PartialEq)]
pub struct AcParams<T = f32> {
    pub(crate) f: Conv2d<T>,
    pub(crate) g: Conv2d<T>,
    pub(crate) h: Conv2d<T>,
    pub(crate) merge: Conv2d<T>,
}

const AC_NAMES: [&str; 4] = ["f", "g", "h", "merge"];

impl<T: Real> AcParams<T> {
    /// Fan-in uniform initialization for `channels`-wide features.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            f: Conv2d::init_uniform(channels, channels, 1, 1.0, rng),
            g: Conv2d::init_uniform(channels, channels, 1, 1.0, rng),
            h: Conv2d::init_uniform(channels, channels, 1, 1.0, rng),
            merge: Conv2d::init_uniform(channels, channels, 3, 1.0, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.h.c_in
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            f: self.f.zeros_like(),
            g: self.g.zeros_like(),
            h: self.h.zeros_like(),
            merge: self.merge.zeros_like(),
        }
    }

    fn layers(&self) -> [&Conv2d<T>; 4] {
        [&self.f, &self.g, &self.h, &self.merge]
    }

    fn layers_mut(&mut self) -> [&mut Conv2d<T>; 4] {
        [&mut self.f, &mut self.g, &mut self.h, &mut self.merge]
    }

    /// `(name, values)` for every tensor, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &[T])> {
        self.layers()
            .into_iter()
            .zip(AC_NAMES)
            .flat_map(|(l, n)| {
                let [w, b] = l.params();
                [(format!("ac/{n}/weight"), w), (format!("ac/{n}/bias"), b)]
            })
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    /// Mutable access to one tensor by its [`named_params`](Self::named_params) name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let idx = self.named_params().iter().position(|(n, _)| n == name)?;
        self.params_mut().into_iter().nth(idx)
    }

    pub fn write_to(&self, store: &mut TensorStore) {
        for (l, n) in self.layers().into_iter().zip(AC_NAMES) {
            store.insert_real(
                format!("ac/{n}/weight"),
                l.weight_shape().to_vec(),
                &l.weight,
            );
            store.insert_real(format!("ac/{n}/bias"), vec![l.c_out], &l.bias);
        }
    }

    pub fn read_from(store: &TensorStore, channels: usize) -> Result<Self> {
        let mut p = Self {
            f: Conv2d::zeros(channels, channels, 1),
            g: Conv2d::zeros(channels, channels, 1),
            h: Conv2d::zeros(channels, channels, 1),
            merge: Conv2d::zeros(channels, channels, 3),
        };
        for (l, n) in p.layers_mut().into_iter().zip(AC_NAMES) {
            l.weight = store.require_real(&format!("ac/{n}/weight"), &l.weight_shape())?;
            l.bias = store.require_real(&format!("ac/{n}/bias"), &[l.c_out])?;
        }
        Ok(p)
    }

    pub fn cast<U: Real>(&self) -> AcParams<U> {
        let c = |l: &Conv2d<T>| Conv2d {
            c_in: l.c_in,
            c_out: l.c_out,
            kernel: l.kernel,
            weight: l.weight.iter().map(|&v| U::of(v.as_f64())).collect(),
            bias: l.bias.iter().map(|&v| U::of(v.as_f64())).collect(),
        };
        AcParams {
            f: c(&self.f),
            g: c(&self.g),
            h: c(&self.h),
            merge: c(&self.merge),
        }
    }
}

/// Everything the block computes, for inspection and tests.
#[derive(Clone, Debug)]
pub struct AttentionOutput<T = f32> {
    /// `F_cs`.
    pub output: Tensor<T>,
    /// Sum of the attended branches before the merge convolution.
    pub pre_merge: Tensor<T>,
    pub maps: Vec<AttentionMap<T>>,
}

struct Branch<T> {
    normalized: Tensor<T>,
    key: Tensor<T>,
    value: Tensor<T>,
    attn: Vec<T>,
}

/// Saved activations for [`backward`].
pub(crate) struct AcTrace<T> {
    normalized_content: Tensor<T>,
    query: Tensor<T>,
    branches: Vec<Branch<T>>,
    pre_merge: Tensor<T>,
}

/// Subnormal values are flushed to zero: they are far below any weight that
/// matters and slow every later product by orders of magnitude.
#[inline]
fn flush<T: Real>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

fn softmax_rows<T: Real>(m: &mut [T], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v = flush(*v * inv));
    }
}

fn check_inputs<T: Real>(
    content: &Tensor<T>,
    stylized: &[Tensor<T>],
    params: &AcParams<T>,
) -> Result<()> {
    if stylized.is_empty() {
        return Err(Error::Cardinality(
            "attention coloring needs at least one stylized map".into(),
        ));
    }
    if content.channels() != params.channels() {
        return Err(Error::Shape(format!(
            "attention block expects {} channels, content has {}",
            params.channels(),
            content.channels()
        )));
    }
    for s in stylized {
        content.ensure_same_shape(s, "stylized map vs content features")?;
    }
    Ok(())
}

fn forward<T: Real>(
    content: &Tensor<T>,
    stylized: &[Tensor<T>],
    params: &AcParams<T>,
    keep_maps: bool,
    keep_trace: bool,
) -> Result<(AttentionOutput<T>, Option<AcTrace<T>>)> {
    check_inputs(content, stylized, params)?;
    let (c, h, w) = content.shape();
    let n = h * w;
    let (normalized_content, _) = normalize_channels(content);
    let query = params.f.forward(&normalized_content);
    let cq = query.channels();
    let mut pre_merge = Tensor::zeros(c, h, w);
    let mut maps = Vec::new();
    let mut branches = Vec::new();
    let mut attended = Tensor::zeros(c, h, w);
    for s in stylized {
        let (normalized, _) = normalize_channels(s);
        let key = params.g.forward(&normalized);
        let mut attn = vec![T::zero(); n * n];
        gemm(
            T::one(),
            MatRef::dense(query.data(), cq, n).t(),
            MatRef::dense(key.data(), cq, n),
            T::zero(),
            MatMut::dense(&mut attn, n, n),
        );
        softmax_rows(&mut attn, n);
        let value = params.h.forward(s);
        gemm(
            T::one(),
            MatRef::dense(value.data(), c, n),
            MatRef::dense(&attn, n, n).t(),
            T::zero(),
            MatMut::dense(attended.data_mut(), c, n),
        );
        pre_merge.add_scaled(T::one(), &attended);
        if keep_maps {
            maps.push(AttentionMap {
                rows: n,
                cols: n,
                weights: attn.clone(),
            });
        }
        if keep_trace {
            branches.push(Branch {
                normalized,
                key,
                value,
                attn,
            });
        }
    }
    let output = params.merge.forward(&pre_merge);
    let trace = keep_trace.then(|| AcTrace {
        normalized_content,
        query,
        branches,
        pre_merge: pre_merge.clone(),
    });
    Ok((
        AttentionOutput {
            output,
            pre_merge,
            maps,
        },
        trace,
    ))
}

/// `F_cs` from the content features and the first-stylized maps.
pub fn attention_color<T: Real>(
    content: &Tensor<T>,
    stylized: &[Tensor<T>],
    params: &AcParams<T>,
) -> Result<Tensor<T>> {
    Ok(forward(content, stylized, params, false, false)?.0.output)
}

/// Like [`attention_color`], also returning the attention maps and the
/// pre-merge sum.
pub fn attention_color_detailed<T: Real>(
    content: &Tensor<T>,
    stylized: &[Tensor<T>],
    params: &AcParams<T>,
) -> Result<AttentionOutput<T>> {
    Ok(forward(content, stylized, params, true, false)?.0)
}

/// Parameter gradients of `sum(d_out * F_cs)`, i.e. the backward pass for an
/// upstream gradient `d_out` on the attention output.
pub fn attention_color_gradients<T: Real>(
    content: &Tensor<T>,
    stylized: &[Tensor<T>],
    params: &AcParams<T>,
    d_out: &Tensor<T>,
) -> Result<AcParams<T>> {
    let (out, trace) = forward_traced(content, stylized, params)?;
    out.ensure_same_shape(d_out, "attention output gradient")?;
    let mut grads = params.zeros_like();
    backward(params, &trace, stylized, d_out, &mut grads);
    Ok(grads)
}

pub(crate) fn forward_traced<T: Real>(
    content: &Tensor<T>,
    stylized: &[Tensor<T>],
    params: &AcParams<T>,
) -> Result<(Tensor<T>, AcTrace<T>)> {
    let (out, trace) = forward(content, stylized, params, false, true)?;
    Ok((out.output, trace.expect("trace requested")))
}

/// Accumulates parameter gradients for an upstream gradient on `F_cs`. The
/// inputs are constants of the frozen encoder, so no input gradient is formed.
pub(crate) fn backward<T: Real>(
    params: &AcParams<T>,
    trace: &AcTrace<T>,
    stylized: &[Tensor<T>],
    d_out: &Tensor<T>,
    grads: &mut AcParams<T>,
) {
    let (c, h, w) = d_out.shape();
    let n = h * w;
    let cq = trace.query.channels();
    let d_sum = params
        .merge
        .backward(&trace.pre_merge, d_out, Some(&mut grads.merge), true)
        .expect("input gradient requested");
    let d_sum_m = MatRef::dense(d_sum.data(), c, n);
    let mut d_query = Tensor::zeros(cq, h, w);
    let mut d_value = Tensor::zeros(c, h, w);
    let mut d_key = Tensor::zeros(cq, h, w);
    let mut d_attn = vec![T::zero(); n * n];
    for (b, s) in trace.branches.iter().zip(stylized) {
        let attn = MatRef::dense(&b.attn, n, n);
        gemm(
            T::one(),
            d_sum_m,
            attn,
            T::zero(),
            MatMut::dense(d_value.data_mut(), c, n),
        );
        gemm(
            T::one(),
            d_sum_m.t(),
            MatRef::dense(b.value.data(), c, n),
            T::zero(),
            MatMut::dense(&mut d_attn, n, n),
        );
        // softmax backward, row by row
        for (g_row, a_row) in d_attn.chunks_mut(n).zip(b.attn.chunks(n)) {
            let dot: T = g_row.iter().zip(a_row).map(|(&g, &a)| g * a).sum();
            for (g, &a) in g_row.iter_mut().zip(a_row) {
                *g = flush(a * (*g - dot));
            }
        }
        let d_logits = MatRef::dense(&d_attn, n, n);
        gemm(
            T::one(),
            MatRef::dense(b.key.data(), cq, n),
            d_logits.t(),
            T::one(),
            MatMut::dense(d_query.data_mut(), cq, n),
        );
        gemm(
            T::one(),
            MatRef::dense(trace.query.data(), cq, n),
            d_logits,
            T::zero(),
            MatMut::dense(d_key.data_mut(), cq, n),
        );
        params.h.backward(s, &d_value, Some(&mut grads.h), false);
        params
            .g
            .backward(&b.normalized, &d_key, Some(&mut grads.g), false);
    }
    params.f.backward(
        &trace.normalized_content,
        &d_query,
        Some(&mut grads.f),
        false,
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AcParams::<f64>::init(4, &mut rng);
        let fc = random(4, 1, 1, &mut rng);
        let s = vec![random(4, 1, 1, &mut rng), random(4, 1, 1, &mut rng)];
        let out = attention_color_detailed(&fc, &s, &p).unwrap();
        assert!(out.maps.iter().all(|m| m.weights() == [1.0]));
        let mut sum = p.h.forward(&s[0]);
        sum.add_scaled(1.0, &p.h.forward(&s[1]));
        assert_eq!(out.pre_merge, sum);
        assert_eq!(out.output, p.merge.forward(&sum));
    }

    #[test]
    fn constant_features_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AcParams::<f64>::init(3, &mut rng);
        let fc = Tensor::from_fn(3, 2, 3, |c, _, _| c as f64);
        let s = vec![Tensor::from_fn(3, 2, 3, |c, _, _| 2.0 - c as f64)];
        let out = attention_color_detailed(&fc, &s, &p).unwrap();
        assert!(out.maps[0]
            .weights()
            .iter()
            .all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn duplicated_branch_doubles_pre_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AcParams::<f32>::init(5, &mut rng);
        let fc = random(5, 3, 3, &mut rng).cast::<f32>();
        let s = random(5, 3, 3, &mut rng).cast::<f32>();
        let one = attention_color_detailed(&fc, std::slice::from_ref(&s), &p).unwrap();
        let two = attention_color_detailed(&fc, &[s.clone(), s], &p).unwrap();
        for (a, b) in one.pre_merge.data().iter().zip(two.pre_merge.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AcParams::<f64>::init(2, &mut rng);
        let fc = random(2, 2, 2, &mut rng);
        assert!(matches!(
            attention_color(&fc, &[], &p),
            Err(Error::Cardinality(_))
        ));
        assert!(matches!(
            attention_color(&fc, &[random(2, 3, 2, &mut rng)], &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn store_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AcParams::<f32>::init(6, &mut rng);
        let mut store = TensorStore::new();
        p.write_to(&mut store);
        assert_eq!(AcParams::<f32>::read_from(&store, 6).unwrap(), p);
        assert!(AcParams::<f32>::read_from(&store, 8).is_err());
    }
}
