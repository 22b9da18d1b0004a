//! A fixed stage list over a bank of convolutions, with an optional tape for
//! reverse-mode differentiation. Shared by the encoder and decoder.

use crate::nn::{self, Conv2d};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stage {
    /// Convolution `i` followed by ReLU.
    ConvRelu(usize),
    /// Convolution `i` with no activation.
    Conv(usize),
    MaxPool,
    Upsample,
}

/// Activations recorded during a traced forward pass: `acts[0]` is the input
/// and `acts[i + 1]` the output of stage `i`.
pub(crate) struct Trace<T> {
    pub acts: Vec<Tensor<T>>,
    pool_idx: Vec<Vec<u32>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds the input at least")
    }

    /// The piecewise-linear branch choices of the pass: ReLU on/off bits
    /// packed 64 per word, then max-pool winner indices.
    pub fn pattern(&self, stages: &[Stage]) -> Vec<u64> {
        let mut out = Vec::new();
        for (i, s) in stages.iter().enumerate() {
            if let Stage::ConvRelu(_) = s {
                out.extend(self.acts[i + 1].data().chunks(64).map(|chunk| {
                    chunk
                        .iter()
                        .enumerate()
                        .fold(0u64, |b, (j, v)| b | (u64::from(*v > T::zero()) << j))
                }));
            }
        }
        for idx in &self.pool_idx {
            out.extend(idx.iter().map(|&i| u64::from(i)));
        }
        out
    }
}

pub(crate) fn forward<T: Real>(
    stages: &[Stage],
    convs: &[Conv2d<T>],
    input: Tensor<T>,
    mut on_stage: impl FnMut(usize, &Tensor<T>),
) -> Tensor<T> {
    let mut x = input;
    for (i, stage) in stages.iter().enumerate() {
        x = match *stage {
            Stage::ConvRelu(c) => {
                let mut y = convs[c].forward(&x);
                nn::relu_inplace(&mut y);
                y
            }
            Stage::Conv(c) => convs[c].forward(&x),
            Stage::MaxPool => nn::max_pool2(&x).0,
            Stage::Upsample => nn::upsample2(&x),
        };
        on_stage(i, &x);
    }
    x
}

pub(crate) fn forward_traced<T: Real>(
    stages: &[Stage],
    convs: &[Conv2d<T>],
    input: Tensor<T>,
) -> Trace<T> {
    let mut acts = Vec::with_capacity(stages.len() + 1);
    let mut pool_idx = Vec::new();
    acts.push(input);
    for stage in stages {
        let x = acts.last().unwrap();
        let y = match *stage {
            Stage::ConvRelu(c) => {
                let mut y = convs[c].forward(x);
                nn::relu_inplace(&mut y);
                y
            }
            Stage::Conv(c) => convs[c].forward(x),
            Stage::MaxPool => {
                let (y, idx) = nn::max_pool2(x);
                pool_idx.push(idx);
                y
            }
            Stage::Upsample => nn::upsample2(x),
        };
        acts.push(y);
    }
    Trace { acts, pool_idx }
}

/// Reverse pass over a trace.
///
/// `d_out` is the gradient at the final output (if any); `inject(i)` may add a
/// gradient at the output of stage `i`. Parameter gradients are accumulated
/// into `grads` when provided. Returns the input gradient when `want_input`.
pub(crate) fn backward<T: Real>(
    stages: &[Stage],
    convs: &[Conv2d<T>],
    trace: &Trace<T>,
    d_out: Option<Tensor<T>>,
    mut inject: impl FnMut(usize) -> Option<Tensor<T>>,
    mut grads: Option<&mut [Conv2d<T>]>,
    want_input: bool,
) -> Option<Tensor<T>> {
    let mut grad = d_out;
    let mut pool = trace.pool_idx.len();
    for i in (0..stages.len()).rev() {
        if let Some(extra) = inject(i) {
            grad = Some(match grad {
                Some(mut g) => {
                    g.add_scaled(T::one(), &extra);
                    g
                }
                None => extra,
            });
        }
        let Some(mut g) = grad.take() else {
            if stages[i] == Stage::MaxPool {
                pool -= 1;
            }
            continue;
        };
        let need_dx = i > 0 || want_input;
        grad = match stages[i] {
            Stage::ConvRelu(c) | Stage::Conv(c) => {
                if matches!(stages[i], Stage::ConvRelu(_)) {
                    nn::relu_backward_inplace(&trace.acts[i + 1], &mut g);
                }
                let gc = grads.as_deref_mut().map(|gs| &mut gs[c]);
                convs[c].backward(&trace.acts[i], &g, gc, need_dx)
            }
            Stage::MaxPool => {
                pool -= 1;
                need_dx.then(|| {
                    nn::max_pool2_backward(trace.acts[i].shape(), &trace.pool_idx[pool], &g)
                })
            }
            Stage::Upsample => need_dx.then(|| nn::upsample2_backward(&g)),
        };
    }
    if want_input {
        grad
    } else {
        None
    }
}
