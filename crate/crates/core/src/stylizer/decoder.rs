//! Decoder: a mirror of the encoder from `relu4_1` back to RGB, with
//! nearest-neighbour upsampling in place of pooling.

use rand::Rng;

use crate::container::TensorStore;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::net::{self, Stage, Trace};
use crate::nn::Conv2d;
use crate::real::Real;
use crate::tensor::Tensor;

/// `(name, in, out)` of every decoder convolution in execution order.
pub const DECODER_CONVS: [(&str, usize, usize); 9] = [
    ("conv4_1", 512, 256),
    ("conv3_4", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_2", 256, 256),
    ("conv3_1", 256, 128),
    ("conv2_2", 128, 128),
    ("conv2_1", 128, 64),
    ("conv1_2", 64, 64),
    ("conv1_1", 64, 3),
];

const STAGES: [Stage; 12] = [
    Stage::ConvRelu(0),
    Stage::Upsample,
    Stage::ConvRelu(1),
    Stage::ConvRelu(2),
    Stage::ConvRelu(3),
    Stage::ConvRelu(4),
    Stage::Upsample,
    Stage::ConvRelu(5),
    Stage::ConvRelu(6),
    Stage::Upsample,
    Stage::ConvRelu(7),
    Stage::Conv(8),
];

/// Input channel count (`relu4_1`).
pub const DECODER_INPUT_CHANNELS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T = f32> {
    pub(crate) convs: Vec<Conv2d<T>>,
}

fn param_name(conv: &str, kind: &str) -> String {
    format!("decoder/{conv}/{kind}")
}

impl<T: Real> DecoderParams<T> {
    /// He-uniform weights for the ReLU layers, plain fan-in scaling for the
    /// output layer; zero biases.
    pub fn init(rng: &mut impl Rng) -> Self {
        let last = DECODER_CONVS.len() - 1;
        let convs = DECODER_CONVS
            .iter()
            .enumerate()
            .map(|(i, &(_, c_in, c_out))| {
                let gain = if i == last { 1.0 } else { 2f64.sqrt() };
                Conv2d::init_uniform(c_in, c_out, 3, gain, rng)
            })
            .collect();
        Self { convs }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn conv(&self, name: &str) -> Option<&Conv2d<T>> {
        DECODER_CONVS
            .iter()
            .position(|(n, _, _)| *n == name)
            .map(|i| &self.convs[i])
    }

    pub fn named_params(&self) -> Vec<(String, &[T])> {
        self.convs
            .iter()
            .zip(&DECODER_CONVS)
            .flat_map(|(c, &(n, _, _))| {
                let [w, b] = c.params();
                [(param_name(n, "weight"), w), (param_name(n, "bias"), b)]
            })
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }

    pub fn write_to(&self, store: &mut TensorStore) {
        for (c, &(n, _, c_out)) in self.convs.iter().zip(&DECODER_CONVS) {
            store.insert_real(
                param_name(n, "weight"),
                c.weight_shape().to_vec(),
                &c.weight,
            );
            store.insert_real(param_name(n, "bias"), vec![c_out], &c.bias);
        }
    }

    pub fn read_from(store: &TensorStore) -> Result<Self> {
        let convs = DECODER_CONVS
            .iter()
            .map(|&(n, c_in, c_out)| {
                let mut c = Conv2d::zeros(c_in, c_out, 3);
                c.weight = store.require_real(&param_name(n, "weight"), &c.weight_shape())?;
                c.bias = store.require_real(&param_name(n, "bias"), &[c_out])?;
                Ok(c)
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    pub fn cast<U: Real>(&self) -> DecoderParams<U> {
        DecoderParams {
            convs: self
                .convs
                .iter()
                .map(|c| Conv2d {
                    c_in: c.c_in,
                    c_out: c.c_out,
                    kernel: c.kernel,
                    weight: c.weight.iter().map(|&v| U::of(v.as_f64())).collect(),
                    bias: c.bias.iter().map(|&v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    fn check_input(x: &Tensor<T>) -> Result<()> {
        if x.channels() != DECODER_INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "decoder expects {DECODER_INPUT_CHANNELS} channels, got {}",
                x.channels()
            )));
        }
        if x.is_empty() {
            return Err(Error::Shape("decoder input has no spatial extent".into()));
        }
        Ok(())
    }

    /// Unclamped `3 x 8h x 8w` output.
    pub fn decode_raw(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_input(x)?;
        Ok(net::forward(&STAGES, &self.convs, x.clone(), |_, _| {}))
    }

    pub(crate) fn forward_traced(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        Self::check_input(x)?;
        Ok(net::forward_traced(&STAGES, &self.convs, x.clone()))
    }

    pub(crate) fn trace_pattern(trace: &Trace<T>) -> Vec<u64> {
        trace.pattern(&STAGES)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub(crate) fn backward(
        &self,
        trace: &Trace<T>,
        d_out: Tensor<T>,
        grads: &mut DecoderParams<T>,
    ) -> Tensor<T> {
        net::backward(
            &STAGES,
            &self.convs,
            trace,
            Some(d_out),
            |_| None,
            Some(&mut grads.convs),
            true,
        )
        .expect("input gradient requested")
    }
}

/// Maps `relu4_1`-shaped features to an RGB image clamped to `[0, 1]`.
pub fn decode<T: Real>(features: &Tensor<T>, params: &DecoderParams<T>) -> Result<ImageTensor> {
    ImageTensor::from_tensor(&params.decode_raw(features)?)
}
