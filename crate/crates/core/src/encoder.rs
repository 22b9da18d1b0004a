//! Frozen VGG-19 feature extractor, `relu1_1` through `relu4_1`.
//!
//! Weight containers use the names `vgg19/conv{block}_{idx}/weight` (shape
//! `out x in x 3 x 3`) and `vgg19/conv{block}_{idx}/bias` (shape `out`), and
//! must carry a `preprocessing` metadata entry describing the pixel
//! convention the weights were trained with (see [`Preprocessing`]).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::TensorStore;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::net::{self, Stage, Trace};
use crate::nn::Conv2d;
use crate::real::Real;
use crate::tensor::Tensor;

/// Convolutions up to `conv4_1`: `(name, in, out)`.
pub const VGG19_CONVS: [(&str, usize, usize); 9] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
    ("conv4_1", 256, 512),
];

const STAGES: [Stage; 12] = [
    Stage::ConvRelu(0),
    Stage::ConvRelu(1),
    Stage::MaxPool,
    Stage::ConvRelu(2),
    Stage::ConvRelu(3),
    Stage::MaxPool,
    Stage::ConvRelu(4),
    Stage::ConvRelu(5),
    Stage::ConvRelu(6),
    Stage::ConvRelu(7),
    Stage::MaxPool,
    Stage::ConvRelu(8),
];

/// Stage index whose output is each tapped layer.
const TAPS: [usize; 4] = [0, 3, 6, 11];

/// Smallest input side for which `relu4_1` is non-empty.
pub const MIN_INPUT_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    Relu1_1,
    Relu2_1,
    Relu3_1,
    Relu4_1,
}

impl Layer {
    pub const ALL: [Layer; 4] = [
        Layer::Relu1_1,
        Layer::Relu2_1,
        Layer::Relu3_1,
        Layer::Relu4_1,
    ];

    pub fn channels(self) -> usize {
        match self {
            Layer::Relu1_1 => 64,
            Layer::Relu2_1 => 128,
            Layer::Relu3_1 => 256,
            Layer::Relu4_1 => 512,
        }
    }

    /// Spatial downsampling relative to the input image.
    pub fn stride(self) -> usize {
        1 << self.index()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Relu1_1 => "relu1_1",
            Layer::Relu2_1 => "relu2_1",
            Layer::Relu3_1 => "relu3_1",
            Layer::Relu4_1 => "relu4_1",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Activations of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    layer: Layer,
    values: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(layer: Layer, values: Tensor<T>) -> Result<Self> {
        if values.channels() != layer.channels() {
            return Err(Error::Shape(format!(
                "{layer} has {} channels, got {}",
                layer.channels(),
                values.channels()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Numeric(format!("non-finite {layer} activation")));
        }
        Ok(Self { layer, values })
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }
}

/// `relu1_1 .. relu4_1` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    maps: [FeatureMap<T>; 4],
}

impl<T: Real> FeaturePyramid<T> {
    pub fn get(&self, layer: Layer) -> &FeatureMap<T> {
        &self.maps[layer.index()]
    }

    pub fn relu4_1(&self) -> &Tensor<T> {
        self.maps[3].values()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureMap<T>> {
        self.maps.iter()
    }
}

/// Pixel convention expected by a set of VGG weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preprocessing {
    /// RGB in `[0, 1]`, fed as is.
    Unit,
    /// RGB in `[0, 1]`, standardized with the ImageNet mean and std.
    Imagenet,
    /// BGR in `[0, 255]` minus the Caffe channel means.
    Caffe,
}

impl Preprocessing {
    /// `(source channel, scale, offset)` per network input channel.
    fn affine(self) -> [(usize, f64, f64); 3] {
        match self {
            Preprocessing::Unit => [(0, 1.0, 0.0), (1, 1.0, 0.0), (2, 1.0, 0.0)],
            Preprocessing::Imagenet => {
                let mean = [0.485, 0.456, 0.406];
                let std = [0.229, 0.224, 0.225];
                [0, 1, 2].map(|c| (c, 1.0 / std[c], -mean[c] / std[c]))
            }
            Preprocessing::Caffe => [
                (2, 255.0, -103.939),
                (1, 255.0, -116.779),
                (0, 255.0, -123.68),
            ],
        }
    }

    fn apply<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        if self == Preprocessing::Unit {
            return x.clone();
        }
        let aff = self.affine();
        Tensor::from_fn(3, x.height(), x.width(), |c, y, xx| {
            let (src, s, o) = aff[c];
            x.at(src, y, xx) * T::of(s) + T::of(o)
        })
    }

    fn backward<T: Real>(self, dy: Tensor<T>) -> Tensor<T> {
        if self == Preprocessing::Unit {
            return dy;
        }
        let mut dx = Tensor::zeros(3, dy.height(), dy.width());
        for (c, (src, s, _)) in self.affine().into_iter().enumerate() {
            let s = T::of(s);
            for (d, &g) in dx.channel_mut(src).iter_mut().zip(dy.channel(c)) {
                *d += g * s;
            }
        }
        dx
    }
}

impl FromStr for Preprocessing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unit" => Ok(Preprocessing::Unit),
            "imagenet" => Ok(Preprocessing::Imagenet),
            "caffe" => Ok(Preprocessing::Caffe),
            other => Err(Error::Schema(format!(
                "unknown preprocessing `{other}` (expected unit, imagenet or caffe)"
            ))),
        }
    }
}

impl fmt::Display for Preprocessing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preprocessing::Unit => "unit",
            Preprocessing::Imagenet => "imagenet",
            Preprocessing::Caffe => "caffe",
        })
    }
}

/// Pretrained VGG-19 weights up to `conv4_1`. There is no mutable access:
/// the encoder never receives gradient updates.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = f32> {
    convs: Vec<Conv2d<T>>,
    preprocessing: Preprocessing,
}

pub fn weight_name(conv: &str) -> String {
    format!("vgg19/{conv}/weight")
}

pub fn bias_name(conv: &str) -> String {
    format!("vgg19/{conv}/bias")
}

/// Reads and validates a VGG-19 weight container.
pub fn load_encoder<T: Real>(weights_path: impl AsRef<Path>) -> Result<EncoderParams<T>> {
    let path = weights_path.as_ref();
    let store = TensorStore::load(path)?;
    EncoderParams::from_store(&store).map_err(|e| e.context(format!("loading {}", path.display())))
}

impl<T: Real> EncoderParams<T> {
    pub fn from_store(store: &TensorStore) -> Result<Self> {
        let preprocessing = store
            .meta("preprocessing")
            .ok_or_else(|| Error::Schema("missing metadata key `preprocessing`".into()))?
            .parse()?;
        let convs = VGG19_CONVS
            .iter()
            .map(|&(name, c_in, c_out)| {
                let mut conv = Conv2d::zeros(c_in, c_out, 3);
                conv.weight = store.require_real(&weight_name(name), &conv.weight_shape())?;
                conv.bias = store.require_real(&bias_name(name), &[c_out])?;
                Ok(conv)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            preprocessing,
        })
    }

    pub fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::new();
        for (conv, &(name, _, c_out)) in self.convs.iter().zip(&VGG19_CONVS) {
            store.insert_real(
                weight_name(name),
                conv.weight_shape().to_vec(),
                &conv.weight,
            );
            store.insert_real(bias_name(name), vec![c_out], &conv.bias);
        }
        store.set_meta("preprocessing", self.preprocessing.to_string());
        store
    }

    /// Randomly initialized VGG-19 topology (uniform He init, small random
    /// biases), for tests and for exercising the pipeline without
    /// pretrained weights.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = VGG19_CONVS
            .iter()
            .map(|&(_, c_in, c_out)| {
                let mut conv = Conv2d::init_uniform(c_in, c_out, 3, 2f64.sqrt(), &mut rng);
                for b in conv.bias.iter_mut() {
                    *b = T::of(rng.random_range(-0.05..0.05));
                }
                conv
            })
            .collect();
        Self {
            convs,
            preprocessing: Preprocessing::Unit,
        }
    }

    pub fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    /// Always true; kept so callers can assert the contract.
    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn conv(&self, name: &str) -> Option<&Conv2d<T>> {
        VGG19_CONVS
            .iter()
            .position(|(n, _, _)| *n == name)
            .map(|i| &self.convs[i])
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
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
            preprocessing: self.preprocessing,
        }
    }

    fn check_input(x: &Tensor<T>) -> Result<()> {
        if x.channels() != 3 {
            return Err(Error::Shape(format!(
                "encoder expects 3 channels, got {}",
                x.channels()
            )));
        }
        if x.height() < MIN_INPUT_SIDE || x.width() < MIN_INPUT_SIDE {
            return Err(Error::Dimension(format!(
                "encoder input {}x{} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Encodes a raw `3 x H x W` tensor (values need not lie in `[0, 1]`).
    pub fn encode_tensor(&self, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        Self::check_input(x)?;
        let mut taps: Vec<Tensor<T>> = Vec::with_capacity(4);
        net::forward(&STAGES, &self.convs, self.preprocessing.apply(x), |i, y| {
            if TAPS.contains(&i) {
                taps.push(y.clone());
            }
        });
        pyramid(taps)
    }

    pub(crate) fn forward_traced(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        Self::check_input(x)?;
        Ok(net::forward_traced(
            &STAGES,
            &self.convs,
            self.preprocessing.apply(x),
        ))
    }

    pub(crate) fn trace_pattern(trace: &Trace<T>) -> Vec<u64> {
        trace.pattern(&STAGES)
    }

    pub(crate) fn traced_pyramid(trace: &Trace<T>) -> Result<FeaturePyramid<T>> {
        pyramid(TAPS.iter().map(|&i| trace.acts[i + 1].clone()).collect())
    }

    /// Gradient with respect to the raw input, given gradients at the tapped
    /// layers. Weight gradients are never formed.
    pub(crate) fn backward_input(
        &self,
        trace: &Trace<T>,
        mut tap_grads: [Option<Tensor<T>>; 4],
    ) -> Tensor<T> {
        let dx = net::backward(
            &STAGES,
            &self.convs,
            trace,
            None,
            |i| {
                TAPS.iter()
                    .position(|&t| t == i)
                    .and_then(|l| tap_grads[l].take())
            },
            None,
            true,
        )
        .unwrap_or_else(|| Tensor::zeros(3, trace.acts[0].height(), trace.acts[0].width()));
        self.preprocessing.backward(dx)
    }
}

fn pyramid<T: Real>(taps: Vec<Tensor<T>>) -> Result<FeaturePyramid<T>> {
    let mut it = taps
        .into_iter()
        .zip(Layer::ALL)
        .map(|(t, l)| FeatureMap::new(l, t));
    let maps = [it.next(), it.next(), it.next(), it.next()].map(|m| m.expect("four taps"));
    let [a, b, c, d] = maps;
    Ok(FeaturePyramid {
        maps: [a?, b?, c?, d?],
    })
}

/// Multi-layer features of an image.
pub fn encode<T: Real>(img: &ImageTensor, params: &EncoderParams<T>) -> Result<FeaturePyramid<T>> {
    params.encode_tensor(&img.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |y, x| {
            [(y % 5) as f32 / 5.0, (x % 3) as f32 / 3.0, 0.5]
        })
        .unwrap()
    }

    #[test]
    fn pyramid_shapes_follow_pooling() {
        let enc = EncoderParams::<f32>::synthetic(1);
        let f = encode(&tiny_image(37, 20), &enc).unwrap();
        assert_eq!(f.get(Layer::Relu1_1).values().shape(), (64, 37, 20));
        assert_eq!(f.get(Layer::Relu2_1).values().shape(), (128, 18, 10));
        assert_eq!(f.get(Layer::Relu3_1).values().shape(), (256, 9, 5));
        assert_eq!(f.get(Layer::Relu4_1).values().shape(), (512, 4, 2));
        assert!(f
            .iter()
            .all(|m| m.values().data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn zero_image_gives_relu_of_bias() {
        let enc = EncoderParams::<f64>::synthetic(2);
        let zero = ImageTensor::filled(16, 16, [0.0; 3]).unwrap();
        let f = encode(&zero, &enc).unwrap();
        let bias = enc.conv("conv1_1").unwrap().bias();
        let r = f.get(Layer::Relu1_1).values();
        for c in 0..64 {
            let want = bias[c].max(0.0);
            assert!(r.channel(c).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn too_small_is_dimension_error() {
        let enc = EncoderParams::<f32>::synthetic(1);
        assert!(matches!(
            encode(&tiny_image(8, 8), &enc),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            encode(&tiny_image(16, 15), &enc),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn store_round_trip_and_schema_errors() {
        let enc = EncoderParams::<f32>::synthetic(3);
        let mut store = enc.to_store();
        assert_eq!(EncoderParams::<f32>::from_store(&store).unwrap(), enc);

        store.set_meta("preprocessing", "sepia");
        assert!(matches!(
            EncoderParams::<f32>::from_store(&store),
            Err(Error::Schema(_))
        ));
        store.set_meta("preprocessing", "caffe");

        let mut missing = store.clone();
        missing.remove("vgg19/conv3_4/bias");
        match EncoderParams::<f32>::from_store(&missing) {
            Err(Error::Schema(m)) => assert!(m.contains("vgg19/conv3_4/bias")),
            other => panic!("{other:?}"),
        }

        let mut flipped = store.clone();
        let w = flipped.remove("vgg19/conv1_1/weight").unwrap();
        flipped.insert("vgg19/conv1_1/weight", vec![3, 64, 3, 3], w.data);
        assert!(matches!(
            EncoderParams::<f32>::from_store(&flipped),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn preprocessing_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(3, 2, 2, |c, y, x| (c * 4 + y * 2 + x) as f64 * 0.1);
        let g = Tensor::<f64>::from_fn(3, 2, 2, |c, y, x| 1.0 + (c + y + x) as f64);
        for p in [
            Preprocessing::Unit,
            Preprocessing::Imagenet,
            Preprocessing::Caffe,
        ] {
            // <P(x) - P(0), g> == <x, P^T g>
            let px = p.apply(&x);
            let p0 = p.apply(&Tensor::zeros(3, 2, 2));
            let lhs: f64 = px
                .data()
                .iter()
                .zip(p0.data())
                .zip(g.data())
                .map(|((a, b), c)| (a - b) * c)
                .sum();
            let bt = p.backward(g.clone());
            let rhs: f64 = x.data().iter().zip(bt.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{p}");
        }
    }
}
