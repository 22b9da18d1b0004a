//! Content and style losses, and their gradients through the whole
//! trainable path (attention block, decoder) with the encoder frozen.

use rand::Rng;

use crate::encoder::{EncoderParams, FeaturePyramid, Layer};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{channel_moments, normalize_channels, normalize_channels_backward, NORM_EPS};
use crate::palette::{build_palette, ChannelStats, PaletteMode};
use crate::real::Real;
use crate::stylizer::{attention, first_stylize, AcParams, DecoderParams, StyleModel};
use crate::tensor::Tensor;

/// Weighted loss of one batch (or pair).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub total: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

impl LossBreakdown {
    pub fn new(content: f64, style: f64, lambda_c: f64, lambda_s: f64) -> Self {
        Self {
            content,
            style,
            total: lambda_c * content + lambda_s * style,
            lambda_c,
            lambda_s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.content.is_finite() && self.style.is_finite() && self.total.is_finite()
    }
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|d| d * d).sum::<f64>().sqrt()
}

/// Euclidean distance between the mean-variance normalized feature maps.
pub fn content_loss<T: Real>(output: &Tensor<T>, content: &Tensor<T>) -> Result<f64> {
    output.ensure_same_shape(content, "content loss inputs")?;
    let (a, _) = normalize_channels(output);
    let (b, _) = normalize_channels(content);
    Ok(l2(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.as_f64() - y.as_f64())))
}

/// Per-channel mean and `sqrt(var + NORM_EPS)`; the floor keeps the style
/// gradient bounded on constant (e.g. dead ReLU) channels.
pub fn loss_stats<T: Real>(x: &Tensor<T>) -> ChannelStats<f64> {
    let (mean, vars) = channel_moments(x);
    ChannelStats {
        mean,
        std: vars.into_iter().map(|v| (v + NORM_EPS).sqrt()).collect(),
    }
}

/// `sum_i ||mu_i(a) - mu_i(b)|| + ||sigma_i(a) - sigma_i(b)||` over layers.
pub fn style_loss_from_stats<T: Real>(a: &[ChannelStats<T>], b: &[ChannelStats<T>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} vs {} layers of statistics",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.channels() != y.channels() {
            return Err(Error::Shape(format!(
                "{} vs {} channels",
                x.channels(),
                y.channels()
            )));
        }
        total += l2(x
            .mean
            .iter()
            .zip(&y.mean)
            .map(|(p, q)| p.as_f64() - q.as_f64()));
        total += l2(x
            .std
            .iter()
            .zip(&y.std)
            .map(|(p, q)| p.as_f64() - q.as_f64()));
    }
    Ok(total)
}

/// Style loss between two encoded images over `relu1_1 .. relu4_1`.
pub fn style_loss_features<T: Real>(a: &FeaturePyramid<T>, b: &FeaturePyramid<T>) -> Result<f64> {
    let sa: Vec<_> = a.iter().map(|m| loss_stats(m.values())).collect();
    let sb: Vec<_> = b.iter().map(|m| loss_stats(m.values())).collect();
    style_loss_from_stats(&sa, &sb)
}

/// Style loss between two images.
pub fn style_loss<T: Real>(
    output: &ImageTensor,
    style: &ImageTensor,
    encoder: &EncoderParams<T>,
) -> Result<f64> {
    style_loss_features(
        &encoder.encode_tensor(&output.to_tensor())?,
        &encoder.encode_tensor(&style.to_tensor())?,
    )
}

/// What training needs from an encoded image.
#[derive(Clone, Debug)]
pub struct EncodedImage<T = f32> {
    pub relu4_1: Tensor<T>,
    pub stats: Vec<ChannelStats<f64>>,
}

impl<T: Real> EncodedImage<T> {
    pub fn new(encoder: &EncoderParams<T>, x: &Tensor<T>) -> Result<Self> {
        let pyr = encoder.encode_tensor(x)?;
        Ok(Self {
            stats: pyr.iter().map(|m| loss_stats(m.values())).collect(),
            relu4_1: pyr.relu4_1().clone(),
        })
    }
}

/// A content-style pair with its palette already drawn; the remaining
/// computation is deterministic.
#[derive(Clone, Debug)]
pub struct PreparedPair<T = f32> {
    content: Tensor<T>,
    content_normalized: Tensor<T>,
    style_stats: Vec<ChannelStats<f64>>,
    stylized: Vec<Tensor<T>>,
}

impl<T: Real> PreparedPair<T> {
    /// Draws the style palette from `rng` and AdaIN-stylizes the content.
    pub fn new(
        content: &EncodedImage<T>,
        style: &EncodedImage<T>,
        num_patches: usize,
        patch_size: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let palette = build_palette(
            &style.relu4_1,
            num_patches,
            patch_size,
            k,
            PaletteMode::Centroid,
            rng,
        )?;
        Ok(Self {
            content: content.relu4_1.clone(),
            content_normalized: normalize_channels(&content.relu4_1).0,
            style_stats: style.stats.clone(),
            stylized: first_stylize(&content.relu4_1, &palette)?,
        })
    }
}

/// Gradients for the trainable parameters, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub ac: AcParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &StyleModel<T>) -> Self {
        Self {
            ac: model.ac.zeros_like(),
            decoder: model.decoder.zeros_like(),
        }
    }

    pub fn named(&self) -> Vec<(String, &[T])> {
        let mut v = self.ac.named_params();
        v.extend(self.decoder.named_params());
        v
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn is_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }
}

/// Loss readout on the encoded output; when `grad_scale` is set, also the
/// gradients at the four tapped layers, scaled by it.
fn readout<T: Real>(
    pyr: &FeaturePyramid<T>,
    pair: &PreparedPair<T>,
    lambda_c: f64,
    lambda_s: f64,
    grad_scale: Option<f64>,
) -> (f64, f64, [Option<Tensor<T>>; 4]) {
    let mut taps: [Option<Tensor<T>>; 4] = [None, None, None, None];
    let out4 = pyr.relu4_1();
    let (yn, inv) = normalize_channels(out4);
    let diff: Vec<f64> = yn
        .data()
        .iter()
        .zip(pair.content_normalized.data())
        .map(|(a, b)| a.as_f64() - b.as_f64())
        .collect();
    let content = l2(diff.iter().copied());
    if let Some(scale) = grad_scale {
        let s = if content > 0.0 {
            scale * lambda_c / content
        } else {
            0.0
        };
        let (c, h, w) = out4.shape();
        let d = Tensor::from_vec(c, h, w, diff.iter().map(|&v| T::of(v * s)).collect())
            .expect("same shape");
        taps[3] = Some(normalize_channels_backward(&yn, &inv, &d));
    }

    let mut style = 0.0;
    for (l, (map, target)) in pyr.iter().zip(&pair.style_stats).enumerate() {
        let x = map.values();
        let got = loss_stats(x);
        let dm: Vec<f64> = got
            .mean
            .iter()
            .zip(&target.mean)
            .map(|(a, b)| a - b)
            .collect();
        let ds: Vec<f64> = got
            .std
            .iter()
            .zip(&target.std)
            .map(|(a, b)| a - b)
            .collect();
        let (nm, ns) = (l2(dm.iter().copied()), l2(ds.iter().copied()));
        style += nm + ns;
        if let Some(scale) = grad_scale {
            let n = x.plane() as f64;
            let mut g = x.clone();
            for c in 0..x.channels() {
                let a = if nm > 0.0 {
                    scale * lambda_s * dm[c] / nm / n
                } else {
                    0.0
                };
                let b = if ns > 0.0 {
                    scale * lambda_s * ds[c] / ns / (n * got.std[c])
                } else {
                    0.0
                };
                let mu = got.mean[c];
                g.channel_mut(c)
                    .iter_mut()
                    .for_each(|v| *v = T::of(a + b * (v.as_f64() - mu)));
            }
            match &mut taps[l] {
                Some(t) => t.add_scaled(T::one(), &g),
                slot => *slot = Some(g),
            }
        }
    }
    (content, style, taps)
}

fn check_pair<T: Real>(pair: &PreparedPair<T>) -> Result<()> {
    if pair.style_stats.len() != Layer::ALL.len() {
        return Err(Error::Shape(
            "style statistics must cover four layers".into(),
        ));
    }
    Ok(())
}

/// Loss of the model on one prepared pair.
pub fn pair_loss<T: Real>(
    model: &StyleModel<T>,
    pair: &PreparedPair<T>,
    lambda_c: f64,
    lambda_s: f64,
) -> Result<LossBreakdown> {
    check_pair(pair)?;
    let fcs = attention::attention_color(&pair.content, &pair.stylized, &model.ac)?;
    let out = model.decoder.decode_raw(&fcs)?;
    let pyr = model.encoder.encode_tensor(&out)?;
    let (c, s, _) = readout(&pyr, pair, lambda_c, lambda_s, None);
    Ok(LossBreakdown::new(c, s, lambda_c, lambda_s))
}

/// Adds `scale` times the loss gradient of one pair to `grads` and returns
/// the pair's loss.
pub fn pair_gradients<T: Real>(
    model: &StyleModel<T>,
    pair: &PreparedPair<T>,
    lambda_c: f64,
    lambda_s: f64,
    scale: f64,
    grads: &mut Gradients<T>,
) -> Result<LossBreakdown> {
    check_pair(pair)?;
    let (fcs, ac_trace) = attention::forward_traced(&pair.content, &pair.stylized, &model.ac)?;
    let dec_trace = model.decoder.forward_traced(&fcs)?;
    let enc_trace = model.encoder.forward_traced(dec_trace.output())?;
    let pyr = EncoderParams::traced_pyramid(&enc_trace)?;
    let (c, s, taps) = readout(&pyr, pair, lambda_c, lambda_s, Some(scale));
    let d_image = model.encoder.backward_input(&enc_trace, taps);
    let d_fcs = model
        .decoder
        .backward(&dec_trace, d_image, &mut grads.decoder);
    attention::backward(&model.ac, &ac_trace, &pair.stylized, &d_fcs, &mut grads.ac);
    Ok(LossBreakdown::new(c, s, lambda_c, lambda_s))
}

/// ReLU on/off states and max-pool winners of the decoder and of the encoder
/// pass over the output. Parameter settings with equal patterns lie on the
/// same linear piece of every non-smooth unit, which is what a central finite
/// difference needs to be a valid derivative estimate.
pub fn activation_pattern<T: Real>(
    model: &StyleModel<T>,
    pair: &PreparedPair<T>,
) -> Result<Vec<u64>> {
    let fcs = attention::attention_color(&pair.content, &pair.stylized, &model.ac)?;
    let dec_trace = model.decoder.forward_traced(&fcs)?;
    let enc_trace = model.encoder.forward_traced(dec_trace.output())?;
    let mut pattern = DecoderParams::trace_pattern(&dec_trace);
    pattern.extend(EncoderParams::trace_pattern(&enc_trace));
    Ok(pattern)
}

/// Mean loss and mean gradient over a batch.
pub fn batch_gradients<T: Real>(
    model: &StyleModel<T>,
    batch: &[PreparedPair<T>],
    lambda_c: f64,
    lambda_s: f64,
) -> Result<(LossBreakdown, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Cardinality("empty training batch".into()));
    }
    let mut grads = Gradients::zeros_like(model);
    let scale = 1.0 / batch.len() as f64;
    let (mut c, mut s) = (0.0, 0.0);
    for pair in batch {
        let l = pair_gradients(model, pair, lambda_c, lambda_s, scale, &mut grads)?;
        c += l.content;
        s += l.style;
    }
    Ok((
        LossBreakdown::new(c * scale, s * scale, lambda_c, lambda_s),
        grads,
    ))
}

/// Mean loss over a batch, without gradients.
pub fn batch_loss<T: Real>(
    model: &StyleModel<T>,
    batch: &[PreparedPair<T>],
    lambda_c: f64,
    lambda_s: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Cardinality("empty training batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let (mut c, mut s) = (0.0, 0.0);
    for pair in batch {
        let l = pair_loss(model, pair, lambda_c, lambda_s)?;
        c += l.content;
        s += l.style;
    }
    Ok(LossBreakdown::new(c * scale, s * scale, lambda_c, lambda_s))
}
