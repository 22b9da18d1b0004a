use crate::error::{Error, Result};
use crate::nn::channel_moments;
use crate::palette::{palette_stats, ChannelStats, FeaturePalette};
use crate::real::Real;
use crate::tensor::Tensor;

/// Variance floor in the AdaIN denominator. Small enough that moment matching
/// holds to ~1e-6 relative for any channel with std above 1e-3; exactly
/// constant channels (variance 0) map to the target mean.
pub const ADAIN_EPS: f64 = 1e-12;

/// Re-targets every channel of `x` to the given mean and standard deviation:
/// `std_t * (x - mu(x)) / sigma(x) + mean_t`.
pub fn adain<T: Real>(x: &Tensor<T>, target: &ChannelStats<T>) -> Result<Tensor<T>> {
    if target.channels() != x.channels() {
        return Err(Error::Shape(format!(
            "AdaIN target has {} channels, features have {}",
            target.channels(),
            x.channels()
        )));
    }
    let (means, vars) = channel_moments(x);
    let mut out = x.clone();
    for c in 0..x.channels() {
        let scale = target.std[c].as_f64() / (vars[c] + ADAIN_EPS).sqrt();
        let (mu, shift) = (means[c], target.mean[c].as_f64());
        out.channel_mut(c)
            .iter_mut()
            .for_each(|v| *v = T::of((v.as_f64() - mu) * scale + shift));
    }
    Ok(out)
}

/// One AdaIN-stylized copy of the content features per palette entry.
pub fn first_stylize<T: Real>(
    content: &Tensor<T>,
    palette: &FeaturePalette<T>,
) -> Result<Vec<Tensor<T>>> {
    if palette.channels() != content.channels() {
        return Err(Error::Shape(format!(
            "palette has {} channels, content features have {}",
            palette.channels(),
            content.channels()
        )));
    }
    palette
        .entries()
        .iter()
        .map(|e| adain(content, &palette_stats(e)))
        .collect()
}
