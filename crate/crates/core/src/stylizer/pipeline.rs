//! End-to-end stylization and its multi-style, interpolation and
//! spatial-control compositions.
//!
//! Compositions over several style images give every style branch a clone of
//! the incoming generator, so each branch builds exactly the palette that
//! [`stylize`] would build for that style with the same generator state. The
//! caller's generator is left where the last branch left it.

use rand::Rng;

use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::palette::{build_palette, FeaturePalette};
use crate::real::Real;
use crate::tensor::Tensor;

use super::adain::first_stylize;
use super::attention::attention_color;
use super::decoder::decode;
use super::model::{StyleConfig, StyleModel};

/// `relu4_1` features of an image.
pub fn content_features<T: Real>(img: &ImageTensor, model: &StyleModel<T>) -> Result<Tensor<T>> {
    Ok(encode(img, &model.encoder)?.relu4_1().clone())
}

/// Feature palette of a style image.
pub fn style_palette<T: Real>(
    style: &ImageTensor,
    model: &StyleModel<T>,
    cfg: &StyleConfig,
    rng: &mut impl Rng,
) -> Result<FeaturePalette<T>> {
    cfg.validate()?;
    let fs = content_features(style, model)?;
    build_palette(
        &fs,
        cfg.num_patches,
        cfg.patch_size,
        cfg.k,
        cfg.palette_mode,
        rng,
    )
}

/// `F_cs` for given content features and palette.
pub fn stylize_features<T: Real>(
    content: &Tensor<T>,
    palette: &FeaturePalette<T>,
    model: &StyleModel<T>,
) -> Result<Tensor<T>> {
    attention_color(content, &first_stylize(content, palette)?, &model.ac)
}

fn stylized_features<T: Real>(
    fc: &Tensor<T>,
    style: &ImageTensor,
    model: &StyleModel<T>,
    cfg: &StyleConfig,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let palette = style_palette(style, model, cfg, rng)?;
    stylize_features(fc, &palette, model)
}

/// Stylizes `content` with `style`. The output is `8 * floor(H / 8)` by
/// `8 * floor(W / 8)`.
pub fn stylize<T: Real>(
    content: &ImageTensor,
    style: &ImageTensor,
    model: &StyleModel<T>,
    cfg: &StyleConfig,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    cfg.validate()?;
    let fc = content_features(content, model)?;
    decode(
        &stylized_features(&fc, style, model, cfg, rng)?,
        &model.decoder,
    )
}

/// One palette entry per style image: `selections[i]` if given, otherwise
/// drawn uniformly from that style's palette. Palettes are built in order
/// from the shared generator.
pub fn multi_style_palette<T: Real>(
    styles: &[ImageTensor],
    model: &StyleModel<T>,
    cfg: &StyleConfig,
    selections: Option<&[usize]>,
    rng: &mut impl Rng,
) -> Result<FeaturePalette<T>> {
    if styles.is_empty() {
        return Err(Error::Cardinality(
            "at least one style image is required".into(),
        ));
    }
    if let Some(sel) = selections {
        if sel.len() != styles.len() {
            return Err(Error::Cardinality(format!(
                "{} selections for {} style images",
                sel.len(),
                styles.len()
            )));
        }
    }
    let mut entries = Vec::with_capacity(styles.len());
    for (i, style) in styles.iter().enumerate() {
        let palette = style_palette(style, model, cfg, rng)?;
        let pick = match selections {
            Some(sel) => sel[i],
            None => rng.random_range(0..palette.k()),
        };
        let chosen = palette
            .select(pick)
            .map_err(|e| e.context(format!("style image {i}")))?;
        entries.extend(chosen.entries().iter().cloned());
    }
    FeaturePalette::new(entries, cfg.palette_mode)
}

/// Multi-style transfer with one palette entry per style image.
pub fn stylize_multi<T: Real>(
    content: &ImageTensor,
    styles: &[ImageTensor],
    model: &StyleModel<T>,
    cfg: &StyleConfig,
    selections: Option<&[usize]>,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    let fc = content_features(content, model)?;
    let palette = multi_style_palette(styles, model, cfg, selections, rng)?;
    decode(&stylize_features(&fc, &palette, model)?, &model.decoder)
}

/// `(1 - w) * a + w * b`; the endpoints return `a` or `b` unchanged.
pub fn blend_features<T: Real>(a: &Tensor<T>, b: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Range(format!(
            "interpolation weight {w} is outside [0, 1]"
        )));
    }
    a.ensure_same_shape(b, "interpolated feature maps")?;
    if w == 0.0 {
        return Ok(a.clone());
    }
    if w == 1.0 {
        return Ok(b.clone());
    }
    let mut out = a.clone();
    out.scale(T::of(1.0 - w));
    out.add_scaled(T::of(w), b);
    Ok(out)
}

fn branch_features<T: Real, R: Rng + Clone>(
    fc: &Tensor<T>,
    styles: &[&ImageTensor],
    model: &StyleModel<T>,
    cfg: &StyleConfig,
    rng: &mut R,
) -> Result<Vec<Tensor<T>>> {
    let start = rng.clone();
    let mut out = Vec::with_capacity(styles.len());
    for style in styles {
        let mut branch = start.clone();
        out.push(stylized_features(fc, style, model, cfg, &mut branch)?);
        *rng = branch;
    }
    Ok(out)
}

/// Decodes a convex blend of the two stylized feature maps.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_styles<T: Real, R: Rng + Clone>(
    content: &ImageTensor,
    style_a: &ImageTensor,
    style_b: &ImageTensor,
    w: f64,
    model: &StyleModel<T>,
    cfg: &StyleConfig,
    rng: &mut R,
) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Range(format!(
            "interpolation weight {w} is outside [0, 1]"
        )));
    }
    cfg.validate()?;
    let fc = content_features(content, model)?;
    let f = branch_features(&fc, &[style_a, style_b], model, cfg, rng)?;
    decode(&blend_features(&f[0], &f[1], w)?, &model.decoder)
}

/// Binary region mask at image resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    /// Thresholds a grayscale image at 0.5 (mean of the three channels).
    pub fn from_image(img: &ImageTensor) -> Self {
        Self::from_fn(img.height(), img.width(), |y, x| {
            (img.get(y, x, 0) + img.get(y, x, 1) + img.get(y, x, 2)) / 3.0 >= 0.5
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbour resampling (pixel centres).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let src = |i: usize, n: usize, m: usize| {
            (((i as f64 + 0.5) * m as f64 / n as f64) as usize).min(m - 1)
        };
        Self::from_fn(height, width, |y, x| {
            self.get(src(y, height, self.height), src(x, width, self.width))
        })
    }
}

/// Checks that the masks share a size and cover every pixel exactly once.
pub fn validate_partition(masks: &[Mask]) -> Result<()> {
    let Some(first) = masks.first() else {
        return Err(Error::Mask("no masks given".into()));
    };
    let (h, w) = (first.height, first.width);
    if let Some(m) = masks.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::Mask(format!(
            "mask sizes differ: {h}x{w} vs {}x{}",
            m.height, m.width
        )));
    }
    for y in 0..h {
        for x in 0..w {
            match masks.iter().filter(|m| m.get(y, x)).count() {
                1 => {}
                0 => {
                    return Err(Error::Mask(format!(
                        "pixel ({y}, {x}) is not covered by any mask"
                    )))
                }
                n => {
                    return Err(Error::Mask(format!(
                        "pixel ({y}, {x}) is covered by {n} masks"
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Picks each position's features from the map whose mask covers it. Masks
/// must already be at feature resolution and form a partition.
pub fn compose_masked<T: Real>(features: &[Tensor<T>], masks: &[Mask]) -> Result<Tensor<T>> {
    if features.len() != masks.len() || features.is_empty() {
        return Err(Error::Cardinality(format!(
            "{} feature maps for {} masks",
            features.len(),
            masks.len()
        )));
    }
    validate_partition(masks)?;
    let (c, h, w) = features[0].shape();
    for f in features {
        features[0].ensure_same_shape(f, "masked feature maps")?;
    }
    if (masks[0].height, masks[0].width) != (h, w) {
        return Err(Error::Mask(format!(
            "masks are {}x{}, features are {h}x{w}",
            masks[0].height, masks[0].width
        )));
    }
    let owner: Vec<usize> = (0..h * w)
        .map(|i| {
            masks
                .iter()
                .position(|m| m.data[i])
                .expect("partition checked")
        })
        .collect();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let dst = out.channel_mut(ch);
        for (i, &o) in owner.iter().enumerate() {
            dst[i] = features[o].channel(ch)[i];
        }
    }
    Ok(out)
}

/// Region-wise stylization: style `i` is applied where `masks[i]` is set.
pub fn spatial_control<T: Real, R: Rng + Clone>(
    content: &ImageTensor,
    styles: &[ImageTensor],
    masks: &[Mask],
    model: &StyleModel<T>,
    cfg: &StyleConfig,
    rng: &mut R,
) -> Result<ImageTensor> {
    if styles.len() != masks.len() || styles.is_empty() {
        return Err(Error::Cardinality(format!(
            "{} style images for {} masks",
            styles.len(),
            masks.len()
        )));
    }
    validate_partition(masks)?;
    if (masks[0].height, masks[0].width) != (content.height(), content.width()) {
        return Err(Error::Mask(format!(
            "masks are {}x{}, content is {}x{}",
            masks[0].height,
            masks[0].width,
            content.height(),
            content.width()
        )));
    }
    cfg.validate()?;
    let fc = content_features(content, model)?;
    let refs: Vec<&ImageTensor> = styles.iter().collect();
    let features = branch_features(&fc, &refs, model, cfg, rng)?;
    let small: Vec<Mask> = masks
        .iter()
        .map(|m| m.resize_nearest(fc.height(), fc.width()))
        .collect();
    decode(&compose_masked(&features, &small)?, &model.decoder)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_partition_checks() {
        let left = Mask::from_fn(4, 4, |_, x| x < 2);
        let right = Mask::from_fn(4, 4, |_, x| x >= 2);
        validate_partition(&[left.clone(), right.clone()]).unwrap();
        let wide = Mask::from_fn(4, 4, |_, x| x < 3);
        assert!(matches!(
            validate_partition(&[wide, right]),
            Err(Error::Mask(_))
        ));
        assert!(matches!(validate_partition(&[left]), Err(Error::Mask(_))));
    }

    #[test]
    fn nearest_resize_keeps_partition() {
        let a = Mask::from_fn(37, 29, |y, x| (y * 3 + x * 5) % 7 < 3);
        let b = Mask::from_fn(37, 29, |y, x| (y * 3 + x * 5) % 7 >= 3);
        validate_partition(&[a.resize_nearest(4, 3), b.resize_nearest(4, 3)]).unwrap();
        let r = Mask::from_fn(16, 16, |_, x| x < 8).resize_nearest(2, 2);
        assert!(r.get(0, 0) && r.get(1, 0) && !r.get(0, 1) && !r.get(1, 1));
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let a = Tensor::<f32>::from_fn(2, 2, 2, |c, y, x| (c + y + x) as f32);
        let b = a.map(|v| -3.0 * v + 1.0);
        assert_eq!(blend_features(&a, &b, 0.0).unwrap(), a);
        assert_eq!(blend_features(&a, &b, 1.0).unwrap(), b);
        let m = blend_features(&a, &b, 0.5).unwrap();
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(m.data()) {
            assert_eq!(*z, 0.5 * x + 0.5 * y);
        }
        assert!(matches!(blend_features(&a, &b, 1.5), Err(Error::Range(_))));
    }

    #[test]
    fn masked_composition_swaps_exactly() {
        let a = Tensor::<f32>::full(3, 2, 2, 1.0);
        let b = Tensor::<f32>::full(3, 2, 2, 2.0);
        let top = Mask::from_fn(2, 2, |y, _| y == 0);
        let bottom = Mask::from_fn(2, 2, |y, _| y == 1);
        let ab = compose_masked(&[a.clone(), b.clone()], &[top.clone(), bottom.clone()]).unwrap();
        let ba = compose_masked(&[a, b], &[bottom, top]).unwrap();
        assert_eq!(ab.channel(1), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(ba.channel(1), &[2.0, 2.0, 1.0, 1.0]);
    }
}
