//! Depth-map error between content and stylized images (MAE and RMSE), over
//! a corpus of pairs listed in a CSV manifest. Depth estimation itself is
//! external; maps are read from grayscale PNGs or tensor containers.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};

use crate::container::TensorStore;
use crate::error::{Error, Result};

/// Name of the tensor holding a depth map inside a container file.
pub const DEPTH_TENSOR: &str = "depth";

/// Non-negative depth values on an `H x W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    source_id: String,
}

impl DepthMap {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        if values.len() != height * width || values.is_empty() {
            return Err(Error::Shape(format!(
                "depth map {source_id}: {} values for {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!(
                "depth map {source_id} must be finite and non-negative"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            source_id,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Rescales to `[0, 1]` by the map's own min and max; constant maps
    /// become all zeros.
    pub fn min_max_normalized(&self) -> Self {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let values = self
            .values
            .iter()
            .map(|v| if range > 0.0 { (v - min) / range } else { 0.0 })
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }
}

fn from_image(img: DynamicImage, id: String) -> Result<DepthMap> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            img.into_luma8()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect()
        }
        other => other
            .into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
    };
    DepthMap::new(h, w, values, id)
}

/// Reads a depth map: 16-bit PNGs scale by `1/65535`, 8-bit images by
/// `1/255`; `.safetensors` files must hold a `depth` tensor of shape
/// `[H, W]` or `[1, H, W]`.
pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let id = path.display().to_string();
    if path.extension().is_some_and(|e| e == "safetensors") {
        let store = TensorStore::load(path)?;
        let t = store
            .get(DEPTH_TENSOR)
            .ok_or_else(|| Error::Schema(format!("{id} has no `{DEPTH_TENSOR}` tensor")))?;
        let (h, w) = match t.shape[..] {
            [h, w] | [1, h, w] => (h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "{id}: depth tensor has shape {:?}",
                    t.shape
                )))
            }
        };
        return DepthMap::new(h, w, t.data.iter().map(|&v| v as f64).collect(), id);
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    from_image(img, id)
}

/// Writes a depth map as a 16-bit grayscale PNG (values clamped to `[0, 1]`).
pub fn save_depth_png(map: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = map
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        map.width as u32,
        map.height as u32,
        raw,
    )
    .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// `(mae, rmse)` of the per-pixel difference.
pub fn pair_depth_error(content: &DepthMap, stylized: &DepthMap) -> Result<(f64, f64)> {
    if (content.height, content.width) != (stylized.height, stylized.width) {
        return Err(Error::Shape(format!(
            "depth maps {}x{} ({}) and {}x{} ({}) differ in size",
            content.height,
            content.width,
            content.source_id,
            stylized.height,
            stylized.width,
            stylized.source_id
        )));
    }
    let n = content.values.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (a, b) in content.values.iter().zip(&stylized.values) {
        let d = b - a;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthPair {
    pub pair_id: String,
    pub content: PathBuf,
    pub stylized: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairError {
    pub pair_id: String,
    pub mae: f64,
    pub rmse: f64,
}

/// Per-pair errors and their unweighted means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_pair: Vec<PairError>,
    pub aggregate_mae: f64,
    pub aggregate_rmse: f64,
    pub n: usize,
}

/// Row id of the aggregate line in the CSV report.
pub const AGGREGATE_ID: &str = "__aggregate__";

impl EvalReport {
    pub fn from_pairs(per_pair: Vec<PairError>) -> Result<Self> {
        if per_pair.is_empty() {
            return Err(Error::Cardinality("no depth pairs to evaluate".into()));
        }
        let n = per_pair.len();
        let aggregate_mae = per_pair.iter().map(|p| p.mae).sum::<f64>() / n as f64;
        let aggregate_rmse = per_pair.iter().map(|p| p.rmse).sum::<f64>() / n as f64;
        Ok(Self {
            per_pair,
            aggregate_mae,
            aggregate_rmse,
            n,
        })
    }

    pub fn summary_line(&self) -> String {
        format!(
            "pairs={} mae={:.6} rmse={:.6}",
            self.n, self.aggregate_mae, self.aggregate_rmse
        )
    }

    /// CSV `pair_id,mae,rmse`, one row per pair plus a final aggregate row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let err = |e: csv::Error| Error::Data(format!("writing report: {e}"));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["pair_id", "mae", "rmse"]).map_err(err)?;
        for p in &self.per_pair {
            w.write_record([p.pair_id.clone(), p.mae.to_string(), p.rmse.to_string()])
                .map_err(err)?;
        }
        w.write_record([
            AGGREGATE_ID.to_string(),
            self.aggregate_mae.to_string(),
            self.aggregate_rmse.to_string(),
        ])
        .map_err(err)?;
        w.flush()
            .map_err(|e| Error::Data(format!("writing report: {e}")))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads `pair_id,content_depth_path,stylized_depth_path`; relative paths
/// are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<DepthPair>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        reason: msg,
    };
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>()
        != ["pair_id", "content_depth_path", "stylized_depth_path"]
    {
        return Err(bad(format!(
            "expected header pair_id,content_depth_path,stylized_depth_path, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut pairs = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| bad(e.to_string()))?;
        pairs.push(DepthPair {
            pair_id: r[0].to_string(),
            content: base.join(&r[1]),
            stylized: base.join(&r[2]),
        });
    }
    Ok(pairs)
}

/// Loads every pair and aggregates the errors. Failures name the pair.
pub fn evaluate_corpus(pairs: &[DepthPair], normalize: bool) -> Result<EvalReport> {
    let per_pair = pairs
        .iter()
        .map(|p| {
            let run = || -> Result<PairError> {
                let (mut c, mut s) = (load_depth(&p.content)?, load_depth(&p.stylized)?);
                if normalize {
                    c = c.min_max_normalized();
                    s = s.min_max_normalized();
                }
                let (mae, rmse) = pair_depth_error(&c, &s)?;
                Ok(PairError {
                    pair_id: p.pair_id.clone(),
                    mae,
                    rmse,
                })
            };
            run().map_err(|e| e.context(format!("pair {}", p.pair_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(per_pair)
}
