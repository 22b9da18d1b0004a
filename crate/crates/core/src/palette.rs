//! Feature palette composition.
//!
//! Style features at `relu4_1` are cut into randomly placed `p x p` patches,
//! the flattened patches are clustered with k-means, and each cluster yields
//! one palette entry: either its centroid or the member patch closest to it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::container::TensorStore;
use crate::error::{Error, Result};
use crate::nn::channel_moments;
use crate::real::Real;
use crate::tensor::Tensor;

/// Lloyd iteration cap.
pub const MAX_ITERS: usize = 100;

/// A `C x p x p` window of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePatch<T = f32> {
    pub values: Tensor<T>,
    /// `(row, col)` of the top-left corner in feature coordinates.
    pub source_offset: (usize, usize),
}

impl<T: Real> FeaturePatch<T> {
    /// The patch as a flat `C * p * p` vector.
    pub fn as_vector(&self) -> &[T] {
        self.values.data()
    }
}

/// Draws `count` patches with offsets uniform over all valid positions.
pub fn sample_patches<T: Real>(
    features: &Tensor<T>,
    count: usize,
    p: usize,
    rng: &mut impl Rng,
) -> Result<Vec<FeaturePatch<T>>> {
    if count == 0 {
        return Err(Error::Cardinality("patch count must be positive".into()));
    }
    if p == 0 || features.height() < p || features.width() < p {
        return Err(Error::Dimension(format!(
            "{p}x{p} patches do not fit a {}x{} feature map",
            features.height(),
            features.width()
        )));
    }
    Ok((0..count)
        .map(|_| {
            let row = rng.random_range(0..=features.height() - p);
            let col = rng.random_range(0..=features.width() - p);
            FeaturePatch {
                values: features.crop(row, col, p, p),
                source_offset: (row, col),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster<T = f32> {
    pub centroid: Vec<T>,
    /// Indices into the clustered patch list, ascending.
    pub members: Vec<usize>,
}

/// Full result of a k-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering<T = f32> {
    pub clusters: Vec<Cluster<T>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centroid after each update.
    pub inertia: Vec<f64>,
}

fn dist2<T: Real>(a: &[T], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x.as_f64() - c;
            d * d
        })
        .sum()
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// k-means++ seeding. Returns the indices of the chosen initial centers.
pub fn kmeans_plus_plus<T: Real>(points: &[&[T]], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.len();
    assert!(k >= 1 && k <= n);
    let mut chosen = vec![rng.random_range(0..n)];
    let first = to_f64(points[chosen[0]]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &first)).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            rng.random_range(0..n)
        };
        let c = to_f64(points[next]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        chosen.push(next);
    }
    chosen
}

/// Lloyd iterations from the given initial centroids.
///
/// Each round assigns every point to its nearest centroid (lowest index on
/// ties), repairs empty clusters by moving in the point farthest from its
/// current centroid (taken only from clusters with more than one member,
/// lowest index on ties), then recomputes centroids as member means. Stops
/// once a round leaves the assignments unchanged, or after [`MAX_ITERS`].
pub fn lloyd<T: Real>(points: &[&[T]], init: Vec<Vec<f64>>, max_iters: usize) -> Clustering<T> {
    let n = points.len();
    let k = init.len();
    assert!(k >= 1 && k <= n, "need 1 <= k <= points");
    let dim = init[0].len();
    let mut centroids = init;
    let mut assign: Vec<usize> = Vec::new();
    let mut inertia = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centroids.iter().enumerate() {
                    let d = dist2(p, c);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect();

        let mut sizes = vec![0usize; k];
        next.iter().for_each(|&j| sizes[j] += 1);
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let mut far: Option<(usize, f64)> = None;
            for (i, p) in points.iter().enumerate() {
                if sizes[next[i]] <= 1 {
                    continue;
                }
                let d = dist2(p, &centroids[next[i]]);
                if far.is_none_or(|(_, best)| d > best) {
                    far = Some((i, d));
                }
            }
            let (i, _) = far.expect("k <= n leaves a cluster with spare members");
            sizes[next[i]] -= 1;
            sizes[empty] += 1;
            next[i] = empty;
        }

        let changed = next != assign;
        assign = next;
        let mut sums = vec![vec![0.0f64; dim]; k];
        for (p, &j) in points.iter().zip(&assign) {
            for (s, &v) in sums[j].iter_mut().zip(p.iter()) {
                *s += v.as_f64();
            }
        }
        for (j, s) in sums.into_iter().enumerate() {
            centroids[j] = s.into_iter().map(|v| v / sizes[j] as f64).collect();
        }
        inertia.push(
            points
                .iter()
                .zip(&assign)
                .map(|(p, &j)| dist2(p, &centroids[j]))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    let clusters = centroids
        .into_iter()
        .enumerate()
        .map(|(j, c)| Cluster {
            centroid: c.into_iter().map(T::of).collect(),
            members: (0..n).filter(|&i| assign[i] == j).collect(),
        })
        .collect();
    Clustering {
        clusters,
        assignments: assign,
        iterations,
        inertia,
    }
}

/// k-means++ seeded Lloyd clustering over flattened patch vectors.
pub fn kmeans_detailed<T: Real>(
    patches: &[FeaturePatch<T>],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Clustering<T>> {
    if k == 0 {
        return Err(Error::Cardinality("cluster count must be positive".into()));
    }
    if patches.len() < k {
        return Err(Error::Cardinality(format!(
            "{} patches cannot form {k} clusters",
            patches.len()
        )));
    }
    let dim = patches[0].values.len();
    if patches
        .iter()
        .any(|p| p.values.shape() != patches[0].values.shape())
    {
        return Err(Error::Shape("patches must share one shape".into()));
    }
    let points: Vec<&[T]> = patches.iter().map(FeaturePatch::as_vector).collect();
    let init = kmeans_plus_plus(&points, k, rng)
        .into_iter()
        .map(|i| to_f64(points[i]))
        .collect::<Vec<_>>();
    debug_assert!(init.iter().all(|c| c.len() == dim));
    Ok(lloyd(&points, init, MAX_ITERS))
}

pub fn kmeans_cluster<T: Real>(
    patches: &[FeaturePatch<T>],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Cluster<T>>> {
    Ok(kmeans_detailed(patches, k, rng)?.clusters)
}

/// Which vector represents a cluster in the palette.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PaletteMode {
    /// The cluster mean.
    #[default]
    Centroid,
    /// The member patch closest to the cluster mean.
    NearestPatch,
}

impl FromStr for PaletteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "centroid" => Ok(PaletteMode::Centroid),
            "nearest" | "nearest_patch" | "nearest-patch" | "patch" => {
                Ok(PaletteMode::NearestPatch)
            }
            other => Err(Error::Config(format!(
                "unknown palette mode `{other}` (expected centroid or nearest)"
            ))),
        }
    }
}

impl fmt::Display for PaletteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PaletteMode::Centroid => "centroid",
            PaletteMode::NearestPatch => "nearest",
        })
    }
}

/// Per-channel spatial mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T = f32> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Real> ChannelStats<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape(format!(
                "{} means vs {} stds",
                mean.len(),
                std.len()
            )));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|&s| s < T::zero()) {
            return Err(Error::Numeric(
                "channel statistics must be finite with std >= 0".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub fn palette_stats<T: Real>(entry: &Tensor<T>) -> ChannelStats<T> {
    let (means, vars) = channel_moments(entry);
    ChannelStats {
        mean: means.into_iter().map(T::of).collect(),
        std: vars.into_iter().map(|v| T::of(v.sqrt())).collect(),
    }
}

/// `k` representative style entries, each `C x p x p`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePalette<T = f32> {
    entries: Vec<Tensor<T>>,
    mode: PaletteMode,
}

impl<T: Real> FeaturePalette<T> {
    pub fn new(entries: Vec<Tensor<T>>, mode: PaletteMode) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Cardinality(
                "a palette needs at least one entry".into(),
            ));
        }
        if entries
            .iter()
            .any(|e| e.channels() != entries[0].channels())
        {
            return Err(Error::Shape(
                "palette entries must share a channel count".into(),
            ));
        }
        Ok(Self { entries, mode })
    }

    pub fn entries(&self) -> &[Tensor<T>] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn mode(&self) -> PaletteMode {
        self.mode
    }

    pub fn channels(&self) -> usize {
        self.entries[0].channels()
    }

    pub fn stats(&self) -> Vec<ChannelStats<T>> {
        self.entries.iter().map(palette_stats).collect()
    }

    /// A single-entry palette holding entry `index`.
    pub fn select(&self, index: usize) -> Result<Self> {
        let entry = self.entries.get(index).ok_or_else(|| {
            Error::Index(format!(
                "palette entry {index} out of range for k = {}",
                self.k()
            ))
        })?;
        Ok(Self {
            entries: vec![entry.clone()],
            mode: self.mode,
        })
    }

    /// Debug export: entries as `palette/entry{i}` plus their statistics.
    pub fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::new();
        for (i, (e, s)) in self.entries.iter().zip(self.stats()).enumerate() {
            let (c, h, w) = e.shape();
            store.insert_real(format!("palette/entry{i}"), vec![c, h, w], e.data());
            store.insert_real(format!("palette/entry{i}/mean"), vec![c], &s.mean);
            store.insert_real(format!("palette/entry{i}/std"), vec![c], &s.std);
        }
        store.set_meta("k", self.k().to_string());
        store.set_meta("mode", self.mode.to_string());
        store
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().save(path)
    }
}

/// Turns clusters into palette entries.
pub fn compose_palette<T: Real>(
    clusters: &[Cluster<T>],
    patches: &[FeaturePatch<T>],
    mode: PaletteMode,
) -> Result<FeaturePalette<T>> {
    let Some(first) = patches.first() else {
        return Err(Error::Cardinality("no patches to compose from".into()));
    };
    let (c, h, w) = first.values.shape();
    let entries = clusters
        .iter()
        .map(|cl| {
            if cl.members.is_empty() || cl.members.iter().any(|&i| i >= patches.len()) {
                return Err(Error::Index(
                    "cluster members do not index the patch list".into(),
                ));
            }
            match mode {
                PaletteMode::Centroid => Tensor::from_vec(c, h, w, cl.centroid.clone()),
                PaletteMode::NearestPatch => {
                    let centroid = to_f64(&cl.centroid);
                    let mut best = (cl.members[0], f64::INFINITY);
                    for &i in &cl.members {
                        let d = dist2(patches[i].as_vector(), &centroid);
                        if d < best.1 || (d == best.1 && i < best.0) {
                            best = (i, d);
                        }
                    }
                    Ok(patches[best.0].values.clone())
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    FeaturePalette::new(entries, mode)
}

/// Sample, cluster and compose in one call.
pub fn build_palette<T: Real>(
    style_features: &Tensor<T>,
    num_patches: usize,
    patch_size: usize,
    k: usize,
    mode: PaletteMode,
    rng: &mut impl Rng,
) -> Result<FeaturePalette<T>> {
    if k > num_patches {
        return Err(Error::Cardinality(format!(
            "{num_patches} patches cannot form {k} clusters"
        )));
    }
    let patches = sample_patches(style_features, num_patches, patch_size, rng)?;
    let clusters = kmeans_cluster(&patches, k, rng)?;
    compose_palette(&clusters, &patches, mode)
}
