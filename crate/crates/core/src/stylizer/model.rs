use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::container::TensorStore;
use crate::encoder::{EncoderParams, Layer};
use crate::error::{Error, Result};
use crate::palette::PaletteMode;
use crate::real::Real;

use super::attention::AcParams;
use super::decoder::DecoderParams;

/// Inference-time palette knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StyleConfig {
    pub k: usize,
    pub patch_size: usize,
    pub num_patches: usize,
    pub palette_mode: PaletteMode,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            k: 3,
            patch_size: 8,
            num_patches: 100,
            palette_mode: PaletteMode::Centroid,
        }
    }
}

impl StyleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.num_patches == 0 {
            return Err(Error::Cardinality(
                "k and num_patches must be positive".into(),
            ));
        }
        if self.patch_size == 0 {
            return Err(Error::Dimension("patch size must be positive".into()));
        }
        if self.k > self.num_patches {
            return Err(Error::Cardinality(format!(
                "k = {} exceeds num_patches = {}",
                self.k, self.num_patches
            )));
        }
        Ok(())
    }
}

/// Frozen encoder plus the trainable attention block and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleModel<T = f32> {
    pub encoder: EncoderParams<T>,
    pub ac: AcParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T: Real> StyleModel<T> {
    /// Fresh trainable parts around a given encoder.
    pub fn init(encoder: EncoderParams<T>, rng: &mut impl Rng) -> Self {
        let ac = AcParams::init(Layer::Relu4_1.channels(), rng);
        let decoder = DecoderParams::init(rng);
        Self {
            encoder,
            ac,
            decoder,
        }
    }

    pub fn from_checkpoint(encoder: EncoderParams<T>, ckpt: &Checkpoint<T>) -> Self {
        Self {
            encoder,
            ac: ckpt.ac.clone(),
            decoder: ckpt.decoder.clone(),
        }
    }

    /// Named trainable tensors: the attention block, then the decoder.
    pub fn trainable(&self) -> Vec<(String, &[T])> {
        let mut v = self.ac.named_params();
        v.extend(self.decoder.named_params());
        v
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.ac.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    /// Mutable access to one trainable tensor by name.
    pub fn trainable_param_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let idx = self.trainable().iter().position(|(n, _)| n == name)?;
        self.trainable_mut().into_iter().nth(idx)
    }

    pub fn checkpoint(&self, metadata: BTreeMap<String, String>) -> Checkpoint<T> {
        Checkpoint {
            ac: self.ac.clone(),
            decoder: self.decoder.clone(),
            metadata,
        }
    }

    pub fn cast<U: Real>(&self) -> StyleModel<U> {
        StyleModel {
            encoder: self.encoder.cast(),
            ac: self.ac.cast(),
            decoder: self.decoder.cast(),
        }
    }
}

/// Trainable parameters plus a free-form metadata table
/// (iteration, seed, training config).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub ac: AcParams<T>,
    pub decoder: DecoderParams<T>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::new();
        self.ac.write_to(&mut store);
        self.decoder.write_to(&mut store);
        for (k, v) in &self.metadata {
            store.set_meta(k.clone(), v.clone());
        }
        store
    }

    pub fn from_store(store: &TensorStore) -> Result<Self> {
        Ok(Self {
            ac: AcParams::read_from(store, Layer::Relu4_1.channels())?,
            decoder: DecoderParams::read_from(store)?,
            metadata: store.metadata().clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let store = TensorStore::load(path)?;
        Self::from_store(&store)
            .map_err(|e| e.context(format!("loading checkpoint {}", path.display())))
    }
}
