use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::imaging::{load_image, random_crop, resize_short_side, ImageTensor};
use crate::real::Real;
use crate::stylizer::{Checkpoint, StyleModel};

use super::config::TrainConfig;
use super::loss::{batch_gradients, EncodedImage, LossBreakdown, PreparedPair};
use super::optim::Adam;

/// One optimizer step on already prepared pairs. On a non-finite loss or
/// gradient the model and optimizer are left untouched and a numeric error
/// is returned. The returned loss is the pre-update loss.
pub fn train_step<T: Real>(
    model: &mut StyleModel<T>,
    batch: &[PreparedPair<T>],
    cfg: &TrainConfig,
    adam: &mut Adam<T>,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradients(model, batch, cfg.lambda_c, cfg.lambda_s)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss or gradient (content {}, style {})",
            loss.content, loss.style
        )));
    }
    let grad_list: Vec<&[T]> = grads.named().into_iter().map(|(_, g)| g).collect();
    adam.update(model.trainable_mut(), grad_list);
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Role {
    Content,
    Style,
}

/// Seeded training loop over in-memory image sets.
///
/// All randomness (initialization, pairing, crops, palettes) comes from one
/// generator seeded with `cfg.seed`, so two trainers built from the same
/// inputs produce bit-identical losses and parameters.
pub struct Trainer<T: Real = f32> {
    model: StyleModel<T>,
    adam: Adam<T>,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    iteration: usize,
    contents: Vec<ImageTensor>,
    styles: Vec<ImageTensor>,
    /// Encodings of images whose only possible crop is the whole image.
    cache: HashMap<(Role, usize), EncodedImage<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        encoder: EncoderParams<T>,
        contents: Vec<ImageTensor>,
        styles: Vec<ImageTensor>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if contents.is_empty() || styles.is_empty() {
            return Err(Error::Data(
                "training needs at least one content and one style image".into(),
            ));
        }
        let prep = |imgs: Vec<ImageTensor>| -> Result<Vec<ImageTensor>> {
            imgs.iter()
                .map(|i| resize_short_side(i, cfg.input_size))
                .collect()
        };
        let contents = prep(contents)?;
        let styles = prep(styles)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = StyleModel::init(encoder, &mut rng);
        let adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self {
            model,
            adam,
            cfg,
            rng,
            iteration: 0,
            contents,
            styles,
            cache: HashMap::new(),
        })
    }

    pub fn model(&self) -> &StyleModel<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut meta = BTreeMap::new();
        meta.insert("iteration".to_string(), self.iteration.to_string());
        meta.insert("seed".to_string(), self.cfg.seed.to_string());
        meta.insert("config".to_string(), self.cfg.to_key_values());
        self.model.checkpoint(meta)
    }

    fn encoded(&mut self, role: Role, index: usize) -> Result<EncodedImage<T>> {
        let crop = self.cfg.crop;
        let img = match role {
            Role::Content => &self.contents[index],
            Role::Style => &self.styles[index],
        };
        let whole = img.height() == crop && img.width() == crop;
        let cropped = random_crop(img, crop, &mut self.rng)?;
        if whole {
            if let Some(e) = self.cache.get(&(role, index)) {
                return Ok(e.clone());
            }
        }
        let e = EncodedImage::new(&self.model.encoder, &cropped.to_tensor())?;
        if whole {
            self.cache.insert((role, index), e.clone());
        }
        Ok(e)
    }

    /// Draws a batch and runs one step. The iteration counter advances even
    /// when the step is rejected with a numeric error.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        self.iteration += 1;
        let mut batch = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            let ci = self.rng.random_range(0..self.contents.len());
            let si = self.rng.random_range(0..self.styles.len());
            let content = self.encoded(Role::Content, ci)?;
            let style = self.encoded(Role::Style, si)?;
            batch.push(PreparedPair::new(
                &content,
                &style,
                self.cfg.num_patches,
                self.cfg.patch_size,
                self.cfg.cluster_k,
                &mut self.rng,
            )?);
        }
        train_step(&mut self.model, &batch, &self.cfg, &mut self.adam)
    }
}

/// Image files (png, jpg, jpeg) directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    Ok(paths)
}

/// Result of a [`train`] run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    /// Losses of accepted steps as `(iteration, loss)`.
    pub losses: Vec<(usize, LossBreakdown)>,
}

pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT_FILE: &str = "final.safetensors";

pub fn checkpoint_file_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}.safetensors")
}

/// Trains on every image in the two directories and writes the loss log,
/// periodic checkpoints and the final checkpoint into `out_dir`.
pub fn train(
    encoder: EncoderParams<f32>,
    content_dir: impl AsRef<Path>,
    style_dir: impl AsRef<Path>,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let load = |paths: Vec<PathBuf>| -> Result<Vec<ImageTensor>> {
        paths.iter().map(load_image).collect()
    };
    let contents = load(list_images(&content_dir)?)?;
    let styles = load(list_images(&style_dir)?)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut trainer = Trainer::new(encoder, contents, styles, cfg.clone())?;
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let csv_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", log_path.display()));
    let mut log = csv::Writer::from_path(&log_path).map_err(csv_err)?;
    log.write_record(["iter", "content_loss", "style_loss", "total"])
        .map_err(csv_err)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let mut losses = Vec::new();
    for _ in 0..cfg.total_iters {
        match trainer.step() {
            Ok(loss) => {
                let it = trainer.iteration();
                log.write_record([
                    it.to_string(),
                    loss.content.to_string(),
                    loss.style.to_string(),
                    loss.total.to_string(),
                ])
                .map_err(csv_err)?;
                log::info!(
                    "iter {it}: content {:.4} style {:.4} total {:.4}",
                    loss.content,
                    loss.style,
                    loss.total
                );
                losses.push((it, loss));
            }
            Err(Error::Numeric(msg)) => {
                log::warn!("iter {}: step skipped: {msg}", trainer.iteration())
            }
            Err(e) => return Err(e),
        }
        if trainer.iteration() % cfg.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer
                .checkpoint()
                .save(out_dir.join(checkpoint_file_name(trainer.iteration())))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT_FILE);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary {
        final_checkpoint,
        loss_log: log_path,
        losses,
    })
}
