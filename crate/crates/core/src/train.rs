//! Mini-batch SGD with momentum and weight decay over whole images: each
//! image contributes its full patch bag, gradients are averaged over the
//! batch, and a random (scale, flip) draw per image provides augmentation.
//! Also hosts the shared single-sample forward/backward used by training,
//! evaluation, and the gradient checker.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::PatchBox;
use crate::error::{Error, Result};
use crate::head::{
    head_backward, head_forward, total_loss, HeadCache, LabelVector, LossBreakdown, LossMode,
};
use crate::img::{rescale_image, RgbImage};
use crate::net::{backbone_forward, block_kind, model_backward, patch_features, ModelConfig, ModelParams};
use crate::proposals::ProposalSet;
use crate::scalar::Scalar;
use crate::synth::DatasetManifest;
use crate::tensor::{sgd_update, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Images per batch (I).
    pub batch_size: usize,
    /// (iterations, learning rate) segments run in order.
    pub schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mode: LossMode,
    /// Longest-side targets sampled uniformly per image per iteration.
    pub train_scales: Vec<u32>,
    /// Whether a random horizontal flip accompanies each scale draw.
    pub flip: bool,
    /// Multiplier on the discovery loss term.
    pub dis_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            schedule: vec![(2500, 0.0003), (500, 0.0001)],
            momentum: 0.9,
            weight_decay: 0.0005,
            mode: LossMode::MultiTask,
            train_scales: vec![64, 96, 128],
            flip: true,
            dis_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train: batch size must be >= 1"));
        }
        if self.schedule.is_empty() {
            return Err(Error::invalid("train: schedule must have at least one segment"));
        }
        for &(iters, lr) in &self.schedule {
            if iters == 0 {
                return Err(Error::invalid("train: schedule segment with zero iterations"));
            }
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::invalid("train: learning rate must be finite and >= 0"));
            }
        }
        if self.train_scales.is_empty() {
            return Err(Error::invalid("train: need at least one training scale"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train: momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.dis_weight <= 0.0 {
            return Err(Error::invalid("train: weight decay >= 0 and dis weight > 0 required"));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.schedule.iter().map(|&(n, _)| n).sum()
    }

    /// Learning rate for a zero-based iteration index.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let mut remaining = iteration;
        for &(n, lr) in &self.schedule {
            if remaining < n {
                return lr;
            }
            remaining -= n;
        }
        self.schedule.last().map(|&(_, lr)| lr).unwrap_or(0.0)
    }
}

/// Parses a schedule like "2000:0.01,1000:0.001".
pub fn parse_schedule(s: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let (n, lr) = part
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("schedule segment '{}' is not ITERS:LR", part)))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("schedule iterations '{}' not an integer", n)))?;
        let lr: f64 = lr
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("schedule rate '{}' not a number", lr)))?;
        out.push((n, lr));
    }
    Ok(out)
}

/// One training image with its proposal bag in original coordinates.
pub struct TrainSample {
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelVector,
    pub boxes: Vec<PatchBox>,
}

/// Reads images and pairs them with proposals; every image must have a bag.
pub fn assemble_samples(
    data_dir: &Path,
    manifest: &DatasetManifest,
    proposals: &BTreeMap<String, ProposalSet>,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(manifest.images.len());
    for rec in &manifest.images {
        let set = proposals
            .get(&rec.id)
            .ok_or_else(|| Error::data(format!("image {} has no proposals", rec.id)))?;
        let bound = set.bind_to_image(rec.width as u32, rec.height as u32);
        let image = crate::img::read_ppm(&data_dir.join(&rec.path))?;
        if image.w as usize != rec.width || image.h as usize != rec.height {
            return Err(Error::data(format!(
                "image {} is {}x{} but manifest says {}x{}",
                rec.id, image.w, image.h, rec.width, rec.height
            )));
        }
        out.push(TrainSample {
            id: rec.id.clone(),
            image,
            labels: LabelVector::new(rec.labels.clone())?,
            boxes: bound.boxes,
        });
    }
    Ok(out)
}

/// Forward pass for one rescaled image; exposes every score the branches
/// produce.
pub fn sample_forward<S: Scalar>(
    image: &Tensor<S>,
    boxes: &[PatchBox],
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<HeadCache<S>> {
    let bb = backbone_forward(image, params, &config.backbone)?;
    let (f, _) = patch_features(bb.feature_map(), boxes, params, &config.backbone)?;
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    head_forward(
        &f,
        boxes,
        w,
        h,
        &params.encode,
        &params.image_classifier,
        &params.patch_classifier,
        &config.head.spm_scales,
    )
}

/// Loss only, for finite-difference probes.
pub fn sample_loss<S: Scalar>(
    image: &Tensor<S>,
    boxes: &[PatchBox],
    labels: &LabelVector,
    params: &ModelParams<S>,
    config: &ModelConfig,
    mode: LossMode,
    dis_weight: S,
) -> Result<LossBreakdown<S>> {
    let cache = sample_forward(image, boxes, params, config)?;
    total_loss(&cache.s_cls, &cache.s_dis, labels, mode, dis_weight)
}

/// Full forward and backward for one image: loss plus gradients for every
/// parameter block (frozen blocks receive zeros).
pub fn sample_grads<S: Scalar>(
    image: &Tensor<S>,
    boxes: &[PatchBox],
    labels: &LabelVector,
    params: &ModelParams<S>,
    config: &ModelConfig,
    mode: LossMode,
    dis_weight: S,
) -> Result<(LossBreakdown<S>, ModelParams<S>)> {
    let bb = backbone_forward(image, params, &config.backbone)?;
    let (f, pc) = patch_features(bb.feature_map(), boxes, params, &config.backbone)?;
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let cache = head_forward(
        &f,
        boxes,
        w,
        h,
        &params.encode,
        &params.image_classifier,
        &params.patch_classifier,
        &config.head.spm_scales,
    )?;
    let loss = total_loss(&cache.s_cls, &cache.s_dis, labels, mode, dis_weight)?;
    let hg = head_backward(
        &cache,
        &f,
        labels,
        &params.encode,
        &params.image_classifier,
        &params.patch_classifier,
        mode,
        dis_weight,
    )?;
    let mut grads = model_backward(&hg.patch_features, &bb, &pc, params, config)?;
    grads.encode.add_assign(&hg.w);
    grads.image_classifier.add_assign(&hg.u_cls);
    grads.patch_classifier.add_assign(&hg.u_dis);
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_dis: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<LossRow>,
    /// Set when training stopped early on a non-finite loss or gradient;
    /// the parameters still hold the last values that were finite.
    pub abort: Option<Error>,
}

impl TrainOutcome {
    pub fn completed(&self) -> bool {
        self.abort.is_none()
    }
}

/// Runs the schedule, mutating `params` in place. Deterministic for a given
/// seed: one seeded stream drives the epoch shuffle and every (scale, flip)
/// draw in a fixed order.
pub fn train<S: Scalar>(
    samples: &[TrainSample],
    model_config: &ModelConfig,
    params: &mut ModelParams<S>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("train: no samples"));
    }
    let classes = model_config.head.classes;
    for s in samples {
        if s.labels.len() != classes {
            return Err(Error::data(format!(
                "image {} has {} labels, model expects {}",
                s.id,
                s.labels.len(),
                classes
            )));
        }
        if s.boxes.is_empty() {
            return Err(Error::data(format!("image {} has an empty proposal bag", s.id)));
        }
    }
    let total = config.total_iterations();
    let inv_batch = S::from_f64(1.0 / config.batch_size as f64);
    let dis_weight = S::from_f64(config.dis_weight);
    let mut momentum = ModelParams::<S>::zeros(model_config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut rows = Vec::with_capacity(total);

    for iteration in 0..total {
        let lr = config.lr_at(iteration);
        let mut grads = ModelParams::<S>::zeros(model_config);
        let mut sum = LossBreakdown { total: 0.0f64, cls: 0.0, dis: 0.0 };
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let sample = &samples[order.pop().unwrap()];
            let scale = config.train_scales[rng.gen_range(0..config.train_scales.len())];
            let flip = config.flip && rng.gen_bool(0.5);
            let (scaled, tf) = rescale_image(&sample.image, scale, flip)?;
            let boxes: Vec<PatchBox> = sample.boxes.iter().map(|b| tf.apply(b)).collect();
            let tensor = scaled.to_tensor::<S>();
            let (loss, g) = sample_grads(
                &tensor,
                &boxes,
                &sample.labels,
                params,
                model_config,
                config.mode,
                dis_weight,
            )?;
            if !loss.total.to_f64().is_finite() {
                return Ok(TrainOutcome {
                    rows,
                    abort: Some(Error::NonFiniteLoss { iteration: iteration as u64 + 1 }),
                });
            }
            grads.accumulate(&g);
            sum.total += loss.total.to_f64();
            sum.cls += loss.cls.to_f64();
            sum.dis += loss.dis.to_f64();
        }
        grads.scale(inv_batch);
        for (name, t) in grads.blocks() {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Ok(TrainOutcome {
                    rows,
                    abort: Some(Error::NonFinite {
                        context: format!("gradient {} at iteration {}", name, iteration + 1),
                    }),
                });
            }
        }
        let lr_s = S::from_f64(lr);
        let mom = S::from_f64(config.momentum);
        let wd = S::from_f64(config.weight_decay);
        let layout: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
        for (((name, p), (_, g)), (_, m)) in layout
            .iter()
            .zip(params.blocks_mut())
            .map(|(n, (_, p))| (n, p))
            .zip(grads.blocks())
            .zip(momentum.blocks_mut())
        {
            if block_kind(name).trained_in(config.mode) {
                sgd_update(p, g, m, lr_s, mom, wd)?;
            }
        }
        let inv = 1.0 / config.batch_size as f64;
        rows.push(LossRow {
            iteration: iteration + 1,
            loss: sum.total * inv,
            loss_cls: sum.cls * inv,
            loss_dis: sum.dis * inv,
            lr,
        });
    }
    Ok(TrainOutcome { rows, abort: None })
}

/// Writes the per-iteration loss log.
pub fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from("iteration,loss,loss_cls,loss_dis,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, r.loss, r.loss_cls, r.loss_dis, r.lr
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
