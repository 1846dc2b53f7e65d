//! Evaluation: multi-scale scoring, average precision over image-level
//! labels, and CorLoc over the discovery branch's best boxes. The only code
//! that touches ground-truth boxes lives here.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, PatchBox};
use crate::error::{Error, Result};
use crate::net::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::synth::GroundTruth;
use crate::tensor::Tensor;
use crate::train::{sample_forward, TrainSample};

/// Ranks by descending score (ties by ascending index); all-point
/// interpolated area under the precision-recall curve. No positives → 0.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "average_precision: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { context: "average_precision scores".to_string() });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("average_precision: labels must be 0 or 1"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut precision = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    let mut ap = 0.0;
    let mut best = 0.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        best = best.max(precision[rank]);
        if labels[i] == 1 {
            ap += best / positives as f64;
        }
    }
    Ok(ap)
}

/// One predicted box for one class on one image.
#[derive(Debug, Clone)]
pub struct Localization {
    pub image_id: String,
    pub class: usize,
    pub the_box: PatchBox,
}

/// Fraction of class-positive images whose predicted box overlaps some
/// ground-truth box of that class with IoU strictly above the threshold.
/// Classes with no positive images get 0.
pub fn corloc(
    predictions: &[Localization],
    gt: &GroundTruth,
    image_ids: &[String],
    classes: usize,
    iou_threshold: f64,
) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for id in image_ids {
        let boxes = gt
            .boxes
            .get(id)
            .ok_or_else(|| Error::data(format!("corloc: image {} missing from ground truth", id)))?;
        for c in 0..classes {
            if !boxes.iter().any(|b| b.class == c) {
                continue;
            }
            totals[c] += 1;
            let Some(pred) = predictions
                .iter()
                .find(|p| p.image_id == *id && p.class == c)
            else {
                continue;
            };
            let hit = boxes
                .iter()
                .filter(|b| b.class == c)
                .any(|b| iou(&b.to_box(), &pred.the_box) > iou_threshold);
            if hit {
                hits[c] += 1;
            }
        }
    }
    Ok((0..classes)
        .map(|c| {
            if totals[c] == 0 {
                0.0
            } else {
                hits[c] as f64 / totals[c] as f64
            }
        })
        .collect())
}

/// Scale-averaged scores for one image: classification scores combine both
/// branches, patch scores drive discovery.
#[derive(Debug, Clone)]
pub struct ImageScores {
    /// Per class: mean over scales of (s_cls + s_dis) / 2.
    pub cls_scores: Vec<f64>,
    /// `[J, C]` mean over scales of each patch's class scores.
    pub pat_scores: Tensor<f64>,
}

impl ImageScores {
    /// Index of the best patch for a class, ties to the lowest index.
    pub fn best_patch(&self, class: usize) -> usize {
        let (j_count, c) = (self.pat_scores.shape()[0], self.pat_scores.shape()[1]);
        assert!(class < c);
        let mut best = 0usize;
        for j in 1..j_count {
            if self.pat_scores.data()[j * c + class] > self.pat_scores.data()[best * c + class] {
                best = j;
            }
        }
        best
    }
}

/// Runs the network at every test scale (no flips) and averages.
pub fn score_image<S: Scalar>(
    sample: &TrainSample,
    params: &ModelParams<S>,
    config: &ModelConfig,
    test_scales: &[u32],
) -> Result<ImageScores> {
    if test_scales.is_empty() {
        return Err(Error::invalid("score_image: no test scales"));
    }
    let classes = config.head.classes;
    let j_count = sample.boxes.len();
    let mut cls = vec![0.0f64; classes];
    let mut pat = Tensor::<f64>::zeros(&[j_count, classes]);
    for &scale in test_scales {
        let (scaled, tf) = crate::img::rescale_image(&sample.image, scale, false)?;
        let boxes: Vec<PatchBox> = sample.boxes.iter().map(|b| tf.apply(b)).collect();
        let tensor = scaled.to_tensor::<S>();
        let cache = sample_forward(&tensor, &boxes, params, config)?;
        for c in 0..classes {
            cls[c] += (cache.s_cls.data()[c].to_f64() + cache.s_dis.data()[c].to_f64()) / 2.0;
        }
        for (acc, &v) in pat.data_mut().iter_mut().zip(cache.s_pat.data()) {
            *acc += Scalar::to_f64(v);
        }
    }
    let inv = 1.0 / test_scales.len() as f64;
    for v in &mut cls {
        *v *= inv;
    }
    pat.scale(inv);
    Ok(ImageScores { cls_scores: cls, pat_scores: pat })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub ap: Vec<f64>,
    pub map: f64,
    pub corloc: Vec<f64>,
    pub mean_corloc: f64,
    pub images: usize,
    pub test_scales: Vec<u32>,
    pub iou_threshold: f64,
    /// Wall-clock timing; kept out of serialized reports so identical seeds
    /// produce byte-identical report files.
    #[serde(skip)]
    pub seconds_per_image: f64,
}

impl EvalReport {
    /// Aligned text table, one class per row.
    pub fn text_table(&self) -> String {
        let name_w = self
            .classes
            .iter()
            .map(|c| c.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<name_w$} {:>8} {:>8}", "class", "AP", "CorLoc");
        for (i, name) in self.classes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<name_w$} {:>8.4} {:>8.4}",
                name, self.ap[i], self.corloc[i]
            );
        }
        let _ = writeln!(
            out,
            "{:<name_w$} {:>8.4} {:>8.4}",
            "mean", self.map, self.mean_corloc
        );
        let _ = write!(out, "{} images, scales {:?}", self.images, self.test_scales);
        out
    }
}

/// Scores every sample, then computes per-class AP from image labels and
/// per-class CorLoc from the best discovery boxes.
pub fn evaluate<S: Scalar>(
    samples: &[TrainSample],
    gt: &GroundTruth,
    class_names: &[String],
    params: &ModelParams<S>,
    config: &ModelConfig,
    test_scales: &[u32],
    iou_threshold: f64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate: no samples"));
    }
    let classes = config.head.classes;
    if class_names.len() != classes {
        return Err(Error::invalid(format!(
            "evaluate: {} class names for {} model classes",
            class_names.len(),
            classes
        )));
    }
    let start = Instant::now();
    let mut cls_scores = vec![Vec::with_capacity(samples.len()); classes];
    let mut cls_labels = vec![Vec::with_capacity(samples.len()); classes];
    let mut predictions = Vec::new();
    for sample in samples {
        let scores = score_image(sample, params, config, test_scales)?;
        for c in 0..classes {
            cls_scores[c].push(scores.cls_scores[c]);
            cls_labels[c].push(sample.labels.get(c));
        }
        for c in 0..classes {
            let j = scores.best_patch(c);
            predictions.push(Localization {
                image_id: sample.id.clone(),
                class: c,
                the_box: sample.boxes[j],
            });
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ap: Vec<f64> = (0..classes)
        .map(|c| average_precision(&cls_scores[c], &cls_labels[c]))
        .collect::<Result<_>>()?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let per_class_corloc = corloc(&predictions, gt, &ids, classes, iou_threshold)?;
    let map = ap.iter().sum::<f64>() / classes as f64;
    let mean_corloc = per_class_corloc.iter().sum::<f64>() / classes as f64;
    Ok(EvalReport {
        classes: class_names.to_vec(),
        ap,
        map,
        corloc: per_class_corloc,
        mean_corloc,
        images: samples.len(),
        test_scales: test_scales.to_vec(),
        iou_threshold,
        seconds_per_image: elapsed / samples.len() as f64,
    })
}
