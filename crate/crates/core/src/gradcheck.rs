//! Central-difference validation of the hand-derived backward pass: every
//! head coordinate is probed, plus a seeded random subset of backbone
//! coordinates. Head probes reuse the cached patch features since those do
//! not depend on head parameters.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::PatchBox;
use crate::error::{Error, Result};
use crate::head::{head_forward, total_loss, LabelVector, LossMode};
use crate::net::{
    backbone_forward, block_kind, patch_features, tensor_layout, BlockKind, ModelConfig,
    ModelParams,
};
use crate::tensor::Tensor;
use crate::train::{sample_grads, sample_loss};

/// |a - n| / max(|a|, |n|, 1e-8)
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct CheckSample {
    pub image: Tensor<f64>,
    pub boxes: Vec<PatchBox>,
    pub labels: LabelVector,
}

#[derive(Debug, Clone)]
pub struct CheckSettings {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Random backbone coordinates to probe (head blocks are exhaustive).
    pub backbone_coords: usize,
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            epsilon: 1e-5,
            tolerance: 1e-4,
            backbone_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err <= self.tolerance)
    }

    /// Err listing every failing block's worst coordinate.
    pub fn assert_pass(&self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let mut msg = format!("gradient check failed at tolerance {:e}:", self.tolerance);
        for b in self.blocks.iter().filter(|b| b.max_rel_err > self.tolerance) {
            msg.push_str(&format!(
                " [{} coord {} rel_err {:.3e} analytic {:.6e} numeric {:.6e}]",
                b.name, b.worst_coord, b.max_rel_err, b.worst_analytic, b.worst_numeric
            ));
        }
        Err(Error::invalid(msg))
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>8} {:>12} {:>10} {:>13} {:>13}",
            "block", "checked", "max_rel_err", "worst", "analytic", "numeric"
        )?;
        for b in &self.blocks {
            writeln!(
                f,
                "{:<28} {:>8} {:>12.3e} {:>10} {:>13.6e} {:>13.6e}",
                b.name, b.checked, b.max_rel_err, b.worst_coord, b.worst_analytic, b.worst_numeric
            )?;
        }
        write!(
            f,
            "overall max {:.3e} vs tolerance {:.1e}: {}",
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks analytic gradients for one sample in double precision.
pub fn grad_check(
    sample: &CheckSample,
    params: &ModelParams<f64>,
    config: &ModelConfig,
    mode: LossMode,
    dis_weight: f64,
    settings: &CheckSettings,
) -> Result<CheckReport> {
    let (_, analytic) = sample_grads(
        &sample.image,
        &sample.boxes,
        &sample.labels,
        params,
        config,
        mode,
        dis_weight,
    )?;

    // Patch features are fixed while head parameters move, so head probes
    // rerun only the head.
    let bb = backbone_forward(&sample.image, params, &config.backbone)?;
    let (f, _) = patch_features(bb.feature_map(), &sample.boxes, params, &config.backbone)?;
    let (img_h, img_w) = (sample.image.shape()[1] as f64, sample.image.shape()[2] as f64);
    let head_loss = |p: &ModelParams<f64>| -> Result<f64> {
        let cache = head_forward(
            &f,
            &sample.boxes,
            img_w,
            img_h,
            &p.encode,
            &p.image_classifier,
            &p.patch_classifier,
            &config.head.spm_scales,
        )?;
        Ok(total_loss(&cache.s_cls, &cache.s_dis, &sample.labels, mode, dis_weight)?.total)
    };
    let full_loss = |p: &ModelParams<f64>| -> Result<f64> {
        Ok(sample_loss(&sample.image, &sample.boxes, &sample.labels, p, config, mode, dis_weight)?
            .total)
    };

    let layout = tensor_layout(config);
    let mut probes: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); layout.len()];
    let mut backbone_total = 0usize;
    for (i, (name, shape)) in layout.iter().enumerate() {
        let numel: usize = shape.iter().product();
        if block_kind(name) == BlockKind::Backbone {
            backbone_total += numel;
        } else {
            probes[i] = (0..numel).collect();
        }
    }
    let want = settings.backbone_coords.min(backbone_total);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut chosen = 0usize;
    while chosen < want {
        let mut flat = rng.gen_range(0..backbone_total);
        for (i, (name, shape)) in layout.iter().enumerate() {
            if block_kind(name) != BlockKind::Backbone {
                continue;
            }
            let numel: usize = shape.iter().product();
            if flat < numel {
                if probes[i].insert(flat) {
                    chosen += 1;
                }
                break;
            }
            flat -= numel;
        }
    }

    let mut blocks = Vec::new();
    for (i, (name, _)) in layout.iter().enumerate() {
        let is_backbone = block_kind(name) == BlockKind::Backbone;
        let mut report = BlockReport {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_coord: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &coord in &probes[i] {
            let mut plus = params.clone();
            plus.blocks_mut()[i].1.data_mut()[coord] += settings.epsilon;
            let mut minus = params.clone();
            minus.blocks_mut()[i].1.data_mut()[coord] -= settings.epsilon;
            let numeric = if is_backbone {
                (full_loss(&plus)? - full_loss(&minus)?) / (2.0 * settings.epsilon)
            } else {
                (head_loss(&plus)? - head_loss(&minus)?) / (2.0 * settings.epsilon)
            };
            let a = analytic.blocks()[i].1.data()[coord];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst_coord = coord;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        blocks.push(report);
    }
    Ok(CheckReport {
        blocks,
        tolerance: settings.tolerance,
    })
}

/// Seeded toy model and sample sized for fast exhaustive head probing:
/// K = 24, N = 12, C = 3, 3 to 12 patches.
pub fn toy_check_setup(seed: u64) -> (ModelConfig, ModelParams<f64>, CheckSample) {
    use crate::net::{BackboneConfig, HeadConfig, LayerSpec};
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_channels: 3,
            layers: vec![
                LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
            ],
            stride: 2,
            spp_grid: (3, 3),
            fc_widths: vec![24],
        },
        head: HeadConfig {
            encode_dim: 12,
            classes: 3,
            spm_scales: crate::head::default_spm_scales(),
        },
    };
    let mut params = ModelParams::<f64>::init(&config, seed);
    // Keep activations and scores in the active sigmoid region: tiny default
    // weights would push gradients under finite-difference resolution.
    for (name, t) in params.blocks_mut() {
        if !name.ends_with(".weight") {
            continue;
        }
        let factor = if block_kind(&name) == BlockKind::Backbone { 20.0 } else { 5.0 };
        t.scale(factor);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let (h, w) = (22usize, 28usize);
    let image = Tensor::from_vec(
        &[3, h, w],
        (0..3 * h * w).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>(),
    )
    .unwrap();
    let j = rng.gen_range(3..=12);
    let boxes: Vec<PatchBox> = (0..j)
        .map(|_| {
            let lx = rng.gen_range(0.0..w as f64 - 6.0);
            let ly = rng.gen_range(0.0..h as f64 - 6.0);
            let rx = (lx + rng.gen_range(4.0..w as f64)).min(w as f64);
            let ry = (ly + rng.gen_range(4.0..h as f64)).min(h as f64);
            PatchBox::new(lx, ly, rx, ry)
        })
        .collect();
    let mut labels: Vec<u8> = (0..3).map(|_| rng.gen_range(0..2) as u8).collect();
    if labels.iter().all(|&l| l == 0) {
        labels[0] = 1;
    }
    (
        config,
        params,
        CheckSample {
            image,
            boxes,
            labels: LabelVector::new(labels).unwrap(),
        },
    )
}
