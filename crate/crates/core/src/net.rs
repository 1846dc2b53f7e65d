//! Network assembly: backbone configuration, parameter containers with a
//! fixed serialization order, seeded initialization, the shared-feature-map
//! forward pass, and the backward pass that chains patch gradients through
//! the fc stack, the pooling, and the convolution stack.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::boxes::PatchBox;
use crate::error::{Error, Result};
use crate::head::{roi_project, spp_pool, spp_pool_backward, CellRect, SpmScale};
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, conv2d_backward, matmul, matmul_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Overall feature-map stride; must equal the product of layer strides.
    pub stride: usize,
    pub spp_grid: (usize, usize),
    /// Fully connected widths after the flattened pooled features; the last
    /// entry is the patch feature dimension K.
    pub fc_widths: Vec<usize>,
}

impl BackboneConfig {
    /// Small stack that trains in minutes: three conv blocks, stride 4.
    pub fn toy() -> Self {
        BackboneConfig {
            input_channels: 3,
            layers: vec![
                LayerSpec::Conv { out_channels: 16, kernel: 5, stride: 1, pad: 2 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 32, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 64, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
            ],
            stride: 4,
            spp_grid: (6, 6),
            fc_widths: vec![128],
        }
    }

    /// Channels of the final feature map.
    pub fn feature_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    /// Flattened width the fc stack consumes.
    pub fn pooled_len(&self) -> usize {
        self.feature_channels() * self.spp_grid.0 * self.spp_grid.1
    }

    pub fn patch_dim(&self) -> usize {
        *self.fc_widths.last().unwrap_or(&0)
    }

    /// Smallest input side the forward pass accepts.
    pub fn min_input_side(&self) -> usize {
        self.stride * self.spp_grid.0.max(self.spp_grid.1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::invalid("backbone: input_channels must be >= 1"));
        }
        let mut product = 1usize;
        let mut any_conv = false;
        for l in &self.layers {
            match l {
                LayerSpec::Conv { out_channels, kernel, stride, .. } => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::invalid("backbone: conv dims must be >= 1"));
                    }
                    product *= stride;
                    any_conv = true;
                }
                LayerSpec::MaxPool { size, stride } => {
                    if *size == 0 || *stride == 0 {
                        return Err(Error::invalid("backbone: pool dims must be >= 1"));
                    }
                    product *= stride;
                }
                LayerSpec::Relu => {}
            }
        }
        if !any_conv {
            return Err(Error::invalid("backbone: at least one conv layer required"));
        }
        if product != self.stride {
            return Err(Error::invalid(format!(
                "backbone: declared stride {} but layer strides multiply to {}",
                self.stride, product
            )));
        }
        if self.spp_grid.0 == 0 || self.spp_grid.1 == 0 {
            return Err(Error::invalid("backbone: spp grid must be >= 1x1"));
        }
        if self.fc_widths.is_empty() || self.fc_widths.contains(&0) {
            return Err(Error::invalid("backbone: fc widths must be non-empty and >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Encoded patch dimension N.
    pub encode_dim: usize,
    /// Number of classes C.
    pub classes: usize,
    pub spm_scales: Vec<SpmScale>,
}

impl HeadConfig {
    pub fn total_cells(&self) -> usize {
        crate::head::total_cells(&self.spm_scales)
    }

    /// Length of the aggregated image representation (N times cell count).
    pub fn repr_len(&self) -> usize {
        self.encode_dim * self.total_cells()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encode_dim == 0 || self.classes == 0 {
            return Err(Error::invalid("head: encode_dim and classes must be >= 1"));
        }
        if self.spm_scales.is_empty() || self.spm_scales.iter().any(|s| s.rows == 0 || s.cols == 0)
        {
            return Err(Error::invalid("head: pyramid scales must be non-empty and >= 1x1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn toy(classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            head: HeadConfig {
                encode_dim: 256,
                classes,
                spm_scales: crate::head::default_spm_scales(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()
    }
}

/// Which part of the network a parameter tensor belongs to; single-task
/// modes freeze the other branch's blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Backbone,
    Encode,
    ImageClassifier,
    PatchClassifier,
}

impl BlockKind {
    pub fn trained_in(self, mode: crate::head::LossMode) -> bool {
        match self {
            BlockKind::Backbone => true,
            BlockKind::Encode | BlockKind::ImageClassifier => mode.uses_cls(),
            BlockKind::PatchClassifier => mode.uses_dis(),
        }
    }
}

/// All learned tensors. The same container holds parameters, gradients, and
/// momentum buffers; `blocks` iterates in the fixed checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub conv_w: Vec<Tensor<S>>,
    pub conv_b: Vec<Tensor<S>>,
    pub fc_w: Vec<Tensor<S>>,
    pub fc_b: Vec<Tensor<S>>,
    /// W: encodes patch features, [K, N].
    pub encode: Tensor<S>,
    /// U_cls over the aggregated representation, [N*M, C].
    pub image_classifier: Tensor<S>,
    /// U_dis over raw patch features, [K, C].
    pub patch_classifier: Tensor<S>,
}

/// Tensor names and shapes in checkpoint order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut in_ch = config.backbone.input_channels;
    let mut conv_idx = 0usize;
    for l in &config.backbone.layers {
        if let LayerSpec::Conv { out_channels, kernel, .. } = l {
            out.push((format!("conv{}.weight", conv_idx), vec![*out_channels, in_ch, *kernel, *kernel]));
            out.push((format!("conv{}.bias", conv_idx), vec![*out_channels]));
            in_ch = *out_channels;
            conv_idx += 1;
        }
    }
    let mut width = config.backbone.pooled_len();
    for (i, &next) in config.backbone.fc_widths.iter().enumerate() {
        out.push((format!("fc{}.weight", i), vec![width, next]));
        out.push((format!("fc{}.bias", i), vec![next]));
        width = next;
    }
    let k = config.backbone.patch_dim();
    let n = config.head.encode_dim;
    let c = config.head.classes;
    out.push(("encode.weight".to_string(), vec![k, n]));
    out.push(("image_classifier.weight".to_string(), vec![config.head.repr_len(), c]));
    out.push(("patch_classifier.weight".to_string(), vec![k, c]));
    out
}

pub fn block_kind(name: &str) -> BlockKind {
    if name.starts_with("encode") {
        BlockKind::Encode
    } else if name.starts_with("image_classifier") {
        BlockKind::ImageClassifier
    } else if name.starts_with("patch_classifier") {
        BlockKind::PatchClassifier
    } else {
        BlockKind::Backbone
    }
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut fc_w = Vec::new();
        let mut fc_b = Vec::new();
        let mut encode = Tensor::zeros(&[0]);
        let mut image_classifier = Tensor::zeros(&[0]);
        let mut patch_classifier = Tensor::zeros(&[0]);
        for (name, shape) in tensor_layout(config) {
            let t = Tensor::zeros(&shape);
            if name.starts_with("conv") {
                if name.ends_with(".weight") {
                    conv_w.push(t);
                } else {
                    conv_b.push(t);
                }
            } else if name.starts_with("fc") {
                if name.ends_with(".weight") {
                    fc_w.push(t);
                } else {
                    fc_b.push(t);
                }
            } else if name.starts_with("encode") {
                encode = t;
            } else if name.starts_with("image_classifier") {
                image_classifier = t;
            } else {
                patch_classifier = t;
            }
        }
        ModelParams {
            conv_w,
            conv_b,
            fc_w,
            fc_b,
            encode,
            image_classifier,
            patch_classifier,
        }
    }

    /// Weights from N(0, 0.01^2), biases zero. Draws happen in declaration
    /// order in f64 and are cast, so every precision sees the same stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::<f64>::new(0.0, 0.01).unwrap();
        let mut params = Self::zeros(config);
        for (name, tensor) in params.blocks_mut() {
            if name.ends_with(".bias") {
                continue;
            }
            for v in tensor.data_mut() {
                *v = S::from_f64(normal.sample(&mut rng));
            }
        }
        params
    }

    pub fn blocks(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        for (i, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            out.push((format!("conv{}.weight", i), w));
            out.push((format!("conv{}.bias", i), b));
        }
        for (i, (w, b)) in self.fc_w.iter().zip(&self.fc_b).enumerate() {
            out.push((format!("fc{}.weight", i), w));
            out.push((format!("fc{}.bias", i), b));
        }
        out.push(("encode.weight".to_string(), &self.encode));
        out.push(("image_classifier.weight".to_string(), &self.image_classifier));
        out.push(("patch_classifier.weight".to_string(), &self.patch_classifier));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (i, (w, b)) in self.conv_w.iter_mut().zip(&mut self.conv_b).enumerate() {
            out.push((format!("conv{}.weight", i), w));
            out.push((format!("conv{}.bias", i), b));
        }
        for (i, (w, b)) in self.fc_w.iter_mut().zip(&mut self.fc_b).enumerate() {
            out.push((format!("fc{}.weight", i), w));
            out.push((format!("fc{}.bias", i), b));
        }
        out.push(("encode.weight".to_string(), &mut self.encode));
        out.push(("image_classifier.weight".to_string(), &mut self.image_classifier));
        out.push(("patch_classifier.weight".to_string(), &mut self.patch_classifier));
        out
    }

    pub fn map_into<T: Scalar>(&self, f: impl Fn(S) -> T + Copy) -> ModelParams<T> {
        ModelParams {
            conv_w: self.conv_w.iter().map(|t| t.map_into(f)).collect(),
            conv_b: self.conv_b.iter().map(|t| t.map_into(f)).collect(),
            fc_w: self.fc_w.iter().map(|t| t.map_into(f)).collect(),
            fc_b: self.fc_b.iter().map(|t| t.map_into(f)).collect(),
            encode: self.encode.map_into(f),
            image_classifier: self.image_classifier.map_into(f),
            patch_classifier: self.patch_classifier.map_into(f),
        }
    }

    /// `self += other` over every block.
    pub fn accumulate(&mut self, other: &ModelParams<S>) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: S) {
        for (_, t) in self.blocks_mut() {
            t.scale(factor);
        }
    }
}

/// Per-layer state kept for the backward pass. `activations[i]` is the input
/// to layer i; the last entry is the feature map.
pub struct BackboneCache<S> {
    pub activations: Vec<Tensor<S>>,
    pub pool_argmax: Vec<Vec<usize>>,
}

impl<S: Scalar> BackboneCache<S> {
    pub fn feature_map(&self) -> &Tensor<S> {
        self.activations.last().unwrap()
    }
}

/// Runs the conv stack once per image. The single resulting map is shared by
/// all of the image's patches.
pub fn backbone_forward<S: Scalar>(
    image: &Tensor<S>,
    params: &ModelParams<S>,
    config: &BackboneConfig,
) -> Result<BackboneCache<S>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if c != config.input_channels {
        return Err(Error::ShapeMismatch {
            op: "backbone_forward",
            lhs: vec![c, h, w],
            rhs: vec![config.input_channels],
        });
    }
    let min_side = config.min_input_side();
    if h < min_side || w < min_side {
        return Err(Error::invalid(format!(
            "backbone_forward: image {}x{} below minimum side {}",
            h, w, min_side
        )));
    }
    let mut activations = vec![image.clone()];
    let mut pool_argmax = Vec::new();
    let mut conv_idx = 0usize;
    for layer in &config.layers {
        let x = activations.last().unwrap();
        let out = match layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let out = conv2d(x, &params.conv_w[conv_idx], &params.conv_b[conv_idx], *stride, *pad)?;
                conv_idx += 1;
                out
            }
            LayerSpec::Relu => relu(x),
            LayerSpec::MaxPool { size, stride } => {
                let (out, argmax) = maxpool2d(x, *size, *size, *stride)?;
                pool_argmax.push(argmax);
                out
            }
        };
        activations.push(out);
    }
    Ok(BackboneCache {
        activations,
        pool_argmax,
    })
}

/// Cache for the patch-side forward: pooled windows plus fc intermediates.
pub struct PatchCache<S> {
    pub rects: Vec<CellRect>,
    pub spp_argmax: Vec<Vec<usize>>,
    /// Input to each fc layer, `[J, width]`.
    pub fc_inputs: Vec<Tensor<S>>,
    /// Pre-activation of each fc layer, `[J, width]`.
    pub fc_preact: Vec<Tensor<S>>,
}

/// Pools every box off the shared map and runs the fc stack; row j of the
/// result is patch j's K-dimensional feature.
pub fn patch_features<S: Scalar>(
    feature_map: &Tensor<S>,
    boxes: &[PatchBox],
    params: &ModelParams<S>,
    config: &BackboneConfig,
) -> Result<(Tensor<S>, PatchCache<S>)> {
    if boxes.is_empty() {
        return Err(Error::invalid("patch_features: an image must contribute at least one patch"));
    }
    let (map_h, map_w) = (feature_map.shape()[1], feature_map.shape()[2]);
    let (gh, gw) = config.spp_grid;
    let pooled_len = config.pooled_len();
    let j_count = boxes.len();
    let mut rects = Vec::with_capacity(j_count);
    let mut spp_argmax = Vec::with_capacity(j_count);
    let mut flat = Tensor::zeros(&[j_count, pooled_len]);
    for (j, b) in boxes.iter().enumerate() {
        if !b.is_valid() {
            return Err(Error::invalid(format!("patch_features: invalid box {:?}", b)));
        }
        let rect = roi_project(b, config.stride, map_h, map_w);
        let (pooled, argmax) = spp_pool(feature_map, &rect, gh, gw)?;
        flat.data_mut()[j * pooled_len..(j + 1) * pooled_len].copy_from_slice(pooled.data());
        rects.push(rect);
        spp_argmax.push(argmax);
    }
    let mut fc_inputs = Vec::new();
    let mut fc_preact = Vec::new();
    let mut x = flat;
    let last = params.fc_w.len().saturating_sub(1);
    for (i, (w, b)) in params.fc_w.iter().zip(&params.fc_b).enumerate() {
        let mut pre = matmul(&x, w)?;
        let width = pre.shape()[1];
        for row in 0..j_count {
            for (v, &bias) in pre.data_mut()[row * width..(row + 1) * width]
                .iter_mut()
                .zip(b.data())
            {
                *v += bias;
            }
        }
        fc_inputs.push(x);
        // Hidden fc layers rectify; the final one stays linear so patch
        // features carry sign.
        let out = if i < last { relu(&pre) } else { pre.clone() };
        fc_preact.push(pre);
        x = out;
    }
    Ok((
        x,
        PatchCache {
            rects,
            spp_argmax,
            fc_inputs,
            fc_preact,
        },
    ))
}

/// Backpropagates patch-feature gradients through the fc stack, accumulates
/// all patches into the shared map (ascending patch index), and continues
/// through the conv stack. Returns gradients in a `ModelParams` container
/// whose head blocks are zero.
pub fn model_backward<S: Scalar>(
    grad_patch_features: &Tensor<S>,
    backbone: &BackboneCache<S>,
    patches: &PatchCache<S>,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<ModelParams<S>> {
    let mut grads = ModelParams::zeros(config);
    let j_count = patches.rects.len();
    let pooled_len = config.backbone.pooled_len();

    // fc stack, last layer first
    let last = params.fc_w.len().saturating_sub(1);
    let mut g = grad_patch_features.clone();
    for i in (0..params.fc_w.len()).rev() {
        let g_pre = if i < last {
            relu_backward(&patches.fc_preact[i], &g)
        } else {
            g.clone()
        };
        let width = g_pre.shape()[1];
        for row in 0..j_count {
            for (bias_g, &v) in grads.fc_b[i]
                .data_mut()
                .iter_mut()
                .zip(&g_pre.data()[row * width..(row + 1) * width])
            {
                *bias_g += v;
            }
        }
        let (g_in, g_w) = matmul_backward(&patches.fc_inputs[i], &params.fc_w[i], &g_pre)?;
        grads.fc_w[i] = g_w;
        g = g_in;
    }

    // route pooled gradients onto the shared map
    let mut grad_map = backbone.feature_map().zeros_like();
    for j in 0..j_count {
        let row = Tensor::from_vec(
            &[pooled_len],
            g.data()[j * pooled_len..(j + 1) * pooled_len].to_vec(),
        )?;
        spp_pool_backward(&patches.spp_argmax[j], &row, &mut grad_map)?;
    }

    // conv stack, last layer first
    let mut g = grad_map;
    let mut conv_idx = params.conv_w.len();
    let mut pool_idx = backbone.pool_argmax.len();
    for (i, layer) in config.backbone.layers.iter().enumerate().rev() {
        let x = &backbone.activations[i];
        g = match layer {
            LayerSpec::Conv { stride, pad, .. } => {
                conv_idx -= 1;
                let (gi, gk, gb) = conv2d_backward(x, &params.conv_w[conv_idx], &g, *stride, *pad)?;
                grads.conv_w[conv_idx] = gk;
                grads.conv_b[conv_idx] = gb;
                gi
            }
            LayerSpec::Relu => relu_backward(x, &g),
            LayerSpec::MaxPool { .. } => {
                pool_idx -= 1;
                maxpool2d_backward(&backbone.pool_argmax[pool_idx], &g, x.shape())?
            }
        };
    }
    Ok(grads)
}
