//! The multi-task head: patch pooling, encoding, spatial aggregation, the
//! image-classification and patch-discovery branches, the joint loss, and the
//! hand-derived backward pass for all of it.
//!
//! Layout convention used throughout: the aggregated image representation has
//! one slot per (cell, channel) pair, scale-major, cells row-major within a
//! scale, the N channels contiguous per cell. Slot r therefore maps to cell
//! r / N and channel r mod N.

use crate::boxes::PatchBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_backward, Tensor};

/// One pyramid level: the image is split into `rows x cols` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpmScale {
    pub rows: usize,
    pub cols: usize,
}

impl SpmScale {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Default pyramid: whole image, quadrants, three horizontal bands.
pub fn default_spm_scales() -> Vec<SpmScale> {
    vec![
        SpmScale { rows: 1, cols: 1 },
        SpmScale { rows: 2, cols: 2 },
        SpmScale { rows: 3, cols: 1 },
    ]
}

pub fn total_cells(scales: &[SpmScale]) -> usize {
    scales.iter().map(|s| s.cells()).sum()
}

/// Inclusive cell rectangle on the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CellRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Projects a pixel box onto the feature map at stride `n`: top-left by floor,
/// bottom-right by ceil minus one, clamped so the rectangle is never empty.
pub fn roi_project(b: &PatchBox, n: usize, map_h: usize, map_w: usize) -> CellRect {
    let nf = n as f64;
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let x0 = clamp((b.lx / nf).floor(), map_w);
    let y0 = clamp((b.ly / nf).floor(), map_h);
    let x1 = clamp((b.rx / nf).ceil() - 1.0, map_w).max(x0);
    let y1 = clamp((b.ry / nf).ceil() - 1.0, map_h).max(y0);
    CellRect { x0, y0, x1, y1 }
}

/// Splits `extent` cells into `bins` near-uniform spans. A span that would be
/// empty is widened to one cell; its start stays below `extent`, so spans
/// never leave the rectangle (they may overlap when extent < bins).
fn bin_bounds(extent: usize, bins: usize, i: usize) -> (usize, usize) {
    let start = extent * i / bins;
    let mut end = extent * (i + 1) / bins;
    if end <= start {
        end = start + 1;
    }
    (start, end)
}

/// Fixed-size max pooling of a cell rectangle into a `gh x gw` grid, per
/// channel. Returns the pooled tensor and the flat map index of each winner
/// (ties to the lowest flat index).
pub fn spp_pool<S: Scalar>(
    map: &Tensor<S>,
    rect: &CellRect,
    gh: usize,
    gw: usize,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let (cf, h, w) = match map.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "spp_pool",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if rect.x1 >= w || rect.y1 >= h {
        return Err(Error::invalid(format!(
            "spp_pool: rect {:?} outside {}x{} map",
            rect, h, w
        )));
    }
    let (rh, rw) = (rect.height(), rect.width());
    let mut out = Tensor::zeros(&[cf, gh, gw]);
    let mut argmax = vec![0usize; cf * gh * gw];
    for c in 0..cf {
        let ch = &map.data()[c * h * w..(c + 1) * h * w];
        for by in 0..gh {
            let (ys, ye) = bin_bounds(rh, gh, by);
            for bx in 0..gw {
                let (xs, xe) = bin_bounds(rw, gw, bx);
                let mut best = S::neg_infinity();
                let mut best_idx = 0usize;
                for y in rect.y0 + ys..rect.y0 + ye {
                    for x in rect.x0 + xs..rect.x0 + xe {
                        let idx = y * w + x;
                        if ch[idx] > best {
                            best = ch[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * gh + by) * gw + bx;
                out.data_mut()[o] = best;
                argmax[o] = c * h * w + best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Adds each pooled-output gradient at its winning map location. Accumulates
/// into `grad_map` so overlapping patches on a shared map sum.
pub fn spp_pool_backward<S: Scalar>(
    argmax: &[usize],
    grad_out: &Tensor<S>,
    grad_map: &mut Tensor<S>,
) -> Result<()> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::ShapeMismatch {
            op: "spp_pool_backward",
            lhs: vec![argmax.len()],
            rhs: grad_out.shape().to_vec(),
        });
    }
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        grad_map.data_mut()[idx] += g;
    }
    Ok(())
}

/// Per-patch linear encoding: row j of the result is `W^T f_j`.
pub fn encode_patches<S: Scalar>(patch_features: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    matmul(patch_features, w)
}

/// Aggregated image representation plus, for every slot, the patch that won
/// the max (None for slots whose cell contains no patch center).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRepr<S> {
    pub values: Tensor<S>,
    pub winners: Vec<Option<usize>>,
}

/// Cell index (within one scale, row-major) of a box center. Right/bottom
/// edges belong to the last cell.
fn cell_of_center(b: &PatchBox, scale: &SpmScale, image_w: f64, image_h: f64) -> usize {
    let (cx, cy) = b.center();
    let col = ((cx * scale.cols as f64 / image_w) as usize).min(scale.cols - 1);
    let row = ((cy * scale.rows as f64 / image_h) as usize).min(scale.rows - 1);
    row * scale.cols + col
}

/// Builds the pyramid representation: slot (m, n) holds the max of channel n
/// over the encoded patches whose centers fall in cell m; empty cells hold 0.
pub fn spm_aggregate<S: Scalar>(
    encoded: &Tensor<S>,
    boxes: &[PatchBox],
    image_w: f64,
    image_h: f64,
    scales: &[SpmScale],
) -> Result<ImageRepr<S>> {
    let (j_count, n) = match encoded.shape() {
        [j, n] => (*j, *n),
        other => {
            return Err(Error::ShapeMismatch {
                op: "spm_aggregate",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if j_count != boxes.len() {
        return Err(Error::ShapeMismatch {
            op: "spm_aggregate",
            lhs: vec![j_count, n],
            rhs: vec![boxes.len()],
        });
    }
    if image_w <= 0.0 || image_h <= 0.0 || scales.is_empty() {
        return Err(Error::invalid("spm_aggregate: empty scales or bad image dims"));
    }
    let m_total = total_cells(scales);
    let mut values = Tensor::zeros(&[m_total * n]);
    let mut winners = vec![None; m_total * n];
    let mut cell_base = 0usize;
    for scale in scales {
        for (j, b) in boxes.iter().enumerate() {
            let m = cell_base + cell_of_center(b, scale, image_w, image_h);
            let row = &encoded.data()[j * n..(j + 1) * n];
            for (ch, &v) in row.iter().enumerate() {
                let slot = m * n + ch;
                match winners[slot] {
                    None => {
                        values.data_mut()[slot] = v;
                        winners[slot] = Some(j);
                    }
                    Some(_) if v > values.data()[slot] => {
                        values.data_mut()[slot] = v;
                        winners[slot] = Some(j);
                    }
                    _ => {}
                }
            }
        }
        cell_base += scale.cells();
    }
    Ok(ImageRepr { values, winners })
}

/// Routes slot gradients back to the winning patch: slot r contributes to
/// patch `winners[r]`, channel `r mod N`; empty slots contribute nothing.
pub fn spm_backward<S: Scalar>(
    winners: &[Option<usize>],
    grad_repr: &Tensor<S>,
    j_count: usize,
    n: usize,
) -> Result<Tensor<S>> {
    if winners.len() != grad_repr.numel() {
        return Err(Error::ShapeMismatch {
            op: "spm_backward",
            lhs: vec![winners.len()],
            rhs: grad_repr.shape().to_vec(),
        });
    }
    let mut grad_e = Tensor::zeros(&[j_count, n]);
    for (r, (&win, &g)) in winners.iter().zip(grad_repr.data()).enumerate() {
        if let Some(j) = win {
            grad_e.data_mut()[j * n + r % n] += g;
        }
    }
    Ok(grad_e)
}

/// Image-level class scores `s[c] = sum_r F[r] * U[r][c]`.
pub fn classify_image<S: Scalar>(repr: &Tensor<S>, u_cls: &Tensor<S>) -> Result<Tensor<S>> {
    let nm = repr.numel();
    let (rows, c) = match u_cls.shape() {
        [rows, c] => (*rows, *c),
        other => {
            return Err(Error::ShapeMismatch {
                op: "classify_image",
                lhs: other.to_vec(),
                rhs: vec![nm],
            })
        }
    };
    if rows != nm {
        return Err(Error::ShapeMismatch {
            op: "classify_image",
            lhs: u_cls.shape().to_vec(),
            rhs: vec![nm],
        });
    }
    let mut s = Tensor::zeros(&[c]);
    for (r, &f) in repr.data().iter().enumerate() {
        let u_row = &u_cls.data()[r * c..(r + 1) * c];
        for (sv, &u) in s.data_mut().iter_mut().zip(u_row) {
            *sv += f * u;
        }
    }
    Ok(s)
}

/// Gradients of `classify_image`: returns (grad_repr, grad_u_cls).
pub fn classify_image_backward<S: Scalar>(
    repr: &Tensor<S>,
    u_cls: &Tensor<S>,
    grad_s: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let nm = repr.numel();
    let c = grad_s.numel();
    if u_cls.shape() != [nm, c] {
        return Err(Error::ShapeMismatch {
            op: "classify_image_backward",
            lhs: u_cls.shape().to_vec(),
            rhs: vec![nm, c],
        });
    }
    let mut grad_repr = Tensor::zeros(&[nm]);
    let mut grad_u = Tensor::zeros(&[nm, c]);
    for r in 0..nm {
        let u_row = &u_cls.data()[r * c..(r + 1) * c];
        let gu_row = &mut grad_u.data_mut()[r * c..(r + 1) * c];
        let f = repr.data()[r];
        let mut acc = S::zero();
        for k in 0..c {
            let g = grad_s.data()[k];
            acc += u_row[k] * g;
            gu_row[k] = f * g;
        }
        grad_repr.data_mut()[r] = acc;
    }
    Ok((grad_repr, grad_u))
}

/// Per-patch class scores, row j is `U_dis^T f_j`.
pub fn score_patches<S: Scalar>(patch_features: &Tensor<S>, u_dis: &Tensor<S>) -> Result<Tensor<S>> {
    matmul(patch_features, u_dis)
}

/// Per-class max over patches, with the winning patch index (lowest index on
/// ties). This is the MIL pooling of the discovery branch.
pub fn discovery_pool<S: Scalar>(s_pat: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let (j_count, c) = match s_pat.shape() {
        [j, c] => (*j, *c),
        other => {
            return Err(Error::ShapeMismatch {
                op: "discovery_pool",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if j_count == 0 {
        return Err(Error::invalid("discovery_pool: no patches"));
    }
    let mut s_dis = Tensor::zeros(&[c]);
    let mut argmax = vec![0usize; c];
    for k in 0..c {
        let mut best = s_pat.data()[k];
        let mut best_j = 0usize;
        for j in 1..j_count {
            let v = s_pat.data()[j * c + k];
            if v > best {
                best = v;
                best_j = j;
            }
        }
        s_dis.data_mut()[k] = best;
        argmax[k] = best_j;
    }
    Ok((s_dis, argmax))
}

/// Routes each class gradient to its winning patch only.
pub fn discovery_pool_backward<S: Scalar>(
    dis_argmax: &[usize],
    grad_s_dis: &Tensor<S>,
    j_count: usize,
) -> Result<Tensor<S>> {
    let c = grad_s_dis.numel();
    if dis_argmax.len() != c {
        return Err(Error::ShapeMismatch {
            op: "discovery_pool_backward",
            lhs: vec![dis_argmax.len()],
            rhs: vec![c],
        });
    }
    let mut grad = Tensor::zeros(&[j_count, c]);
    for (k, (&j, &g)) in dis_argmax.iter().zip(grad_s_dis.data()).enumerate() {
        grad.data_mut()[j * c + k] += g;
    }
    Ok(grad)
}

/// Binary multi-label target vector.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(y: Vec<u8>) -> Result<Self> {
        if y.iter().any(|&v| v > 1) {
            return Err(Error::invalid("label vector entries must be 0 or 1"));
        }
        Ok(LabelVector(y))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, c: usize) -> u8 {
        self.0[c]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

fn stable_sigmoid<S: Scalar>(s: S) -> S {
    if s >= S::zero() {
        S::one() / (S::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (S::one() + e)
    }
}

/// Multi-class sigmoid cross entropy, summed over classes, in the
/// overflow-free form `max(s,0) - s*y + ln(1 + exp(-|s|))`.
pub fn sigmoid_ce_loss<S: Scalar>(s: &Tensor<S>, y: &LabelVector) -> Result<S> {
    if s.numel() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "sigmoid_ce_loss",
            lhs: s.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    let mut total = S::zero();
    for (&sv, &yv) in s.data().iter().zip(y.as_slice()) {
        let yv = S::from_f64(yv as f64);
        total += sv.max(S::zero()) - sv * yv + (S::one() + (-sv.abs()).exp()).ln();
    }
    Ok(total)
}

/// Gradient of `sigmoid_ce_loss` w.r.t. the scores: `sigma(s) - y`.
pub fn sigmoid_ce_grad<S: Scalar>(s: &Tensor<S>, y: &LabelVector) -> Result<Tensor<S>> {
    if s.numel() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "sigmoid_ce_grad",
            lhs: s.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    let mut g = Tensor::zeros(&[s.numel()]);
    for ((gv, &sv), &yv) in g.data_mut().iter_mut().zip(s.data()).zip(y.as_slice()) {
        *gv = stable_sigmoid(sv) - S::from_f64(yv as f64);
    }
    Ok(g)
}

/// Which loss terms train which branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossMode {
    MultiTask,
    ClsOnly,
    DisOnly,
}

impl LossMode {
    pub fn uses_cls(self) -> bool {
        matches!(self, LossMode::MultiTask | LossMode::ClsOnly)
    }
    pub fn uses_dis(self) -> bool {
        matches!(self, LossMode::MultiTask | LossMode::DisOnly)
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-task" => Ok(LossMode::MultiTask),
            "cls" | "cls-only" => Ok(LossMode::ClsOnly),
            "dis" | "dis-only" => Ok(LossMode::DisOnly),
            other => Err(Error::invalid(format!(
                "unknown loss mode {:?} (expected multi-task, cls, or dis)",
                other
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::MultiTask => "multi-task",
            LossMode::ClsOnly => "cls",
            LossMode::DisOnly => "dis",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<S> {
    pub total: S,
    pub cls: S,
    pub dis: S,
}

/// Joint loss. Both branch losses are always reported; `mode` selects which
/// enter the total, and `dis_weight` (default 1) scales the discovery term.
pub fn total_loss<S: Scalar>(
    s_cls: &Tensor<S>,
    s_dis: &Tensor<S>,
    y: &LabelVector,
    mode: LossMode,
    dis_weight: S,
) -> Result<LossBreakdown<S>> {
    let cls = sigmoid_ce_loss(s_cls, y)?;
    let dis = sigmoid_ce_loss(s_dis, y)?;
    let mut total = S::zero();
    if mode.uses_cls() {
        total += cls;
    }
    if mode.uses_dis() {
        total += dis_weight * dis;
    }
    Ok(LossBreakdown { total, cls, dis })
}

/// Everything the head backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache<S> {
    pub encoded: Tensor<S>,
    pub repr: ImageRepr<S>,
    pub s_cls: Tensor<S>,
    pub s_pat: Tensor<S>,
    pub s_dis: Tensor<S>,
    pub dis_argmax: Vec<usize>,
}

/// Runs both branches from patch features `[J, K]`.
#[allow(clippy::too_many_arguments)]
pub fn head_forward<S: Scalar>(
    patch_features: &Tensor<S>,
    boxes: &[PatchBox],
    image_w: f64,
    image_h: f64,
    w: &Tensor<S>,
    u_cls: &Tensor<S>,
    u_dis: &Tensor<S>,
    scales: &[SpmScale],
) -> Result<HeadCache<S>> {
    let encoded = encode_patches(patch_features, w)?;
    let repr = spm_aggregate(&encoded, boxes, image_w, image_h, scales)?;
    let s_cls = classify_image(&repr.values, u_cls)?;
    let s_pat = score_patches(patch_features, u_dis)?;
    let (s_dis, dis_argmax) = discovery_pool(&s_pat)?;
    Ok(HeadCache {
        encoded,
        repr,
        s_cls,
        s_pat,
        s_dis,
        dis_argmax,
    })
}

#[derive(Debug, Clone)]
pub struct HeadGrads<S> {
    pub w: Tensor<S>,
    pub u_cls: Tensor<S>,
    pub u_dis: Tensor<S>,
    pub patch_features: Tensor<S>,
}

/// Backward pass of the whole head for one image. The patch-feature gradient
/// sums the classification path (through the encoder and pyramid) and the
/// discovery path (through the patch classifier and MIL max); a disabled
/// branch contributes exactly zero everywhere.
#[allow(clippy::too_many_arguments)]
pub fn head_backward<S: Scalar>(
    cache: &HeadCache<S>,
    patch_features: &Tensor<S>,
    y: &LabelVector,
    w: &Tensor<S>,
    u_cls: &Tensor<S>,
    u_dis: &Tensor<S>,
    mode: LossMode,
    dis_weight: S,
) -> Result<HeadGrads<S>> {
    let (j_count, n) = (cache.encoded.shape()[0], cache.encoded.shape()[1]);

    let mut grad_w = Tensor::zeros(w.shape());
    let mut grad_u_cls = Tensor::zeros(u_cls.shape());
    let mut grad_u_dis = Tensor::zeros(u_dis.shape());
    let mut grad_f = Tensor::zeros(patch_features.shape());

    if mode.uses_cls() {
        let g_cls = sigmoid_ce_grad(&cache.s_cls, y)?;
        let (grad_repr, gu) = classify_image_backward(&cache.repr.values, u_cls, &g_cls)?;
        grad_u_cls.add_assign(&gu);
        let grad_e = spm_backward(&cache.repr.winners, &grad_repr, j_count, n)?;
        let (gf, gw) = matmul_backward(patch_features, w, &grad_e)?;
        grad_f.add_assign(&gf);
        grad_w.add_assign(&gw);
    }
    if mode.uses_dis() {
        let mut g_dis = sigmoid_ce_grad(&cache.s_dis, y)?;
        g_dis.scale(dis_weight);
        let grad_s_pat = discovery_pool_backward(&cache.dis_argmax, &g_dis, j_count)?;
        let (gf, gu) = matmul_backward(patch_features, u_dis, &grad_s_pat)?;
        grad_f.add_assign(&gf);
        grad_u_dis.add_assign(&gu);
    }
    Ok(HeadGrads {
        w: grad_w,
        u_cls: grad_u_cls,
        u_dis: grad_u_dis,
        patch_features: grad_f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn roi_project_single_cell() {
        let b = PatchBox::new(0.0, 0.0, 16.0, 16.0);
        let r = roi_project(&b, 16, 1, 1);
        assert_eq!(r, CellRect { x0: 0, y0: 0, x1: 0, y1: 0 });
    }

    #[test]
    fn roi_project_whole_map_at_stride_one() {
        let b = PatchBox::new(0.0, 0.0, 40.0, 30.0);
        let r = roi_project(&b, 1, 30, 40);
        assert_eq!(r, CellRect { x0: 0, y0: 0, x1: 39, y1: 29 });
    }

    #[test]
    fn roi_project_floor_ceil_rule() {
        // floor(5/4)=1 floor(7/4)=1 ceil(37/4)-1=9 ceil(25/4)-1=6
        let b = PatchBox::new(5.0, 7.0, 37.0, 25.0);
        let r = roi_project(&b, 4, 50, 50);
        assert_eq!(r, CellRect { x0: 1, y0: 1, x1: 9, y1: 6 });
    }

    #[test]
    fn roi_project_never_empty_after_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..500 {
            let lx = rng.gen_range(0.0..100.0);
            let ly = rng.gen_range(0.0..100.0);
            let b = PatchBox::new(lx, ly, lx + rng.gen_range(0.1..60.0), ly + rng.gen_range(0.1..60.0));
            let n = rng.gen_range(1..9);
            let r = roi_project(&b, n, 12, 12);
            assert!(r.x0 <= r.x1 && r.y0 <= r.y1 && r.x1 < 12 && r.y1 < 12);
        }
    }

    #[test]
    fn spp_single_bin_is_global_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let map = rand_tensor(&mut rng, &[2, 5, 6]);
        let rect = CellRect { x0: 1, y0: 0, x1: 4, y1: 3 };
        let (out, argmax) = spp_pool(&map, &rect, 1, 1).unwrap();
        for c in 0..2 {
            let mut best = f64::NEG_INFINITY;
            for y in 0..=3 {
                for x in 1..=4 {
                    best = best.max(map.data()[(c * 5 + y) * 6 + x]);
                }
            }
            assert_eq!(out.data()[c], best);
            assert_eq!(map.data()[argmax[c]], best);
        }
    }

    #[test]
    fn spp_constant_map_constant_output() {
        let map = Tensor::full(&[1, 8, 8], 2.5);
        let rect = CellRect { x0: 0, y0: 0, x1: 7, y1: 7 };
        let (out, _) = spp_pool(&map, &rect, 3, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    // Brute-force oracle: recompute every bin bound and scan it explicitly.
    fn spp_oracle(map: &Tensor<f64>, rect: &CellRect, gh: usize, gw: usize) -> Tensor<f64> {
        let (cf, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let _ = h;
        let (rh, rw) = (rect.height(), rect.width());
        let mut out = Tensor::zeros(&[cf, gh, gw]);
        for c in 0..cf {
            for by in 0..gh {
                for bx in 0..gw {
                    let ys = rh * by / gh;
                    let ye = std::cmp::max(rh * (by + 1) / gh, ys + 1);
                    let xs = rw * bx / gw;
                    let xe = std::cmp::max(rw * (bx + 1) / gw, xs + 1);
                    let mut best = f64::NEG_INFINITY;
                    for y in ys..ye {
                        for x in xs..xe {
                            best = best.max(map.data()[(c * map.shape()[1] + rect.y0 + y) * w + rect.x0 + x]);
                        }
                    }
                    out.data_mut()[(c * gh + by) * gw + bx] = best;
                }
            }
        }
        out
    }

    #[test]
    fn spp_matches_bin_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..500 {
            let h = rng.gen_range(2..10);
            let w = rng.gen_range(2..10);
            let map = rand_tensor(&mut rng, &[2, h, w]);
            let x0 = rng.gen_range(0..w);
            let y0 = rng.gen_range(0..h);
            let rect = CellRect {
                x0,
                y0,
                x1: rng.gen_range(x0..w),
                y1: rng.gen_range(y0..h),
            };
            let gh = rng.gen_range(1..5);
            let gw = rng.gen_range(1..5);
            let (out, _) = spp_pool(&map, &rect, gh, gw).unwrap();
            assert_eq!(out, spp_oracle(&map, &rect, gh, gw));
        }
    }

    #[test]
    fn spp_small_rect_large_grid_stays_inside() {
        // extent < bins exercises the widen-to-one-cell path
        let map = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let rect = CellRect { x0: 0, y0: 0, x1: 1, y1: 1 };
        let (out, argmax) = spp_pool(&map, &rect, 3, 3).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        for &idx in &argmax {
            assert!(idx < 4);
        }
        assert_eq!(out, spp_oracle(&map, &rect, 3, 3));
    }

    #[test]
    fn spp_backward_zero_and_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let map = rand_tensor(&mut rng, &[1, 4, 4]);
        let rect = CellRect { x0: 0, y0: 0, x1: 3, y1: 3 };
        let (_, argmax) = spp_pool(&map, &rect, 1, 1).unwrap();
        let mut gm = map.zeros_like();
        spp_pool_backward(&argmax, &Tensor::zeros(&[1, 1, 1]), &mut gm).unwrap();
        assert!(gm.data().iter().all(|&v| v == 0.0));
        spp_pool_backward(&argmax, &t(&[1, 1, 1], &[3.0]), &mut gm).unwrap();
        assert_eq!(gm.data()[argmax[0]], 3.0);
        assert_eq!(gm.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn spp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let map = rand_tensor(&mut rng, &[2, 5, 5]);
        let rect = CellRect { x0: 1, y0: 0, x1: 4, y1: 4 };
        let g = rand_tensor(&mut rng, &[2, 2, 2]);
        let (_, argmax) = spp_pool(&map, &rect, 2, 2).unwrap();
        let mut analytic = map.zeros_like();
        spp_pool_backward(&argmax, &g, &mut analytic).unwrap();
        let objective = |m: &Tensor<f64>| -> f64 {
            spp_pool(m, &rect, 2, 2)
                .unwrap()
                .0
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for i in 0..map.numel() {
            let mut p = map.clone();
            let mut m = map.clone();
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let num = (objective(&p) - objective(&m)) / (2.0 * eps);
            assert!((num - analytic.data()[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn encode_zero_and_identity() {
        let f = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let zero = Tensor::zeros(&[3, 4]);
        assert!(encode_patches(&f, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(encode_patches(&f, &eye).unwrap(), f);
    }

    fn default_scales() -> Vec<SpmScale> {
        default_spm_scales()
    }

    #[test]
    fn default_pyramid_has_eight_cells() {
        assert_eq!(total_cells(&default_scales()), 8);
    }

    #[test]
    fn spm_single_scale_is_columnwise_max() {
        let e = t(&[3, 2], &[1.0, -5.0, 4.0, 2.0, -1.0, 7.0]);
        let boxes = vec![
            PatchBox::new(0.0, 0.0, 10.0, 10.0),
            PatchBox::new(20.0, 20.0, 30.0, 30.0),
            PatchBox::new(5.0, 5.0, 15.0, 25.0),
        ];
        let repr = spm_aggregate(&e, &boxes, 32.0, 32.0, &[SpmScale { rows: 1, cols: 1 }]).unwrap();
        assert_eq!(repr.values.data(), &[4.0, 7.0]);
        assert_eq!(repr.winners, vec![Some(1), Some(2)]);
    }

    #[test]
    fn spm_single_patch_replicates_into_its_cells() {
        let e = t(&[1, 2], &[3.0, -4.0]);
        let boxes = vec![PatchBox::new(0.0, 0.0, 8.0, 8.0)]; // center (4,4), top-left region
        let repr = spm_aggregate(&e, &boxes, 32.0, 32.0, &default_scales()).unwrap();
        // Cells: scale0 cell0; scale1 cell0 (quadrant TL); scale2 cell0 (top band).
        let expected_cells = [0usize, 1, 5];
        for m in 0..8 {
            for ch in 0..2 {
                let slot = m * 2 + ch;
                if expected_cells.contains(&m) {
                    assert_eq!(repr.values.data()[slot], e.data()[ch]);
                    assert_eq!(repr.winners[slot], Some(0));
                } else {
                    assert_eq!(repr.values.data()[slot], 0.0);
                    assert_eq!(repr.winners[slot], None);
                }
            }
        }
    }

    // Independent membership + max oracle over all cells of all scales.
    fn spm_oracle(
        e: &Tensor<f64>,
        boxes: &[PatchBox],
        iw: f64,
        ih: f64,
        scales: &[SpmScale],
    ) -> (Vec<f64>, Vec<Option<usize>>) {
        let n = e.shape()[1];
        let m_total: usize = scales.iter().map(|s| s.cells()).sum();
        let mut vals = vec![0.0; m_total * n];
        let mut wins = vec![None; m_total * n];
        let mut base = 0;
        for s in scales {
            for row in 0..s.rows {
                for col in 0..s.cols {
                    let members: Vec<usize> = boxes
                        .iter()
                        .enumerate()
                        .filter(|(_, b)| {
                            let (cx, cy) = b.center();
                            let bc = ((cx * s.cols as f64 / iw).floor() as usize).min(s.cols - 1);
                            let br = ((cy * s.rows as f64 / ih).floor() as usize).min(s.rows - 1);
                            (br, bc) == (row, col)
                        })
                        .map(|(j, _)| j)
                        .collect();
                    let m = base + row * s.cols + col;
                    for ch in 0..n {
                        let mut best: Option<(usize, f64)> = None;
                        for &j in &members {
                            let v = e.data()[j * n + ch];
                            if best.is_none_or(|(_, bv)| v > bv) {
                                best = Some((j, v));
                            }
                        }
                        if let Some((j, v)) = best {
                            vals[m * n + ch] = v;
                            wins[m * n + ch] = Some(j);
                        }
                    }
                }
            }
            base += s.cells();
        }
        (vals, wins)
    }

    #[test]
    fn spm_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..500 {
            let j = rng.gen_range(1..10);
            let n = rng.gen_range(1..5);
            let e = rand_tensor(&mut rng, &[j, n]);
            let boxes: Vec<PatchBox> = (0..j)
                .map(|_| {
                    let lx = rng.gen_range(0.0..28.0);
                    let ly = rng.gen_range(0.0..20.0);
                    PatchBox::new(lx, ly, lx + rng.gen_range(0.5..4.0), ly + rng.gen_range(0.5..4.0))
                })
                .collect();
            let repr = spm_aggregate(&e, &boxes, 32.0, 24.0, &default_scales()).unwrap();
            let (vals, wins) = spm_oracle(&e, &boxes, 32.0, 24.0, &default_scales());
            assert_eq!(repr.values.data(), &vals[..]);
            assert_eq!(repr.winners, wins);
        }
    }

    #[test]
    fn spm_right_bottom_edges_belong_to_last_cell() {
        let e = t(&[1, 1], &[1.0]);
        // Center exactly on the right/bottom corner.
        let boxes = vec![PatchBox::new(31.0, 23.0, 33.0, 25.0)];
        let repr = spm_aggregate(&e, &boxes, 32.0, 24.0, &[SpmScale { rows: 2, cols: 2 }]).unwrap();
        assert_eq!(repr.winners, vec![None, None, None, Some(0)]);
    }

    #[test]
    fn spm_backward_routes_per_slot() {
        let e = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let boxes = vec![
            PatchBox::new(0.0, 0.0, 4.0, 4.0),
            PatchBox::new(10.0, 10.0, 16.0, 16.0),
        ];
        let repr = spm_aggregate(&e, &boxes, 16.0, 16.0, &[SpmScale { rows: 1, cols: 1 }]).unwrap();
        // Patch 1 dominates everywhere (its E row is larger per channel).
        assert_eq!(repr.winners, vec![Some(1), Some(1), Some(1)]);
        let g = t(&[3], &[0.5, 0.0, -2.0]);
        let ge = spm_backward(&repr.winners, &g, 2, 3).unwrap();
        assert_eq!(ge.data(), &[0.0, 0.0, 0.0, 0.5, 0.0, -2.0]);
        let zero = spm_backward(&repr.winners, &Tensor::<f64>::zeros(&[3]), 2, 3).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let e = rand_tensor(&mut rng, &[5, 4]);
        let boxes: Vec<PatchBox> = (0..5)
            .map(|_| {
                let lx = rng.gen_range(0.0..28.0);
                let ly = rng.gen_range(0.0..20.0);
                PatchBox::new(lx, ly, lx + 3.0, ly + 3.0)
            })
            .collect();
        let g = rand_tensor(&mut rng, &[8 * 4]);
        let repr = spm_aggregate(&e, &boxes, 32.0, 24.0, &default_scales()).unwrap();
        let ge = spm_backward(&repr.winners, &g, 5, 4).unwrap();
        let objective = |e: &Tensor<f64>| -> f64 {
            spm_aggregate(e, &boxes, 32.0, 24.0, &default_scales())
                .unwrap()
                .values
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for i in 0..e.numel() {
            let mut p = e.clone();
            let mut m = e.clone();
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let num = (objective(&p) - objective(&m)) / (2.0 * eps);
            assert!((num - ge.data()[i]).abs() <= 1e-6, "{} vs {}", num, ge.data()[i]);
        }
    }

    #[test]
    fn classify_image_picks_component() {
        let f = t(&[3], &[7.0, -2.0, 5.0]);
        let mut u = Tensor::zeros(&[3, 1]);
        u.data_mut()[0] = 1.0;
        let s = classify_image(&f, &u).unwrap();
        assert_eq!(s.data(), &[7.0]);
        assert!(classify_image(&Tensor::zeros(&[3]), &u).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_image_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let f = rand_tensor(&mut rng, &[6]);
        let u = rand_tensor(&mut rng, &[6, 3]);
        let s = classify_image(&f, &u).unwrap();
        let f_row = Tensor::from_vec(&[1, 6], f.data().to_vec()).unwrap();
        let want = matmul(&f_row, &u).unwrap();
        for (a, b) in s.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_image_backward_matches_matmul_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let f = rand_tensor(&mut rng, &[6]);
        let u = rand_tensor(&mut rng, &[6, 3]);
        let g = rand_tensor(&mut rng, &[3]);
        let (gf, gu) = classify_image_backward(&f, &u, &g).unwrap();
        let f_row = Tensor::from_vec(&[1, 6], f.data().to_vec()).unwrap();
        let g_row = Tensor::from_vec(&[1, 3], g.data().to_vec()).unwrap();
        let (gf_want, gu_want) = matmul_backward(&f_row, &u, &g_row).unwrap();
        assert_eq!(gf.data(), gf_want.data());
        assert_eq!(gu.data(), gu_want.data());
    }

    #[test]
    fn discovery_pool_basics() {
        let one = t(&[1, 3], &[1.0, -2.0, 0.5]);
        let (s, am) = discovery_pool(&one).unwrap();
        assert_eq!(s.data(), one.data());
        assert_eq!(am, vec![0, 0, 0]);

        let col = t(&[3, 1], &[-1.0, 3.0, 2.0]);
        let (s, am) = discovery_pool(&col).unwrap();
        assert_eq!(s.data(), &[3.0]);
        assert_eq!(am, vec![1]);

        // Ties resolve to the lowest patch index.
        let tie = t(&[3, 1], &[5.0, 5.0, 1.0]);
        let (_, am) = discovery_pool(&tie).unwrap();
        assert_eq!(am, vec![0]);
    }

    #[test]
    fn discovery_pool_matches_column_max_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        for _ in 0..500 {
            let j = rng.gen_range(1..12);
            let c = rng.gen_range(1..5);
            let sp = rand_tensor(&mut rng, &[j, c]);
            let (s, am) = discovery_pool(&sp).unwrap();
            for k in 0..c {
                let col: Vec<f64> = (0..j).map(|jj| sp.data()[jj * c + k]).collect();
                let best = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(s.data()[k], best);
                assert_eq!(am[k], col.iter().position(|&v| v == best).unwrap());
            }
        }
    }

    #[test]
    fn discovery_pool_backward_one_hot_per_class() {
        let sp = t(&[3, 2], &[0.0, 9.0, 5.0, 1.0, 2.0, 3.0]);
        let (_, am) = discovery_pool(&sp).unwrap();
        assert_eq!(am, vec![1, 0]);
        let g = t(&[2], &[0.7, -0.3]);
        let gp = discovery_pool_backward(&am, &g, 3).unwrap();
        assert_eq!(gp.data(), &[0.0, -0.3, 0.7, 0.0, 0.0, 0.0]);
        let zero = discovery_pool_backward(&am, &Tensor::<f64>::zeros(&[2]), 3).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discovery_pool_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let sp = rand_tensor(&mut rng, &[6, 3]);
        let g = rand_tensor(&mut rng, &[3]);
        let (_, am) = discovery_pool(&sp).unwrap();
        let gp = discovery_pool_backward(&am, &g, 6).unwrap();
        let objective = |sp: &Tensor<f64>| -> f64 {
            discovery_pool(sp)
                .unwrap()
                .0
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for i in 0..sp.numel() {
            let mut p = sp.clone();
            let mut m = sp.clone();
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let num = (objective(&p) - objective(&m)) / (2.0 * eps);
            assert!((num - gp.data()[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn loss_at_zero_scores_is_c_ln2() {
        let s = Tensor::zeros(&[4]);
        let y = LabelVector::new(vec![1, 0, 1, 0]).unwrap();
        let loss: f64 = sigmoid_ce_loss(&s, &y).unwrap();
        assert!((loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_saturates_to_zero_for_confident_correct() {
        let s = t(&[1], &[40.0]);
        let y = LabelVector::new(vec![1]).unwrap();
        let loss: f64 = sigmoid_ce_loss(&s, &y).unwrap();
        assert!(loss < 1e-15, "{}", loss);
    }

    #[test]
    fn loss_two_class_fixture() {
        let s = t(&[2], &[2.0, -1.0]);
        let y = LabelVector::new(vec![1, 0]).unwrap();
        let loss: f64 = sigmoid_ce_loss(&s, &y).unwrap();
        // Direct per-definition evaluation as the oracle.
        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want = -(sigma(2.0).ln()) - (1.0 - sigma(-1.0)).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.440190).abs() < 1e-6);
    }

    // Direct evaluation of the defining formula, using 1-sigma(s) = sigma(-s)
    // so it stays accurate over |s| <= 20; it still blows up at extreme scores
    // (see loss_finite_at_extreme_scores), which is why the stable form exists.
    fn naive_sigmoid_ce(s: f64, y: u8) -> f64 {
        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        -((y as f64) * sigma(s).ln() + (1.0 - y as f64) * sigma(-s).ln())
    }

    #[test]
    fn stable_form_equals_naive_in_moderate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..1000 {
            let sv = rng.gen_range(-20.0..20.0);
            let yv = rng.gen_range(0..2) as u8;
            let s = t(&[1], &[sv]);
            let y = LabelVector::new(vec![yv]).unwrap();
            let stable: f64 = sigmoid_ce_loss(&s, &y).unwrap();
            assert!((stable - naive_sigmoid_ce(sv, yv)).abs() < 1e-10, "s={} y={}", sv, yv);
        }
    }

    #[test]
    fn loss_finite_at_extreme_scores() {
        for &sv in &[1e4, -1e4] {
            for yv in 0..2u8 {
                let s = t(&[1], &[sv]);
                let y = LabelVector::new(vec![yv]).unwrap();
                let loss: f64 = sigmoid_ce_loss(&s, &y).unwrap();
                assert!(loss.is_finite());
                let g = sigmoid_ce_grad(&s, &y).unwrap();
                assert!(g.data()[0].is_finite());
            }
        }
        // The direct form does not survive out there.
        assert!(!naive_sigmoid_ce(1e4, 0).is_finite());
    }

    #[test]
    fn grad_at_zero_is_plus_minus_half() {
        let s = Tensor::<f64>::zeros(&[2]);
        let y = LabelVector::new(vec![1, 0]).unwrap();
        let g = sigmoid_ce_grad(&s, &y).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let s = rand_tensor(&mut rng, &[5]);
        let y = LabelVector::new(vec![1, 0, 1, 1, 0]).unwrap();
        let g = sigmoid_ce_grad(&s, &y).unwrap();
        let eps = 1e-6;
        for i in 0..5 {
            let mut p = s.clone();
            let mut m = s.clone();
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let lp: f64 = sigmoid_ce_loss(&p, &y).unwrap();
            let lm: f64 = sigmoid_ce_loss(&m, &y).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            assert!((num - g.data()[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn label_vector_rejects_non_binary() {
        assert!(LabelVector::new(vec![0, 1, 2]).is_err());
    }

    #[test]
    fn total_loss_modes_and_additivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let s_cls = rand_tensor(&mut rng, &[3]);
        let s_dis = rand_tensor(&mut rng, &[3]);
        let y = LabelVector::new(vec![1, 0, 1]).unwrap();
        let multi = total_loss(&s_cls, &s_dis, &y, LossMode::MultiTask, 1.0).unwrap();
        let cls = total_loss(&s_cls, &s_dis, &y, LossMode::ClsOnly, 1.0).unwrap();
        let dis = total_loss(&s_cls, &s_dis, &y, LossMode::DisOnly, 1.0).unwrap();
        assert_eq!(cls.total, cls.cls);
        assert_eq!(dis.total, dis.dis);
        assert!((multi.total - (cls.total + dis.total)).abs() < 1e-12);
        // Identical branch scores: multi-task is exactly twice one branch.
        let same = total_loss(&s_cls, &s_cls, &y, LossMode::MultiTask, 1.0).unwrap();
        assert_eq!(same.total, 2.0 * same.cls);
    }

    // Weights scaled down so scores stay in the active sigmoid region;
    // saturated classes have gradients below finite-difference resolution.
    #[allow(clippy::type_complexity)]
    fn toy_head(rng: &mut ChaCha8Rng, j: usize, k: usize, n: usize, c: usize)
        -> (Tensor<f64>, Vec<PatchBox>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let f = rand_tensor(rng, &[j, k]);
        let boxes: Vec<PatchBox> = (0..j)
            .map(|_| {
                let lx = rng.gen_range(0.0..28.0);
                let ly = rng.gen_range(0.0..20.0);
                PatchBox::new(lx, ly, lx + rng.gen_range(0.5..4.0), ly + rng.gen_range(0.5..4.0))
            })
            .collect();
        let nm = 8 * n;
        let mut w = rand_tensor(rng, &[k, n]);
        let mut u_cls = rand_tensor(rng, &[nm, c]);
        let mut u_dis = rand_tensor(rng, &[k, c]);
        w.scale(0.2);
        u_cls.scale(0.2);
        u_dis.scale(0.2);
        (f, boxes, w, u_cls, u_dis)
    }

    #[test]
    fn head_backward_dis_only_freezes_cls_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let (f, boxes, w, u_cls, u_dis) = toy_head(&mut rng, 4, 5, 3, 2);
        let y = LabelVector::new(vec![1, 0]).unwrap();
        let cache = head_forward(&f, &boxes, 32.0, 24.0, &w, &u_cls, &u_dis, &default_scales()).unwrap();
        let g = head_backward(&cache, &f, &y, &w, &u_cls, &u_dis, LossMode::DisOnly, 1.0).unwrap();
        assert!(g.w.data().iter().all(|&v| v == 0.0));
        assert!(g.u_cls.data().iter().all(|&v| v == 0.0));
        assert!(g.u_dis.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn head_backward_negative_bag_pushes_down_only_winners() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let sp = rand_tensor(&mut rng, &[6, 3]);
        let (s_dis, am) = discovery_pool(&sp).unwrap();
        let y = LabelVector::new(vec![0, 0, 0]).unwrap();
        let g_dis = sigmoid_ce_grad(&s_dis, &y).unwrap();
        let gp = discovery_pool_backward(&am, &g_dis, 6).unwrap();
        for k in 0..3 {
            for j in 0..6 {
                let g = gp.data()[j * 3 + k];
                if j == am[k] {
                    assert!(g >= 0.0); // sigma(s) - 0 pushes the best patch down
                } else {
                    assert_eq!(g, 0.0);
                }
            }
        }
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for mode in [LossMode::MultiTask, LossMode::ClsOnly, LossMode::DisOnly] {
            let (f, boxes, w, u_cls, u_dis) = toy_head(&mut rng, 5, 6, 4, 3);
            let y = LabelVector::new(vec![1, 0, 1]).unwrap();
            let loss_of = |f: &Tensor<f64>, w: &Tensor<f64>, uc: &Tensor<f64>, ud: &Tensor<f64>| -> f64 {
                let cache = head_forward(f, &boxes, 32.0, 24.0, w, uc, ud, &default_scales()).unwrap();
                total_loss(&cache.s_cls, &cache.s_dis, &y, mode, 1.0).unwrap().total
            };
            let cache = head_forward(&f, &boxes, 32.0, 24.0, &w, &u_cls, &u_dis, &default_scales()).unwrap();
            let grads = head_backward(&cache, &f, &y, &w, &u_cls, &u_dis, mode, 1.0).unwrap();
            let eps = 1e-5;
            let check = |analytic: &Tensor<f64>, which: usize| {
                for i in 0..analytic.numel() {
                    let (mut fp, mut wp, mut ucp, mut udp) = (f.clone(), w.clone(), u_cls.clone(), u_dis.clone());
                    let (mut fm, mut wm, mut ucm, mut udm) = (f.clone(), w.clone(), u_cls.clone(), u_dis.clone());
                    match which {
                        0 => { fp.data_mut()[i] += eps; fm.data_mut()[i] -= eps; }
                        1 => { wp.data_mut()[i] += eps; wm.data_mut()[i] -= eps; }
                        2 => { ucp.data_mut()[i] += eps; ucm.data_mut()[i] -= eps; }
                        _ => { udp.data_mut()[i] += eps; udm.data_mut()[i] -= eps; }
                    }
                    let num = (loss_of(&fp, &wp, &ucp, &udp) - loss_of(&fm, &wm, &ucm, &udm)) / (2.0 * eps);
                    let a = analytic.data()[i];
                    let rel = (num - a).abs() / num.abs().max(a.abs()).max(1e-8);
                    assert!(rel <= 1e-4, "mode {:?} block {} coord {}: {} vs {}", mode, which, i, num, a);
                }
            };
            check(&grads.patch_features, 0);
            check(&grads.w, 1);
            check(&grads.u_cls, 2);
            check(&grads.u_dis, 3);
        }
    }

    // Detector used by the routing property tests and the mutation tests:
    // verifies the pyramid gradient rule slot-by-slot.
    fn spm_routing_holds(
        winners: &[Option<usize>],
        grad_repr: &Tensor<f64>,
        grad_e: &Tensor<f64>,
        n: usize,
    ) -> bool {
        let j_count = grad_e.shape()[0];
        let mut expect = Tensor::zeros(&[j_count, n]);
        for (r, &win) in winners.iter().enumerate() {
            if let Some(j) = win {
                expect.data_mut()[j * n + r % n] += grad_repr.data()[r];
            }
        }
        expect == *grad_e
    }

    #[test]
    fn mutated_spm_backward_channel_shift_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let e = rand_tensor(&mut rng, &[4, 3]);
        let boxes: Vec<PatchBox> = (0..4)
            .map(|i| PatchBox::new(i as f64 * 8.0, 2.0, i as f64 * 8.0 + 4.0, 6.0))
            .collect();
        let repr = spm_aggregate(&e, &boxes, 32.0, 24.0, &default_scales()).unwrap();
        let g = rand_tensor(&mut rng, &[8 * 3]);
        // Corrupted routing: channel off by one.
        let mut bad = Tensor::zeros(&[4, 3]);
        for (r, &win) in repr.winners.iter().enumerate() {
            if let Some(j) = win {
                bad.data_mut()[j * 3 + (r + 1) % 3] += g.data()[r];
            }
        }
        assert!(!spm_routing_holds(&repr.winners, &g, &bad, 3));
        let good = spm_backward(&repr.winners, &g, 4, 3).unwrap();
        assert!(spm_routing_holds(&repr.winners, &g, &good, 3));
    }

    #[test]
    fn mutated_discovery_argmax_shift_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let sp = rand_tensor(&mut rng, &[5, 2]);
        let (_, am) = discovery_pool(&sp).unwrap();
        let g = rand_tensor(&mut rng, &[2]);
        let shifted: Vec<usize> = am.iter().map(|&j| (j + 1) % 5).collect();
        let bad = discovery_pool_backward(&shifted, &g, 5).unwrap();
        let good = discovery_pool_backward(&am, &g, 5).unwrap();
        // The corrupted table puts gradient on a patch that is not the max.
        for k in 0..2 {
            assert!(bad.data()[shifted[k] * 2 + k] != 0.0 || g.data()[k] == 0.0);
            assert!(sp.data()[shifted[k] * 2 + k] < sp.data()[am[k] * 2 + k]
                || sp.data()[shifted[k] * 2 + k] == sp.data()[am[k] * 2 + k]);
        }
        assert_ne!(bad, good);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        // Pyramid routing: each slot's gradient reaches exactly one
        // (patch, channel) pair with channel = slot mod N, or vanishes on
        // empty cells; the winner is a true member and attains the cell max.
        #[test]
        fn spm_routing_property(
            seed in 0u64..1_000_000,
            j in 1usize..8,
            n in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = rand_tensor(&mut rng, &[j, n]);
            let boxes: Vec<PatchBox> = (0..j)
                .map(|_| {
                    let lx = rng.gen_range(0.0..28.0);
                    let ly = rng.gen_range(0.0..20.0);
                    PatchBox::new(lx, ly, lx + rng.gen_range(0.5..4.0), ly + rng.gen_range(0.5..4.0))
                })
                .collect();
            let scales = default_scales();
            let repr = spm_aggregate(&e, &boxes, 32.0, 24.0, &scales).unwrap();
            let nm = 8 * n;
            let slot = rng.gen_range(0..nm);
            let mut g = Tensor::zeros(&[nm]);
            g.data_mut()[slot] = 1.0;
            let ge = spm_backward(&repr.winners, &g, j, n).unwrap();
            match repr.winners[slot] {
                None => {
                    prop_assert!(ge.data().iter().all(|&v| v == 0.0));
                    prop_assert_eq!(repr.values.data()[slot], 0.0);
                }
                Some(win) => {
                    let nonzero: Vec<usize> = (0..ge.numel()).filter(|&i| ge.data()[i] != 0.0).collect();
                    prop_assert_eq!(nonzero, vec![win * n + slot % n]);
                    prop_assert_eq!(ge.data()[win * n + slot % n], 1.0);
                    // Winner attains the slot value and is a member of the cell.
                    prop_assert_eq!(repr.values.data()[slot], e.data()[win * n + slot % n]);
                    let (vals, wins) = {
                        let mut base = 0usize;
                        let mut found = (0.0, None);
                        for s in &scales {
                            if slot / n >= base && slot / n < base + s.cells() {
                                let cell = slot / n - base;
                                let members: Vec<usize> = boxes.iter().enumerate().filter(|(_, b)| {
                                    super::cell_of_center(b, s, 32.0, 24.0) == cell
                                }).map(|(idx, _)| idx).collect();
                                let mut best: Option<(usize, f64)> = None;
                                for &m in &members {
                                    let v = e.data()[m * n + slot % n];
                                    if best.is_none_or(|(_, bv)| v > bv) {
                                        best = Some((m, v));
                                    }
                                }
                                found = best.map(|(m, v)| (v, Some(m))).unwrap_or((0.0, None));
                            }
                            base += s.cells();
                        }
                        found
                    };
                    prop_assert_eq!(wins, Some(win));
                    prop_assert_eq!(vals, repr.values.data()[slot]);
                }
            }
            prop_assert!(spm_routing_holds(&repr.winners, &g, &ge, n));
        }

        // MIL max routing: at most one nonzero per class, equal to the
        // incoming gradient, on the lowest-index argmax.
        #[test]
        fn discovery_routing_property(
            seed in 0u64..1_000_000,
            j in 1usize..10,
            c in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sp = rand_tensor(&mut rng, &[j, c]);
            let g = rand_tensor(&mut rng, &[c]);
            let (s_dis, am) = discovery_pool(&sp).unwrap();
            let gp = discovery_pool_backward(&am, &g, j).unwrap();
            for k in 0..c {
                let col: Vec<f64> = (0..j).map(|jj| sp.data()[jj * c + k]).collect();
                let best = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(s_dis.data()[k], best);
                prop_assert_eq!(am[k], col.iter().position(|&v| v == best).unwrap());
                for jj in 0..j {
                    let expect = if jj == am[k] { g.data()[k] } else { 0.0 };
                    prop_assert_eq!(gp.data()[jj * c + k], expect);
                }
            }
        }

        // MIL bag constraint through the loss: positive labels pull the
        // winning patch's score up, negative labels push every per-class
        // winner down, and no other patch receives discovery gradient.
        #[test]
        fn mil_bag_sign_property(
            seed in 0u64..1_000_000,
            j in 1usize..10,
            c in 1usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sp = rand_tensor(&mut rng, &[j, c]);
            let y_vec: Vec<u8> = (0..c).map(|_| rng.gen_range(0..2)).collect();
            let y = LabelVector::new(y_vec.clone()).unwrap();
            let (s_dis, am) = discovery_pool(&sp).unwrap();
            let g_dis = sigmoid_ce_grad(&s_dis, &y).unwrap();
            let gp = discovery_pool_backward(&am, &g_dis, j).unwrap();
            for k in 0..c {
                let on_winner = gp.data()[am[k] * c + k];
                if y_vec[k] == 1 {
                    prop_assert!(on_winner <= 0.0);
                } else {
                    prop_assert!(on_winner >= 0.0);
                }
                for jj in 0..j {
                    if jj != am[k] {
                        prop_assert_eq!(gp.data()[jj * c + k], 0.0);
                    }
                }
            }
        }
    }
}
