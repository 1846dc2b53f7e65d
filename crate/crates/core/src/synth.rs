//! Synthetic multi-label shape dataset: textured backgrounds, dot and line
//! clutter, and one or more class shapes per image with tight recorded
//! boxes. Image-level labels live in `manifest.json`; ground-truth boxes go
//! to a sibling `gt.json` so the training path never touches them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, PatchBox};
use crate::error::{Error, Result};
use crate::img::{write_ppm, RgbImage};

/// Shape kind names double as class names; class c renders kind c.
pub const SHAPE_KINDS: [&str; 5] = ["disk", "triangle", "square", "cross", "ring"];

const CLASS_COLORS: [[u8; 3]; 5] = [
    [205, 45, 45],
    [45, 185, 60],
    [55, 75, 215],
    [225, 205, 45],
    [200, 55, 205],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    pub classes: usize,
    /// Image side range, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Objects per image, inclusive.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object bounding-square side range, inclusive.
    pub min_object: usize,
    pub max_object: usize,
    /// Number of distractor elements per image.
    pub clutter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 500,
            classes: 3,
            min_size: 96,
            max_size: 128,
            min_objects: 1,
            max_objects: 2,
            min_object: 48,
            max_object: 80,
            clutter: 6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::invalid("synth: num_images must be >= 1"));
        }
        if self.classes == 0 || self.classes > SHAPE_KINDS.len() {
            return Err(Error::invalid(format!(
                "synth: classes must be 1..={}",
                SHAPE_KINDS.len()
            )));
        }
        if self.min_size < 32 || self.min_size > self.max_size {
            return Err(Error::invalid("synth: need 32 <= min_size <= max_size"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::invalid("synth: need 1 <= min_objects <= max_objects"));
        }
        if self.min_object < 8 || self.min_object > self.max_object {
            return Err(Error::invalid("synth: need 8 <= min_object <= max_object"));
        }
        if self.max_object + 4 > self.min_size {
            return Err(Error::invalid("synth: max_object must fit inside min_size with margin"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub width: usize,
    pub height: usize,
    /// labels[c] = 1 iff the image contains at least one class-c object.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_format: String,
    pub classes: Vec<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    pub lx: f64,
    pub ly: f64,
    pub rx: f64,
    pub ry: f64,
}

impl GtBox {
    pub fn to_box(self) -> PatchBox {
        PatchBox::new(self.lx, self.ly, self.rx, self.ry)
    }
}

/// Ground-truth boxes, stored apart from the manifest and loaded only by
/// evaluation code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub version: u32,
    pub boxes: BTreeMap<String, Vec<GtBox>>,
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable per-image seed independent of how many images surround it.
pub fn sub_seed(seed: u64, image_index: usize, attempt: u64) -> u64 {
    mix64(mix64(seed ^ mix64(image_index as u64)) ^ attempt)
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn paint_background(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let lum = rng.gen_range(100.0..160.0);
    let base = [
        lum + rng.gen_range(-10.0..10.0),
        lum + rng.gen_range(-10.0..10.0),
        lum + rng.gen_range(-10.0..10.0),
    ];
    let fx = rng.gen_range(0.02..0.08);
    let fy = rng.gen_range(0.02..0.08);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(6.0..12.0);
    for y in 0..img.h {
        for x in 0..img.w {
            let wave = amp
                * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
            let noise = rng.gen_range(-8.0..8.0);
            let px = [
                clamp_u8(base[0] + wave + noise),
                clamp_u8(base[1] + wave + noise),
                clamp_u8(base[2] + wave + noise),
            ];
            img.set(x, y, px);
        }
    }
}

fn draw_dot(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: [u8; 3]) {
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let x1 = ((cx + r).ceil() as u32).min(img.w.saturating_sub(1));
    let y1 = ((cy + r).ceil() as u32).min(img.h.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                img.set(x, y, color);
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, angle: f64, len: f64, color: [u8; 3]) {
    let steps = (len * 2.0).ceil() as usize;
    for s in 0..=steps {
        let t = s as f64 / steps.max(1) as f64;
        let x = x0 + t * len * angle.cos();
        let y = y0 + t * len * angle.sin();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.w && (y as u32) < img.h {
            img.set(x as u32, y as u32, color);
        }
    }
}

fn paint_clutter(img: &mut RgbImage, count: usize, rng: &mut ChaCha8Rng) {
    for _ in 0..count {
        let color = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
        if rng.gen_bool(0.5) {
            let r = rng.gen_range(1.0..3.0);
            let cx = rng.gen_range(0.0..img.w as f64);
            let cy = rng.gen_range(0.0..img.h as f64);
            draw_dot(img, cx, cy, r, color);
        } else {
            let x0 = rng.gen_range(0.0..img.w as f64);
            let y0 = rng.gen_range(0.0..img.h as f64);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = rng.gen_range(5.0..15.0);
            draw_line(img, x0, y0, angle, len, color);
        }
    }
}

fn jitter_color(base: [u8; 3], rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, &b) in out.iter_mut().zip(&base) {
        *o = clamp_u8(b as f64 + rng.gen_range(-30.0..30.0));
    }
    out
}

/// Fills a class shape inside the square [x0, x0+s) x [y0, y0+s) using
/// pixel-center inclusion tests; the recorded box is the square itself.
fn draw_shape(img: &mut RgbImage, class: usize, x0: u32, y0: u32, s: u32, color: [u8; 3]) {
    let sf = s as f64;
    let cx = x0 as f64 + sf / 2.0;
    let cy = y0 as f64 + sf / 2.0;
    let r = sf / 2.0;
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let inside = match class {
                0 => {
                    let (dx, dy) = (px - cx, py - cy);
                    dx * dx + dy * dy <= r * r
                }
                1 => {
                    // Apex at top center, base along the bottom edge.
                    let fy = (py - y0 as f64) / sf;
                    (px - cx).abs() <= fy * r
                }
                2 => true,
                3 => {
                    let t = sf / 6.0;
                    (px - cx).abs() <= t || (py - cy).abs() <= t
                }
                4 => {
                    let (dx, dy) = (px - cx, py - cy);
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (r * 0.5) * (r * 0.5)
                }
                _ => false,
            };
            if inside {
                img.set(x, y, color);
            }
        }
    }
}

struct Rendered {
    image: RgbImage,
    gt: Vec<GtBox>,
    labels: Vec<u8>,
}

/// One attempt at rendering an image; None means placement failed and the
/// caller should retry with a fresh sub-seed.
fn try_render(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Rendered> {
    let w = rng.gen_range(config.min_size..=config.max_size) as u32;
    let h = rng.gen_range(config.min_size..=config.max_size) as u32;
    let mut image = RgbImage::new(w, h);
    paint_background(&mut image, rng);
    paint_clutter(&mut image, config.clutter, rng);
    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let mut gt: Vec<GtBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _attempt in 0..20 {
            let max_s = (config.max_object as u32).min(w.min(h).saturating_sub(4));
            if max_s < config.min_object as u32 {
                return None;
            }
            let s = rng.gen_range(config.min_object as u32..=max_s);
            let x0 = rng.gen_range(2..=w - s - 2);
            let y0 = rng.gen_range(2..=h - s - 2);
            let candidate = PatchBox::new(
                x0 as f64,
                y0 as f64,
                (x0 + s) as f64,
                (y0 + s) as f64,
            );
            if gt.iter().all(|g| iou(&g.to_box(), &candidate) <= 0.1) {
                let class = rng.gen_range(0..config.classes);
                let color = jitter_color(CLASS_COLORS[class], rng);
                draw_shape(&mut image, class, x0, y0, s, color);
                gt.push(GtBox {
                    class,
                    lx: candidate.lx,
                    ly: candidate.ly,
                    rx: candidate.rx,
                    ry: candidate.ry,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    let mut labels = vec![0u8; config.classes];
    for g in &gt {
        labels[g.class] = 1;
    }
    Some(Rendered { image, gt, labels })
}

fn render_image(config: &SynthConfig, index: usize) -> Rendered {
    for attempt in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, index, attempt));
        if let Some(r) = try_render(config, &mut rng) {
            return r;
        }
    }
    unreachable!()
}

pub fn image_id(index: usize) -> String {
    format!("img{:05}", index)
}

/// Renders every image, writes `images/*.ppm`, `manifest.json`, and
/// `gt.json` under `out_dir`, and returns the manifest.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let mut images = Vec::with_capacity(config.num_images);
    let mut boxes = BTreeMap::new();
    for index in 0..config.num_images {
        let rendered = render_image(config, index);
        let id = image_id(index);
        let rel = format!("images/{}.ppm", id);
        write_ppm(&out_dir.join(&rel), &rendered.image)?;
        images.push(ImageRecord {
            id: id.clone(),
            path: rel,
            width: rendered.image.w as usize,
            height: rendered.image.h as usize,
            labels: rendered.labels,
        });
        boxes.insert(id, rendered.gt);
    }
    let manifest = DatasetManifest {
        version: 1,
        image_format: "ppm".to_string(),
        classes: SHAPE_KINDS[..config.classes].iter().map(|s| s.to_string()).collect(),
        images,
    };
    let gt = GroundTruth { version: 1, boxes };
    let mut mjson = serde_json::to_string_pretty(&manifest)?;
    mjson.push('\n');
    fs::write(out_dir.join("manifest.json"), mjson)?;
    let mut gjson = serde_json::to_string_pretty(&gt)?;
    gjson.push('\n');
    fs::write(out_dir.join("gt.json"), gjson)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::data(format!("dataset {}: {}", dir.display(), e)))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.classes.is_empty() {
        return Err(Error::data("manifest lists no classes"));
    }
    let c = manifest.classes.len();
    for rec in &manifest.images {
        if rec.labels.len() != c {
            return Err(Error::data(format!(
                "image {} has {} labels for {} classes",
                rec.id,
                rec.labels.len(),
                c
            )));
        }
        if rec.labels.iter().any(|&v| v > 1) {
            return Err(Error::data(format!("image {} has a non-binary label", rec.id)));
        }
    }
    Ok(manifest)
}

/// Evaluation-only loader; training code must never call this.
pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(dir.join("gt.json"))
        .map_err(|e| Error::data(format!("ground truth {}: {}", dir.display(), e)))?;
    Ok(serde_json::from_str(&text)?)
}
