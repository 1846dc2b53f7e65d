//! Patch proposal generation and persistence.
//!
//! Proposals are the MIL instances: candidate boxes per image, produced either
//! by the built-in multi-scale sliding window or loaded from a CSV written by
//! an external tool.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::boxes::PatchBox;
use crate::error::{Error, Result};

pub const SW_BASE: u32 = 32;
pub const SW_STEP: u32 = 32;
pub const SW_MULTIPLIERS: std::ops::RangeInclusive<u32> = 2..=8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalSource {
    SlidingWindow,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_id: String,
    pub boxes: Vec<PatchBox>,
    pub source: ProposalSource,
}

impl ProposalSet {
    pub fn new(image_id: String, boxes: Vec<PatchBox>, source: ProposalSource) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::data(format!("image {}: empty proposal set", image_id)));
        }
        if let Some(b) = boxes.iter().find(|b| !b.is_valid()) {
            return Err(Error::data(format!(
                "image {}: invalid proposal box {:?}",
                image_id, b
            )));
        }
        Ok(ProposalSet {
            image_id,
            boxes,
            source,
        })
    }

    /// Clamps every box to the image and drops boxes that collapse; falls back
    /// to one full-image box if nothing survives.
    pub fn bind_to_image(&self, w: u32, h: u32) -> ProposalSet {
        let mut boxes: Vec<PatchBox> = self
            .boxes
            .iter()
            .map(|b| b.clamp_to(w as f64, h as f64))
            .filter(|b| b.is_valid())
            .collect();
        if boxes.is_empty() {
            boxes.push(PatchBox::new(0.0, 0.0, w as f64, h as f64));
        }
        ProposalSet {
            image_id: self.image_id.clone(),
            boxes,
            source: self.source,
        }
    }
}

fn axis_positions(image_dim: u32, side: u32, step: u32) -> Vec<u32> {
    let mut xs = Vec::new();
    let mut x = 0;
    while x + side <= image_dim {
        xs.push(x);
        x += step;
    }
    // Snap a final placement to the far edge so borders are covered.
    let snapped = image_dim - side;
    if xs.last() != Some(&snapped) {
        xs.push(snapped);
    }
    xs
}

/// Square windows of side `32k`, `k` in 2..=8, at stride 32, scanned row-major
/// per scale in ascending scale order. Only scales that fit both dimensions
/// are used; if none fit, the whole image is the single proposal.
pub fn sliding_window(image_id: &str, image_w: u32, image_h: u32) -> ProposalSet {
    let mut boxes = Vec::new();
    for k in SW_MULTIPLIERS {
        let side = SW_BASE * k;
        if side > image_w || side > image_h {
            continue;
        }
        for &y in &axis_positions(image_h, side, SW_STEP) {
            for &x in &axis_positions(image_w, side, SW_STEP) {
                boxes.push(PatchBox::new(
                    x as f64,
                    y as f64,
                    (x + side) as f64,
                    (y + side) as f64,
                ));
            }
        }
    }
    if boxes.is_empty() {
        boxes.push(PatchBox::new(0.0, 0.0, image_w as f64, image_h as f64));
    }
    // Edge snapping can duplicate the last regular placement.
    let mut seen = std::collections::BTreeSet::new();
    boxes.retain(|b| {
        seen.insert((
            b.lx.to_bits(),
            b.ly.to_bits(),
            b.rx.to_bits(),
            b.ry.to_bits(),
        ))
    });
    ProposalSet {
        image_id: image_id.to_string(),
        boxes,
        source: ProposalSource::SlidingWindow,
    }
}

/// Shifts every box corner by a seeded uniform draw in `[-max_shift, max_shift]`
/// and clamps to the image; a box that collapses keeps its original coordinates.
/// Serves as a deterministic stand-in for an external proposal source when
/// comparing against the exact sliding-window grid.
pub fn jittered(set: &ProposalSet, w: u32, h: u32, max_shift: f64, seed: u64) -> ProposalSet {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let boxes = set
        .boxes
        .iter()
        .map(|b| {
            let mut d = [0.0f64; 4];
            for slot in &mut d {
                *slot = rng.gen_range(-max_shift..=max_shift);
            }
            let j = PatchBox::new(b.lx + d[0], b.ly + d[1], b.rx + d[2], b.ry + d[3])
                .clamp_to(w as f64, h as f64);
            if j.is_valid() {
                j
            } else {
                *b
            }
        })
        .collect();
    ProposalSet {
        image_id: set.image_id.clone(),
        boxes,
        source: set.source,
    }
}

/// Reads a proposal CSV (`image_id,lx,ly,rx,ry`). Boxes are kept as written;
/// clamping to image bounds happens in `ProposalSet::bind_to_image` because
/// the file does not carry image dimensions.
pub fn load_proposals(path: &Path) -> Result<BTreeMap<String, ProposalSet>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let expect = ["image_id", "lx", "ly", "rx", "ry"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(Error::data(format!(
            "{}: expected header {:?}, got {:?}",
            path.display(),
            expect.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut map: BTreeMap<String, Vec<PatchBox>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        let parse_err = |msg: String| Error::ParseLine {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if record.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_err("empty image_id".to_string()));
        }
        let mut coord = [0.0f64; 4];
        for (slot, field) in coord.iter_mut().zip(record.iter().skip(1)) {
            *slot = field
                .parse()
                .map_err(|e| parse_err(format!("bad coordinate {:?}: {}", field, e)))?;
        }
        let b = PatchBox::new(coord[0], coord[1], coord[2], coord[3]);
        if !b.is_valid() {
            return Err(parse_err(format!(
                "invalid box ({}, {}, {}, {}): need lx<rx and ly<ry",
                b.lx, b.ly, b.rx, b.ry
            )));
        }
        map.entry(id).or_default().push(b);
    }
    map.into_iter()
        .map(|(id, boxes)| {
            let set = ProposalSet::new(id.clone(), boxes, ProposalSource::ExternalFile)?;
            Ok((id, set))
        })
        .collect()
}

pub fn save_proposals(path: &Path, sets: &[&ProposalSet]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "image_id,lx,ly,rx,ry")?;
    for set in sets {
        for b in &set.boxes {
            writeln!(out, "{},{},{},{},{}", set.image_id, b.lx, b.ly, b.rx, b.ry)?;
        }
    }
    Ok(())
}
