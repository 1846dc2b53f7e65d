//! 8-bit RGB images, binary PPM persistence, and the scale/flip preprocessing
//! applied before the backbone, together with the matching box transforms.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::boxes::PatchBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub w: u32,
    pub h: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(w: u32, h: u32) -> Self {
        RgbImage {
            w,
            h,
            data: vec![0u8; (w as usize) * (h as usize) * 3],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.w + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, px: [u8; 3]) {
        let i = ((y * self.w + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Planar float tensor `[3, H, W]` with the channel mean offset removed;
    /// values stay at raw 8-bit scale, roughly [-128, 127].
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let (w, h) = (self.w as usize, self.h as usize);
        let mut t = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = self.data[(y * w + x) * 3 + c] as f64 - 128.0;
                    t.data_mut()[(c * h + y) * w + x] = S::from_f64(v);
                }
            }
        }
        t
    }

    pub fn mirror_horizontal(&self) -> RgbImage {
        let mut out = RgbImage::new(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(self.w - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

/// Writes binary PPM (P6, maxval 255). The header is fixed so identical
/// images serialize to identical bytes.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.w, img.h)?;
    f.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let bad = |msg: &str| Error::data(format!("{}: {}", path.display(), msg));
    if raw.len() < 2 || &raw[0..2] != b"P6" {
        return Err(bad("not a binary PPM (missing P6 magic)"));
    }
    // Header tokens may be separated by whitespace and '#' comment lines.
    let mut pos = 2usize;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        while pos < raw.len() {
            if raw[pos].is_ascii_whitespace() {
                pos += 1;
            } else if raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero dimension"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = (w as usize) * (h as usize) * 3;
    if raw.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok(RgbImage {
        w,
        h,
        data: raw[pos..pos + need].to_vec(),
    })
}

/// Maps boxes from original pixel space into the rescaled (and possibly
/// mirrored) space the network sees, and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTransform {
    pub sx: f64,
    pub sy: f64,
    pub flip: bool,
    pub scaled_w: f64,
}

impl BoxTransform {
    pub const IDENTITY: BoxTransform = BoxTransform {
        sx: 1.0,
        sy: 1.0,
        flip: false,
        scaled_w: 0.0,
    };

    pub fn apply(&self, b: &PatchBox) -> PatchBox {
        let (lx, rx) = (b.lx * self.sx, b.rx * self.sx);
        let (ly, ry) = (b.ly * self.sy, b.ry * self.sy);
        if self.flip {
            PatchBox::new(self.scaled_w - rx, ly, self.scaled_w - lx, ry)
        } else {
            PatchBox::new(lx, ly, rx, ry)
        }
    }

    pub fn invert(&self, b: &PatchBox) -> PatchBox {
        let (lx, rx) = if self.flip {
            (self.scaled_w - b.rx, self.scaled_w - b.lx)
        } else {
            (b.lx, b.rx)
        };
        PatchBox::new(lx / self.sx, b.ly / self.sy, rx / self.sx, b.ry / self.sy)
    }
}

fn bilinear_resize(img: &RgbImage, new_w: u32, new_h: u32) -> RgbImage {
    let mut out = RgbImage::new(new_w, new_h);
    let fx = img.w as f64 / new_w as f64;
    let fy = img.h as f64 / new_h as f64;
    for y in 0..new_h {
        let sy = ((y as f64 + 0.5) * fy - 0.5).max(0.0);
        let y0 = (sy as u32).min(img.h - 1);
        let y1 = (y0 + 1).min(img.h - 1);
        let wy = sy - y0 as f64;
        for x in 0..new_w {
            let sx = ((x as f64 + 0.5) * fx - 0.5).max(0.0);
            let x0 = (sx as u32).min(img.w - 1);
            let x1 = (x0 + 1).min(img.w - 1);
            let wx = sx - x0 as f64;
            let (p00, p01) = (img.get(x0, y0), img.get(x1, y0));
            let (p10, p11) = (img.get(x0, y1), img.get(x1, y1));
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - wx) + p01[c] as f64 * wx;
                let bot = p10[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
                px[c] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, px);
        }
    }
    out
}

/// Resizes so the longest side equals `target` (aspect preserved, bilinear),
/// then optionally mirrors horizontally. Returns the image and the transform
/// that maps original-space boxes into the result's space.
pub fn rescale_image(img: &RgbImage, target: u32, flip: bool) -> Result<(RgbImage, BoxTransform)> {
    if target == 0 || img.w == 0 || img.h == 0 {
        return Err(Error::invalid("rescale_image: zero dimension"));
    }
    let (new_w, new_h) = if img.w >= img.h {
        let h = ((img.h as f64 * target as f64 / img.w as f64).round() as u32).max(1);
        (target, h)
    } else {
        let w = ((img.w as f64 * target as f64 / img.h as f64).round() as u32).max(1);
        (w, target)
    };
    let scaled = if (new_w, new_h) == (img.w, img.h) {
        img.clone()
    } else {
        bilinear_resize(img, new_w, new_h)
    };
    let scaled = if flip { scaled.mirror_horizontal() } else { scaled };
    let tf = BoxTransform {
        sx: new_w as f64 / img.w as f64,
        sy: new_h as f64 / img.h as f64,
        flip,
        scaled_w: new_w as f64,
    };
    Ok((scaled, tf))
}
