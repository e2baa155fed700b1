//! Preprocessing, seeded augmentations and WiderFace annotation parsing.

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_PAD_VALUE: u8 = 114;
pub const DEFAULT_MIN_FACE: f32 = 4.0;

/// Aspect-preserving resize to `(new_w, new_h)` followed by padding to
/// `(out_w, out_h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_left: usize,
    pub pad_top: usize,
    pub out_w: usize,
    pub out_h: usize,
    pub new_w: usize,
    pub new_h: usize,
    pub src_w: usize,
    pub src_h: usize,
}

impl LetterboxTransform {
    pub fn identity(w: usize, h: usize) -> Self {
        LetterboxTransform {
            scale: 1.0,
            pad_left: 0,
            pad_top: 0,
            out_w: w,
            out_h: h,
            new_w: w,
            new_h: h,
            src_w: w,
            src_h: h,
        }
    }

    pub fn apply_point_f64(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] * self.scale + self.pad_left as f64,
            p[1] * self.scale + self.pad_top as f64,
        ]
    }

    /// Letterboxed coordinates back to source-image coordinates.
    pub fn invert_point_f64(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.pad_left as f64) / self.scale,
            (p[1] - self.pad_top as f64) / self.scale,
        ]
    }

    pub fn apply_point(&self, p: [f32; 2]) -> [f32; 2] {
        self.apply_point_f64(p.map(f64::from)).map(|v| v as f32)
    }

    pub fn invert_point(&self, p: [f32; 2]) -> [f32; 2] {
        self.invert_point_f64(p.map(f64::from)).map(|v| v as f32)
    }
}

/// Scales the longer edge to `target` and pads the shorter edge up to the
/// next multiple of `stride_mult`, splitting the padding evenly (floor on
/// the left/top).
pub fn letterbox(img_w: usize, img_h: usize, target: usize, stride_mult: usize) -> Result<LetterboxTransform> {
    if img_w == 0 || img_h == 0 {
        return Err(Error::Config("image dimensions must be >= 1".into()));
    }
    if stride_mult == 0 || target == 0 || !target.is_multiple_of(stride_mult) {
        return Err(Error::Config(format!(
            "target size {target} must be a positive multiple of {stride_mult}"
        )));
    }
    let scale = target as f64 / img_w.max(img_h) as f64;
    let fit = |d: usize| {
        if d == img_w.max(img_h) {
            target
        } else {
            ((d as f64 * scale).round() as usize).clamp(1, target)
        }
    };
    let (new_w, new_h) = (fit(img_w), fit(img_h));
    let up = |d: usize| d.div_ceil(stride_mult) * stride_mult;
    let (out_w, out_h) = (up(new_w), up(new_h));
    Ok(LetterboxTransform {
        scale,
        pad_left: (out_w - new_w) / 2,
        pad_top: (out_h - new_h) / 2,
        out_w,
        out_h,
        new_w,
        new_h,
        src_w: img_w,
        src_h: img_h,
    })
}

/// Bilinear resize then constant padding.
pub fn apply_letterbox(img: &RgbImage, t: &LetterboxTransform, pad_value: u8) -> RgbImage {
    let resized;
    let src = if (img.width() as usize, img.height() as usize) == (t.new_w, t.new_h) {
        img
    } else {
        resized = imageops::resize(img, t.new_w as u32, t.new_h as u32, FilterType::Triangle);
        &resized
    };
    let mut out = RgbImage::from_pixel(t.out_w as u32, t.out_h as u32, Rgb([pad_value; 3]));
    imageops::replace(&mut out, src, t.pad_left as i64, t.pad_top as i64);
    out
}

pub fn invert_points(points: &[[f32; 2]], t: &LetterboxTransform) -> Vec<[f32; 2]> {
    points.iter().map(|&p| t.invert_point(p)).collect()
}

/// RGB bytes → `1×3×H×W` tensor scaled to [0, 1].
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data).expect("extents match")
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Per-face attribute flags of the original ground-truth layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceAttributes {
    pub blur: i32,
    pub expression: i32,
    pub illumination: i32,
    pub invalid: i32,
    pub occlusion: i32,
    pub pose: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceAnnotation {
    /// `(x, y, w, h)` in pixels.
    pub bbox: [f32; 4],
    pub landmarks: Option<[[f32; 2]; 5]>,
    pub landmark_valid: [bool; 5],
    pub attributes: FaceAttributes,
}

impl FaceAnnotation {
    pub fn new(bbox: [f32; 4]) -> Self {
        FaceAnnotation {
            bbox,
            landmarks: None,
            landmark_valid: [false; 5],
            attributes: FaceAttributes::default(),
        }
    }

    pub fn with_landmarks(mut self, points: [[f32; 2]; 5]) -> Self {
        self.landmark_valid = points.map(|p| p[0] >= 0.0 && p[1] >= 0.0);
        self.landmarks = Some(points);
        self
    }

    pub fn corners(&self) -> [f32; 4] {
        let [x, y, w, h] = self.bbox;
        [x, y, x + w, y + h]
    }
}

pub type Annotations = BTreeMap<String, Vec<FaceAnnotation>>;

/// Parses either the original WiderFace ground-truth layout (path, count,
/// `x y w h blur expression illumination invalid occlusion pose` lines) or
/// the landmark-extended layout (`# path` then `x y w h` followed by five
/// `(x, y, flag)` landmark triples per face). The layout is chosen by whether
/// the first non-blank line starts with `#`.
pub fn parse_widerface(text: &str) -> Result<Annotations> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    match lines.first() {
        Some((_, l)) if l.starts_with('#') => parse_extended(&lines),
        _ => parse_original(&lines),
    }
}

fn numbers(line: usize, text: &str) -> Result<Vec<f32>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f32>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("`{tok}` is not a number"),
                })
        })
        .collect()
}

fn insert_unique(out: &mut Annotations, line: usize, path: &str, faces: Vec<FaceAnnotation>) -> Result<()> {
    if path.is_empty() {
        return Err(Error::Parse {
            line,
            msg: "empty image path".into(),
        });
    }
    if out.insert(path.to_string(), faces).is_some() {
        return Err(Error::Parse {
            line,
            msg: format!("duplicate image `{path}`"),
        });
    }
    Ok(())
}

fn check_box(line: usize, v: &[f32]) -> Result<[f32; 4]> {
    let b = [v[0], v[1], v[2], v[3]];
    if b[2] < 0.0 || b[3] < 0.0 {
        return Err(Error::Parse {
            line,
            msg: "negative box size".into(),
        });
    }
    Ok(b)
}

fn parse_original(lines: &[(usize, &str)]) -> Result<Annotations> {
    let mut out = Annotations::new();
    let mut i = 0;
    while i < lines.len() {
        let (path_line, path) = lines[i];
        let (count_line, count_text) = *lines.get(i + 1).ok_or(Error::Parse {
            line: path_line,
            msg: "missing face count after image path".into(),
        })?;
        let count: usize = count_text.parse().map_err(|_| Error::Parse {
            line: count_line,
            msg: format!("malformed face count `{count_text}`"),
        })?;
        i += 2;
        let mut faces = Vec::with_capacity(count);
        // An image without faces is followed by one placeholder box line.
        let box_lines = count.max(1);
        for j in 0..box_lines {
            let (line, text) = *lines.get(i + j).ok_or(Error::Parse {
                line: lines.last().map_or(count_line, |l| l.0),
                msg: format!("truncated: `{path}` declares {count} faces"),
            })?;
            let v = numbers(line, text)?;
            if count == 0 {
                if v.iter().any(|&x| x != 0.0) {
                    return Err(Error::Parse {
                        line,
                        msg: "expected the all-zero placeholder line for a face count of 0".into(),
                    });
                }
                continue;
            }
            if v.len() != 4 && v.len() != 10 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 4 or 10 numbers, found {}", v.len()),
                });
            }
            let mut face = FaceAnnotation::new(check_box(line, &v)?);
            if v.len() == 10 {
                let a = |k: usize| v[k] as i32;
                face.attributes = FaceAttributes {
                    blur: a(4),
                    expression: a(5),
                    illumination: a(6),
                    invalid: a(7),
                    occlusion: a(8),
                    pose: a(9),
                };
            }
            faces.push(face);
        }
        i += box_lines;
        insert_unique(&mut out, path_line, path, faces)?;
    }
    Ok(out)
}

fn parse_extended(lines: &[(usize, &str)]) -> Result<Annotations> {
    let mut out = Annotations::new();
    let mut current: Option<(usize, String, Vec<FaceAnnotation>)> = None;
    for &(line, text) in lines {
        if let Some(path) = text.strip_prefix('#') {
            if let Some((l, p, faces)) = current.take() {
                insert_unique(&mut out, l, &p, faces)?;
            }
            current = Some((line, path.trim().to_string(), Vec::new()));
            continue;
        }
        let (_, _, faces) = current.as_mut().ok_or(Error::Parse {
            line,
            msg: "face line before any `# path` line".into(),
        })?;
        let v = numbers(line, text)?;
        if v.len() != 4 && v.len() < 19 {
            return Err(Error::Parse {
                line,
                msg: format!("expected a box and 15 landmark values, found {} numbers", v.len()),
            });
        }
        let face = FaceAnnotation::new(check_box(line, &v)?);
        faces.push(if v.len() >= 19 {
            face.with_landmarks(std::array::from_fn(|k| [v[4 + 3 * k], v[5 + 3 * k]]))
        } else {
            face
        });
    }
    if let Some((l, p, faces)) = current {
        insert_unique(&mut out, l, &p, faces)?;
    }
    Ok(out)
}

/// Augmentations available to training-time pipelines. There is
/// deliberately no vertical flip; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub mosaic: bool,
    pub random_crop: bool,
    pub min_face: f32,
    pub target: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            mosaic: true,
            random_crop: true,
            min_face: DEFAULT_MIN_FACE,
            target: 640,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config("hflip_prob must lie in [0, 1]".into()));
        }
        if !(self.min_face >= 0.0) || self.target == 0 {
            return Err(Error::Config("min_face must be >= 0 and target >= 1".into()));
        }
        Ok(())
    }
}

const FLIP_ORDER: [usize; 5] = [1, 0, 2, 4, 3];

/// Mirrors the image left-right. Landmarks use the pixel-index mirror
/// `x' = W - 1 - x` and swap eyes and mouth corners; boxes mirror their
/// edges, `x' = W - x - w`.
pub fn hflip(img: &RgbImage, anns: &[FaceAnnotation]) -> (RgbImage, Vec<FaceAnnotation>) {
    let w = img.width() as f32;
    let out = anns
        .iter()
        .map(|a| {
            let mut f = a.clone();
            f.bbox[0] = w - a.bbox[0] - a.bbox[2];
            if let Some(lm) = a.landmarks {
                let mut flipped = lm;
                let mut valid = a.landmark_valid;
                for (dst, &src) in FLIP_ORDER.iter().enumerate() {
                    valid[dst] = a.landmark_valid[src];
                    flipped[dst] = if valid[dst] {
                        [w - 1.0 - lm[src][0], lm[src][1]]
                    } else {
                        lm[src]
                    };
                }
                f.landmarks = Some(flipped);
                f.landmark_valid = valid;
            }
            f
        })
        .collect();
    (imageops::flip_horizontal(img), out)
}

/// Maps annotations through `p -> p·scale + offset`, clips boxes to
/// `[0, w) × [0, h)`, invalidates landmarks that leave the frame and drops
/// faces narrower or shorter than `min_face`.
fn remap(anns: &[FaceAnnotation], scale: f32, dx: f32, dy: f32, w: f32, h: f32, min_face: f32) -> Vec<FaceAnnotation> {
    anns.iter()
        .filter_map(|a| {
            let [x1, y1, x2, y2] = a.corners();
            let x1 = (x1 * scale + dx).clamp(0.0, w);
            let y1 = (y1 * scale + dy).clamp(0.0, h);
            let x2 = (x2 * scale + dx).clamp(0.0, w);
            let y2 = (y2 * scale + dy).clamp(0.0, h);
            if x2 - x1 < min_face || y2 - y1 < min_face || x2 <= x1 || y2 <= y1 {
                return None;
            }
            let mut f = a.clone();
            f.bbox = [x1, y1, x2 - x1, y2 - y1];
            if let Some(lm) = a.landmarks {
                let mut out = lm;
                for k in 0..5 {
                    if !a.landmark_valid[k] {
                        continue;
                    }
                    let p = [lm[k][0] * scale + dx, lm[k][1] * scale + dy];
                    if p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h {
                        out[k] = p;
                    } else {
                        out[k] = [-1.0, -1.0];
                        f.landmark_valid[k] = false;
                    }
                }
                f.landmarks = Some(out);
            }
            Some(f)
        })
        .collect()
}

fn shift(mut f: FaceAnnotation, dx: f32, dy: f32) -> FaceAnnotation {
    f.bbox[0] += dx;
    f.bbox[1] += dy;
    if let Some(lm) = f.landmarks.as_mut() {
        for (p, valid) in lm.iter_mut().zip(f.landmark_valid) {
            if valid {
                p[0] += dx;
                p[1] += dy;
            }
        }
    }
    f
}

/// Pixel window `(x, y, w, h)`.
pub type Window = (u32, u32, u32, u32);

/// Crops `img` to `window`. Faces whose centre falls outside the window are
/// dropped; the rest are clipped and filtered by `min_face`.
pub fn crop(img: &RgbImage, anns: &[FaceAnnotation], window: Window, min_face: f32) -> (RgbImage, Vec<FaceAnnotation>) {
    let (x0, y0, cw, ch) = window;
    let inside: Vec<FaceAnnotation> = anns
        .iter()
        .filter(|a| {
            let cx = a.bbox[0] + a.bbox[2] / 2.0;
            let cy = a.bbox[1] + a.bbox[3] / 2.0;
            cx >= x0 as f32 && cx < (x0 + cw) as f32 && cy >= y0 as f32 && cy < (y0 + ch) as f32
        })
        .cloned()
        .collect();
    let out = imageops::crop_imm(img, x0, y0, cw, ch).to_image();
    let anns = remap(&inside, 1.0, -(x0 as f32), -(y0 as f32), cw as f32, ch as f32, min_face);
    (out, anns)
}

/// Seeded crop whose width and height are each drawn from [0.5, 1.0] of the
/// image extent.
pub fn random_crop(img: &RgbImage, anns: &[FaceAnnotation], min_face: f32, seed: u64) -> (RgbImage, Vec<FaceAnnotation>) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (w, h) = (img.width(), img.height());
    let cw = ((w as f64 * rng.random_range(0.5..=1.0)).round() as u32).clamp(1, w);
    let ch = ((h as f64 * rng.random_range(0.5..=1.0)).round() as u32).clamp(1, h);
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    crop(img, anns, (x0, y0, cw, ch), min_face)
}

/// Four-image mosaic. Each image is scaled so its longer edge is `target`
/// and placed in one quadrant around a centre drawn uniformly from the
/// middle half of a `2·target` canvas; the canvas is then centre-cropped to
/// `target × target`.
pub fn mosaic(
    inputs: &[(RgbImage, Vec<FaceAnnotation>); 4],
    target: u32,
    min_face: f32,
    seed: u64,
) -> (RgbImage, Vec<FaceAnnotation>) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let canvas_size = 2 * target;
    let xc = rng.random_range(target / 2..=target + target / 2) as i64;
    let yc = rng.random_range(target / 2..=target + target / 2) as i64;
    let mut canvas = RgbImage::from_pixel(canvas_size, canvas_size, Rgb([DEFAULT_PAD_VALUE; 3]));
    let mut faces = Vec::new();
    for (q, (img, anns)) in inputs.iter().enumerate() {
        let scale = target as f32 / img.width().max(img.height()) as f32;
        let nw = ((img.width() as f32 * scale).round() as u32).max(1);
        let nh = ((img.height() as f32 * scale).round() as u32).max(1);
        let resized = imageops::resize(img, nw, nh, FilterType::Triangle);
        let (nw, nh) = (nw as i64, nh as i64);
        let (x, y) = match q {
            0 => (xc - nw, yc - nh),
            1 => (xc, yc - nh),
            2 => (xc - nw, yc),
            _ => (xc, yc),
        };
        imageops::replace(&mut canvas, &resized, x, y);
        let sx = nw as f32 / img.width() as f32;
        let sy = nh as f32 / img.height() as f32;
        // Per-axis scale differs from `scale` only by the rounding above.
        let scaled: Vec<FaceAnnotation> = anns
            .iter()
            .map(|a| {
                let mut f = a.clone();
                f.bbox = [a.bbox[0] * sx, a.bbox[1] * sy, a.bbox[2] * sx, a.bbox[3] * sy];
                if let Some(lm) = a.landmarks {
                    f.landmarks = Some(lm.map(|p| [p[0] * sx, p[1] * sy]));
                }
                f
            })
            .collect();
        // Keep only what lands on the pasted region of this quadrant.
        let x_lo = x.max(0) as f32;
        let y_lo = y.max(0) as f32;
        let x_hi = (x + nw).min(canvas_size as i64) as f32;
        let y_hi = (y + nh).min(canvas_size as i64) as f32;
        let local = remap(&scaled, 1.0, x as f32 - x_lo, y as f32 - y_lo, x_hi - x_lo, y_hi - y_lo, 0.0);
        faces.extend(local.into_iter().map(|f| shift(f, x_lo, y_lo)));
    }
    let off = target / 2;
    let out = imageops::crop_imm(&canvas, off, off, target, target).to_image();
    let faces = remap(&faces, 1.0, -(off as f32), -(off as f32), target as f32, target as f32, min_face);
    (out, faces)
}

/// Single-image pipeline: optional random crop, then a left-right flip with
/// probability `hflip_prob`.
pub fn augment(img: &RgbImage, anns: &[FaceAnnotation], cfg: &AugmentConfig, seed: u64) -> Result<(RgbImage, Vec<FaceAnnotation>)> {
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (mut img, mut anns) = if cfg.random_crop {
        random_crop(img, anns, cfg.min_face, rng.random())
    } else {
        (img.clone(), anns.to_vec())
    };
    if rng.random_bool(cfg.hflip_prob) {
        (img, anns) = hflip(&img, &anns);
    }
    Ok((img, anns))
}
