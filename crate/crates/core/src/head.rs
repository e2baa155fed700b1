//! Decoding raw level maps into face detections, plus IoU and greedy NMS.
//!
//! Per anchor the head emits `6 + 2·L` channels laid out as
//! `[tx, ty, tw, th, conf, lm0x, lm0y, .., lm(L-1)y, cls]` (L = 5 landmarks
//! gives 16). For grid cell `(cx, cy)` at stride `s` and anchor `(aw, ah)`:
//!
//! ```text
//! bx = (2σ(tx) - 0.5 + cx)·s       bw = (2σ(tw))²·aw
//! by = (2σ(ty) - 0.5 + cy)·s       bh = (2σ(th))²·ah
//! lx = t·aw + cx·s                 ly = t·ah + cy·s
//! ```

use serde::{Deserialize, Serialize};

use crate::data::LetterboxTransform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_LANDMARKS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorLevel {
    pub stride: u32,
    /// `(width, height)` in input-image pixels.
    pub anchors: Vec<[f32; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorSet {
    pub levels: Vec<AnchorLevel>,
}

impl AnchorSet {
    /// Square anchors whose sizes form a geometric progression from 4 px to
    /// 512 px across all levels, three per level, on strides 8, 16, 32, ...
    pub fn geometric(num_levels: usize) -> Self {
        let per_level = 3;
        let total = num_levels * per_level;
        let ratio = (512.0f64 / 4.0).powf(1.0 / (total - 1) as f64);
        let levels = (0..num_levels)
            .map(|l| AnchorLevel {
                stride: 8 << l,
                anchors: (0..per_level)
                    .map(|a| {
                        let size = 4.0 * ratio.powi((l * per_level + a) as i32);
                        let size = ((size * 100.0).round() / 100.0) as f32;
                        [size, size]
                    })
                    .collect(),
            })
            .collect();
        AnchorSet { levels }
    }

    pub fn num_anchors(&self) -> usize {
        self.levels.first().map_or(0, |l| l.anchors.len())
    }

    pub fn validate(&self) -> Result<()> {
        let na = self.num_anchors();
        if na == 0 {
            return Err(Error::Config("every level needs at least one anchor".into()));
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.anchors.len() != na {
                return Err(Error::Config(format!(
                    "level {i} has {} anchors, level 0 has {na}",
                    level.anchors.len()
                )));
            }
            if level.anchors.iter().any(|a| !(a[0] > 0.0 && a[1] > 0.0) || !a[0].is_finite() || !a[1].is_finite()) {
                return Err(Error::Config(format!("level {i} has a non-positive anchor")));
            }
            if i > 0 && level.stride <= self.levels[i - 1].stride {
                return Err(Error::Config("anchor strides must increase across levels".into()));
            }
        }
        Ok(())
    }
}

/// How detections are ranked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Objectness alone; `cls` is reported but unused.
    #[default]
    Conf,
    ConfTimesCls,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Conf => "conf",
            ScoreMode::ConfTimesCls => "conf_times_cls",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `(x1, y1, x2, y2)`.
    pub bbox: [f32; 4],
    pub score: f32,
    pub conf: f32,
    pub cls: f32,
    pub landmarks: [[f32; 2]; NUM_LANDMARKS],
    pub landmark_valid: bool,
}

impl Detection {
    pub fn width(&self) -> f32 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> f32 {
        self.bbox[3] - self.bbox[1]
    }
}

pub fn channels_per_anchor(num_landmarks: usize) -> usize {
    6 + 2 * num_landmarks
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOpts {
    pub num_landmarks: usize,
    pub score_mode: ScoreMode,
    /// Candidates scoring below this are skipped; 0 keeps everything.
    pub conf_thr: f64,
}

impl Default for DecodeOpts {
    fn default() -> Self {
        DecodeOpts {
            num_landmarks: NUM_LANDMARKS,
            score_mode: ScoreMode::Conf,
            conf_thr: 0.0,
        }
    }
}

/// Decodes one batch item of a level map into candidates in input-image
/// (letterboxed) coordinates, ordered by anchor, then row, then column.
pub fn decode_level(raw: &Tensor, item: usize, level: &AnchorLevel, opts: &DecodeOpts) -> Result<Vec<Detection>> {
    let s = raw.shape();
    let per = channels_per_anchor(opts.num_landmarks);
    let na = level.anchors.len();
    if s.c != na * per {
        return Err(Error::shape(
            "decode_level",
            format!("{} channels, expected {na}x{per}", s.c),
        ));
    }
    if item >= s.n {
        return Err(Error::shape("decode_level", format!("batch item {item} of {}", s.n)));
    }
    if opts.num_landmarks > NUM_LANDMARKS {
        return Err(Error::Config(format!("at most {NUM_LANDMARKS} landmarks are supported")));
    }
    if opts.conf_thr >= 1.0 {
        return Ok(Vec::new());
    }
    let stride = level.stride as f64;
    let mut out = Vec::new();
    for (a, &[aw, ah]) in level.anchors.iter().enumerate() {
        let (aw, ah) = (aw as f64, ah as f64);
        let ch = |j: usize| raw.plane(item, a * per + j);
        let conf_plane = ch(4);
        let cls_plane = ch(5 + 2 * opts.num_landmarks);
        for cy in 0..s.h {
            for cx in 0..s.w {
                let idx = cy * s.w + cx;
                let conf = sigmoid(conf_plane[idx] as f64);
                let cls = sigmoid(cls_plane[idx] as f64);
                let score = match opts.score_mode {
                    ScoreMode::Conf => conf,
                    ScoreMode::ConfTimesCls => conf * cls,
                };
                if score < opts.conf_thr {
                    continue;
                }
                let t = |j: usize| ch(j)[idx] as f64;
                let bx = (2.0 * sigmoid(t(0)) - 0.5 + cx as f64) * stride;
                let by = (2.0 * sigmoid(t(1)) - 0.5 + cy as f64) * stride;
                let bw = (2.0 * sigmoid(t(2))).powi(2) * aw;
                let bh = (2.0 * sigmoid(t(3))).powi(2) * ah;
                let mut landmarks = [[0.0f32; 2]; NUM_LANDMARKS];
                for (k, lm) in landmarks.iter_mut().enumerate().take(opts.num_landmarks) {
                    lm[0] = (t(5 + 2 * k) * aw + cx as f64 * stride) as f32;
                    lm[1] = (t(6 + 2 * k) * ah + cy as f64 * stride) as f32;
                }
                out.push(Detection {
                    bbox: [
                        (bx - bw / 2.0) as f32,
                        (by - bh / 2.0) as f32,
                        (bx + bw / 2.0) as f32,
                        (by + bh / 2.0) as f32,
                    ],
                    score: score as f32,
                    conf: conf as f32,
                    cls: cls as f32,
                    landmarks,
                    landmark_valid: opts.num_landmarks == NUM_LANDMARKS,
                });
            }
        }
    }
    Ok(out)
}

/// Inverse of the box decode for one cell/anchor: returns the
/// `[tx, ty, tw, th]` logits reproducing the centre/size box `[bx, by, bw, bh]`.
///
/// Only defined when the centre lies strictly within (-0.5, 1.5) cells of
/// `cell` and each size is in (0, 4)·anchor.
pub fn encode_box(cxcywh: [f64; 4], cell: (usize, usize), anchor: [f32; 2], stride: u32) -> Option<[f32; 4]> {
    let s = stride as f64;
    let ox = cxcywh[0] / s - cell.0 as f64;
    let oy = cxcywh[1] / s - cell.1 as f64;
    let rw = cxcywh[2] / anchor[0] as f64;
    let rh = cxcywh[3] / anchor[1] as f64;
    let in_open = |v: f64, lo: f64, hi: f64| v > lo && v < hi;
    if !(in_open(ox, -0.5, 1.5) && in_open(oy, -0.5, 1.5) && in_open(rw, 0.0, 4.0) && in_open(rh, 0.0, 4.0)) {
        return None;
    }
    Some([
        logit((ox + 0.5) / 2.0) as f32,
        logit((oy + 0.5) / 2.0) as f32,
        logit(rw.sqrt() / 2.0) as f32,
        logit(rh.sqrt() / 2.0) as f32,
    ])
}

/// Inverse of the landmark decode.
pub fn encode_landmark(point: [f64; 2], cell: (usize, usize), anchor: [f32; 2], stride: u32) -> [f32; 2] {
    let s = stride as f64;
    [
        ((point[0] - cell.0 as f64 * s) / anchor[0] as f64) as f32,
        ((point[1] - cell.1 as f64 * s) / anchor[1] as f64) as f32,
    ]
}

/// Intersection over union of two corner-form boxes; 0 when either box is
/// degenerate or they do not overlap.
pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let [ax1, ay1, ax2, ay2] = a.map(|v| v as f64);
    let [bx1, by1, bx2, by2] = b.map(|v| v as f64);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0);
    let area_b = (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0);
    let union = area_a + area_b - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0) as f32
    }
}

/// Greedy non-maximum suppression. Candidates are visited by descending
/// score (ties keep input order); a candidate is dropped when its IoU with
/// any kept box exceeds `iou_thr`.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thr) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessOpts {
    pub conf_thr: f64,
    pub iou_thr: f32,
    pub score_mode: ScoreMode,
    pub num_landmarks: usize,
}

impl PostprocessOpts {
    pub const EVAL_CONF: f64 = 0.02;
    pub const DETECT_CONF: f64 = 0.5;
    pub const IOU: f32 = 0.5;

    pub fn detect() -> Self {
        PostprocessOpts {
            conf_thr: Self::DETECT_CONF,
            iou_thr: Self::IOU,
            score_mode: ScoreMode::Conf,
            num_landmarks: NUM_LANDMARKS,
        }
    }

    pub fn eval() -> Self {
        PostprocessOpts {
            conf_thr: Self::EVAL_CONF,
            ..Self::detect()
        }
    }
}

/// Decode every level → threshold → NMS → undo the letterbox → clip boxes to
/// the source image. Boxes that vanish under clipping are dropped.
pub fn postprocess(
    levels: &[Tensor],
    item: usize,
    anchors: &AnchorSet,
    opts: &PostprocessOpts,
    transform: &LetterboxTransform,
) -> Result<Vec<Detection>> {
    if levels.len() != anchors.levels.len() {
        return Err(Error::shape(
            "postprocess",
            format!("{} level maps for {} anchor levels", levels.len(), anchors.levels.len()),
        ));
    }
    let decode = DecodeOpts {
        num_landmarks: opts.num_landmarks,
        score_mode: opts.score_mode,
        conf_thr: opts.conf_thr,
    };
    let mut candidates = Vec::new();
    for (map, level) in levels.iter().zip(&anchors.levels) {
        candidates.extend(decode_level(map, item, level, &decode)?);
    }
    let (w, h) = (transform.src_w as f32, transform.src_h as f32);
    let out = nms(candidates, opts.iou_thr)
        .into_iter()
        .filter_map(|mut d| {
            let [x1, y1] = transform.invert_point([d.bbox[0], d.bbox[1]]);
            let [x2, y2] = transform.invert_point([d.bbox[2], d.bbox[3]]);
            d.bbox = [x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h)];
            for lm in d.landmarks.iter_mut().take(opts.num_landmarks) {
                *lm = transform.invert_point(*lm);
            }
            (d.bbox[2] > d.bbox[0] && d.bbox[3] > d.bbox[1]).then_some(d)
        })
        .collect();
    Ok(out)
}
