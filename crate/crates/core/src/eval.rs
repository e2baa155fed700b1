//! WiderFace-style evaluation: greedy matching, PR curves, AP per difficulty
//! subset, and TPR at a fixed false-positive count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Annotations;
use crate::error::{Error, Result};
use crate::head::{iou, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    /// `(x1, y1, x2, y2)`.
    pub bbox: [f32; 4],
    pub score: f32,
}

impl From<&Detection> for ScoredBox {
    fn from(d: &Detection) -> Self {
        ScoredBox {
            bbox: d.bbox,
            score: d.score,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub bbox: [f32; 4],
    /// Outside the subset under evaluation: absorbs a match without
    /// counting it.
    pub ignore: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchFlag {
    Tp,
    Fp,
    Ignored,
}

/// Indices of `scores` by descending score; ties keep index order.
pub fn rank_order(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching of one image. Predictions are visited by descending
/// score; each takes the still-unmatched ground truth of highest IoU (lowest
/// index on ties) provided that IoU reaches `iou_thr`. Flags are returned in
/// the order of `preds`.
pub fn match_image(preds: &[ScoredBox], gts: &[GtBox], iou_thr: f32) -> Vec<MatchFlag> {
    let scores: Vec<f32> = preds.iter().map(|p| p.score).collect();
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![MatchFlag::Fp; preds.len()];
    for i in rank_order(&scores) {
        let mut best: Option<(usize, f32)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou(&preds[i].bbox, &g.bbox);
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = if gts[j].ignore { MatchFlag::Ignored } else { MatchFlag::Tp };
        }
    }
    flags
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f32,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// Scored flags pooled over images. `Ignored` entries are dropped before
/// ranking.
pub type Flagged = Vec<(f32, MatchFlag)>;

fn ranked(flagged: &[(f32, MatchFlag)]) -> Vec<(f32, MatchFlag)> {
    let kept: Vec<(f32, MatchFlag)> = flagged
        .iter()
        .copied()
        .filter(|(_, f)| *f != MatchFlag::Ignored)
        .collect();
    let scores: Vec<f32> = kept.iter().map(|(s, _)| *s).collect();
    rank_order(&scores).into_iter().map(|i| kept[i]).collect()
}

/// Precision/recall after the top-k predictions for `num_thresholds` values
/// of k spread evenly over the ranks (every rank when there are fewer).
pub fn pr_curve(flagged: &[(f32, MatchFlag)], total_gt: usize, num_thresholds: usize) -> Result<PrCurve> {
    let ranked = ranked(flagged);
    if ranked.is_empty() {
        return Ok(PrCurve::default());
    }
    if total_gt == 0 {
        return Err(Error::Eval("recall is undefined with zero ground-truth faces".into()));
    }
    if num_thresholds == 0 {
        return Err(Error::Eval("num_thresholds must be >= 1".into()));
    }
    let n = ranked.len();
    let mut tp_at = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (_, f) in &ranked {
        tp += (*f == MatchFlag::Tp) as usize;
        tp_at.push(tp);
    }
    let cutoffs: Vec<usize> = if n <= num_thresholds {
        (1..=n).collect()
    } else {
        (1..=num_thresholds).map(|i| (i * n).div_ceil(num_thresholds)).collect()
    };
    let points = cutoffs
        .into_iter()
        .map(|k| PrPoint {
            threshold: ranked[k - 1].0,
            recall: tp_at[k - 1] as f64 / total_gt as f64,
            precision: tp_at[k - 1] as f64 / k as f64,
        })
        .collect();
    Ok(PrCurve { points })
}

/// Area under the right-to-left running maximum of precision, integrated
/// exactly over the recall steps.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut envelope: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (p, env) in curve.points.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

/// True-positive rate once the false-positive count would exceed
/// `fp_budget` (or all predictions are consumed).
pub fn tpr_at_fp(flagged: &[(f32, MatchFlag)], total_gt: usize, fp_budget: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut tp = 0;
    let mut fp = 0;
    for (_, f) in ranked(flagged) {
        match f {
            MatchFlag::Tp => tp += 1,
            _ => {
                fp += 1;
                if fp > fp_budget {
                    break;
                }
            }
        }
    }
    tp as f64 / total_gt as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Per image, the face indices that belong to a subset.
pub type SubsetList = BTreeMap<String, BTreeSet<usize>>;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thr: f32,
    pub num_thresholds: usize,
    /// `None` includes every face.
    pub subsets: BTreeMap<Difficulty, Option<SubsetList>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thr: 0.5,
            num_thresholds: 1000,
            subsets: Difficulty::ALL.iter().map(|d| (*d, None)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WiderFaceReport {
    pub easy: f64,
    pub medium: f64,
    pub hard: f64,
    pub curves: BTreeMap<Difficulty, PrCurve>,
}

impl WiderFaceReport {
    pub fn ap(&self, d: Difficulty) -> f64 {
        match d {
            Difficulty::Easy => self.easy,
            Difficulty::Medium => self.medium,
            Difficulty::Hard => self.hard,
        }
    }

    /// `subset,threshold,recall,precision` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,threshold,recall,precision\n");
        for (d, c) in &self.curves {
            for p in &c.points {
                let _ = writeln!(out, "{},{},{},{}", d.as_str(), p.threshold, p.recall, p.precision);
            }
        }
        out
    }
}

/// Image identity used to pair predictions with ground truth: the file name
/// without directories or extension.
pub fn image_key(path: &str) -> String {
    let name = path.rsplit(['/', '\\']).next().unwrap_or(path);
    match name.rsplit_once('.') {
        Some((stem, ext)) if !stem.is_empty() && !ext.contains(' ') => stem.to_string(),
        _ => name.to_string(),
    }
}

/// Evaluates predictions keyed by [`image_key`] against ground truth.
pub fn evaluate_widerface(
    preds: &BTreeMap<String, Vec<ScoredBox>>,
    gt: &Annotations,
    cfg: &EvalConfig,
) -> Result<WiderFaceReport> {
    let gt_by_key: BTreeMap<String, (&String, &Vec<_>)> =
        gt.iter().map(|(path, faces)| (image_key(path), (path, faces))).collect();
    if let Some(k) = preds.keys().find(|k| !gt_by_key.contains_key(&image_key(k))) {
        return Err(Error::Eval(format!("no ground truth for predicted image `{k}`")));
    }
    let preds: BTreeMap<String, &Vec<ScoredBox>> = preds.iter().map(|(k, v)| (image_key(k), v)).collect();
    let mut aps = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for d in Difficulty::ALL {
        let subset = cfg.subsets.get(&d).and_then(|s| s.as_ref());
        let mut flagged = Vec::new();
        let mut total = 0;
        for (key, (path, faces)) in &gt_by_key {
            let included = |i: usize| match subset {
                None => true,
                Some(s) => s
                    .get(*path)
                    .or_else(|| s.get(key))
                    .is_some_and(|set| set.contains(&i)),
            };
            let gts: Vec<GtBox> = faces
                .iter()
                .enumerate()
                .map(|(i, f)| GtBox {
                    bbox: f.corners(),
                    ignore: !included(i),
                })
                .collect();
            total += gts.iter().filter(|g| !g.ignore).count();
            if let Some(p) = preds.get(key) {
                let flags = match_image(p, &gts, cfg.iou_thr);
                flagged.extend(p.iter().zip(flags).map(|(b, f)| (b.score, f)));
            }
        }
        let curve = if total == 0 && ranked(&flagged).is_empty() {
            PrCurve::default()
        } else if total == 0 {
            return Err(Error::Eval(format!("{} subset has no ground-truth faces", d.as_str())));
        } else {
            pr_curve(&flagged, total, cfg.num_thresholds)?
        };
        aps.insert(d, average_precision(&curve));
        curves.insert(d, curve);
    }
    Ok(WiderFaceReport {
        easy: aps[&Difficulty::Easy],
        medium: aps[&Difficulty::Medium],
        hard: aps[&Difficulty::Hard],
        curves,
    })
}

/// One image in submission layout: name, count, then `x y w h score` lines.
pub fn parse_prediction_file(text: &str) -> Result<(String, Vec<ScoredBox>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, name) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty prediction file".into(),
    })?;
    if name.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "missing image name".into(),
        });
    }
    let (cl, count_text) = lines.next().ok_or(Error::Parse {
        line: 2,
        msg: "missing detection count".into(),
    })?;
    let count: usize = count_text.parse().map_err(|_| Error::Parse {
        line: cl,
        msg: format!("malformed detection count `{count_text}`"),
    })?;
    let mut boxes = Vec::with_capacity(count);
    for (line, text) in lines.filter(|(_, l)| !l.is_empty()) {
        let v: Vec<f32> = text
            .split_whitespace()
            .map(|t| t.parse::<f32>().ok().filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Parse {
                line,
                msg: "non-numeric field".into(),
            })?;
        if v.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected `x y w h score`, found {} fields", v.len()),
            });
        }
        boxes.push(ScoredBox {
            bbox: [v[0], v[1], v[0] + v[2], v[1] + v[3]],
            score: v[4],
        });
    }
    if boxes.len() != count {
        return Err(Error::Parse {
            line: cl,
            msg: format!("declared {count} detections, found {}", boxes.len()),
        });
    }
    Ok((name.to_string(), boxes))
}

pub fn format_prediction_file(name: &str, boxes: &[ScoredBox]) -> String {
    let mut out = format!("{name}\n{}\n", boxes.len());
    for b in boxes {
        let [x1, y1, x2, y2] = b.bbox;
        let _ = writeln!(out, "{} {} {} {} {}", x1, y1, x2 - x1, y2 - y1, b.score);
    }
    out
}

/// Reads every `*.txt` below `dir`, keyed by [`image_key`] of the name line.
pub fn read_prediction_dir(dir: &Path) -> Result<BTreeMap<String, Vec<ScoredBox>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&d)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "txt") {
                let text = std::fs::read_to_string(&path)?;
                let (name, boxes) = parse_prediction_file(&text).map_err(|err| match err {
                    Error::Parse { line, msg } => Error::Eval(format!("{}:{line}: {msg}", path.display())),
                    other => other,
                })?;
                if out.insert(image_key(&name), boxes).is_some() {
                    return Err(Error::Eval(format!("{}: duplicate image `{name}`", path.display())));
                }
            }
        }
    }
    Ok(out)
}

/// Subset list: one line per image, `<image> <face index> ...` with 0-based
/// indices into that image's ground-truth faces.
pub fn parse_subset_list(text: &str) -> Result<SubsetList> {
    let mut out = SubsetList::new();
    for (i, l) in text.lines().enumerate() {
        let mut tok = l.split_whitespace();
        let Some(image) = tok.next() else { continue };
        let set = out.entry(image.to_string()).or_default();
        for t in tok {
            set.insert(t.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("`{t}` is not a face index"),
            })?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use MatchFlag::*;

    fn sb(x: f32, score: f32) -> ScoredBox {
        ScoredBox {
            bbox: [x, 0.0, x + 10.0, 10.0],
            score,
        }
    }

    fn gt(x: f32) -> GtBox {
        GtBox {
            bbox: [x, 0.0, x + 10.0, 10.0],
            ignore: false,
        }
    }

    #[test]
    fn single_use_ground_truth() {
        assert_eq!(match_image(&[sb(0.5, 0.9)], &[gt(0.0)], 0.5), vec![Tp]);
        let flags = match_image(&[sb(0.5, 0.3), sb(0.0, 0.9)], &[gt(0.0)], 0.5);
        assert_eq!(flags, vec![Fp, Tp]);
    }

    #[test]
    fn ignored_faces_absorb() {
        let g = GtBox {
            ignore: true,
            ..gt(0.0)
        };
        assert_eq!(match_image(&[sb(0.0, 0.9), sb(0.0, 0.8)], &[g], 0.5), vec![Ignored, Fp]);
    }

    #[test]
    fn hand_curve_and_ap() {
        let flagged = vec![(0.9, Tp), (0.8, Fp), (0.7, Tp)];
        let c = pr_curve(&flagged, 2, 1000).unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(pts, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
        let ap = average_precision(&c);
        assert!((ap - 5.0 / 6.0).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn empty_and_undefined_curves() {
        assert_eq!(pr_curve(&[], 3, 10).unwrap(), PrCurve::default());
        assert_eq!(average_precision(&PrCurve::default()), 0.0);
        assert!(pr_curve(&[(0.5, Fp)], 0, 10).is_err());
    }

    #[test]
    fn threshold_subsampling_keeps_last_rank() {
        let flagged: Vec<_> = (0..10).map(|i| (1.0 - i as f32 * 0.05, Tp)).collect();
        let c = pr_curve(&flagged, 10, 3).unwrap();
        assert_eq!(c.points.len(), 3);
        assert_eq!(c.points[2].recall, 1.0);
    }

    #[test]
    fn tpr_hand_sequence() {
        let seq = vec![(0.9, Tp), (0.8, Fp), (0.7, Tp), (0.6, Fp)];
        assert_eq!(tpr_at_fp(&seq, 4, 1), 0.5);
        assert_eq!(tpr_at_fp(&seq, 4, 0), 0.25);
        assert_eq!(tpr_at_fp(&[(0.9, Tp), (0.5, Tp)], 4, 1000), 0.5);
    }

    #[test]
    fn prediction_file_round_trip() {
        let boxes = vec![
            ScoredBox {
                bbox: [1.0, 2.0, 11.0, 22.0],
                score: 0.75,
            },
            ScoredBox {
                bbox: [0.5, 0.25, 3.5, 4.25],
                score: 0.125,
            },
        ];
        let text = format_prediction_file("0_Parade_1", &boxes);
        let (name, back) = parse_prediction_file(&text).unwrap();
        assert_eq!(name, "0_Parade_1");
        assert_eq!(back, boxes);
        assert!(matches!(
            parse_prediction_file("a\n2\n1 2 3 4 0.5\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_prediction_file("a\n1\n1 2 x 4 0.5\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn keys_and_subset_lists() {
        assert_eq!(image_key("0--Parade/0_Parade_1.jpg"), "0_Parade_1");
        assert_eq!(image_key("0_Parade_1"), "0_Parade_1");
        let s = parse_subset_list("a.jpg 0 2\n\nb.jpg\n").unwrap();
        assert_eq!(s["a.jpg"], BTreeSet::from([0, 2]));
        assert!(s["b.jpg"].is_empty());
        assert!(parse_subset_list("a.jpg x\n").is_err());
    }
}
