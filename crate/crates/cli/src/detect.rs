use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::Serialize;
use yoloface::data::{apply_letterbox, image_to_tensor, letterbox, load_rgb, DEFAULT_PAD_VALUE};
use yoloface::eval::{format_prediction_file, image_key, ScoredBox};
use yoloface::head::{postprocess, Detection, PostprocessOpts};
use yoloface::model::Model;

use crate::args::{DetectArgs, DetectFormat};
use crate::{draw, input_size, load_config, load_model, CliError, CliResult};

pub struct Detector {
    pub model: Model,
    pub opts: PostprocessOpts,
    pub size: usize,
}

impl Detector {
    /// Letterbox, forward, decode, NMS; boxes in source-image pixels.
    pub fn detect(&self, img: &RgbImage) -> yoloface::Result<Vec<Detection>> {
        let stride = self.model.config().max_stride();
        let t = letterbox(img.width() as usize, img.height() as usize, self.size, stride)?;
        let x = image_to_tensor(&apply_letterbox(img, &t, DEFAULT_PAD_VALUE));
        let levels = self.model.forward(&x)?;
        postprocess(&levels, 0, self.model.anchors(), &self.opts, &t)
    }
}

fn check_thresholds(conf: f64, iou: f32) -> CliResult<()> {
    if !(0.0..=1.0).contains(&conf) || !(0.0..=1.0).contains(&iou) {
        return Err(CliError::usage(format!("--conf and --iou must lie in [0, 1], got {conf} and {iou}")));
    }
    Ok(())
}

pub fn build_detector(
    config: &str,
    weights: Option<&Path>,
    seed: u64,
    size: Option<usize>,
    opts: PostprocessOpts,
) -> CliResult<Detector> {
    check_thresholds(opts.conf_thr, opts.iou_thr)?;
    let cfg = load_config(config)?;
    let size = input_size(&cfg, size)?;
    let model = load_model(&cfg, weights, seed)?;
    Ok(Detector {
        opts: PostprocessOpts {
            score_mode: cfg.score_mode,
            num_landmarks: cfg.num_landmarks,
            ..opts
        },
        model,
        size,
    })
}

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

/// Files as given; directories expanded recursively to image files in
/// path order.
pub fn expand_inputs(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found = Vec::new();
            let mut stack = vec![p.clone()];
            while let Some(d) = stack.pop() {
                for e in std::fs::read_dir(&d).map_err(|e| CliError::from(e).at(&d))? {
                    let path = e?.path();
                    if path.is_dir() {
                        stack.push(path);
                    } else if path
                        .extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                    {
                        found.push(path);
                    }
                }
            }
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct FaceRecord {
    #[serde(rename = "box")]
    bbox: [f32; 4],
    conf: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    landmarks: Option<[[f32; 2]; 5]>,
}

#[derive(Serialize)]
struct ImageRecord<'a> {
    image: &'a str,
    faces: Vec<FaceRecord>,
}

pub fn json_record(image: &str, dets: &[Detection]) -> CliResult<String> {
    let faces = dets
        .iter()
        .map(|d| FaceRecord {
            bbox: d.bbox,
            conf: d.score,
            landmarks: d.landmark_valid.then_some(d.landmarks),
        })
        .collect();
    Ok(serde_json::to_string(&ImageRecord { image, faces })?)
}

pub fn run(args: &DetectArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    if args.format == DetectFormat::Widerface && args.output.is_none() {
        return Err(CliError::usage("--format widerface needs --output <directory>"));
    }
    let m = &args.model;
    let opts = PostprocessOpts {
        conf_thr: args.conf,
        iou_thr: args.iou,
        ..PostprocessOpts::detect()
    };
    let detector = build_detector(&m.config, m.weights.as_deref(), m.seed, m.size, opts)?;
    if m.weights.is_none() {
        writeln!(err, "warning: no --weights given, using seeded random weights (seed {})", m.seed)?;
    }
    let paths = expand_inputs(&args.input)?;
    if paths.is_empty() {
        return Err(CliError::data("no input images found"));
    }
    if let Some(d) = &args.draw {
        std::fs::create_dir_all(d).map_err(|e| CliError::from(e).at(d))?;
    }

    // Unreadable images are skipped; failures inside the model are fatal.
    let results: Vec<CliResult<Option<Vec<Detection>>>> = paths
        .par_iter()
        .map(|p| {
            let img = match load_rgb(p) {
                Ok(img) => img,
                Err(_) => return Ok(None),
            };
            let dets = detector.detect(&img)?;
            if let Some(dir) = &args.draw {
                let mut canvas = img;
                draw::detections(&mut canvas, &dets);
                let target = dir.join(format!("{}.png", image_key(&p.to_string_lossy())));
                canvas.save(&target).map_err(|e| CliError::data(e.to_string()).at(&target))?;
            }
            Ok(Some(dets))
        })
        .collect();

    let mut json = String::new();
    let mut written = 0;
    for (p, r) in paths.iter().zip(results) {
        let Some(dets) = r? else {
            writeln!(err, "warning: skipping unreadable image {}", p.display())?;
            continue;
        };
        written += 1;
        let name = p.to_string_lossy();
        match args.format {
            DetectFormat::Json => {
                json.push_str(&json_record(&name, &dets)?);
                json.push('\n');
            }
            DetectFormat::Widerface => {
                let root = args.output.as_deref().expect("checked above");
                let event = p.parent().and_then(|d| d.file_name()).unwrap_or_default();
                let dir = root.join(event);
                std::fs::create_dir_all(&dir).map_err(|e| CliError::from(e).at(&dir))?;
                let key = image_key(&name);
                let boxes: Vec<ScoredBox> = dets.iter().map(ScoredBox::from).collect();
                let file = dir.join(format!("{key}.txt"));
                std::fs::write(&file, format_prediction_file(&key, &boxes)).map_err(|e| CliError::from(e).at(&file))?;
            }
        }
    }
    if written == 0 {
        return Err(CliError::data("none of the input images could be read"));
    }
    if args.format == DetectFormat::Json {
        crate::emit(args.output.as_deref(), out, &json)?;
    }
    Ok(())
}
