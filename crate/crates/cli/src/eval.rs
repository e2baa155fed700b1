use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use yoloface::data::{load_rgb, parse_widerface};
use yoloface::eval::{
    evaluate_widerface, image_key, parse_subset_list, read_prediction_dir, Difficulty, EvalConfig, PrPoint,
    ScoredBox, WiderFaceReport,
};
use yoloface::head::PostprocessOpts;

use crate::args::EvalArgs;
use crate::detect::build_detector;
use crate::{CliError, CliResult};

#[derive(Serialize)]
pub struct EvalReport<'a> {
    pub easy: f64,
    pub medium: f64,
    pub hard: f64,
    pub pr_points: BTreeMap<Difficulty, &'a [PrPoint]>,
}

pub fn report_json(r: &WiderFaceReport) -> CliResult<String> {
    let report = EvalReport {
        easy: r.easy,
        medium: r.medium,
        hard: r.hard,
        pr_points: r.curves.iter().map(|(d, c)| (*d, c.points.as_slice())).collect(),
    };
    Ok(serde_json::to_string(&report)? + "\n")
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::from(e).at(path))
}

pub fn run(args: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    if args.pred.is_none() && args.images.is_none() {
        return Err(CliError::usage("eval needs --pred <dir> or --images <root> with --config"));
    }
    let gt = parse_widerface(&read(&args.gt)?).map_err(|e| CliError::from(e).at(&args.gt))?;
    let mut cfg = EvalConfig::default();
    for (d, path) in [
        (Difficulty::Easy, &args.easy),
        (Difficulty::Medium, &args.medium),
        (Difficulty::Hard, &args.hard),
    ] {
        if let Some(p) = path {
            let list = parse_subset_list(&read(p)?).map_err(|e| CliError::from(e).at(p))?;
            cfg.subsets.insert(d, Some(list));
        }
    }

    let preds = match (&args.pred, &args.images) {
        (Some(dir), _) => read_prediction_dir(dir)?,
        (None, Some(root)) => {
            let opts = PostprocessOpts {
                conf_thr: args.conf,
                iou_thr: args.iou,
                ..PostprocessOpts::eval()
            };
            let config = args.config.as_deref().expect("clap requires --config with --images");
            let detector = build_detector(config, args.weights.as_deref(), args.seed, args.size, opts)?;
            let mut preds = BTreeMap::new();
            for name in gt.keys() {
                let path = root.join(name);
                let Ok(img) = load_rgb(&path) else {
                    writeln!(err, "warning: skipping unreadable image {}", path.display())?;
                    continue;
                };
                let boxes: Vec<ScoredBox> = detector.detect(&img)?.iter().map(ScoredBox::from).collect();
                preds.insert(image_key(name), boxes);
            }
            preds
        }
        (None, None) => unreachable!(),
    };

    let report = evaluate_widerface(&preds, &gt, &cfg)?;
    if let Some(p) = &args.csv {
        std::fs::write(p, report.to_csv()).map_err(|e| CliError::from(e).at(p))?;
    }
    crate::emit(args.output.as_deref(), out, &report_json(&report)?)
}
