use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;
use yoloface::model::{Model, ModelConfig, Weights, PRESETS};
use yoloface::tensor::Shape;

use crate::args::{InfoArgs, InfoFormat};
use crate::{input_size, load_config, CliResult};

/// Relative tolerance on the published parameter count.
pub fn tolerance(name: &str) -> f64 {
    if name == "yolov5s" {
        0.03
    } else {
        0.05
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Reconciliation {
    pub model: String,
    pub params: usize,
    pub target_m: f64,
    pub delta: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// At the preset's input size; report-only.
    pub flops: u64,
}

impl Reconciliation {
    pub fn line(&self) -> String {
        format!(
            "{:<14} params {:>8.3}M  target {:>8.3}M  delta {:>+6.2}%  tol ±{:.0}%  {}  flops {:>7.2}G",
            self.model,
            self.params as f64 / 1e6,
            self.target_m,
            100.0 * self.delta,
            100.0 * self.tolerance,
            if self.pass { "PASS" } else { "FAIL" },
            self.flops as f64 / 1e9,
        )
    }
}

fn reconcile_model(name: &str, target_m: f64, model: &Model) -> CliResult<Reconciliation> {
    let params = model.count_params();
    let delta = params as f64 / (target_m * 1e6) - 1.0;
    Ok(Reconciliation {
        model: name.to_string(),
        params,
        target_m,
        delta,
        tolerance: tolerance(name),
        pass: delta.abs() <= tolerance(name),
        flops: model.count_flops(model.config().input_size)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Direction {
    pub check: String,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconcileTable {
    pub rows: Vec<Reconciliation>,
    pub directions: Vec<Direction>,
}

impl ReconcileTable {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass) && self.directions.iter().all(|d| d.pass)
    }

    pub fn row(&self, name: &str) -> Option<&Reconciliation> {
        self.rows.iter().find(|r| r.model == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("parameter reconciliation (flops report-only)\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.line());
        }
        for d in &self.directions {
            let _ = writeln!(s, "{:<58} {}", d.check, if d.pass { "PASS" } else { "FAIL" });
        }
        s
    }
}

/// Every named model, counted without allocating weights.
pub fn reconcile_all() -> CliResult<ReconcileTable> {
    let mut rows = Vec::new();
    for (name, target) in PRESETS {
        let cfg = ModelConfig::preset(name).expect("listed preset");
        let model = Model::build(&cfg, Weights::ShapeOnly)?;
        rows.push(reconcile_model(name, *target, &model)?);
    }
    let get = |n: &str| rows.iter().find(|r| r.model == n).expect("listed preset");
    let lt = |a: &str, b: &str| Direction {
        check: format!("params {a} < {b}"),
        pass: get(a).params < get(b).params,
    };
    let directions = vec![
        lt("yolov5s", "yolov5s6"),
        lt("yolov5s", "yolov5m"),
        lt("yolov5m", "yolov5l"),
        lt("yolov5n", "yolov5s"),
        lt("yolov5s", "yolov5s-focus"),
        Direction {
            check: "flops yolov5s < yolov5s-focus".into(),
            pass: get("yolov5s").flops < get("yolov5s-focus").flops,
        },
    ];
    Ok(ReconcileTable { rows, directions })
}

#[derive(Clone, Debug, Serialize)]
pub struct StageRow {
    pub index: usize,
    pub from: Vec<usize>,
    pub label: String,
    pub out_shape: [usize; 4],
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    pub preset: Option<String>,
    pub input_size: usize,
    pub params: usize,
    pub flops: u64,
    pub stages: Vec<StageRow>,
    pub reconcile: Option<Reconciliation>,
}

pub fn model_info(cfg: &ModelConfig, size: usize) -> CliResult<ModelInfo> {
    let model = Model::build(cfg, Weights::ShapeOnly)?;
    let stages: Vec<StageRow> = model
        .stages_at(Shape::new(1, 3, size, size))?
        .into_iter()
        .map(|s| StageRow {
            index: s.index,
            from: s.from,
            label: s.label,
            out_shape: [s.out_shape.n, s.out_shape.c, s.out_shape.h, s.out_shape.w],
            params: s.params,
            flops: s.flops,
        })
        .collect();
    let preset = cfg.preset_name();
    let reconcile = match preset {
        Some(name) => {
            let target = PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).expect("listed preset");
            Some(reconcile_model(name, target, &model)?)
        }
        None => None,
    };
    Ok(ModelInfo {
        config: cfg.clone(),
        preset: preset.map(str::to_string),
        input_size: size,
        params: stages.iter().map(|s| s.params).sum(),
        flops: stages.iter().map(|s| s.flops).sum(),
        stages,
        reconcile,
    })
}

impl ModelInfo {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>3}  {:<10} {:<26} {:<20} {:>12} {:>14}",
            "#", "from", "module", "output", "params", "flops"
        );
        for r in &self.stages {
            let from = r.from.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",");
            let shape = format!("{}x{}x{}", r.out_shape[1], r.out_shape[2], r.out_shape[3]);
            let _ = writeln!(
                s,
                "{:>3}  {:<10} {:<26} {:<20} {:>12} {:>14}",
                r.index, from, r.label, shape, r.params, r.flops
            );
        }
        let _ = writeln!(
            s,
            "total: {} parameters ({:.3}M), {:.3} GFLOPs at {}x{}",
            self.params,
            self.params as f64 / 1e6,
            self.flops as f64 / 1e9,
            self.input_size,
            self.input_size
        );
        if let Some(r) = &self.reconcile {
            let _ = writeln!(s, "reconcile {}", r.line());
        }
        s
    }
}

pub fn run(args: &InfoArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut text = String::new();
    let mut json = serde_json::Map::new();
    if let Some(spec) = &args.config {
        let cfg = load_config(spec)?;
        let info = model_info(&cfg, input_size(&cfg, args.size)?)?;
        text.push_str(&info.to_text());
        json.insert("model".into(), serde_json::to_value(&info)?);
    }
    if args.reconcile {
        let table = reconcile_all()?;
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&table.to_text());
        json.insert("reconcile".into(), serde_json::to_value(&table)?);
    }
    let json = serde_json::to_string(&json)? + "\n";
    if let Some(p) = &args.output {
        std::fs::write(p, &json).map_err(|e| crate::CliError::from(e).at(p))?;
    }
    match args.format {
        InfoFormat::Text => out.write_all(text.as_bytes())?,
        InfoFormat::Json => out.write_all(json.as_bytes())?,
    }
    Ok(())
}
