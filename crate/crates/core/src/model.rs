//! Detector assembly: configuration, depth/width scaling, the layer graph
//! (backbone → PAN neck → per-level heads), forward pass and accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{meta, ArchiveTensor, TensorArchive};
use crate::blocks::{count_params, BlockKind, BlockSpec, ConvOpts, ConvUnit, Module, ParamRef, Sequential};
use crate::error::{Error, Result};
use crate::head::{channels_per_anchor, AnchorSet, ScoreMode, NUM_LANDMARKS};
use crate::ops;
use crate::params::{ArchiveParams, ParamSource, SeededParams, ShapeOnly, RNG_NAME};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "csp")]
    Csp,
    #[serde(rename = "shufflev2")]
    ShuffleV2,
    #[serde(rename = "shufflev2-0.5")]
    ShuffleV2Half,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Csp => "csp",
            Backbone::ShuffleV2 => "shufflev2",
            Backbone::ShuffleV2Half => "shufflev2-0.5",
        }
    }
}

fn default_input_size() -> usize {
    640
}

fn default_landmarks() -> usize {
    NUM_LANDMARKS
}

fn default_spp() -> Vec<usize> {
    vec![3, 5, 7]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub depth_multiple: f64,
    pub width_multiple: f64,
    #[serde(default)]
    pub use_p6: bool,
    #[serde(default = "default_landmarks")]
    pub num_landmarks: usize,
    /// `None` selects [`AnchorSet::geometric`] for the level count.
    #[serde(default)]
    pub anchors: Option<AnchorSet>,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_spp")]
    pub spp_kernels: Vec<usize>,
    /// Stem block (true) or the Focus layer (false); CSP backbone only.
    #[serde(default = "default_true")]
    pub use_stem: bool,
    #[serde(default)]
    pub score_mode: ScoreMode,
}

/// Named configurations with their published parameter counts.
pub const PRESETS: &[(&str, f64)] = &[
    ("yolov5n-0.5", 0.447),
    ("yolov5n", 1.726),
    ("yolov5s", 7.075),
    ("yolov5s6", 12.386),
    ("yolov5m", 21.063),
    ("yolov5m6", 35.485),
    ("yolov5l", 46.627),
    ("yolov5l6", 76.674),
    ("yolov5x6", 141.158),
    ("yolov5s-focus", 7.091),
];

impl ModelConfig {
    pub fn csp(depth_multiple: f64, width_multiple: f64, use_p6: bool) -> Self {
        ModelConfig {
            backbone: Backbone::Csp,
            depth_multiple,
            width_multiple,
            use_p6,
            num_landmarks: NUM_LANDMARKS,
            anchors: None,
            input_size: 640,
            spp_kernels: default_spp(),
            use_stem: true,
            score_mode: ScoreMode::Conf,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        let shuffle = |backbone, w| ModelConfig {
            backbone,
            width_multiple: w,
            ..Self::csp(1.0, 1.0, false)
        };
        Some(match name {
            "yolov5n-0.5" => shuffle(Backbone::ShuffleV2Half, 0.5),
            "yolov5n" => shuffle(Backbone::ShuffleV2, 1.0),
            "yolov5s" => Self::csp(0.33, 0.50, false),
            "yolov5s6" => Self::csp(0.33, 0.50, true),
            "yolov5m" => Self::csp(0.67, 0.75, false),
            "yolov5m6" => Self::csp(0.67, 0.75, true),
            "yolov5l" => Self::csp(1.0, 1.0, false),
            "yolov5l6" => Self::csp(1.0, 1.0, true),
            "yolov5x6" => Self::csp(1.33, 1.25, true),
            "yolov5s-focus" => ModelConfig {
                use_stem: false,
                ..Self::csp(0.33, 0.50, false)
            },
            _ => return None,
        })
    }

    /// The preset this configuration is identical to, if any.
    pub fn preset_name(&self) -> Option<&'static str> {
        PRESETS
            .iter()
            .map(|(n, _)| *n)
            .find(|n| Self::preset(n).is_some_and(|p| p.canonical() == self.canonical()))
    }

    pub fn num_levels(&self) -> usize {
        if self.use_p6 {
            4
        } else {
            3
        }
    }

    pub fn max_stride(&self) -> usize {
        8 << (self.num_levels() - 1)
    }

    pub fn anchor_set(&self) -> AnchorSet {
        self.anchors
            .clone()
            .unwrap_or_else(|| AnchorSet::geometric(self.num_levels()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.depth_multiple > 0.0 && self.depth_multiple.is_finite())
            || !(self.width_multiple > 0.0 && self.width_multiple.is_finite())
        {
            return bad("depth and width multiples must be positive".into());
        }
        if self.num_landmarks != 0 && self.num_landmarks != NUM_LANDMARKS {
            return bad(format!("num_landmarks must be 0 or {NUM_LANDMARKS}"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.max_stride()) {
            return bad(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                self.max_stride()
            ));
        }
        if self.spp_kernels.is_empty() || self.spp_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("spp_kernels must be odd, got {:?}", self.spp_kernels));
        }
        if self.backbone != Backbone::Csp && (self.use_p6 || !self.use_stem) {
            return bad("P6 output and the Focus layer apply to the CSP backbone only".into());
        }
        let anchors = self.anchor_set();
        anchors.validate()?;
        if anchors.levels.len() != self.num_levels() {
            return bad(format!(
                "{} anchor levels for {} output levels",
                anchors.levels.len(),
                self.num_levels()
            ));
        }
        for (i, level) in anchors.levels.iter().enumerate() {
            if level.stride as usize != 8 << i {
                return bad(format!("anchor level {i} has stride {}, expected {}", level.stride, 8 << i));
            }
        }
        Ok(())
    }

    /// Canonical form with defaults resolved.
    fn canonical(&self) -> ModelConfig {
        ModelConfig {
            anchors: Some(self.anchor_set()),
            ..self.clone()
        }
    }

    /// SHA-256 over the canonical JSON encoding, hex.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(&self.canonical()).expect("config serializes");
        Sha256::digest(&json).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ModelConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// Half-away-from-zero rounding.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// `round(base·W)` raised to a multiple of 8, at least 8.
pub fn scale_channels(base: usize, w: f64) -> usize {
    let v = round_half_away(base as f64 * w) as usize;
    v.div_ceil(8).max(1) * 8
}

/// `max(1, round(base_n·D))`.
pub fn scale_depth(base_n: usize, d: f64) -> usize {
    (round_half_away(base_n as f64 * d) as usize).max(1)
}

pub enum Weights<'a> {
    Seeded(u64),
    Archive(&'a TensorArchive),
    /// Structure only: counts and shapes work, `forward` and `to_archive`
    /// do not.
    ShapeOnly,
}

enum Op {
    Block(Box<dyn Module>),
    Upsample,
    Concat,
}

struct Node {
    op: Op,
    from: Vec<usize>,
    label: String,
}

/// Layer graph under construction. Every node's parameters live under
/// `model.{index}`.
struct Graph<'s> {
    nodes: Vec<Node>,
    channels: Vec<usize>,
    src: &'s mut dyn ParamSource,
}

impl Graph<'_> {
    fn prefix(&self) -> String {
        format!("model.{}", self.nodes.len())
    }

    fn last(&self) -> usize {
        self.nodes.len() - 1
    }

    fn input_channels(&self, from: &[usize]) -> usize {
        match from {
            [] => 3,
            f => f.iter().map(|&i| self.channels[i]).sum(),
        }
    }

    fn push(&mut self, op: Op, from: Vec<usize>, cout: usize, label: String) -> usize {
        self.nodes.push(Node { op, from, label });
        self.channels.push(cout);
        self.last()
    }

    /// Adds `kind` reading from the previous node (or the image for the
    /// first node).
    fn block(&mut self, kind: BlockKind, cout: usize) -> Result<usize> {
        let from = if self.nodes.is_empty() { vec![] } else { vec![self.last()] };
        let spec = BlockSpec::new(kind, self.input_channels(&from), cout);
        let label = format!("{:?}", spec.kind);
        let m = spec.build(&self.prefix(), self.src)?;
        Ok(self.push(Op::Block(m), from, cout, label))
    }

    fn cbs(&mut self, cout: usize, k: usize, stride: usize) -> Result<usize> {
        self.block(BlockKind::Cbs { k, stride }, cout)
    }

    fn c3(&mut self, cout: usize, n: usize, shortcut: bool) -> Result<usize> {
        self.block(BlockKind::C3 { n, shortcut }, cout)
    }

    fn upsample(&mut self) -> usize {
        let c = self.channels[self.last()];
        self.push(Op::Upsample, vec![self.last()], c, "Upsample".into())
    }

    /// Concatenates the previous node with `other`.
    fn concat(&mut self, other: usize) -> usize {
        let from = vec![self.last(), other];
        let c = self.input_channels(&from);
        self.push(Op::Concat, from, c, "Concat".into())
    }

    /// `n` ShuffleNetV2 units as one node; repeated units are indexed
    /// `model.{i}.{j}`.
    fn shuffle(&mut self, cout: usize, stride: usize, n: usize) -> Result<usize> {
        if n == 1 {
            return self.block(BlockKind::ShuffleV2 { stride }, cout);
        }
        let from = vec![self.last()];
        let prefix = self.prefix();
        let mut cin = self.input_channels(&from);
        let mut units: Vec<Box<dyn Module>> = Vec::with_capacity(n);
        for j in 0..n {
            let spec = BlockSpec::new(BlockKind::ShuffleV2 { stride }, cin, cout);
            units.push(spec.build(&format!("{prefix}.{j}"), self.src)?);
            cin = cout;
        }
        Ok(self.push(
            Op::Block(Box::new(Sequential(units))),
            from,
            cout,
            format!("ShuffleV2 {{ stride: {stride} }} x{n}"),
        ))
    }
}

/// Per-level 1×1 output convolutions.
struct Detect {
    from: Vec<usize>,
    convs: Vec<ConvUnit>,
}

pub struct StageInfo {
    pub index: usize,
    pub from: Vec<usize>,
    pub label: String,
    pub out_shape: Shape,
    pub params: usize,
    pub flops: u64,
}

pub struct Model {
    config: ModelConfig,
    anchors: AnchorSet,
    nodes: Vec<Node>,
    detect: Detect,
    bn_eps: f32,
    seed: Option<u64>,
    materialized: bool,
    /// Nodes whose output is read by something other than the next node.
    keep: Vec<bool>,
}

impl Model {
    pub fn build(config: &ModelConfig, weights: Weights<'_>) -> Result<Model> {
        config.validate()?;
        match weights {
            Weights::Seeded(seed) => {
                let mut src = SeededParams::new(seed);
                let mut m = Self::assemble(config, &mut src)?;
                m.seed = Some(seed);
                Ok(m)
            }
            Weights::ShapeOnly => Self::assemble(config, &mut ShapeOnly),
            Weights::Archive(archive) => {
                let expected = config.config_hash();
                if let Some(found) = archive.metadata.get(meta::CONFIG_HASH) {
                    if *found != expected {
                        return Err(Error::ConfigHash {
                            archive: found.clone(),
                            config: expected,
                        });
                    }
                }
                let mut src = ArchiveParams::new(archive)?;
                let m = Self::assemble(config, &mut src)?;
                src.finish()?;
                Ok(m)
            }
        }
    }

    fn assemble(config: &ModelConfig, src: &mut dyn ParamSource) -> Result<Model> {
        let bn_eps = src.bn_eps();
        let materialized = src.materialize();
        let mut g = Graph {
            nodes: Vec::new(),
            channels: Vec::new(),
            src,
        };
        let levels = match config.backbone {
            Backbone::Csp => build_csp(&mut g, config)?,
            Backbone::ShuffleV2 | Backbone::ShuffleV2Half => build_shuffle(&mut g, config)?,
        };
        let anchors = config.anchor_set();
        let out = anchors.num_anchors() * channels_per_anchor(config.num_landmarks);
        let det_index = g.nodes.len();
        let convs = levels
            .iter()
            .enumerate()
            .map(|(l, &i)| {
                ConvUnit::new(
                    &format!("model.{det_index}.m.{l}"),
                    g.channels[i],
                    out,
                    ConvOpts::head(),
                    g.src,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut keep = vec![false; g.nodes.len()];
        for (i, node) in g.nodes.iter().enumerate() {
            for &f in &node.from {
                if f + 1 != i {
                    keep[f] = true;
                }
            }
        }
        for &l in &levels {
            keep[l] = true;
        }
        Ok(Model {
            config: config.clone(),
            anchors,
            nodes: g.nodes,
            detect: Detect { from: levels, convs },
            bn_eps,
            seed: None,
            materialized,
            keep,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn bn_eps(&self) -> f32 {
        self.bn_eps
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        let m = self.config.max_stride();
        if s.c != 3 || !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) {
            return Err(Error::shape(
                "forward",
                format!("input {s} must have 3 channels and spatial dims divisible by {m}"),
            ));
        }
        Ok(())
    }

    /// Raw (pre-sigmoid) level maps, finest first.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x.shape())?;
        let mut saved: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut prev: Option<Tensor> = None;
        for (i, node) in self.nodes.iter().enumerate() {
            let input = |j: usize| -> &Tensor {
                if j + 1 == i {
                    prev.as_ref().expect("previous output")
                } else {
                    saved[j].as_ref().expect("saved output")
                }
            };
            let y = match &node.op {
                Op::Block(m) => match node.from.first() {
                    None => m.forward(x)?,
                    Some(&j) => m.forward(input(j))?,
                },
                Op::Upsample => ops::upsample_nearest2x(input(node.from[0]))?,
                Op::Concat => {
                    let parts: Vec<&Tensor> = node.from.iter().map(|&j| input(j)).collect();
                    ops::concat_channels(&parts)?
                }
            };
            if self.keep[i] {
                saved[i] = Some(y.clone());
            }
            prev = Some(y);
        }
        self.detect
            .from
            .iter()
            .zip(&self.detect.convs)
            .map(|(&i, conv)| conv.forward(saved[i].as_ref().expect("level output")))
            .collect()
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        for node in &self.nodes {
            if let Op::Block(m) = &node.op {
                m.visit_params(f);
            }
        }
        for c in &self.detect.convs {
            c.visit_params(f);
        }
    }

    /// Trainable parameters (BN running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.stages().iter().map(|s| s.params).sum()
    }

    /// Flops for one image at `input_size`: 2 per multiply-accumulate, one
    /// per element for each BN and activation, one per compared element for
    /// pooling.
    pub fn count_flops(&self, input_size: usize) -> Result<u64> {
        Ok(self
            .stages_at(Shape::new(1, 3, input_size, input_size))?
            .iter()
            .map(|s| s.flops)
            .sum())
    }

    pub fn stages(&self) -> Vec<StageInfo> {
        let n = self.config.input_size;
        self.stages_at(Shape::new(1, 3, n, n)).expect("validated input size")
    }

    /// One row per graph node plus one per output conv.
    pub fn stages_at(&self, input: Shape) -> Result<Vec<StageInfo>> {
        self.check_input(input)?;
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        let mut rows = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<Shape> = match node.from.as_slice() {
                [] => vec![input],
                f => f.iter().map(|&j| shapes[j]).collect(),
            };
            let (out, params, flops) = match &node.op {
                Op::Block(m) => (m.out_shape(ins[0])?, count_params(m.as_ref()), m.flops(ins[0])),
                Op::Upsample => (Shape::new(ins[0].n, ins[0].c, ins[0].h * 2, ins[0].w * 2), 0, 0),
                Op::Concat => (ins[0].with_c(ins.iter().map(|s| s.c).sum()), 0, 0),
            };
            shapes.push(out);
            rows.push(StageInfo {
                index: i,
                from: node.from.clone(),
                label: node.label.clone(),
                out_shape: out,
                params,
                flops,
            });
        }
        for (l, (&i, conv)) in self.detect.from.iter().zip(&self.detect.convs).enumerate() {
            rows.push(StageInfo {
                index: self.nodes.len(),
                from: vec![i],
                label: format!("Detect level {l}"),
                out_shape: conv.out_shape(shapes[i])?,
                params: count_params(conv),
                flops: conv.flops(shapes[i]),
            });
        }
        Ok(rows)
    }

    /// Every parameter and running statistic under its hierarchical name,
    /// with the reserved metadata filled in.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        if !self.materialized {
            return Err(Error::Config("model was built for accounting only and has no weights".into()));
        }
        let mut a = TensorArchive::new();
        self.visit_params(&mut |p| {
            a.insert(p.name, ArchiveTensor::new(p.shape.to_vec(), p.data.to_vec()));
        });
        a.metadata.insert(meta::CONFIG_HASH.into(), self.config.config_hash());
        a.metadata.insert(
            meta::ANCHORS.into(),
            serde_json::to_string(&self.anchors).expect("anchors serialize"),
        );
        a.metadata.insert(meta::BN_EPS.into(), self.bn_eps.to_string());
        a.metadata
            .insert(meta::SCORE_MODE.into(), self.config.score_mode.as_str().into());
        if let Some(seed) = self.seed {
            a.metadata.insert("rng".into(), RNG_NAME.into());
            a.metadata.insert("seed".into(), seed.to_string());
        }
        Ok(a)
    }

    /// Parameter names in build order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.to_string()));
        names
    }
}

/// Deterministic weights for `config`.
pub fn seeded_init(config: &ModelConfig, seed: u64) -> Result<TensorArchive> {
    Model::build(config, Weights::Seeded(seed))?.to_archive()
}

/// Backbone, SPP and PAN neck for the CSP family; returns the level nodes.
fn build_csp(g: &mut Graph<'_>, cfg: &ModelConfig) -> Result<Vec<usize>> {
    let ch = |c| scale_channels(c, cfg.width_multiple);
    let n = |r| scale_depth(r, cfg.depth_multiple);
    if cfg.use_stem {
        g.block(BlockKind::Stem, ch(64))?;
    } else {
        g.block(BlockKind::Focus { k: 3 }, ch(64))?;
        g.cbs(ch(128), 3, 2)?;
    }
    g.c3(ch(128), n(3), true)?;
    g.cbs(ch(256), 3, 2)?;
    let p3 = g.c3(ch(256), n(9), true)?;
    g.cbs(ch(512), 3, 2)?;
    let p4 = g.c3(ch(512), n(9), true)?;
    let spp = BlockKind::Spp {
        kernels: cfg.spp_kernels.clone(),
    };
    if !cfg.use_p6 {
        g.cbs(ch(1024), 3, 2)?;
        g.block(spp, ch(1024))?;
        g.c3(ch(1024), n(3), false)?;

        let lat5 = g.cbs(ch(512), 1, 1)?;
        g.upsample();
        g.concat(p4);
        g.c3(ch(512), n(3), false)?;
        let lat4 = g.cbs(ch(256), 1, 1)?;
        g.upsample();
        g.concat(p3);
        let out3 = g.c3(ch(256), n(3), false)?;
        g.cbs(ch(256), 3, 2)?;
        g.concat(lat4);
        let out4 = g.c3(ch(512), n(3), false)?;
        g.cbs(ch(512), 3, 2)?;
        g.concat(lat5);
        let out5 = g.c3(ch(1024), n(3), false)?;
        Ok(vec![out3, out4, out5])
    } else {
        g.cbs(ch(768), 3, 2)?;
        let p5 = g.c3(ch(768), n(3), true)?;
        g.cbs(ch(1024), 3, 2)?;
        g.block(spp, ch(1024))?;
        g.c3(ch(1024), n(3), false)?;

        let lat6 = g.cbs(ch(768), 1, 1)?;
        g.upsample();
        g.concat(p5);
        g.c3(ch(768), n(3), false)?;
        let lat5 = g.cbs(ch(512), 1, 1)?;
        g.upsample();
        g.concat(p4);
        g.c3(ch(512), n(3), false)?;
        let lat4 = g.cbs(ch(256), 1, 1)?;
        g.upsample();
        g.concat(p3);
        let out3 = g.c3(ch(256), n(3), false)?;
        g.cbs(ch(256), 3, 2)?;
        g.concat(lat4);
        let out4 = g.c3(ch(512), n(3), false)?;
        g.cbs(ch(512), 3, 2)?;
        g.concat(lat5);
        let out5 = g.c3(ch(768), n(3), false)?;
        g.cbs(ch(768), 3, 2)?;
        g.concat(lat6);
        let out6 = g.c3(ch(1024), n(3), false)?;
        Ok(vec![out3, out4, out5, out6])
    }
}

/// ShuffleNetV2 backbone (stem 32, stages of 4/8/4 units) with a
/// single-width PAN neck.
fn build_shuffle(g: &mut Graph<'_>, cfg: &ModelConfig) -> Result<Vec<usize>> {
    let stages: [usize; 3] = match cfg.backbone {
        Backbone::ShuffleV2Half => [64, 128, 256],
        _ => [128, 256, 512],
    };
    let neck = scale_channels(128, cfg.width_multiple);
    let n = scale_depth(1, cfg.depth_multiple);
    g.block(BlockKind::ConvPoolStem, 32)?;
    g.shuffle(stages[0], 2, 1)?;
    let c3 = g.shuffle(stages[0], 1, 3)?;
    g.shuffle(stages[1], 2, 1)?;
    let c4 = g.shuffle(stages[1], 1, 7)?;
    g.shuffle(stages[2], 2, 1)?;
    g.shuffle(stages[2], 1, 3)?;

    let lat5 = g.cbs(neck, 1, 1)?;
    g.upsample();
    g.concat(c4);
    g.c3(neck, n, false)?;
    let lat4 = g.cbs(neck, 1, 1)?;
    g.upsample();
    g.concat(c3);
    let out3 = g.c3(neck, n, false)?;
    g.cbs(neck, 3, 2)?;
    g.concat(lat4);
    let out4 = g.c3(neck, n, false)?;
    g.cbs(neck, 3, 2)?;
    g.concat(lat5);
    let out5 = g.c3(neck, n, false)?;
    Ok(vec![out3, out4, out5])
}
