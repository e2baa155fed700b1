//! Composite network blocks: CBS, Stem, Focus, Bottleneck, C3, SPP and the
//! ShuffleNetV2 unit, each built from the primitives in [`crate::ops`].
//!
//! Blocks own their (unfolded) parameters for export and a BN-folded copy of
//! every convolution for execution.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNorm, Conv2dParams};
use crate::params::{ParamKind, ParamSource};
use crate::tensor::{Shape, Tensor};

/// A named parameter handed to [`Module::visit_params`] callbacks.
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub data: &'a [f32],
    pub trainable: bool,
}

pub trait Module: Send + Sync {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    /// Output shape for `input`, without running the block.
    fn out_shape(&self, input: Shape) -> Result<Shape>;
    /// Floating-point operations for one forward pass over `input`.
    fn flops(&self, input: Shape) -> u64;
    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>));
}

struct NamedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
    trainable: bool,
}

fn fetch(
    src: &mut dyn ParamSource,
    store: &mut Vec<NamedParam>,
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
) -> Result<Vec<f32>> {
    let data = src.fetch(&name, &shape, kind)?;
    store.push(NamedParam {
        name,
        shape,
        data: data.clone(),
        trainable: kind.trainable(),
    });
    Ok(data)
}

/// Convolution with optional bias, optional batch norm and optional SiLU.
pub struct ConvUnit {
    params: Vec<NamedParam>,
    cin: usize,
    cout: usize,
    k: usize,
    conv: Conv2dParams,
    has_bn: bool,
    act: bool,
    wshape: Shape,
    /// BN-folded weight and bias; absent for shape-only builds.
    folded: Option<(Tensor, Vec<f32>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    pub bn: bool,
    pub bias: bool,
    pub act: bool,
}

impl ConvOpts {
    /// Conv → BN → SiLU with `pad = k / 2`.
    pub fn cbs(k: usize, stride: usize) -> Self {
        ConvOpts {
            k,
            stride,
            groups: 1,
            bn: true,
            bias: false,
            act: true,
        }
    }

    /// Conv → BN, no activation.
    pub fn conv_bn(k: usize, stride: usize, groups: usize) -> Self {
        ConvOpts {
            k,
            stride,
            groups,
            bn: true,
            bias: false,
            act: false,
        }
    }

    /// Plain 1×1 conv with bias (detection head).
    pub fn head() -> Self {
        ConvOpts {
            k: 1,
            stride: 1,
            groups: 1,
            bn: false,
            bias: true,
            act: false,
        }
    }
}

impl ConvUnit {
    pub fn new(
        prefix: &str,
        cin: usize,
        cout: usize,
        opts: ConvOpts,
        src: &mut dyn ParamSource,
    ) -> Result<Self> {
        let ConvOpts {
            k,
            stride,
            groups,
            bn,
            bias,
            act,
        } = opts;
        if cin == 0 || cout == 0 || k == 0 || stride == 0 || groups == 0 {
            return Err(Error::Config(format!(
                "{prefix}: conv needs positive channels, kernel, stride and groups"
            )));
        }
        if !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{prefix}: channels {cin}->{cout} not divisible by groups {groups}"
            )));
        }
        let mut params = Vec::new();
        let fan_in = cin / groups * k * k;
        let (wname, bname) = if bn {
            (format!("{prefix}.conv.weight"), String::new())
        } else {
            (format!("{prefix}.weight"), format!("{prefix}.bias"))
        };
        let wshape = vec![cout, cin / groups, k, k];
        let materialize = src.materialize();
        let w = fetch(src, &mut params, wname, wshape, ParamKind::ConvWeight { fan_in })?;
        let conv_bias = if bias {
            Some(fetch(src, &mut params, bname, vec![cout], ParamKind::ConvBias)?)
        } else {
            None
        };
        let norm = if bn {
            let eps = src.bn_eps();
            let mut get = |suffix: &str, kind| {
                fetch(src, &mut params, format!("{prefix}.bn.{suffix}"), vec![cout], kind)
            };
            Some(BatchNorm {
                gamma: get("weight", ParamKind::BnGamma)?,
                beta: get("bias", ParamKind::BnBeta)?,
                mean: get("running_mean", ParamKind::BnMean)?,
                var: get("running_var", ParamKind::BnVar)?,
                eps,
            })
        } else {
            None
        };
        let wshape = Shape::new(cout, cin / groups, k, k);
        let folded = if materialize {
            let weight = Tensor::new(wshape, w)?;
            Some(match norm {
                Some(norm) => ops::fold_batchnorm(&weight, conv_bias.as_deref(), &norm)?,
                None => (weight, conv_bias.unwrap_or_else(|| vec![0.0; cout])),
            })
        } else {
            None
        };
        Ok(ConvUnit {
            params,
            cin,
            cout,
            k,
            conv: Conv2dParams::new(stride, k / 2, groups),
            has_bn: bn,
            act,
            wshape,
            folded,
        })
    }

    pub fn cbs(prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, src: &mut dyn ParamSource) -> Result<Self> {
        Self::new(prefix, cin, cout, ConvOpts::cbs(k, stride), src)
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }
}

impl Module for ConvUnit {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (weight, bias) = self
            .folded
            .as_ref()
            .ok_or_else(|| Error::Config("model was built for accounting only and has no weights".into()))?;
        let mut y = ops::conv2d(x, weight, Some(bias), self.conv)?;
        if self.act {
            ops::silu_inplace(&mut y);
            y = y.checked("silu")?;
        }
        Ok(y)
    }

    fn out_shape(&self, input: Shape) -> Result<Shape> {
        ops::conv2d_shape(input, self.wshape, self.conv)
    }

    fn flops(&self, input: Shape) -> u64 {
        let Ok(out) = self.out_shape(input) else {
            return 0;
        };
        let macs = out.numel() as u64 * (self.cin / self.conv.groups * self.k * self.k) as u64;
        let per_elem = self.has_bn as u64 + self.act as u64;
        2 * macs + per_elem * out.numel() as u64
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        for p in &self.params {
            f(ParamRef {
                name: &p.name,
                shape: &p.shape,
                data: &p.data,
                trainable: p.trainable,
            });
        }
    }
}

fn pool_flops(out: Shape, k: usize) -> u64 {
    out.numel() as u64 * (k * k) as u64
}

/// Stride-4 stem: CBS(3×3, s2) then a squeeze/expand path and a 2×2 max-pool
/// path, concatenated and fused by a 1×1 CBS.
pub struct Stem {
    stem_1: ConvUnit,
    stem_2a: ConvUnit,
    stem_2b: ConvUnit,
    stem_3: ConvUnit,
}

impl Stem {
    pub fn new(prefix: &str, cin: usize, cout: usize, src: &mut dyn ParamSource) -> Result<Self> {
        if !cout.is_multiple_of(2) {
            return Err(Error::Config(format!("{prefix}: stem width {cout} must be even")));
        }
        Ok(Stem {
            stem_1: ConvUnit::cbs(&format!("{prefix}.stem_1"), cin, cout, 3, 2, src)?,
            stem_2a: ConvUnit::cbs(&format!("{prefix}.stem_2a"), cout, cout / 2, 1, 1, src)?,
            stem_2b: ConvUnit::cbs(&format!("{prefix}.stem_2b"), cout / 2, cout, 3, 2, src)?,
            stem_3: ConvUnit::cbs(&format!("{prefix}.stem_3"), cout * 2, cout, 1, 1, src)?,
        })
    }
}

fn stem_mid_shape(s1: Shape) -> Result<()> {
    if !s1.h.is_multiple_of(2) || !s1.w.is_multiple_of(2) {
        return Err(Error::shape(
            "stem",
            format!("first stage output {s1} must have even spatial dims"),
        ));
    }
    Ok(())
}

impl Module for Stem {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s1 = self.stem_1.forward(x)?;
        stem_mid_shape(s1.shape())?;
        let a = self.stem_2b.forward(&self.stem_2a.forward(&s1)?)?;
        let p = ops::maxpool(&s1, 2, 2, 0)?;
        self.stem_3.forward(&ops::concat_channels(&[&a, &p])?)
    }

    fn out_shape(&self, input: Shape) -> Result<Shape> {
        let s1 = self.stem_1.out_shape(input)?;
        stem_mid_shape(s1)?;
        let a = self.stem_2b.out_shape(self.stem_2a.out_shape(s1)?)?;
        self.stem_3.out_shape(a.with_c(a.c * 2))
    }

    fn flops(&self, input: Shape) -> u64 {
        let Ok(s1) = self.stem_1.out_shape(input) else {
            return 0;
        };
        let s2a = s1.with_c(self.stem_2a.out_channels());
        let Ok(s2b) = self.stem_2b.out_shape(s2a) else {
            return 0;
        };
        self.stem_1.flops(input)
            + self.stem_2a.flops(s1)
            + self.stem_2b.flops(s2a)
            + pool_flops(s2b.with_c(s1.c), 2)
            + self.stem_3.flops(s2b.with_c(s2b.c + s1.c))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.stem_1.visit_params(f);
        self.stem_2a.visit_params(f);
        self.stem_2b.visit_params(f);
        self.stem_3.visit_params(f);
    }
}

/// Space-to-depth (2×2 → 4·C channels) followed by a CBS. Only used for the
/// stem-vs-focus comparison.
pub struct Focus {
    conv: ConvUnit,
}

impl Focus {
    pub fn new(prefix: &str, cin: usize, cout: usize, k: usize, src: &mut dyn ParamSource) -> Result<Self> {
        Ok(Focus {
            conv: ConvUnit::cbs(&format!("{prefix}.conv"), cin * 4, cout, k, 1, src)?,
        })
    }
}

fn focus_shape(input: Shape) -> Result<Shape> {
    if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) {
        return Err(Error::shape("focus", format!("odd spatial dims {input}")));
    }
    Ok(Shape::new(input.n, input.c * 4, input.h / 2, input.w / 2))
}

impl Module for Focus {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&ops::space_to_depth2(x)?)
    }

    fn out_shape(&self, input: Shape) -> Result<Shape> {
        self.conv.out_shape(focus_shape(input)?)
    }

    fn flops(&self, input: Shape) -> u64 {
        focus_shape(input).map_or(0, |s| self.conv.flops(s))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.conv.visit_params(f);
    }
}

/// CBS(1×1) → CBS(3×3), plus the input when `shortcut` is set.
pub struct Bottleneck {
    cv1: ConvUnit,
    cv2: ConvUnit,
    shortcut: bool,
}

impl Bottleneck {
    pub fn new(prefix: &str, cin: usize, cout: usize, shortcut: bool, src: &mut dyn ParamSource) -> Result<Self> {
        if shortcut && cin != cout {
            return Err(Error::Config(format!(
                "{prefix}: shortcut needs equal channels, got {cin} -> {cout}"
            )));
        }
        Ok(Bottleneck {
            cv1: ConvUnit::cbs(&format!("{prefix}.cv1"), cin, cout, 1, 1, src)?,
            cv2: ConvUnit::cbs(&format!("{prefix}.cv2"), cout, cout, 3, 1, src)?,
            shortcut,
        })
    }
}

impl Module for Bottleneck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x)?)?;
        if self.shortcut {
            ops::add(x, &y)
        } else {
            Ok(y)
        }
    }

    fn out_shape(&self, input: Shape) -> Result<Shape> {
        self.cv2.out_shape(self.cv1.out_shape(input)?)
    }

    fn flops(&self, input: Shape) -> u64 {
        let mid = input.with_c(self.cv1.out_channels());
        let add = if self.shortcut { input.numel() as u64 } else { 0 };
        self.cv1.flops(input) + self.cv2.flops(mid) + add
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.cv1.visit_params(f);
        self.cv2.visit_params(f);
    }
}

/// Cross-stage partial block: `cv3(cat(m(cv1(x)), cv2(x)))` with hidden
/// width `cout / 2` and `n` bottlenecks in `m`.
pub struct C3 {
    cv1: ConvUnit,
    cv2: ConvUnit,
    m: Vec<Bottleneck>,
    cv3: ConvUnit,
}

impl C3 {
    pub fn new(
        prefix: &str,
        cin: usize,
        cout: usize,
        n: usize,
        shortcut: bool,
        src: &mut dyn ParamSource,
    ) -> Result<Self> {
        if !cout.is_multiple_of(2) {
            return Err(Error::Config(format!("{prefix}: C3 width {cout} must be even")));
        }
        if n == 0 {
            return Err(Error::Config(format!("{prefix}: C3 needs at least one bottleneck")));
        }
        let hidden = cout / 2;
        let cv1 = ConvUnit::cbs(&format!("{prefix}.cv1"), cin, hidden, 1, 1, src)?;
        let cv2 = ConvUnit::cbs(&format!("{prefix}.cv2"), cin, hidden, 1, 1, src)?;
        let m = (0..n)
            .map(|j| Bottleneck::new(&format!("{prefix}.m.{j}"), hidden, hidden, shortcut, src))
            .collect::<Result<Vec<_>>>()?;
        let cv3 = ConvUnit::cbs(&format!("{prefix}.cv3"), 2 * hidden, cout, 1, 1, src)?;
        Ok(C3 { cv1, cv2, m, cv3 })
    }
}

impl Module for C3 {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut a = self.cv1.forward(x)?;
        for b in &self.m {
            a = b.forward(&a)?;
        }
        let b = self.cv2.forward(x)?;
        self.cv3.forward(&ops::concat_channels(&[&a, &b])?)
    }

    fn out_shape(&self, input: Shape) -> Result<Shape> {
        let mut a = self.cv1.out_shape(input)?;
        for b in &self.m {
            a = b.out_shape(a)?;
        }
        let b = self.cv2.out_shape(input)?;
        self.cv3.out_shape(a.with_c(a.c + b.c))
    }

    fn flops(&self, input: Shape) -> u64 {
        let hidden = input.with_c(self.cv1.out_channels());
        self.cv1.flops(input)
            + self.cv2.flops(input)
            + self.m.iter().map(|b| b.flops(hidden)).sum::<u64>()
            + self.cv3.flops(hidden.with_c(hidden.c * 2))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.cv1.visit_params(f);
        self.cv2.visit_params(f);
        for b in &self.m {
            b.visit_params(f);
        }
        self.cv3.visit_params(f);
    }
}

/// Spatial pyramid pooling: `cv2(cat(x', pool_k1(x'), pool_k2(x'), ...))`
/// with `x' = cv1(x)`, stride-1 pools in the listed kernel order.
pub struct Spp {
    cv1: ConvUnit,
    kernels: Vec<usize>,
    cv2: ConvUnit,
}

impl Spp {
    pub fn new(prefix: &str, cin: usize, cout: usize, kernels: &[usize], src: &mut dyn ParamSource) -> Result<Self> {
        if kernels.is_empty() || kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "{prefix}: SPP kernels must be odd and non-empty, got {kernels:?}"
            )));
        }
        if cin < 2 {
            return Err(Error::Config(format!("{prefix}: SPP needs at least 2 input channels")));
        }
        let hidden = cin / 2;
        Ok(Spp {
            cv1: ConvUnit::cbs(&format!("{prefix}.cv1"), cin, hidden, 1, 1, src)?,
            kernels: kernels.to_vec(),
            cv2: ConvUnit::cbs(&format!("{prefix}.cv2"), hidden * (kernels.len() + 1), cout, 1, 1, src)?,
        })
    }
}

impl Module for Spp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.cv1.forward(x)?;
        let pooled = self
            .kernels
            .iter()
            .map(|&k| ops::maxpool(&x, k, 1, k / 2))
            .collect::<Result<Vec<_>>>()?;
        let mut parts = vec![&x];
        parts.extend(pooled.iter());
        self.cv2.forward(&ops::concat_channels(&parts)?)
    }

    fn out_shape(&self, input: Shape) -> Result<Shape> {
        let h = self.cv1.out_shape(input)?;
        self.cv2.out_shape(h.with_c(h.c * (self.kernels.len() + 1)))
    }

    fn flops(&self, input: Shape) -> u64 {
        let h = input.with_c(self.cv1.out_channels());
        self.cv1.flops(input)
            + self.kernels.iter().map(|&k| pool_flops(h, k)).sum::<u64>()
            + self.cv2.flops(h.with_c(h.c * (self.kernels.len() + 1)))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.cv1.visit_params(f);
        self.cv2.visit_params(f);
    }
}

/// ShuffleNetV2 unit. Stride 1 splits channels and transforms the right half;
/// stride 2 transforms both halves and halves the spatial dims. Either way the
/// halves are concatenated and shuffled with two groups.
pub struct ShuffleV2 {
    stride: usize,
    branch1: Option<(ConvUnit, ConvUnit)>,
    branch2: (ConvUnit, ConvUnit, ConvUnit),
    cout: usize,
}

impl ShuffleV2 {
    pub fn new(prefix: &str, cin: usize, cout: usize, stride: usize, src: &mut dyn ParamSource) -> Result<Self> {
        if !cout.is_multiple_of(2) {
            return Err(Error::Config(format!("{prefix}: shuffle width {cout} must be even")));
        }
        let half = cout / 2;
        match stride {
            1 if cin != cout => {
                return Err(Error::Config(format!(
                    "{prefix}: stride-1 shuffle unit needs equal channels, got {cin} -> {cout}"
                )))
            }
            1 | 2 => {}
            s => return Err(Error::Config(format!("{prefix}: shuffle stride must be 1 or 2, got {s}"))),
        }
        let branch1 = if stride == 2 {
            Some((
                ConvUnit::new(&format!("{prefix}.branch1.dw"), cin, cin, ConvOpts::conv_bn(3, 2, cin), src)?,
                ConvUnit::cbs(&format!("{prefix}.branch1.pw"), cin, half, 1, 1, src)?,
            ))
        } else {
            None
        };
        let b2_in = if stride == 2 { cin } else { half };
        let branch2 = (
            ConvUnit::cbs(&format!("{prefix}.branch2.pw1"), b2_in, half, 1, 1, src)?,
            ConvUnit::new(&format!("{prefix}.branch2.dw"), half, half, ConvOpts::conv_bn(3, stride, half), src)?,
            ConvUnit::cbs(&format!("{prefix}.branch2.pw2"), half, half, 1, 1, src)?,
        );
        Ok(ShuffleV2 {
            stride,
            branch1,
            branch2,
            cout,
        })
    }

    fn right(&self, x: &Tensor) -> Result<Tensor> {
        let (pw1, dw, pw2) = &self.branch2;
        pw2.forward(&dw.forward(&pw1.forward(x)?)?)
    }
}

impl Module for ShuffleV2 {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let cat = match &self.branch1 {
            None => {
                let (left, right) = ops::chunk2_channels(x)?;
                ops::concat_channels(&[&left, &self.right(&right)?])?
            }
            Some((dw, pw)) => {
                let left = pw.forward(&dw.forward(x)?)?;
                ops::concat_channels(&[&left, &self.right(x)?])?
            }
        };
        ops::channel_shuffle(&cat, 2)
    }

    fn out_shape(&self, input: Shape) -> Result<Shape> {
        let (pw1, dw, pw2) = &self.branch2;
        let b2_in = if self.stride == 2 { input } else { input.with_c(input.c / 2) };
        if self.stride == 1 && input.c != self.cout {
            return Err(Error::shape("shuffle", format!("input {input} vs width {}", self.cout)));
        }
        let r = pw2.out_shape(dw.out_shape(pw1.out_shape(b2_in)?)?)?;
        if let Some((dw1, pw)) = &self.branch1 {
            let l = pw.out_shape(dw1.out_shape(input)?)?;
            if (l.h, l.w) != (r.h, r.w) {
                return Err(Error::shape("shuffle", "branch spatial mismatch"));
            }
        }
        Ok(r.with_c(self.cout))
    }

    fn flops(&self, input: Shape) -> u64 {
        let (pw1, dw, pw2) = &self.branch2;
        let b2_in = if self.stride == 2 { input } else { input.with_c(input.c / 2) };
        let mid = b2_in.with_c(pw1.out_channels());
        let Ok(after_dw) = dw.out_shape(mid) else {
            return 0;
        };
        let mut total = pw1.flops(b2_in) + dw.flops(mid) + pw2.flops(after_dw);
        if let Some((dw1, pw)) = &self.branch1 {
            if let Ok(s) = dw1.out_shape(input) {
                total += dw1.flops(input) + pw.flops(s);
            }
        }
        total
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        if let Some((dw, pw)) = &self.branch1 {
            dw.visit_params(f);
            pw.visit_params(f);
        }
        let (pw1, dw, pw2) = &self.branch2;
        pw1.visit_params(f);
        dw.visit_params(f);
        pw2.visit_params(f);
    }
}

/// ShuffleNetV2 input stage: CBS(3×3, s2) then 3×3 stride-2 max-pool.
pub struct ConvPoolStem {
    conv: ConvUnit,
}

impl ConvPoolStem {
    pub fn new(prefix: &str, cin: usize, cout: usize, src: &mut dyn ParamSource) -> Result<Self> {
        Ok(ConvPoolStem {
            conv: ConvUnit::cbs(prefix, cin, cout, 3, 2, src)?,
        })
    }
}

impl Module for ConvPoolStem {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::maxpool(&self.conv.forward(x)?, 3, 2, 1)
    }

    fn out_shape(&self, input: Shape) -> Result<Shape> {
        ops::pool_out_shape(self.conv.out_shape(input)?, 3, 2, 1)
    }

    fn flops(&self, input: Shape) -> u64 {
        let Ok(mid) = self.conv.out_shape(input) else {
            return 0;
        };
        let pooled = ops::pool_out_shape(mid, 3, 2, 1).map_or(0, |s| pool_flops(s, 3));
        self.conv.flops(input) + pooled
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.conv.visit_params(f);
    }
}

/// Blocks applied in order; used for repeated ShuffleNetV2 units.
pub struct Sequential(pub Vec<Box<dyn Module>>);

impl Module for Sequential {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut iter = self.0.iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Config("empty sequential block".into()))?;
        let mut y = first.forward(x)?;
        for m in iter {
            y = m.forward(&y)?;
        }
        Ok(y)
    }

    fn out_shape(&self, input: Shape) -> Result<Shape> {
        self.0.iter().try_fold(input, |s, m| m.out_shape(s))
    }

    fn flops(&self, input: Shape) -> u64 {
        let mut s = input;
        let mut total = 0;
        for m in &self.0 {
            total += m.flops(s);
            match m.out_shape(s) {
                Ok(o) => s = o,
                Err(_) => return total,
            }
        }
        total
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        for m in &self.0 {
            m.visit_params(f);
        }
    }
}

/// Declarative description of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Cbs { k: usize, stride: usize },
    Stem,
    Focus { k: usize },
    Bottleneck { shortcut: bool },
    C3 { n: usize, shortcut: bool },
    Spp { kernels: Vec<usize> },
    ShuffleV2 { stride: usize },
    ConvPoolStem,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (cin, cout) = (self.in_channels, self.out_channels);
        let bad = |msg: String| Err(Error::Config(msg));
        if cin == 0 || cout == 0 {
            return bad(format!("{:?}: channels must be >= 1", self.kind));
        }
        match &self.kind {
            BlockKind::Cbs { k: 0, .. } | BlockKind::Focus { k: 0 } => bad("kernel must be >= 1".into()),
            BlockKind::Cbs { stride: 0, .. } => bad("stride must be >= 1".into()),
            BlockKind::Stem if cout % 2 != 0 => bad(format!("stem width {cout} must be even")),
            BlockKind::Bottleneck { shortcut: true } if cin != cout => {
                bad(format!("bottleneck shortcut needs equal channels, got {cin} -> {cout}"))
            }
            BlockKind::C3 { n, .. } if *n == 0 => bad("C3 needs n >= 1".into()),
            BlockKind::C3 { .. } if cout % 2 != 0 => bad(format!("C3 width {cout} must be even")),
            BlockKind::Spp { kernels } if kernels.is_empty() || kernels.iter().any(|k| k % 2 == 0) => {
                bad(format!("SPP kernels must be odd, got {kernels:?}"))
            }
            BlockKind::Spp { .. } if cin < 2 => bad("SPP needs >= 2 input channels".into()),
            BlockKind::ShuffleV2 { stride } if *stride != 1 && *stride != 2 => {
                bad(format!("shuffle stride must be 1 or 2, got {stride}"))
            }
            BlockKind::ShuffleV2 { .. } if cout % 2 != 0 => bad(format!("shuffle width {cout} must be even")),
            BlockKind::ShuffleV2 { stride: 1 } if cin != cout => {
                bad(format!("stride-1 shuffle needs equal channels, got {cin} -> {cout}"))
            }
            _ => Ok(()),
        }
    }

    /// Closed-form output shape, independent of any built module.
    pub fn infer_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::shape(
                "block",
                format!("input has {} channels, block expects {}", input.c, self.in_channels),
            ));
        }
        let conv = |size: usize, k: usize, s: usize| {
            ops::conv_out_size(size, k, s, k / 2)
                .ok_or_else(|| Error::shape("block", format!("kernel {k} does not fit {size}")))
        };
        let cout = self.out_channels;
        let (h, w) = match &self.kind {
            BlockKind::Cbs { k, stride } => (conv(input.h, *k, *stride)?, conv(input.w, *k, *stride)?),
            BlockKind::Stem => {
                let (h1, w1) = (conv(input.h, 3, 2)?, conv(input.w, 3, 2)?);
                if h1 % 2 != 0 || w1 % 2 != 0 {
                    return Err(Error::shape("stem", "odd intermediate dims"));
                }
                (h1 / 2, w1 / 2)
            }
            BlockKind::Focus { k } => {
                if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) {
                    return Err(Error::shape("focus", "odd spatial dims"));
                }
                (conv(input.h / 2, *k, 1)?, conv(input.w / 2, *k, 1)?)
            }
            BlockKind::Bottleneck { .. } | BlockKind::C3 { .. } | BlockKind::Spp { .. } => {
                (input.h, input.w)
            }
            BlockKind::ShuffleV2 { stride } => (conv(input.h, 3, *stride)?, conv(input.w, 3, *stride)?),
            BlockKind::ConvPoolStem => {
                let (h1, w1) = (conv(input.h, 3, 2)?, conv(input.w, 3, 2)?);
                let p = ops::pool_out_shape(Shape::new(1, 1, h1, w1), 3, 2, 1)?;
                (p.h, p.w)
            }
        };
        Ok(Shape::new(input.n, cout, h, w))
    }

    pub fn build(&self, prefix: &str, src: &mut dyn ParamSource) -> Result<Box<dyn Module>> {
        self.validate()?;
        let (cin, cout) = (self.in_channels, self.out_channels);
        Ok(match &self.kind {
            BlockKind::Cbs { k, stride } => Box::new(ConvUnit::cbs(prefix, cin, cout, *k, *stride, src)?),
            BlockKind::Stem => Box::new(Stem::new(prefix, cin, cout, src)?),
            BlockKind::Focus { k } => Box::new(Focus::new(prefix, cin, cout, *k, src)?),
            BlockKind::Bottleneck { shortcut } => Box::new(Bottleneck::new(prefix, cin, cout, *shortcut, src)?),
            BlockKind::C3 { n, shortcut } => Box::new(C3::new(prefix, cin, cout, *n, *shortcut, src)?),
            BlockKind::Spp { kernels } => Box::new(Spp::new(prefix, cin, cout, kernels, src)?),
            BlockKind::ShuffleV2 { stride } => Box::new(ShuffleV2::new(prefix, cin, cout, *stride, src)?),
            BlockKind::ConvPoolStem => Box::new(ConvPoolStem::new(prefix, cin, cout, src)?),
        })
    }
}

/// Trainable parameter count of a module.
pub fn count_params(m: &dyn Module) -> usize {
    let mut total = 0;
    m.visit_params(&mut |p| {
        if p.trainable {
            total += p.shape.iter().product::<usize>();
        }
    });
    total
}
