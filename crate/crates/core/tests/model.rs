use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use yoloface::archive::{meta, ArchiveTensor, TensorArchive};
use yoloface::blocks::{count_params, BlockKind, BlockSpec, ConvOpts, ConvUnit};
use yoloface::model::{seeded_init, Model, ModelConfig, Weights, PRESETS};
use yoloface::params::ShapeOnly;
use yoloface::tensor::{Shape, Tensor};
use yoloface::Error;

/// Closed-form trainable-parameter count, written out layer by layer
/// independently of the graph builder.
mod oracle {
    fn sc(c: usize, w: f64) -> usize {
        let v = (c as f64 * w).round() as usize;
        (v.div_ceil(8) * 8).max(8)
    }
    fn sd(n: usize, d: f64) -> usize {
        ((n as f64 * d).round() as usize).max(1)
    }
    fn cbs(ci: usize, co: usize, k: usize) -> usize {
        ci * co * k * k + 2 * co
    }
    fn c3(ci: usize, co: usize, n: usize) -> usize {
        let h = co / 2;
        2 * cbs(ci, h, 1) + n * (cbs(h, h, 1) + cbs(h, h, 3)) + cbs(2 * h, co, 1)
    }
    fn spp(ci: usize, co: usize, nk: usize) -> usize {
        cbs(ci, ci / 2, 1) + cbs(ci / 2 * (nk + 1), co, 1)
    }
    fn head(c: usize) -> usize {
        c * 48 + 48
    }

    pub fn csp(d: f64, w: f64, p6: bool, stem: bool) -> usize {
        let s = |c| sc(c, w);
        let n = |r| sd(r, d);
        let mut t = if stem {
            cbs(3, s(64), 3) + cbs(s(64), s(64) / 2, 1) + cbs(s(64) / 2, s(64), 3) + cbs(2 * s(64), s(64), 1)
        } else {
            cbs(12, s(64), 3) + cbs(s(64), s(128), 3)
        };
        let c1 = if stem { s(64) } else { s(128) };
        t += c3(c1, s(128), n(3)) + cbs(s(128), s(256), 3) + c3(s(256), s(256), n(9));
        t += cbs(s(256), s(512), 3) + c3(s(512), s(512), n(9));
        if !p6 {
            t += cbs(s(512), s(1024), 3) + spp(s(1024), s(1024), 3) + c3(s(1024), s(1024), n(3));
            t += cbs(s(1024), s(512), 1) + c3(s(1024), s(512), n(3));
            t += cbs(s(512), s(256), 1) + c3(s(512), s(256), n(3));
            t += cbs(s(256), s(256), 3) + c3(s(512), s(512), n(3));
            t += cbs(s(512), s(512), 3) + c3(s(1024), s(1024), n(3));
            t + head(s(256)) + head(s(512)) + head(s(1024))
        } else {
            t += cbs(s(512), s(768), 3) + c3(s(768), s(768), n(3));
            t += cbs(s(768), s(1024), 3) + spp(s(1024), s(1024), 3) + c3(s(1024), s(1024), n(3));
            t += cbs(s(1024), s(768), 1) + c3(s(1536), s(768), n(3));
            t += cbs(s(768), s(512), 1) + c3(s(1024), s(512), n(3));
            t += cbs(s(512), s(256), 1) + c3(s(512), s(256), n(3));
            t += cbs(s(256), s(256), 3) + c3(s(512), s(512), n(3));
            t += cbs(s(512), s(512), 3) + c3(s(1024), s(768), n(3));
            t += cbs(s(768), s(768), 3) + c3(s(1536), s(1024), n(3));
            t + head(s(256)) + head(s(512)) + head(s(768)) + head(s(1024))
        }
    }

    fn dw(c: usize) -> usize {
        c * 9 + 2 * c
    }
    fn shuffle(ci: usize, co: usize, stride: usize) -> usize {
        let b = co / 2;
        if stride == 2 {
            dw(ci) + ci * b + 2 * b + ci * b + 2 * b + dw(b) + b * b + 2 * b
        } else {
            2 * (b * b + 2 * b) + dw(b)
        }
    }

    pub fn shuffle_net(stages: [usize; 3], neck: usize) -> usize {
        let mut t = cbs(3, 32, 3);
        let mut ci = 32;
        for (c, r) in stages.into_iter().zip([4, 8, 4]) {
            t += shuffle(ci, c, 2) + (r - 1) * shuffle(c, c, 1);
            ci = c;
        }
        t += cbs(stages[2], neck, 1) + c3(neck + stages[1], neck, 1);
        t += cbs(neck, neck, 1) + c3(neck + stages[0], neck, 1);
        t += cbs(neck, neck, 3) + c3(2 * neck, neck, 1);
        t += cbs(neck, neck, 3) + c3(2 * neck, neck, 1);
        t + 3 * head(neck)
    }
}

fn plan(name: &str) -> Model {
    Model::build(&ModelConfig::preset(name).unwrap(), Weights::ShapeOnly).unwrap()
}

fn seeded(cfg: &ModelConfig, seed: u64) -> Model {
    Model::build(cfg, Weights::Seeded(seed)).unwrap()
}

fn small(name: &str, size: usize) -> ModelConfig {
    ModelConfig {
        input_size: size,
        ..ModelConfig::preset(name).unwrap()
    }
}

fn image(shape: Shape, seed: u64) -> Tensor {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

#[test]
fn preset_counts_match_closed_form() {
    let cases = [
        ("yolov5s", oracle::csp(0.33, 0.5, false, true)),
        ("yolov5s6", oracle::csp(0.33, 0.5, true, true)),
        ("yolov5s-focus", oracle::csp(0.33, 0.5, false, false)),
        ("yolov5m", oracle::csp(0.67, 0.75, false, true)),
        ("yolov5m6", oracle::csp(0.67, 0.75, true, true)),
        ("yolov5l", oracle::csp(1.0, 1.0, false, true)),
        ("yolov5l6", oracle::csp(1.0, 1.0, true, true)),
        ("yolov5x6", oracle::csp(1.33, 1.25, true, true)),
        ("yolov5n", oracle::shuffle_net([128, 256, 512], 128)),
        ("yolov5n-0.5", oracle::shuffle_net([64, 128, 256], 64)),
    ];
    for (name, expected) in cases {
        assert_eq!(plan(name).count_params(), expected, "{name}");
    }
}

#[test]
fn seeded_and_shape_only_builds_agree() {
    let cfg = small("yolov5n-0.5", 64);
    let a = seeded(&cfg, 1);
    let b = Model::build(&cfg, Weights::ShapeOnly).unwrap();
    assert_eq!(a.count_params(), b.count_params());
    assert_eq!(a.count_flops(64).unwrap(), b.count_flops(64).unwrap());
    assert!(b.forward(&Tensor::zeros(Shape::new(1, 3, 64, 64))).is_err());
    assert!(b.to_archive().is_err());
}

#[test]
fn published_counts_within_tolerance() {
    for (name, target, tol) in [("yolov5s", 7.075, 0.03), ("yolov5s6", 12.386, 0.05), ("yolov5n", 1.726, 0.05)] {
        let got = plan(name).count_params() as f64 / 1e6;
        assert!((got - target).abs() / target <= tol, "{name}: {got}M vs {target}M");
    }
    assert!(PRESETS.iter().all(|(n, _)| ModelConfig::preset(n).is_some()));
}

#[test]
fn stem_cheaper_than_focus() {
    let stem = plan("yolov5s");
    let focus = plan("yolov5s-focus");
    assert!(stem.count_params() < focus.count_params());
    assert!(stem.count_flops(640).unwrap() < focus.count_flops(640).unwrap());
}

#[test]
fn capacity_is_monotone() {
    let p = |n: &str| plan(n).count_params();
    assert!(p("yolov5n-0.5") < p("yolov5n"));
    assert!(p("yolov5n") < p("yolov5s"));
    assert!(p("yolov5s") < p("yolov5m"));
    assert!(p("yolov5m") < p("yolov5l"));
    for (base, p6) in [("yolov5s", "yolov5s6"), ("yolov5m", "yolov5m6"), ("yolov5l", "yolov5l6")] {
        assert!(p(base) < p(p6), "{base}");
    }
}

#[test]
fn single_pixel_conv_has_one_parameter() {
    let opts = ConvOpts {
        bias: false,
        ..ConvOpts::head()
    };
    let c = ConvUnit::new("c", 1, 1, opts, &mut ShapeOnly).unwrap();
    assert_eq!(count_params(&c), 1);
}

#[test]
fn doubling_width_roughly_quadruples_conv_params() {
    for (cin, cout) in [(16, 32), (24, 48), (64, 64)] {
        let count = |m: usize| {
            let spec = BlockSpec::new(BlockKind::Cbs { k: 3, stride: 1 }, cin * m, cout * m);
            count_params(spec.build("s", &mut ShapeOnly).unwrap().as_ref())
        };
        let ratio = count(2) as f64 / count(1) as f64;
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }
}

#[test]
fn level_grids_follow_strides() {
    let m = seeded(&small("yolov5n-0.5", 64), 0);
    let y = m.forward(&image(Shape::new(2, 3, 512, 640), 1)).unwrap();
    let dims: Vec<_> = y.iter().map(|t| (t.shape().n, t.shape().c, t.shape().h, t.shape().w)).collect();
    assert_eq!(dims, vec![(2, 48, 64, 80), (2, 48, 32, 40), (2, 48, 16, 20)]);
    assert!(y.iter().all(|t| t.is_finite()));
}

#[test]
fn stride_invariant_across_configs() {
    for name in ["yolov5s", "yolov5s6", "yolov5n", "yolov5s-focus"] {
        let m = plan(name);
        let stride = m.config().max_stride();
        let (h, w) = (2 * stride, 3 * stride);
        let rows = m.stages_at(Shape::new(1, 3, h, w)).unwrap();
        let heads: Vec<_> = rows.iter().filter(|r| r.label.starts_with("Detect")).collect();
        assert_eq!(heads.len(), m.config().num_levels(), "{name}");
        for (i, r) in heads.iter().enumerate() {
            let s = 8 << i;
            assert_eq!((r.out_shape.h, r.out_shape.w), (h / s, w / s), "{name} level {i}");
            assert_eq!(r.out_shape.c, 48);
        }
    }
}

#[test]
fn landmark_free_head_has_six_channels_per_anchor() {
    let cfg = ModelConfig {
        num_landmarks: 0,
        ..small("yolov5n-0.5", 64)
    };
    let m = seeded(&cfg, 0);
    let y = m.forward(&image(Shape::new(1, 3, 64, 64), 2)).unwrap();
    assert!(y.iter().all(|t| t.shape().c == 18));
}

#[test]
fn indivisible_input_is_rejected() {
    let m = seeded(&small("yolov5n-0.5", 64), 0);
    let err = m.forward(&Tensor::zeros(Shape::new(1, 3, 48, 64))).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(m.forward(&Tensor::zeros(Shape::new(1, 1, 64, 64))).is_err());
}

#[test]
fn archive_round_trip_is_bit_identical() {
    let cfg = small("yolov5s", 64);
    let m = seeded(&cfg, 9);
    let bytes = m.to_archive().unwrap().to_bytes();
    let loaded = TensorArchive::from_bytes(&bytes).unwrap();
    let m2 = Model::build(&cfg, Weights::Archive(&loaded)).unwrap();
    let x = image(Shape::new(1, 3, 64, 96), 3);
    let (a, b) = (m.forward(&x).unwrap(), m2.forward(&x).unwrap());
    for (a, b) in a.iter().zip(&b) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(m.forward(&x).unwrap()[0].data(), a[0].data());
}

#[test]
fn parameter_names_are_bijective_with_archive() {
    let cfg = small("yolov5s6", 64);
    let names = seeded(&cfg, 0).param_names();
    let archive = seeded_init(&cfg, 0).unwrap();
    let unique: std::collections::BTreeSet<_> = names.iter().map(String::as_str).collect();
    assert_eq!(unique.len(), names.len(), "duplicate parameter name");
    assert!(unique.iter().copied().eq(archive.names()));
}

#[test]
fn seeded_archives_are_reproducible() {
    let cfg = small("yolov5n-0.5", 64);
    let a = seeded_init(&cfg, 5).unwrap();
    assert_eq!(a.to_bytes(), seeded_init(&cfg, 5).unwrap().to_bytes());
    let b = seeded_init(&cfg, 6).unwrap();
    let first = a.first_difference(&b).expect("payloads differ");
    assert!(first.ends_with("weight"), "{first}");
    assert_eq!(a.metadata[meta::CONFIG_HASH], cfg.config_hash());
    assert_eq!(a.metadata[meta::BN_EPS], "0.001");
    assert_eq!(a.metadata[meta::SCORE_MODE], "conf");
}

#[test]
fn archive_mismatches_are_named() {
    let cfg = small("yolov5n-0.5", 64);
    let good = seeded_init(&cfg, 0).unwrap();

    let mut missing = good.clone();
    missing.remove("model.0.conv.weight");
    let err = Model::build(&cfg, Weights::Archive(&missing)).err().unwrap();
    assert!(matches!(&err, Error::MissingKey(k) if k == "model.0.conv.weight"), "{err}");

    let mut reshaped = good.clone();
    reshaped.insert("model.0.conv.weight", ArchiveTensor::new(vec![1], vec![0.0]));
    let err = Model::build(&cfg, Weights::Archive(&reshaped)).err().unwrap();
    assert!(matches!(&err, Error::KeyShape { name, .. } if name == "model.0.conv.weight"));

    let mut extra = good.clone();
    extra.insert("model.99.weight", ArchiveTensor::new(vec![1], vec![0.0]));
    let err = Model::build(&cfg, Weights::Archive(&extra)).err().unwrap();
    assert!(matches!(&err, Error::UnusedKey(k) if k == "model.99.weight"));

    let other = ModelConfig {
        width_multiple: 0.25,
        ..cfg.clone()
    };
    let err = Model::build(&other, Weights::Archive(&good)).err().unwrap();
    assert!(matches!(err, Error::ConfigHash { .. }));
}
