use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use yoloface::blocks::{BlockKind, BlockSpec};
use yoloface::params::SeededParams;
use yoloface::tensor::{Shape, Tensor};

fn random_spec(rng: &mut Xoshiro256PlusPlus) -> BlockSpec {
    let even = |rng: &mut Xoshiro256PlusPlus| 2 * rng.random_range(1..9);
    let cin = even(rng);
    match rng.random_range(0..8) {
        0 => BlockSpec::new(
            BlockKind::Cbs {
                k: [1, 3, 5][rng.random_range(0..3)],
                stride: rng.random_range(1..3),
            },
            cin,
            rng.random_range(1..17),
        ),
        1 => BlockSpec::new(BlockKind::Stem, 3, even(rng)),
        2 => BlockSpec::new(BlockKind::Focus { k: 3 }, rng.random_range(1..5), rng.random_range(1..17)),
        3 => {
            let shortcut = rng.random_bool(0.5);
            let cout = if shortcut { cin } else { rng.random_range(1..17) };
            BlockSpec::new(BlockKind::Bottleneck { shortcut }, cin, cout)
        }
        4 => BlockSpec::new(
            BlockKind::C3 {
                n: rng.random_range(1..4),
                shortcut: rng.random_bool(0.5),
            },
            cin,
            even(rng),
        ),
        5 => {
            let kernels = [vec![3, 5, 7], vec![5, 9, 13], vec![3], vec![7, 5, 3]][rng.random_range(0..4)].clone();
            BlockSpec::new(BlockKind::Spp { kernels }, cin, rng.random_range(1..17))
        }
        6 => {
            let stride = rng.random_range(1..3);
            let cout = if stride == 1 { cin } else { even(rng) };
            BlockSpec::new(BlockKind::ShuffleV2 { stride }, cin, cout)
        }
        _ => BlockSpec::new(BlockKind::ConvPoolStem, 3, rng.random_range(1..17)),
    }
}

#[test]
fn inferred_shapes_match_execution() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(200);
    for i in 0..200 {
        let spec = random_spec(&mut rng);
        let (h, w) = (4 * rng.random_range(2..7), 4 * rng.random_range(2..7));
        let input = Shape::new(rng.random_range(1..3), spec.in_channels, h, w);
        let x = Tensor::from_fn(input, |_, _, _, _| rng.random_range(-3.0..3.0));
        let block = spec.build("b", &mut SeededParams::new(i)).unwrap();
        let inferred = spec.infer_shape(input).unwrap();
        let y = block.forward(&x).unwrap();
        assert_eq!(y.shape(), inferred, "{spec:?} on {input}");
        assert_eq!(block.out_shape(input).unwrap(), inferred, "{spec:?}");
        assert!(y.is_finite(), "{spec:?}");
        match spec.kind {
            BlockKind::Stem => assert_eq!((y.shape().h, y.shape().w), (h / 4, w / 4)),
            BlockKind::C3 { .. } | BlockKind::Spp { .. } | BlockKind::Bottleneck { .. } => {
                assert_eq!((y.shape().h, y.shape().w), (h, w))
            }
            BlockKind::ShuffleV2 { stride } => assert_eq!((y.shape().h, y.shape().w), (h / stride, w / stride)),
            _ => {}
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        BlockSpec::new(BlockKind::Stem, 3, 7),
        BlockSpec::new(BlockKind::C3 { n: 0, shortcut: true }, 8, 8),
        BlockSpec::new(BlockKind::C3 { n: 1, shortcut: true }, 8, 9),
        BlockSpec::new(BlockKind::Spp { kernels: vec![3, 4] }, 8, 8),
        BlockSpec::new(BlockKind::Bottleneck { shortcut: true }, 8, 16),
        BlockSpec::new(BlockKind::ShuffleV2 { stride: 1 }, 8, 16),
        BlockSpec::new(BlockKind::ShuffleV2 { stride: 3 }, 8, 8),
        BlockSpec::new(BlockKind::ShuffleV2 { stride: 1 }, 7, 7),
        BlockSpec::new(BlockKind::Cbs { k: 0, stride: 1 }, 8, 8),
    ];
    for spec in bad {
        assert!(spec.validate().is_err(), "{spec:?}");
        assert!(spec.build("b", &mut SeededParams::new(0)).is_err(), "{spec:?}");
    }
}

#[test]
fn vga_shapes() {
    let stem = BlockSpec::new(BlockKind::Stem, 3, 32);
    assert_eq!(stem.infer_shape(Shape::new(1, 3, 640, 640)).unwrap(), Shape::new(1, 32, 160, 160));
    let cbs = BlockSpec::new(BlockKind::Cbs { k: 3, stride: 2 }, 3, 16);
    assert_eq!(cbs.infer_shape(Shape::new(1, 3, 640, 640)).unwrap().h, 320);
    let shuffle = BlockSpec::new(BlockKind::ShuffleV2 { stride: 2 }, 24, 48);
    assert_eq!(shuffle.infer_shape(Shape::new(1, 24, 160, 160)).unwrap().h, 80);
    let spp = BlockSpec::new(BlockKind::Spp { kernels: vec![3, 5, 7] }, 64, 64);
    assert_eq!(spp.infer_shape(Shape::new(1, 64, 20, 20)).unwrap(), Shape::new(1, 64, 20, 20));
}
