use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use yoloface::loss::{
    l1, l1_grad, l2, l2_grad, landmark_loss, landmark_loss_grad, smooth_l1, smooth_l1_grad, toy_fit, total_loss,
    wing, wing_grad, FitOpts, LandmarkVector, TotalLossSpec, WingParams,
};

type Pair = (&'static str, Box<dyn Fn(f64) -> f64>, Box<dyn Fn(f64) -> f64>, Vec<f64>);

fn losses() -> Vec<Pair> {
    let p = WingParams::default();
    vec![
        ("wing", Box::new(move |x| wing(x, &p)), Box::new(move |x| wing_grad(x, &p)), vec![0.0, 10.0]),
        ("l2", Box::new(l2), Box::new(l2_grad), vec![]),
        ("l1", Box::new(l1), Box::new(l1_grad), vec![0.0]),
        ("smooth_l1", Box::new(smooth_l1), Box::new(smooth_l1_grad), vec![0.0, 1.0]),
    ]
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1000);
    let h = 1e-6;
    for (name, f, g, kinks) in losses() {
        let mut checked = 0;
        while checked < 1000 {
            let x: f64 = rng.random_range(-30.0..30.0);
            if kinks.iter().any(|k| (x.abs() - k).abs() < 1e-3) {
                continue;
            }
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            let an = g(x);
            let rel = (fd - an).abs() / an.abs().max(1e-8);
            assert!(rel < 1e-4, "{name} at {x}: fd {fd} analytic {an}");
            checked += 1;
        }
    }
}

#[test]
fn losses_are_even_nonnegative_and_monotone() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    for (name, f, _, _) in losses() {
        assert_eq!(f(0.0), 0.0, "{name}");
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-50.0..50.0);
            let y: f64 = rng.random_range(-50.0..50.0);
            assert!(f(x) >= 0.0);
            assert!((f(x) - f(-x)).abs() <= 1e-12 * f(x).max(1.0), "{name} not even at {x}");
            if x.abs() < y.abs() {
                assert!(f(x) <= f(y), "{name} not monotone: {x} {y}");
            }
        }
    }
}

#[test]
fn wing_is_continuous_at_the_branch_point() {
    for (w, e) in [(10.0, 2.0), (5.0, 0.5), (1.0, 3.0)] {
        let p = WingParams::new(w, e).unwrap();
        let below = wing(w * (1.0 - 1e-12), &p);
        let at = wing(w, &p);
        assert!((below - at).abs() < 1e-9, "w={w} e={e}");
        assert!((wing_grad(w * (1.0 - 1e-12), &p) - w / (e + w)).abs() < 1e-9);
        assert_eq!(wing_grad(w, &p), 1.0);
    }
    assert!(WingParams::new(0.0, 2.0).is_err());
    assert!(WingParams::new(10.0, -1.0).is_err());
}

#[test]
fn wing_amplifies_small_errors_relative_to_l1() {
    let p = WingParams::default();
    for x in [0.1, 0.5, 1.0, 2.0, 5.0] {
        assert!(wing_grad(x, &p) > l1_grad(x));
        assert!(wing(x, &p) > l1(x));
    }
    assert_eq!(wing_grad(25.0, &p), l1_grad(25.0));
}

#[test]
fn landmark_loss_is_the_masked_coordinate_sum() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let p = WingParams::default();
    for _ in 0..200 {
        let s: [f64; 10] = std::array::from_fn(|_| rng.random_range(-40.0..40.0));
        let t: [f64; 10] = std::array::from_fn(|_| rng.random_range(-40.0..40.0));
        let mut v = LandmarkVector::new(s, t);
        for k in 0..10 {
            v.valid[k] = rng.random_bool(0.8);
        }
        let mut expected = 0.0;
        for k in 0..10 {
            if v.valid[k] {
                let a = (s[k] - t[k]).abs();
                expected += if a < 10.0 { 10.0 * (1.0 + a / 2.0).ln() } else { a - (10.0 - 10.0 * 6.0f64.ln()) };
            }
        }
        assert!((landmark_loss(&v, &p) - expected).abs() < 1e-9 * expected.max(1.0));
        let g = landmark_loss_grad(&v, &p);
        for k in 0..10 {
            if !v.valid[k] {
                assert_eq!(g[k], 0.0);
            }
        }
    }
}

#[test]
fn unannotated_points_are_masked() {
    let pred = [[1.0, 2.0]; 5];
    let mut gt = [[3.0, 4.0]; 5];
    gt[2] = [-1.0, -1.0];
    let v = LandmarkVector::from_points(pred, gt);
    assert_eq!(v.valid.iter().filter(|b| !**b).count(), 2);
    assert!(!v.valid[4] && !v.valid[5]);
    let full = LandmarkVector::from_points(pred, [[3.0, 4.0]; 5]);
    let p = WingParams::default();
    assert!((landmark_loss(&v, &p) - 0.8 * landmark_loss(&full, &p)).abs() < 1e-12);
}

#[test]
fn anchor_normalization_divides_per_axis() {
    let v = LandmarkVector::new([8.0; 10], [4.0; 10]);
    let n = v.anchor_normalized([2.0, 4.0]);
    assert_eq!(n.s[0], 4.0);
    assert_eq!(n.s[1], 2.0);
    assert_eq!(n.target[2], 2.0);
    assert_eq!(n.target[3], 1.0);
}

#[test]
fn total_loss_weights_the_landmark_term() {
    let t = TotalLossSpec {
        loss_o: 1.25,
        loss_l: 3.0,
        lambda_l: TotalLossSpec::DEFAULT_LAMBDA,
    };
    assert_eq!(total_loss(&t).unwrap(), 2.75);
    assert!(total_loss(&TotalLossSpec { loss_l: -1.0, ..t }).is_err());
    assert!(total_loss(&TotalLossSpec { loss_o: f64::NAN, ..t }).is_err());
}

#[test]
fn toy_fit_converges_from_five_pixels() {
    let p = WingParams::default();
    let target: [f64; 10] = std::array::from_fn(|i| 100.0 + 7.0 * i as f64);
    for sign in [1.0, -1.0] {
        let start: [f64; 10] = std::array::from_fn(|i| target[i] + sign * 5.0);
        let trace = toy_fit(&LandmarkVector::new(start, target), &p, &FitOpts::new(0.1, 500)).unwrap();
        assert_eq!(trace.losses.len(), 501);
        assert!(trace.max_error(&target) < 1e-2, "sign {sign}: {}", trace.max_error(&target));
    }
}

#[test]
fn toy_fit_loss_never_increases_at_small_rate() {
    let p = WingParams::default();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let target: [f64; 10] = std::array::from_fn(|_| rng.random_range(0.0..200.0));
    let start: [f64; 10] = std::array::from_fn(|i| target[i] + rng.random_range(-20.0..20.0));
    let trace = toy_fit(&LandmarkVector::new(start, target), &p, &FitOpts::new(0.01, 500)).unwrap();
    for w in trace.losses.windows(2) {
        assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
    }
    assert!(trace.losses.last().unwrap() < &trace.losses[0]);
}

#[test]
fn toy_fit_rejects_bad_rate() {
    let v = LandmarkVector::new([0.0; 10], [1.0; 10]);
    assert!(toy_fit(&v, &WingParams::default(), &FitOpts::new(0.0, 10)).is_err());
    assert!(toy_fit(&v, &WingParams::default(), &FitOpts::new(f64::NAN, 10)).is_err());
}
