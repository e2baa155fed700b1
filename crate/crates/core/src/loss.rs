//! Wing loss, reference regression losses and landmark loss assembly.
//!
//! ```text
//! wing(x) = w·ln(1 + |x|/e)   if |x| < w
//!         = |x| - C            otherwise,   C = w - w·ln(1 + w/e)
//! ```

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WingParams {
    w: f64,
    e: f64,
}

impl Default for WingParams {
    fn default() -> Self {
        WingParams { w: 10.0, e: 2.0 }
    }
}

impl WingParams {
    pub fn new(w: f64, e: f64) -> Result<Self> {
        if !(w > 0.0 && w.is_finite() && e > 0.0 && e.is_finite()) {
            return Err(Error::Config(format!("wing parameters must be positive, got w={w} e={e}")));
        }
        Ok(WingParams { w, e })
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn e(&self) -> f64 {
        self.e
    }

    /// Offset joining the two branches at `|x| = w`.
    pub fn c(&self) -> f64 {
        self.w - self.w * (self.w / self.e).ln_1p()
    }
}

pub fn wing(x: f64, p: &WingParams) -> f64 {
    let a = x.abs();
    if a < p.w {
        p.w * (a / p.e).ln_1p()
    } else {
        a - p.c()
    }
}

/// Derivative of [`wing`]; 0 at the origin.
pub fn wing_grad(x: f64, p: &WingParams) -> f64 {
    let a = x.abs();
    if x == 0.0 {
        0.0
    } else if a < p.w {
        x.signum() * p.w / (p.e + a)
    } else {
        x.signum()
    }
}

pub fn l2(x: f64) -> f64 {
    x * x
}

pub fn l2_grad(x: f64) -> f64 {
    2.0 * x
}

pub fn l1(x: f64) -> f64 {
    x.abs()
}

pub fn l1_grad(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Five `(x, y)` points flattened to ten coordinates, with ground truth and
/// a validity mask per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkVector {
    pub s: [f64; 10],
    pub target: [f64; 10],
    pub valid: [bool; 10],
}

impl LandmarkVector {
    pub fn new(s: [f64; 10], target: [f64; 10]) -> Self {
        LandmarkVector {
            s,
            target,
            valid: [true; 10],
        }
    }

    /// Ground-truth points at -1 (unannotated) are masked out.
    pub fn from_points(pred: [[f64; 2]; 5], gt: [[f64; 2]; 5]) -> Self {
        let flat = |p: [[f64; 2]; 5]| std::array::from_fn(|i| p[i / 2][i % 2]);
        let mut v = LandmarkVector::new(flat(pred), flat(gt));
        for k in 0..5 {
            let missing = gt[k][0] == -1.0 && gt[k][1] == -1.0;
            v.valid[2 * k] = !missing;
            v.valid[2 * k + 1] = !missing;
        }
        v
    }

    /// Differences expressed in anchor units: x coordinates divided by the
    /// anchor width, y coordinates by its height.
    pub fn anchor_normalized(&self, anchor: [f64; 2]) -> LandmarkVector {
        let scale = |i: usize| anchor[i % 2];
        LandmarkVector {
            s: std::array::from_fn(|i| self.s[i] / scale(i)),
            target: std::array::from_fn(|i| self.target[i] / scale(i)),
            valid: self.valid,
        }
    }
}

/// Sum of [`wing`] over the valid coordinate differences.
pub fn landmark_loss(v: &LandmarkVector, p: &WingParams) -> f64 {
    (0..10)
        .filter(|&i| v.valid[i])
        .map(|i| wing(v.s[i] - v.target[i], p))
        .sum()
}

pub fn landmark_loss_grad(v: &LandmarkVector, p: &WingParams) -> [f64; 10] {
    std::array::from_fn(|i| if v.valid[i] { wing_grad(v.s[i] - v.target[i], p) } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TotalLossSpec {
    /// Object-detection loss, supplied by the caller.
    pub loss_o: f64,
    pub loss_l: f64,
    pub lambda_l: f64,
}

impl TotalLossSpec {
    pub const DEFAULT_LAMBDA: f64 = 0.5;
}

/// `loss_O + λ_L·loss_L`.
pub fn total_loss(t: &TotalLossSpec) -> Result<f64> {
    for (name, v) in [("loss_o", t.loss_o), ("loss_l", t.loss_l), ("lambda_l", t.lambda_l)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    Ok(t.loss_o + t.lambda_l * t.loss_l)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOpts {
    pub lr: f64,
    pub steps: usize,
    /// Backtrack each coordinate's step until its loss term decreases
    /// sufficiently (Armijo); otherwise take plain fixed steps.
    pub line_search: bool,
}

impl FitOpts {
    pub fn new(lr: f64, steps: usize) -> Self {
        FitOpts {
            lr,
            steps,
            line_search: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitTrace {
    /// Loss before the first step, then after each step.
    pub losses: Vec<f64>,
    pub points: [f64; 10],
}

impl FitTrace {
    pub fn max_error(&self, target: &[f64; 10]) -> f64 {
        self.points
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

const ARMIJO_C: f64 = 1e-4;
const DIVERGENCE: f64 = 1e6;

/// Gradient descent of `landmark_loss` over the predicted points.
///
/// The loss is a sum of one term per coordinate, so the line search runs per
/// coordinate; a fixed step cannot settle onto the kink of `wing` at zero,
/// where the gradient jumps between ±w/e.
pub fn toy_fit(initial: &LandmarkVector, p: &WingParams, opts: &FitOpts) -> Result<FitTrace> {
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", opts.lr)));
    }
    let mut v = initial.clone();
    let mut losses = Vec::with_capacity(opts.steps + 1);
    losses.push(landmark_loss(&v, p));
    for _ in 0..opts.steps {
        for i in (0..10).filter(|&i| v.valid[i]) {
            let d = v.s[i] - v.target[i];
            let g = wing_grad(d, p);
            let mut t = opts.lr;
            if opts.line_search {
                let f0 = wing(d, p);
                let mut tries = 0;
                while wing(d - t * g, p) > f0 - ARMIJO_C * t * g * g && tries < 60 {
                    t *= 0.5;
                    tries += 1;
                }
            }
            v.s[i] -= t * g;
        }
        let loss = landmark_loss(&v, p);
        if !(loss <= DIVERGENCE) {
            return Err(Error::Config(format!("toy fit diverged: loss {loss}")));
        }
        losses.push(loss);
    }
    Ok(FitTrace { losses, points: v.s })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wing_hand_values() {
        let p = WingParams::default();
        assert_eq!(wing(0.0, &p), 0.0);
        let ln6 = 6f64.ln();
        assert!((wing(20.0, &p) - (20.0 - (10.0 - 10.0 * ln6))).abs() < 1e-12);
        assert!((wing(20.0, &p) - 27.91759).abs() < 1e-5);
        let below = wing(10.0 - 1e-12, &p);
        let at = wing(10.0, &p);
        assert!((below - at).abs() < 1e-9);
        assert!((at - 10.0 * ln6).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(WingParams::new(0.0, 2.0).is_err());
        assert!(WingParams::new(10.0, -1.0).is_err());
        assert!(WingParams::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn gradient_boost_near_zero() {
        let p = WingParams::default();
        assert!((wing_grad(0.01, &p) - 10.0 / 2.01).abs() < 1e-12);
        assert!(wing_grad(0.01, &p) > l2_grad(0.01));
        assert_eq!(wing_grad(-25.0, &p), -1.0);
        assert_eq!(wing_grad(0.0, &p), 0.0);
    }

    #[test]
    fn smooth_l1_joins_at_one() {
        assert_eq!(smooth_l1(1.0), 0.5);
        assert!(smooth_l1(1.0 - 1e-12) - 0.5 < 1e-11);
        assert_eq!(smooth_l1_grad(1.0), 1.0);
        assert!((smooth_l1_grad(1.0 - 1e-12) - 1.0).abs() < 1e-11);
        assert_eq!((l2(0.0), l1(0.0), smooth_l1(0.0)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn total_loss_examples() {
        let t = TotalLossSpec {
            loss_o: 1.0,
            loss_l: 2.0,
            lambda_l: 0.5,
        };
        assert_eq!(total_loss(&t).unwrap(), 2.0);
        assert_eq!(total_loss(&TotalLossSpec { lambda_l: 0.0, ..t }).unwrap(), 1.0);
        assert!(total_loss(&TotalLossSpec { loss_o: -1.0, ..t }).is_err());
    }

    #[test]
    fn masked_coordinates_do_not_count() {
        let p = WingParams::default();
        let mut v = LandmarkVector::new([1.0; 10], [0.0; 10]);
        v.valid = [false; 10];
        assert_eq!(landmark_loss(&v, &p), 0.0);
        v.valid[3] = true;
        assert_eq!(landmark_loss(&v, &p), wing(1.0, &p));
        let gt = [[-1.0, -1.0], [5.0, 5.0], [-1.0, -1.0], [1.0, 1.0], [2.0, 2.0]];
        let v = LandmarkVector::from_points([[0.0; 2]; 5], gt);
        assert_eq!(v.valid.iter().filter(|b| **b).count(), 6);
    }

    #[test]
    fn fit_from_target_stays_at_zero() {
        let v = LandmarkVector::new([3.0; 10], [3.0; 10]);
        let tr = toy_fit(&v, &WingParams::default(), &FitOpts::new(0.1, 20)).unwrap();
        assert!(tr.losses.iter().all(|l| *l == 0.0));
    }
}
