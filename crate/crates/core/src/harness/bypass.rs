//! Path certificates for crossing a loss barrier through ghost coordinates.
//!
//! On the two-well `ridge2d` landscape the original loss cannot move from
//! the shallow well to the deep one without climbing the ridge. With one
//! ghost coordinate `γ` contributing `f_ghost(γ) = softplus(2 − γ)`, the
//! extended loss `f_ext = f_orig + f_ghost` can: spend ghost loss to pay for
//! the climb, then descend. A certificate records such a path and is valid
//! when `f_ext` never rises (within tolerance) and the original loss ends
//! more than `ε` below where it started.

use serde::{Deserialize, Serialize};

use crate::data::landscape::{ridge2d_critical_points, Landscape};

/// Ghost-loss offset: `f_ghost(0) = softplus(2) = ln(1 + e²)`.
pub const GHOST_OFFSET: f64 = 2.0;
pub const MIN_SAMPLES: usize = 10;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
/// Required original-loss drop used by the demo.
pub const DEMO_EPSILON: f64 = 0.55;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus on `(0, ∞)`: `ln(eʸ − 1)`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn ghost_loss(gamma: f64) -> f64 {
    softplus(GHOST_OFFSET - gamma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub t: f64,
    pub w: [f64; 2],
    pub gamma: f64,
    pub f_orig: f64,
    pub f_ext: f64,
}

impl PathPoint {
    pub fn at(t: f64, w: [f64; 2], gamma: f64) -> Self {
        let f_orig = Landscape::Ridge2d.value(&w).expect("finite ridge2d point");
        Self {
            t,
            w,
            gamma,
            f_orig,
            f_ext: f_orig + ghost_loss(gamma),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathCertificate {
    pub points: Vec<PathPoint>,
    /// Required drop of the original loss.
    pub epsilon: f64,
    /// Allowed rise of `f_ext` between consecutive samples.
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    TooFewSamples {
        found: usize,
    },
    /// `f_ext` rose by `rise` going from sample `index − 1` to `index`.
    Rise {
        index: usize,
        rise: f64,
    },
    InsufficientDrop {
        start: f64,
        end: f64,
        epsilon: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub valid: bool,
    pub violation: Option<Violation>,
    /// `f_orig(start) − f_orig(end)`.
    pub drop: f64,
    /// Largest single-step increase of `f_ext` (≤ 0 on a descending path).
    pub max_rise: f64,
}

/// Checks both certificate conditions and names the first failure.
// The negated comparisons make a NaN rise or drop a violation.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn verify_path_certificate(cert: &PathCertificate) -> Verdict {
    let p = &cert.points;
    if p.len() < MIN_SAMPLES {
        return Verdict {
            valid: false,
            violation: Some(Violation::TooFewSamples { found: p.len() }),
            drop: 0.0,
            max_rise: 0.0,
        };
    }
    let drop = p[0].f_orig - p[p.len() - 1].f_orig;
    let mut max_rise = f64::NEG_INFINITY;
    let mut violation = None;
    for i in 1..p.len() {
        let rise = p[i].f_ext - p[i - 1].f_ext;
        max_rise = max_rise.max(rise);
        if violation.is_none() && !(rise <= cert.tolerance) {
            violation = Some(Violation::Rise { index: i, rise });
        }
    }
    if violation.is_none() && !(drop > cert.epsilon) {
        violation = Some(Violation::InsufficientDrop {
            start: p[0].f_orig,
            end: p[p.len() - 1].f_orig,
            epsilon: cert.epsilon,
        });
    }
    Verdict {
        valid: violation.is_none(),
        violation,
        drop,
        max_rise,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BypassDemo {
    pub certificate: PathCertificate,
    pub verdict: Verdict,
    /// Height of the ridge above the starting well in the original loss.
    pub barrier: f64,
    /// `f_ghost(γ₀)`, the ghost loss available to spend.
    pub ghost_budget: f64,
    pub climb_samples: usize,
    pub descent_samples: usize,
}

/// Builds the two-phase path on ridge2d and verifies it.
///
/// Climb: `w₁` moves linearly from the left well to the ridge top while `γ`
/// is solved so that `f_ext` falls linearly by `climb_slack` in total.
/// Descent: gradient descent on `f_ext` in `w` with `γ` held fixed, which
/// never increases `f_ext` for the small step used, until it settles in the
/// right well.
pub fn bypass_demo() -> BypassDemo {
    let [left, ridge, right] = ridge2d_critical_points();
    let climb_samples = 200;
    let climb_slack = 0.05;
    let start = PathPoint::at(0.0, [left, 0.0], 0.0);
    let c0 = start.f_ext;
    let mut points = vec![start];
    for i in 1..=climb_samples {
        let s = i as f64 / climb_samples as f64;
        let w = [left + s * (ridge - left), 0.0];
        let f_orig = Landscape::Ridge2d.value(&w).expect("finite");
        let target = c0 - climb_slack * s;
        let gamma = GHOST_OFFSET - softplus_inv(target - f_orig);
        points.push(PathPoint::at(0.0, w, gamma));
    }
    let gamma = points[points.len() - 1].gamma;
    let mut w = points[points.len() - 1].w;
    // Nudge off the ridge top towards the deep well, then descend.
    w[0] += 1e-3;
    let h = 0.01;
    let mut descent = 0;
    for _ in 0..20_000 {
        let g = Landscape::Ridge2d.gradient(&w).expect("finite");
        w = [w[0] - h * g[0], w[1] - h * g[1]];
        points.push(PathPoint::at(0.0, w, gamma));
        descent += 1;
        if g[0].hypot(g[1]) < 1e-10 || (w[0] - right).abs() < 1e-12 {
            break;
        }
    }
    let n = points.len();
    for (i, p) in points.iter_mut().enumerate() {
        p.t = i as f64 / (n - 1) as f64;
    }
    let certificate = PathCertificate {
        points,
        epsilon: DEMO_EPSILON,
        tolerance: DEFAULT_TOLERANCE,
    };
    let verdict = verify_path_certificate(&certificate);
    let f = |x: f64| Landscape::Ridge2d.value(&[x, 0.0]).expect("finite");
    BypassDemo {
        verdict,
        barrier: f(ridge) - f(left),
        ghost_budget: ghost_loss(0.0),
        climb_samples,
        descent_samples: descent,
        certificate,
    }
}
