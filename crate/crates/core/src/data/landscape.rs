//! Closed-form test landscapes with analytic gradients and Hessians.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ghost::LossBreakdown;
use crate::optim::{BatchId, Estimate, GradientEstimator, SampleObjective};

/// Ridge height parameters: `(w₁² − 1)² − tilt·w₁ + ½·w₂²`.
pub const RIDGE_TILT: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub enum Landscape {
    /// `½ wᵀ H w` with `H` symmetric, stored row-major `d×d`.
    Quadratic { dim: usize, hessian: Vec<f64> },
    /// `½ (w₁² − w₂²)`.
    Saddle,
    /// `(w₁² − 1)² − 0.3 w₁ + ½ w₂²`: a shallow left well, a deeper right well,
    /// and a ridge between them.
    Ridge2d,
    /// `Σ wᵢ⁴`.
    Quartic { dim: usize },
}

/// `f`, `∇f`, and the dense `d×d` Hessian (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeEval {
    pub f: f64,
    pub grad: Vec<f64>,
    pub hessian: Vec<f64>,
}

impl Landscape {
    pub fn quadratic_diag(lambdas: &[f64]) -> Self {
        let d = lambdas.len();
        let mut h = vec![0.0; d * d];
        for (i, &l) in lambdas.iter().enumerate() {
            h[i * d + i] = l;
        }
        Self::Quadratic { dim: d, hessian: h }
    }

    /// A dense quadratic; `hessian` must be symmetric.
    pub fn quadratic(dim: usize, hessian: Vec<f64>) -> Result<Self> {
        if hessian.len() != dim * dim {
            return Err(Error::Dimension {
                op: "quadratic",
                lhs: vec![dim, dim],
                rhs: vec![hessian.len()],
            });
        }
        for i in 0..dim {
            for j in 0..i {
                if hessian[i * dim + j] != hessian[j * dim + i] {
                    return Err(Error::contract("quadratic Hessian must be symmetric"));
                }
            }
        }
        Ok(Self::Quadratic { dim, hessian })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic { dim, .. } | Self::Quartic { dim } => *dim,
            Self::Saddle | Self::Ridge2d => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Quadratic { .. } => "quadratic",
            Self::Saddle => "saddle",
            Self::Ridge2d => "ridge2d",
            Self::Quartic { .. } => "quartic",
        }
    }

    pub fn eval(&self, w: &[f64]) -> Result<LandscapeEval> {
        let d = self.dim();
        if w.len() != d {
            return Err(Error::Dimension {
                op: "landscape_eval",
                lhs: vec![d],
                rhs: vec![w.len()],
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} evaluated at {w:?}", self.name())));
        }
        Ok(match self {
            Self::Quadratic { hessian, .. } => {
                let grad: Vec<f64> = (0..d)
                    .map(|i| (0..d).map(|j| hessian[i * d + j] * w[j]).sum())
                    .collect();
                let f = 0.5 * w.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>();
                LandscapeEval {
                    f,
                    grad,
                    hessian: hessian.clone(),
                }
            }
            Self::Saddle => LandscapeEval {
                f: 0.5 * (w[0] * w[0] - w[1] * w[1]),
                grad: vec![w[0], -w[1]],
                hessian: vec![1.0, 0.0, 0.0, -1.0],
            },
            Self::Ridge2d => {
                let (x, y) = (w[0], w[1]);
                let q = x * x - 1.0;
                LandscapeEval {
                    f: q * q - RIDGE_TILT * x + 0.5 * y * y,
                    grad: vec![4.0 * x * q - RIDGE_TILT, y],
                    hessian: vec![12.0 * x * x - 4.0, 0.0, 0.0, 1.0],
                }
            }
            Self::Quartic { .. } => {
                let mut hessian = vec![0.0; d * d];
                for i in 0..d {
                    hessian[i * d + i] = 12.0 * w[i] * w[i];
                }
                LandscapeEval {
                    f: w.iter().map(|v| v.powi(4)).sum(),
                    grad: w.iter().map(|v| 4.0 * v.powi(3)).collect(),
                    hessian,
                }
            }
        })
    }

    pub fn value(&self, w: &[f64]) -> Result<f64> {
        Ok(self.eval(w)?.f)
    }

    pub fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(w)?.grad)
    }
}

/// Critical points of ridge2d along `w₂ = 0`: roots of `4x³ − 4x − 0.3`,
/// returned as (left well, ridge, right well).
pub fn ridge2d_critical_points() -> [f64; 3] {
    let p = |x: f64| 4.0 * x * x * x - 4.0 * x - RIDGE_TILT;
    let bisect = |mut lo: f64, mut hi: f64| {
        let rising = p(hi) > p(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (p(mid) > 0.0) == rising {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };
    // p is positive at the local max x = −1/√3 and negative at x = 1/√3.
    let s = 1.0 / 3f64.sqrt();
    [bisect(-2.0, -s), bisect(-s, s), bisect(s, 2.0)]
}

/// A landscape is a one-sample objective with no ghost component.
impl SampleObjective for Landscape {
    fn num_samples(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        Landscape::dim(self)
    }

    fn batch_loss_grad(&self, w: &[f64], _batch: Option<&[usize]>) -> Result<(LossBreakdown, Vec<f64>)> {
        let e = self.eval(w)?;
        Ok((
            LossBreakdown {
                l_ext: e.f,
                l_orig: e.f,
                l_ghost: 0.0,
            },
            e.grad,
        ))
    }
}

/// `g(w, ξ) = ∇f(w) + σ ξ` with `ξ ~ N(0, I)`; on a quadratic this is the
/// AR(1) chain `w ← (I − ηH) w − ησξ`.
pub struct NoisyLandscape<'a> {
    pub landscape: &'a Landscape,
    pub sigma: f64,
    draws: u64,
}

impl<'a> NoisyLandscape<'a> {
    pub fn new(landscape: &'a Landscape, sigma: f64) -> Self {
        Self {
            landscape,
            sigma,
            draws: 0,
        }
    }
}

impl GradientEstimator for NoisyLandscape<'_> {
    fn dim(&self) -> usize {
        self.landscape.dim()
    }

    fn estimate(&mut self, w: &[f64], rng: &mut ChaCha8Rng) -> Result<Estimate> {
        let e = self.landscape.eval(w)?;
        let grad = e
            .grad
            .iter()
            .map(|g| {
                let xi: f64 = StandardNormal.sample(rng);
                g + self.sigma * xi
            })
            .collect();
        self.draws += 1;
        Ok(Estimate {
            grad,
            batch: BatchId::Draw(self.draws - 1),
            loss: LossBreakdown {
                l_ext: e.f,
                l_orig: e.f,
                l_ghost: 0.0,
            },
        })
    }
}
