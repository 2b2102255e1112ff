//! Spectral norm of the linearised SGD map `I − η∇²f(w)`.
//!
//! Hessians are never formed for models; they are applied through
//! finite differences of gradients. The operator is symmetric, so its
//! spectral norm is its largest absolute eigenvalue. Lanczos with full
//! reorthogonalisation is the default: power iteration stalls when the two
//! largest magnitudes are close (e.g. `1 − ηλ_min` against `ηλ_max − 1`),
//! and the Krylov space handles that gap without extra cost per iteration.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::SampleObjective;
use crate::rng::{stream_rng, Stream};

/// Symmetric linear operator `v ↦ ∇²f(w)·v`.
pub trait HessianOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference Hessian-vector product
/// `(∇f(w + εv̂) − ∇f(w − εv̂)) / 2ε · ‖v‖` with `ε = 1e-5·(1 + ‖w‖∞)`.
pub fn hvp<G>(grad: G, w: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != w.len() {
        return Err(Error::Dimension {
            op: "hvp",
            lhs: vec![w.len()],
            rhs: vec![v.len()],
        });
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Err(Error::contract("hvp direction must be non-zero"));
    }
    let sup = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let eps = 1e-5 * (1.0 + sup);
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + eps * b / vn).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - eps * b / vn).collect();
    let (gp, gm) = (grad(&plus)?, grad(&minus)?);
    let scale = vn / (2.0 * eps);
    Ok(gp.iter().zip(&gm).map(|(p, m)| (p - m) * scale).collect())
}

/// Finite-difference Hessian of a full-batch objective at a fixed point.
pub struct FdHessian<'a> {
    pub objective: &'a dyn SampleObjective,
    pub at: Vec<f64>,
}

impl HessianOperator for FdHessian<'_> {
    fn dim(&self) -> usize {
        self.at.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        hvp(|x| Ok(self.objective.batch_loss_grad(x, None)?.1), &self.at, v)
    }
}

/// An explicit symmetric matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHessian {
    pub dim: usize,
    pub matrix: Vec<f64>,
}

impl HessianOperator for DenseHessian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        if v.len() != d {
            return Err(Error::Dimension {
                op: "dense_hessian",
                lhs: vec![d],
                rhs: vec![v.len()],
            });
        }
        Ok((0..d).map(|i| dot(&self.matrix[i * d..(i + 1) * d], v)).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KrylovMethod {
    #[default]
    Lanczos,
    PowerIteration,
}

impl KrylovMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lanczos => "lanczos",
            Self::PowerIteration => "power",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lanczos" => Some(Self::Lanczos),
            "power" => Some(Self::PowerIteration),
            _ => None,
        }
    }
}

/// Iteration settings. The start vector is drawn from the probe stream of
/// `seed`, so repeated probes at the same point agree bitwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralProbe {
    pub method: KrylovMethod,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SpectralProbe {
    fn default() -> Self {
        Self {
            method: KrylovMethod::Lanczos,
            max_iterations: 100,
            tolerance: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEstimate {
    /// Estimated `‖I − ηH‖₂`.
    pub norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Unit vector attaining (approximately) the norm.
    pub vector: Vec<f64>,
}

impl SpectralProbe {
    fn start_vector(&self, d: usize) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, Stream::Probe);
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

/// `‖I − η∇²f‖₂` for the Hessian `op`. `η = 0` returns exactly 1.
pub fn spectral_norm_shifted(probe: &SpectralProbe, op: &dyn HessianOperator, eta: f64) -> Result<SpectralEstimate> {
    let d = op.dim();
    if d == 0 {
        return Err(Error::contract("spectral norm of an empty operator"));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::contract(format!(
            "learning rate must be non-negative, got {eta}"
        )));
    }
    if probe.max_iterations == 0 {
        return Err(Error::contract("spectral probe needs at least one iteration"));
    }
    let v0 = probe.start_vector(d);
    if eta == 0.0 {
        return Ok(SpectralEstimate {
            norm: 1.0,
            converged: true,
            iterations: 0,
            vector: v0,
        });
    }
    let shifted = |v: &[f64]| -> Result<Vec<f64>> {
        let hv = op.apply(v)?;
        let out: Vec<f64> = v.iter().zip(&hv).map(|(a, b)| a - eta * b).collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Hessian-vector product".into()));
        }
        Ok(out)
    };
    match probe.method {
        KrylovMethod::Lanczos => lanczos(shifted, v0, probe),
        KrylovMethod::PowerIteration => power(shifted, v0, probe),
    }
}

fn power<A>(apply: A, mut v: Vec<f64>, probe: &SpectralProbe) -> Result<SpectralEstimate>
where
    A: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut prev = f64::NAN;
    for it in 1..=probe.max_iterations {
        let av = apply(&v)?;
        // ‖Av‖ for unit v bounds |vᵀAv| from above and converges to ‖A‖;
        // the returned vector is the one the estimate was measured on.
        let est = norm(&av);
        let converged = est == 0.0 || (est - prev).abs() <= probe.tolerance * est.max(1.0);
        if converged || it == probe.max_iterations {
            return Ok(SpectralEstimate {
                norm: est,
                converged,
                iterations: it,
                vector: v,
            });
        }
        v = av.into_iter().map(|x| x / est).collect();
        prev = est;
    }
    unreachable!("max_iterations ≥ 1 is checked by the caller")
}

fn lanczos<A>(apply: A, v0: Vec<f64>, probe: &SpectralProbe) -> Result<SpectralEstimate>
where
    A: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d = v0.len();
    let steps = probe.max_iterations.min(d);
    let mut basis: Vec<Vec<f64>> = vec![v0];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut scale = 0.0f64;
    let mut last = None;

    for j in 0..steps {
        let mut z = apply(&basis[j])?;
        let a = dot(&basis[j], &z);
        alpha.push(a);
        // Two passes of Gram–Schmidt against the whole basis.
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &z);
                z.iter_mut().zip(q).for_each(|(zi, qi)| *zi -= c * qi);
            }
        }
        let b = norm(&z);
        scale = scale.max(a.abs()).max(b);

        let (theta, last_component) = extreme_ritz_last(&alpha, &beta)?;
        let residual = b * last_component.abs();
        last = Some(theta);
        let exhausted = b <= 1e-13 * scale.max(1.0) || j + 1 == d;
        if exhausted || residual <= probe.tolerance * theta.abs().max(1.0) {
            let vector = ritz_vector(&alpha, &beta, theta, &basis)?;
            return Ok(SpectralEstimate {
                norm: theta.abs(),
                converged: true,
                iterations: j + 1,
                vector,
            });
        }
        if j + 1 < steps {
            beta.push(b);
            basis.push(z.into_iter().map(|x| x / b).collect());
        }
    }
    let theta = last.expect("at least one Lanczos step");
    let vector = ritz_vector(&alpha, &beta[..alpha.len() - 1], theta, &basis)?;
    Ok(SpectralEstimate {
        norm: theta.abs(),
        converged: false,
        iterations: steps,
        vector,
    })
}

/// The Ritz value of largest magnitude and the last component of its
/// eigenvector in the tridiagonal basis.
fn extreme_ritz_last(alpha: &[f64], beta: &[f64]) -> Result<(f64, f64)> {
    let k = alpha.len();
    let mut z = vec![vec![0.0; k]];
    z[0][k - 1] = 1.0;
    let evals = tridiagonal_eigen(alpha, beta, &mut z)?;
    let idx = argmax_abs(&evals);
    Ok((evals[idx], z[0][idx]))
}

fn argmax_abs(v: &[f64]) -> usize {
    // Ties between ±θ resolve to the positive value for determinism.
    let mut best = 0;
    for i in 1..v.len() {
        let (a, b) = (v[i].abs(), v[best].abs());
        if a > b || (a == b && v[i] > v[best]) {
            best = i;
        }
    }
    best
}

fn ritz_vector(alpha: &[f64], beta: &[f64], theta: f64, basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = alpha.len();
    let mut z: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut r = vec![0.0; k];
            r[i] = 1.0;
            r
        })
        .collect();
    let evals = tridiagonal_eigen(alpha, beta, &mut z)?;
    let idx = evals
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - theta).abs().total_cmp(&(b.1 - theta).abs()))
        .map(|(i, _)| i)
        .expect("non-empty spectrum");
    let d = basis[0].len();
    let mut v = vec![0.0; d];
    for (row, q) in z.iter().zip(basis) {
        let c = row[idx];
        v.iter_mut().zip(q).for_each(|(vi, qi)| *vi += c * qi);
    }
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Implicit QL with Wilkinson shifts on the symmetric tridiagonal matrix
/// with diagonal `diag` and off-diagonal `off` (`off.len() = diag.len() − 1`).
///
/// `rows` holds selected rows of the identity on entry and the matching rows
/// of the eigenvector matrix on exit; pass a single row to get one component
/// of every eigenvector in O(k²).
pub(crate) fn tridiagonal_eigen(diag: &[f64], off: &[f64], rows: &mut [Vec<f64>]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::contract("tridiagonal eigensolver did not converge"));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for row in rows.iter_mut() {
                    let f = row[i + 1];
                    row[i + 1] = s * row[i] + c * f;
                    row[i] = c * row[i] - s * f;
                }
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(d)
}
