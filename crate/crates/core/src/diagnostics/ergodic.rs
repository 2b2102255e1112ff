use serde::{Deserialize, Serialize};

use crate::data::landscape::Landscape;
use crate::diagnostics::spectral::{spectral_norm_shifted, DenseHessian, FdHessian, SpectralProbe};
use crate::error::{Error, Result};
use crate::optim::{Observer, SampleObjective, TrajectoryRecord};

/// Compensated (Neumaier) running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Sum {
    hi: f64,
    lo: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.hi + x;
        if !t.is_finite() {
            // ±∞ (e.g. ln of an exactly singular Jacobian) absorbs everything;
            // the compensation term would turn it into NaN
            self.hi = t;
            return;
        }
        if self.hi.abs() >= x.abs() {
            self.lo += (self.hi - t) + x;
        } else {
            self.lo += (x - t) + self.hi;
        }
        self.hi = t;
    }

    fn value(self) -> f64 {
        if !self.hi.is_finite() {
            return self.hi;
        }
        self.hi + self.lo
    }
}

/// Running sums of per-step observables along one chain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErgodicAccumulator {
    count: u64,
    f_ext: Sum,
    f_orig: Sum,
    f_ghost: Sum,
    grad_norm: Sum,
    log_norm: Sum,
    probes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicMeans {
    pub f_ext: f64,
    pub f_orig: f64,
    pub f_ghost: f64,
    pub grad_norm: f64,
}

impl ErgodicAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: &TrajectoryRecord) {
        self.count += 1;
        self.f_ext.add(r.f_ext);
        self.f_orig.add(r.f_orig);
        self.f_ghost.add(r.f_ghost);
        self.grad_norm.add(r.grad_norm);
        if let Some(s) = r.lyapunov_summand {
            self.log_norm.add(s);
            self.probes += 1;
        }
    }

    pub fn extend<'a>(&mut self, records: impl IntoIterator<Item = &'a TrajectoryRecord>) {
        records.into_iter().for_each(|r| self.push(r));
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn probes(&self) -> u64 {
        self.probes
    }
}

/// Arithmetic means of the recorded observables.
pub fn ergodic_means(acc: &ErgodicAccumulator) -> Result<ErgodicMeans> {
    if acc.count == 0 {
        return Err(Error::contract("ergodic means need at least one step"));
    }
    let n = acc.count as f64;
    Ok(ErgodicMeans {
        f_ext: acc.f_ext.value() / n,
        f_orig: acc.f_orig.value() / n,
        f_ghost: acc.f_ghost.value() / n,
        grad_norm: acc.grad_norm.value() / n,
    })
}

/// `γ̂`: mean of the recorded `log ‖I − η∇²f(w^(t))‖₂` over probed steps.
pub fn lyapunov_running(acc: &ErgodicAccumulator) -> Result<f64> {
    if acc.probes == 0 {
        return Err(Error::contract("no Lyapunov probes recorded"));
    }
    Ok(acc.log_norm.value() / acc.probes as f64)
}

/// Where Hessian actions come from.
#[derive(Clone, Copy)]
pub enum HessianSource<'a> {
    /// Analytic Hessian of a closed-form landscape.
    Exact(&'a Landscape),
    /// Central differences of the full-batch gradient.
    FiniteDifference(&'a dyn SampleObjective),
}

/// Fills `lyapunov_summand` on every `cadence`-th step (steps `k−1, 2k−1, …`),
/// so after `N` steps there are `⌊N/k⌋` summands.
pub struct LyapunovObserver<'a> {
    pub source: HessianSource<'a>,
    pub probe: SpectralProbe,
    pub eta: f64,
    pub cadence: u64,
    pub unconverged: u64,
}

impl<'a> LyapunovObserver<'a> {
    pub fn new(source: HessianSource<'a>, probe: SpectralProbe, eta: f64, cadence: u64) -> Result<Self> {
        if cadence == 0 {
            return Err(Error::contract("probe cadence must be at least 1"));
        }
        Ok(Self {
            source,
            probe,
            eta,
            cadence,
            unconverged: 0,
        })
    }

    /// `log ‖I − η∇²f(w)‖₂` at `w`.
    pub fn summand(&mut self, w: &[f64]) -> Result<f64> {
        let est = match self.source {
            HessianSource::Exact(l) => {
                let op = DenseHessian {
                    dim: l.dim(),
                    matrix: l.eval(w)?.hessian,
                };
                spectral_norm_shifted(&self.probe, &op, self.eta)?
            }
            HessianSource::FiniteDifference(obj) => {
                let op = FdHessian {
                    objective: obj,
                    at: w.to_vec(),
                };
                spectral_norm_shifted(&self.probe, &op, self.eta)?
            }
        };
        if !est.converged {
            self.unconverged += 1;
        }
        Ok(est.norm.ln())
    }
}

impl Observer for LyapunovObserver<'_> {
    fn observe(&mut self, step: u64, params: &[f64], record: &mut TrajectoryRecord) -> Result<()> {
        if (step + 1).is_multiple_of(self.cadence) {
            record.lyapunov_summand = Some(self.summand(params)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{run_chain, trajectory_hash, BatchSampler, SamplerMode, SgdState};

    fn record(f: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            step: 0,
            f_ext: f,
            f_orig: f,
            f_ghost: 0.0,
            grad_norm: 0.0,
            lyapunov_summand: None,
            param_hash: 0,
        }
    }

    #[test]
    fn simple_means() {
        let mut acc = ErgodicAccumulator::new();
        for f in [1.0, 2.0, 3.0] {
            acc.push(&record(f));
        }
        assert_eq!(ergodic_means(&acc).unwrap().f_orig, 2.0);
        assert!(ergodic_means(&ErgodicAccumulator::new()).is_err());
        assert!(lyapunov_running(&acc).is_err());
    }

    fn pinned(land: &Landscape, w0: Vec<f64>, steps: u64, cadence: u64) -> (Vec<TrajectoryRecord>, f64) {
        let mut sampler = BatchSampler::new(land, SamplerMode::FullBatch).unwrap();
        let mut state = SgdState::new(w0, 0.1, 0).unwrap();
        let mut obs =
            LyapunovObserver::new(HessianSource::Exact(land), SpectralProbe::default(), 0.1, cadence).unwrap();
        let recs = run_chain(&mut state, &mut sampler, steps, &mut [&mut obs]).unwrap();
        let mut acc = ErgodicAccumulator::new();
        acc.extend(&recs);
        (recs, lyapunov_running(&acc).unwrap())
    }

    #[test]
    fn lyapunov_at_fixed_points() {
        let (_, g) = pinned(&Landscape::quadratic_diag(&[2.0]), vec![0.0], 20, 1);
        assert!((g - 0.8f64.ln()).abs() < 1e-12);
        let (_, g) = pinned(&Landscape::Saddle, vec![0.0, 0.0], 20, 1);
        assert!((g - 1.1f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn singular_jacobian_gives_minus_infinity() {
        let land = Landscape::quadratic_diag(&[2.0]);
        let mut sampler = BatchSampler::new(&land, SamplerMode::FullBatch).unwrap();
        let mut state = SgdState::new(vec![1.0], 0.5, 0).unwrap();
        let mut obs = LyapunovObserver::new(HessianSource::Exact(&land), SpectralProbe::default(), 0.5, 1).unwrap();
        let recs = run_chain(&mut state, &mut sampler, 5, &mut [&mut obs]).unwrap();
        let mut acc = ErgodicAccumulator::new();
        acc.extend(&recs);
        assert_eq!(lyapunov_running(&acc).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn summand_count_follows_cadence() {
        for (n, k) in [(20, 1), (20, 3), (25, 10), (10, 10)] {
            let (recs, _) = pinned(&Landscape::quadratic_diag(&[2.0]), vec![0.0], n, k);
            let c = recs.iter().filter(|r| r.lyapunov_summand.is_some()).count() as u64;
            assert_eq!(c, n / k);
        }
    }

    #[test]
    fn observer_does_not_perturb_the_chain() {
        let land = Landscape::quadratic_diag(&[0.5, 2.0, 3.0]);
        let w0 = vec![1.0, -1.0, 0.5];
        let mut sampler = BatchSampler::new(&land, SamplerMode::FullBatch).unwrap();
        let mut a = SgdState::new(w0.clone(), 0.1, 0).unwrap();
        let plain = run_chain(&mut a, &mut sampler, 30, &mut []).unwrap();
        let (watched, _) = pinned(&land, w0, 30, 1);
        assert_eq!(trajectory_hash(&plain), trajectory_hash(&watched));
    }
}
