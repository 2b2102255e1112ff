//! The SGD map `w ← w − η g(w, ξ)` run as a time-homogeneous Markov chain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::LossTarget;
use crate::error::{Error, Result};
use crate::ghost::LossBreakdown;
use crate::models::{Model, ParamVector};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Default box half-width keeping the chain inside a compact set.
pub const DEFAULT_DOMAIN_BOUND: f64 = 1e3;

/// A finite-sum objective `f(w) = (1/n) Σ ℓ(w; x_i)`.
pub trait SampleObjective {
    fn num_samples(&self) -> usize;
    fn dim(&self) -> usize;
    /// Mean loss and gradient over `batch`, or over every sample when `None`.
    fn batch_loss_grad(&self, w: &[f64], batch: Option<&[usize]>) -> Result<(LossBreakdown, Vec<f64>)>;
}

/// Which draw produced a gradient estimate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BatchId {
    Full,
    Indices(Vec<usize>),
    /// An external noise draw, identified by its position in the stream.
    Draw(u64),
}

#[derive(Clone, Debug)]
pub struct Estimate {
    pub grad: Vec<f64>,
    pub batch: BatchId,
    /// Loss decomposition on the drawn batch at the pre-step parameters.
    pub loss: LossBreakdown,
}

/// Source of stochastic gradients `g(w, ξ)`.
pub trait GradientEstimator {
    fn dim(&self) -> usize;
    fn estimate(&mut self, w: &[f64], rng: &mut ChaCha8Rng) -> Result<Estimate>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SamplerMode {
    FullBatch,
    WithReplacement {
        batch: usize,
    },
    /// Reshuffle once per pass; consecutive batches partition the pass.
    WithoutReplacementEpoch {
        batch: usize,
    },
}

/// Draws mini-batches from a [`SampleObjective`].
pub struct BatchSampler<'a, O: ?Sized> {
    objective: &'a O,
    mode: SamplerMode,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a, O: SampleObjective + ?Sized> BatchSampler<'a, O> {
    pub fn new(objective: &'a O, mode: SamplerMode) -> Result<Self> {
        let n = objective.num_samples();
        if n == 0 {
            return Err(Error::contract("dataset is empty"));
        }
        match mode {
            SamplerMode::WithReplacement { batch } | SamplerMode::WithoutReplacementEpoch { batch }
                if batch == 0 || batch > n =>
            {
                return Err(Error::contract(format!("batch size {batch} outside 1..={n}")));
            }
            _ => {}
        }
        Ok(Self {
            objective,
            mode,
            order: Vec::new(),
            cursor: n,
        })
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
        let n = self.objective.num_samples();
        match self.mode {
            SamplerMode::FullBatch => None,
            SamplerMode::WithReplacement { batch } => {
                Some((0..batch).map(|_| rng.random_range(0..n as u64) as usize).collect())
            }
            SamplerMode::WithoutReplacementEpoch { batch } => {
                if self.cursor + batch > self.order.len() {
                    self.order = (0..n).collect();
                    fisher_yates(&mut self.order, rng);
                    self.cursor = 0;
                }
                let b = self.order[self.cursor..self.cursor + batch].to_vec();
                self.cursor += batch;
                Some(b)
            }
        }
    }
}

impl<O: SampleObjective + ?Sized> GradientEstimator for BatchSampler<'_, O> {
    fn dim(&self) -> usize {
        self.objective.dim()
    }

    fn estimate(&mut self, w: &[f64], rng: &mut ChaCha8Rng) -> Result<Estimate> {
        let batch = self.draw(rng);
        let (loss, grad) = self.objective.batch_loss_grad(w, batch.as_deref())?;
        Ok(Estimate {
            grad,
            batch: batch.map_or(BatchId::Full, BatchId::Indices),
            loss,
        })
    }
}

/// In-place Fisher–Yates shuffle drawing `u64` indices, so the permutation
/// for a given generator state does not depend on the platform word size.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        items.swap(i, j);
    }
}

/// A [`Model`] trained on a fixed labelled image set.
pub struct ModelObjective<'a> {
    pub model: &'a Model,
    pub template: &'a ParamVector,
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub target: LossTarget,
}

impl ModelObjective<'_> {
    fn gather(&self, batch: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(batch.len() * per);
        for &i in batch {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = batch.len();
        Ok((
            Tensor::new(shape, data)?,
            batch.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

impl SampleObjective for ModelObjective<'_> {
    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.template.len()
    }

    fn batch_loss_grad(&self, w: &[f64], batch: Option<&[usize]>) -> Result<(LossBreakdown, Vec<f64>)> {
        let params = self.template.with_values(w.to_vec())?;
        match batch {
            None => self.model.loss_and_grad(&params, self.images, self.labels, self.target),
            Some(b) => {
                let (x, y) = self.gather(b)?;
                self.model.loss_and_grad(&params, &x, &y, self.target)
            }
        }
    }
}

/// State of one SGD chain.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub params: Vec<f64>,
    pub step: u64,
    pub eta: f64,
    pub momentum: f64,
    pub domain_bound: f64,
    /// Number of coordinates clamped by the compact projection so far.
    pub projections: u64,
    rng: ChaCha8Rng,
}

impl SgdState {
    pub fn new(params: Vec<f64>, eta: f64, seed: u64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {eta}")));
        }
        let mut s = Self {
            params,
            step: 0,
            eta,
            momentum: 0.0,
            domain_bound: DEFAULT_DOMAIN_BOUND,
            projections: 0,
            rng: stream_rng(seed, Stream::Batches),
        };
        s.projections = project_onto_box(&mut s.params, s.domain_bound);
        Ok(s)
    }

    pub fn with_domain_bound(mut self, bound: f64) -> Self {
        self.domain_bound = bound;
        self.projections += project_onto_box(&mut self.params, bound);
        self
    }

    pub fn fingerprint(&self) -> u64 {
        crate::fingerprint_f64(&self.params)
    }
}

/// Clamps every coordinate to `[-bound, bound]`; returns how many moved.
pub fn project_onto_box(w: &mut [f64], bound: f64) -> u64 {
    let mut fired = 0;
    for v in w.iter_mut() {
        let c = v.clamp(-bound, bound);
        if c != *v {
            *v = c;
            fired += 1;
        }
    }
    fired
}

/// One application of the SGD map. Returns the estimate used.
pub fn sgd_step(state: &mut SgdState, estimator: &mut dyn GradientEstimator) -> Result<Estimate> {
    if state.momentum != 0.0 {
        return Err(Error::contract("momentum is fixed at zero"));
    }
    let est = estimator.estimate(&state.params, &mut state.rng)?;
    if est.grad.len() != state.params.len() {
        return Err(Error::Dimension {
            op: "sgd_step",
            lhs: vec![state.params.len()],
            rhs: vec![est.grad.len()],
        });
    }
    if let Some(i) = est.grad.iter().position(|g| !g.is_finite()) {
        let finite_norm = est
            .grad
            .iter()
            .filter(|g| g.is_finite())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        return Err(Error::NonFinite(format!(
            "gradient at step {} (first bad coordinate {i} = {}, finite-part norm {finite_norm:.6e}, \
             params fingerprint {:016x}, loss {:?})",
            state.step,
            est.grad[i],
            state.fingerprint(),
            est.loss
        )));
    }
    for (w, g) in state.params.iter_mut().zip(&est.grad) {
        *w -= state.eta * g;
    }
    state.projections += project_onto_box(&mut state.params, state.domain_bound);
    state.step += 1;
    Ok(est)
}

/// Per-step observables along a chain. Losses and gradient norm refer to the
/// pre-step parameters `w^(t)`; the hash is of `w^(t+1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub f_ext: f64,
    pub f_orig: f64,
    pub f_ghost: f64,
    pub grad_norm: f64,
    pub lyapunov_summand: Option<f64>,
    pub param_hash: u64,
}

/// Read-only hook invoked with `w^(t)` before each step.
pub trait Observer {
    fn observe(&mut self, step: u64, params: &[f64], record: &mut TrajectoryRecord) -> Result<()>;
}

/// Runs `steps` SGD steps, appending one record per step to `sink`. On
/// failure the records produced so far stay in `sink`.
pub fn run_chain_into(
    state: &mut SgdState,
    estimator: &mut dyn GradientEstimator,
    steps: u64,
    observers: &mut [&mut dyn Observer],
    sink: &mut Vec<TrajectoryRecord>,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::contract("run_chain needs at least one step"));
    }
    for _ in 0..steps {
        let t = state.step;
        let pre = state.params.clone();
        let est = sgd_step(state, estimator)?;
        let mut record = TrajectoryRecord {
            step: t,
            f_ext: est.loss.l_ext,
            f_orig: est.loss.l_orig,
            f_ghost: est.loss.l_ghost,
            grad_norm: est.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            lyapunov_summand: None,
            param_hash: state.fingerprint(),
        };
        for obs in observers.iter_mut() {
            if let Err(e) = obs.observe(t, &pre, &mut record) {
                sink.push(record);
                return Err(e);
            }
        }
        sink.push(record);
    }
    Ok(())
}

pub fn run_chain(
    state: &mut SgdState,
    estimator: &mut dyn GradientEstimator,
    steps: u64,
    observers: &mut [&mut dyn Observer],
) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::with_capacity(steps as usize);
    run_chain_into(state, estimator, steps, observers, &mut out)?;
    Ok(out)
}

/// Fingerprint of a whole trajectory.
pub fn trajectory_hash(records: &[TrajectoryRecord]) -> u64 {
    let vals: Vec<f64> = records
        .iter()
        .flat_map(|r| [r.f_ext, r.f_orig, r.f_ghost, r.grad_norm, f64::from_bits(r.param_hash)])
        .collect();
    crate::fingerprint_f64(&vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::landscape::Landscape;

    /// ℓ(w; i) = ½ (a_i·w − y_i)²
    struct LeastSquares {
        a: Vec<[f64; 2]>,
        y: Vec<f64>,
    }

    impl SampleObjective for LeastSquares {
        fn num_samples(&self) -> usize {
            self.y.len()
        }
        fn dim(&self) -> usize {
            2
        }
        fn batch_loss_grad(&self, w: &[f64], batch: Option<&[usize]>) -> Result<(LossBreakdown, Vec<f64>)> {
            let all: Vec<usize> = (0..self.y.len()).collect();
            let idx = batch.unwrap_or(&all);
            let mut g = vec![0.0; 2];
            let mut f = 0.0;
            for &i in idx {
                let r = self.a[i][0] * w[0] + self.a[i][1] * w[1] - self.y[i];
                f += 0.5 * r * r;
                g[0] += r * self.a[i][0];
                g[1] += r * self.a[i][1];
            }
            let m = idx.len() as f64;
            g.iter_mut().for_each(|v| *v /= m);
            let l = f / m;
            Ok((
                LossBreakdown {
                    l_ext: l,
                    l_orig: l,
                    l_ghost: 0.0,
                },
                g,
            ))
        }
    }

    fn four_samples() -> LeastSquares {
        LeastSquares {
            a: vec![[1.0, 2.0], [-0.5, 1.0], [3.0, -1.0], [0.2, 0.7]],
            y: vec![1.0, -2.0, 0.5, 3.0],
        }
    }

    struct FixedGrad(Vec<f64>);
    impl GradientEstimator for FixedGrad {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn estimate(&mut self, _w: &[f64], _rng: &mut ChaCha8Rng) -> Result<Estimate> {
            Ok(Estimate {
                grad: self.0.clone(),
                batch: BatchId::Full,
                loss: LossBreakdown::default(),
            })
        }
    }

    #[test]
    fn scalar_step_examples() {
        let mut s = SgdState::new(vec![1.0], 0.1, 0).unwrap();
        sgd_step(&mut s, &mut FixedGrad(vec![2.0])).unwrap();
        assert!((s.params[0] - 0.8).abs() < 1e-15);
        let before = s.params.clone();
        sgd_step(&mut s, &mut FixedGrad(vec![0.0])).unwrap();
        assert_eq!(s.params, before);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn quadratic_closed_form_recursion() {
        let land = Landscape::quadratic_diag(&[2.0]);
        let mut sampler = BatchSampler::new(&land, SamplerMode::FullBatch).unwrap();
        let mut s = SgdState::new(vec![1.0], 0.1, 0).unwrap();
        for _ in 0..5 {
            sgd_step(&mut s, &mut sampler).unwrap();
        }
        assert!((s.params[0] - 0.32768).abs() < 1e-14);
    }

    #[test]
    fn full_batch_of_one_is_the_sample_gradient() {
        let one = LeastSquares {
            a: vec![[1.5, -0.5]],
            y: vec![0.25],
        };
        let mut sampler = BatchSampler::new(&one, SamplerMode::FullBatch).unwrap();
        let mut rng = stream_rng(1, Stream::Batches);
        let w = [0.3, -0.7];
        let est = sampler.estimate(&w, &mut rng).unwrap();
        assert_eq!(est.grad, one.batch_loss_grad(&w, Some(&[0])).unwrap().1);
    }

    #[test]
    fn whole_pass_without_replacement_equals_full_batch() {
        let obj = four_samples();
        let w = [0.4, -1.1];
        let mut full = BatchSampler::new(&obj, SamplerMode::FullBatch).unwrap();
        let mut pass = BatchSampler::new(&obj, SamplerMode::WithoutReplacementEpoch { batch: 4 }).unwrap();
        let mut rng = stream_rng(3, Stream::Batches);
        let a = full.estimate(&w, &mut rng).unwrap().grad;
        let b = pass.estimate(&w, &mut rng).unwrap().grad;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn pair_batches_average_to_full_gradient() {
        let obj = four_samples();
        let w = [0.4, -1.1];
        let (_, full) = obj.batch_loss_grad(&w, None).unwrap();
        let mut mean = [0.0; 2];
        let mut count = 0.0;
        for i in 0..4 {
            for j in i + 1..4 {
                let (_, g) = obj.batch_loss_grad(&w, Some(&[i, j])).unwrap();
                mean[0] += g[0];
                mean[1] += g[1];
                count += 1.0;
            }
        }
        assert_eq!(count, 6.0);
        for k in 0..2 {
            assert!((mean[k] / count - full[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn epoch_sampler_partitions_each_pass() {
        let obj = four_samples();
        let mut sampler = BatchSampler::new(&obj, SamplerMode::WithoutReplacementEpoch { batch: 2 }).unwrap();
        let mut rng = stream_rng(5, Stream::Batches);
        let mut seen = Vec::new();
        for _ in 0..2 {
            match sampler.estimate(&[0.0, 0.0], &mut rng).unwrap().batch {
                BatchId::Indices(b) => seen.extend(b),
                other => panic!("unexpected {other:?}"),
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let empty = LeastSquares { a: vec![], y: vec![] };
        assert!(matches!(
            BatchSampler::new(&empty, SamplerMode::FullBatch),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = SgdState::new(vec![1.0, 2.0], 0.1, 0).unwrap();
        let err = sgd_step(&mut s, &mut FixedGrad(vec![0.0, f64::NAN])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("coordinate 1")));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn projection_is_idempotent_and_inactive_inside() {
        let mut w = vec![0.5, -2.0, 7.0];
        assert_eq!(project_onto_box(&mut w, 5.0), 1);
        let snapshot = w.clone();
        assert_eq!(project_onto_box(&mut w, 5.0), 0);
        assert_eq!(w, snapshot);
        assert_eq!(w, vec![0.5, -2.0, 5.0]);
    }

    #[test]
    fn observers_do_not_change_the_chain() {
        struct Counter(u64);
        impl Observer for Counter {
            fn observe(&mut self, _: u64, _: &[f64], r: &mut TrajectoryRecord) -> Result<()> {
                self.0 += 1;
                r.lyapunov_summand = Some(0.0);
                Ok(())
            }
        }
        let obj = four_samples();
        let run = |observe: bool| {
            let mut sampler = BatchSampler::new(&obj, SamplerMode::WithReplacement { batch: 2 }).unwrap();
            let mut s = SgdState::new(vec![0.0, 0.0], 0.05, 42).unwrap();
            let mut c = Counter(0);
            let mut obs: Vec<&mut dyn Observer> = if observe { vec![&mut c] } else { vec![] };
            let recs = run_chain(&mut s, &mut sampler, 25, &mut obs).unwrap();
            (s.params, recs.iter().map(|r| r.param_hash).collect::<Vec<_>>())
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn single_step_chain_is_one_step() {
        let land = Landscape::quadratic_diag(&[2.0]);
        let mut sampler = BatchSampler::new(&land, SamplerMode::FullBatch).unwrap();
        let mut s = SgdState::new(vec![1.0], 0.1, 0).unwrap();
        let recs = run_chain(&mut s, &mut sampler, 1, &mut []).unwrap();
        assert_eq!(recs.len(), 1);
        assert!((s.params[0] - 0.8).abs() < 1e-15);
        assert!((recs[0].f_ext - 1.0).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let obj = four_samples();
        let hash = |seed| {
            let mut sampler = BatchSampler::new(&obj, SamplerMode::WithReplacement { batch: 1 }).unwrap();
            let mut s = SgdState::new(vec![0.0, 0.0], 0.05, seed).unwrap();
            trajectory_hash(&run_chain(&mut s, &mut sampler, 50, &mut []).unwrap())
        };
        assert_eq!(hash(9), hash(9));
        assert_ne!(hash(9), hash(10));
    }

    #[test]
    fn failing_observer_keeps_partial_records() {
        struct FailAt(u64);
        impl Observer for FailAt {
            fn observe(&mut self, step: u64, _: &[f64], _: &mut TrajectoryRecord) -> Result<()> {
                if step == self.0 {
                    Err(Error::contract("observer gave up"))
                } else {
                    Ok(())
                }
            }
        }
        let land = Landscape::quadratic_diag(&[1.0]);
        let mut sampler = BatchSampler::new(&land, SamplerMode::FullBatch).unwrap();
        let mut s = SgdState::new(vec![1.0], 0.1, 0).unwrap();
        let mut sink = Vec::new();
        let mut obs = FailAt(3);
        assert!(run_chain_into(&mut s, &mut sampler, 10, &mut [&mut obs], &mut sink).is_err());
        assert_eq!(sink.len(), 4);
    }

    #[test]
    fn gradient_descent_decreases_convex_quadratic() {
        let land = Landscape::quadratic_diag(&[0.5, 2.0, 3.5]);
        let mut sampler = BatchSampler::new(&land, SamplerMode::FullBatch).unwrap();
        // η < 2/λ_max
        let mut s = SgdState::new(vec![1.0, -2.0, 0.7], 0.5, 0).unwrap();
        let recs = run_chain(&mut s, &mut sampler, 40, &mut []).unwrap();
        for pair in recs.windows(2) {
            assert!(pair[1].f_ext < pair[0].f_ext);
        }
    }
}
