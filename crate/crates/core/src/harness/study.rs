//! The paired baseline/ghost RMNIST study.
//!
//! Each run draws its own class-balanced training subset, then trains two
//! arms from the same seed: a baseline with no ghost columns and a ghost arm
//! with `ghosts` extra columns. Ghost columns are initialised from their own
//! random stream, so the two arms share every backbone weight, every data
//! draw and every batch, and differ only in the head.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::LossTarget;
use crate::data::mnist::{rmnist_sample, Dataset, MnistSplit};
use crate::diagnostics::ergodic::HessianSource;
use crate::diagnostics::{
    ergodic_means, first_peak, lyapunov_running, ErgodicAccumulator, LyapunovObserver, SpectralProbe,
};
use crate::error::{Error, Result};
use crate::harness::config::StudyConfig;
use crate::models::Model;
use crate::optim::{run_chain_into, BatchSampler, ModelObjective, Observer, SamplerMode, SgdState};

/// Published magnitude of the mean peak shift, reported for comparison only.
pub const REFERENCE_PEAK_SHIFT: f64 = 4.8;

/// Per-epoch series of one arm. Index `k` of the epoch vectors is epoch
/// `k + 1`: the training loss is the full objective at the parameters the
/// epoch started from, test metrics are at the parameters it ended with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSeries {
    pub ghosts: usize,
    /// Test loss and accuracy at the shared initialisation (epoch 0).
    pub initial_test_loss: f64,
    pub initial_test_acc: f64,
    pub train_loss: Vec<f64>,
    /// Mean ghost component of the training loss during each epoch.
    pub train_ghost: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub test_acc: Vec<f64>,
    /// Running Lyapunov estimate; `None` until the first probe.
    pub gamma_hat: Vec<Option<f64>>,
    /// Running ergodic mean of the ghost loss.
    pub f_ghost_mean: Vec<f64>,
    /// First local maximum of the test loss, counted in epochs (0 = init).
    pub peak: Option<usize>,
    pub unconverged_probes: u64,
    pub projections: u64,
    pub final_fingerprint: u64,
}

impl ArmSeries {
    /// Test loss from epoch 0 through the last epoch.
    pub fn test_loss_with_init(&self) -> Vec<f64> {
        std::iter::once(self.initial_test_loss)
            .chain(self.test_loss.iter().copied())
            .collect()
    }

    /// Mean ghost loss over the last quarter of epochs divided by the mean
    /// over the first quarter.
    pub fn ghost_decay_ratio(&self) -> Option<f64> {
        let n = self.train_ghost.len();
        let q = (n / 4).max(1);
        if n == 0 {
            return None;
        }
        let first = self.train_ghost[..q].iter().sum::<f64>() / q as f64;
        let last = self.train_ghost[n - q..].iter().sum::<f64>() / q as f64;
        (first > 0.0).then(|| last / first)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: usize,
    pub seed: u64,
    pub baseline: Option<ArmSeries>,
    pub ghost: Option<ArmSeries>,
    /// Why the run was excluded, if it was.
    pub failure: Option<String>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RunResult {
    pub fn completed(&self) -> Option<(&ArmSeries, &ArmSeries)> {
        match (&self.baseline, &self.ghost, &self.failure) {
            (Some(b), Some(g), None) => Some((b, g)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakPair {
    pub run_id: usize,
    pub baseline: Option<usize>,
    pub ghost: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRun {
    pub run_id: usize,
    pub reason: String,
}

/// Mean and sample standard deviation across runs, per epoch (index 0 is
/// the initialisation).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Band {
    pub fn from_series(series: &[Vec<f64>]) -> Self {
        let Some(len) = series.iter().map(Vec::len).min() else {
            return Self::default();
        };
        let n = series.len() as f64;
        let mut band = Self::default();
        for t in 0..len {
            let mean = series.iter().map(|s| s[t]).sum::<f64>() / n;
            let sd = if series.len() > 1 {
                (series.iter().map(|s| (s[t] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            band.mean.push(mean);
            band.sd.push(sd);
        }
        band
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub runs_requested: usize,
    pub runs_completed: usize,
    pub excluded: Vec<ExcludedRun>,
    pub peaks: Vec<PeakPair>,
    /// Completed runs where both arms have a detected peak.
    pub paired_runs: usize,
    /// Completed runs where at least one arm has no detected peak.
    pub undetected_peak_runs: usize,
    /// Mean of `peak_baseline − peak_ghost` over paired runs.
    pub mean_peak_shift: Option<f64>,
    pub peak_shift_sd: Option<f64>,
    pub reference_peak_shift: f64,
    pub mean_initial_test_loss_baseline: Option<f64>,
    pub mean_initial_test_loss_ghost: Option<f64>,
    /// Ghost-arm test loss ≥ baseline test loss at the shared initialisation,
    /// in every completed run.
    pub initial_ghost_not_below_baseline: bool,
    pub ghost_decay_ratios: Vec<f64>,
    pub max_ghost_decay_ratio: Option<f64>,
    pub band_baseline: Band,
    pub band_ghost: Band,
    pub sigma: String,
    pub lyapunov_norm: String,
}

#[derive(Clone, Debug)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub runs: Vec<RunResult>,
    pub summary: StudySummary,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sample_sd(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    if v.len() < 2 {
        return Some(0.0);
    }
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn train_arm(cfg: &StudyConfig, run: usize, ghosts: usize, train: &Dataset, test: &Dataset) -> Result<ArmSeries> {
    let seed = cfg.run_seed(run);
    let (model, template) = Model::build(cfg.model_spec(run, ghosts))?;
    let objective = ModelObjective {
        model: &model,
        template: &template,
        images: &train.images,
        labels: &train.labels,
        target: LossTarget::Extended,
    };
    let (mode, steps_per_epoch) = if cfg.batch_size == 0 {
        (SamplerMode::FullBatch, 1)
    } else {
        (
            SamplerMode::WithoutReplacementEpoch { batch: cfg.batch_size },
            (train.len() / cfg.batch_size) as u64,
        )
    };
    let mut sampler = BatchSampler::new(&objective, mode)?;
    let mut state = SgdState::new(template.as_slice().to_vec(), cfg.eta, seed)?;
    let probe = SpectralProbe {
        method: cfg.lyapunov_method,
        max_iterations: cfg.lyapunov_iterations,
        tolerance: 1e-8,
        seed,
    };
    let mut lyap = if cfg.lyapunov_every > 0 {
        Some(LyapunovObserver::new(
            HessianSource::FiniteDifference(&objective),
            probe,
            cfg.eta,
            cfg.lyapunov_every as u64 * steps_per_epoch,
        )?)
    } else {
        None
    };

    let evaluate = |w: &[f64]| -> Result<(f64, f64)> {
        let (loss, acc) = model.evaluate(&template.with_values(w.to_vec())?, &test.images, &test.labels)?;
        if !loss.l_ext.is_finite() {
            return Err(Error::NonFinite("test loss".into()));
        }
        Ok((loss.l_ext, acc))
    };
    let (initial_test_loss, initial_test_acc) = evaluate(&state.params)?;
    let mut arm = ArmSeries {
        ghosts,
        initial_test_loss,
        initial_test_acc,
        train_loss: Vec::with_capacity(cfg.epochs),
        train_ghost: Vec::with_capacity(cfg.epochs),
        test_loss: Vec::with_capacity(cfg.epochs),
        test_acc: Vec::with_capacity(cfg.epochs),
        gamma_hat: Vec::with_capacity(cfg.epochs),
        f_ghost_mean: Vec::with_capacity(cfg.epochs),
        peak: None,
        unconverged_probes: 0,
        projections: 0,
        final_fingerprint: 0,
    };
    let mut acc = ErgodicAccumulator::new();
    let mut records = Vec::new();
    for _ in 0..cfg.epochs {
        records.clear();
        let mut observers: Vec<&mut dyn Observer> = Vec::new();
        if let Some(l) = lyap.as_mut() {
            observers.push(l);
        }
        run_chain_into(&mut state, &mut sampler, steps_per_epoch, &mut observers, &mut records)?;
        acc.extend(&records);
        let n = records.len() as f64;
        let train_loss = records.iter().map(|r| r.f_ext).sum::<f64>() / n;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        arm.train_loss.push(train_loss);
        arm.train_ghost.push(records.iter().map(|r| r.f_ghost).sum::<f64>() / n);
        arm.f_ghost_mean.push(ergodic_means(&acc)?.f_ghost);
        arm.gamma_hat.push(lyapunov_running(&acc).ok());
        let (tl, ta) = evaluate(&state.params)?;
        arm.test_loss.push(tl);
        arm.test_acc.push(ta);
    }
    arm.peak = first_peak(&arm.test_loss_with_init(), cfg.smooth_window);
    arm.unconverged_probes = lyap.map_or(0, |l| l.unconverged);
    arm.projections = state.projections;
    arm.final_fingerprint = state.fingerprint();
    Ok(arm)
}

/// Trains both arms of run `run` on its own subset of `split.train`.
pub fn run_pair(cfg: &StudyConfig, run: usize, split: &MnistSplit, test: &Dataset) -> RunResult {
    let start = Instant::now();
    let seed = cfg.run_seed(run);
    let mut result = RunResult {
        run_id: run,
        seed,
        baseline: None,
        ghost: None,
        failure: None,
        wall_seconds: 0.0,
    };
    let outcome = (|| -> Result<()> {
        let train = rmnist_sample(&split.train, cfg.per_class, seed)?;
        result.baseline = Some(train_arm(cfg, run, 0, &train, test)?);
        result.ghost = Some(train_arm(cfg, run, cfg.ghosts, &train, test)?);
        Ok(())
    })();
    if let Err(e) = outcome {
        result.failure = Some(e.to_string());
    }
    result.wall_seconds = start.elapsed().as_secs_f64();
    result
}

fn run_all(cfg: &StudyConfig, split: &MnistSplit, test: &Dataset) -> Result<Vec<RunResult>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
        Ok(pool.install(|| {
            (0..cfg.runs)
                .into_par_iter()
                .map(|r| run_pair(cfg, r, split, test))
                .collect()
        }))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok((0..cfg.runs).map(|r| run_pair(cfg, r, split, test)).collect())
    }
}

/// Runs every pair, then reduces them into a summary.
pub fn run_study(cfg: &StudyConfig, split: &MnistSplit) -> Result<StudyReport> {
    cfg.validate()?;
    let test = if cfg.test_limit == 0 {
        split.test.clone()
    } else {
        split.test.head(cfg.test_limit)?
    };
    let runs = run_all(cfg, split, &test)?;
    let summary = summarize(cfg.runs, &runs);
    Ok(StudyReport {
        config: cfg.clone(),
        runs,
        summary,
    })
}

pub fn summarize(requested: usize, runs: &[RunResult]) -> StudySummary {
    let mut excluded = Vec::new();
    let mut peaks = Vec::new();
    let mut shifts = Vec::new();
    let (mut init_b, mut init_g, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    let (mut curves_b, mut curves_g) = (Vec::new(), Vec::new());
    let mut initial_ok = true;
    for r in runs {
        let Some((b, g)) = r.completed() else {
            excluded.push(ExcludedRun {
                run_id: r.run_id,
                reason: r.failure.clone().unwrap_or_else(|| "incomplete".into()),
            });
            continue;
        };
        peaks.push(PeakPair {
            run_id: r.run_id,
            baseline: b.peak,
            ghost: g.peak,
        });
        if let (Some(pb), Some(pg)) = (b.peak, g.peak) {
            shifts.push(pb as f64 - pg as f64);
        }
        init_b.push(b.initial_test_loss);
        init_g.push(g.initial_test_loss);
        initial_ok &= g.initial_test_loss >= b.initial_test_loss;
        if let Some(ratio) = g.ghost_decay_ratio() {
            ratios.push(ratio);
        }
        curves_b.push(b.test_loss_with_init());
        curves_g.push(g.test_loss_with_init());
    }
    StudySummary {
        runs_requested: requested,
        runs_completed: peaks.len(),
        excluded,
        paired_runs: shifts.len(),
        undetected_peak_runs: peaks.len() - shifts.len(),
        peaks,
        mean_peak_shift: mean(&shifts),
        peak_shift_sd: sample_sd(&shifts),
        reference_peak_shift: REFERENCE_PEAK_SHIFT,
        mean_initial_test_loss_baseline: mean(&init_b),
        mean_initial_test_loss_ghost: mean(&init_g),
        initial_ghost_not_below_baseline: initial_ok && !init_b.is_empty(),
        max_ghost_decay_ratio: ratios.iter().copied().reduce(f64::max),
        ghost_decay_ratios: ratios,
        band_baseline: Band::from_series(&curves_b),
        band_ghost: Band::from_series(&curves_g),
        sigma: "sample (n-1)".into(),
        lyapunov_norm: "spectral (operator 2-norm)".into(),
    }
}
