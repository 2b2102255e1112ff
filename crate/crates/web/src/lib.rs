//! Three small operations behind the browser demo. Each returns plain data
//! (serialisable to JSON); the `wasm` module wraps them for JavaScript.

use serde::Serialize;

use ergoghost::data::{Landscape, NoisyLandscape};
use ergoghost::diagnostics::ergodic::HessianSource;
use ergoghost::diagnostics::{ergodic_means, lyapunov_running, ErgodicAccumulator, LyapunovObserver, SpectralProbe};
use ergoghost::ghost::{ghost_softmax_ce, ghost_softmax_ce_grad, ClassLayout};
use ergoghost::harness::{bypass_demo, verify_path_certificate, BypassDemo};
use ergoghost::optim::{run_chain, BatchSampler, GradientEstimator, SamplerMode, SgdState};
use ergoghost::Tensor;

pub const MAX_STEPS: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decomposition {
    pub l_ext: f64,
    pub l_orig: f64,
    pub l_ghost: f64,
    /// Softmax over all `c + e` logits.
    pub probs: Vec<f64>,
    /// `∂l_ext/∂z`.
    pub grad: Vec<f64>,
}

/// Loss decomposition for one sample whose first `real` logits are real
/// classes and the rest ghosts.
pub fn decompose(logits: &[f64], real: usize, label: usize) -> Result<Decomposition, String> {
    if real == 0 || real > logits.len() {
        return Err(format!("need 1..={} real classes, got {real}", logits.len()));
    }
    let layout = ClassLayout::new(real, logits.len() - real);
    let z = Tensor::new(vec![1, logits.len()], logits.to_vec()).map_err(|e| e.to_string())?;
    let b = ghost_softmax_ce(&z, &[label], layout).map_err(|e| e.to_string())?;
    let grad = ghost_softmax_ce_grad(&z, &[label], layout).map_err(|e| e.to_string())?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = ex.iter().sum();
    Ok(Decomposition {
        l_ext: b.l_ext,
        l_orig: b.l_orig,
        l_ghost: b.l_ghost,
        probs: ex.iter().map(|v| v / total).collect(),
        grad: grad.into_data(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovTrace {
    pub landscape: String,
    pub eta: f64,
    /// Running estimate after each step (every step is probed).
    pub gamma_hat: Vec<f64>,
    /// The exact value where the Hessian is constant.
    pub closed_form: Option<f64>,
    pub mean_f: f64,
    /// Last iterate.
    pub end: Vec<f64>,
}

fn landscape(name: &str) -> Result<(Landscape, Vec<f64>), String> {
    Ok(match name {
        "quadratic" => (Landscape::quadratic_diag(&[2.0]), vec![1.0]),
        "saddle" => (Landscape::Saddle, vec![0.5, 1e-3]),
        "ridge2d" => (Landscape::Ridge2d, vec![-0.3, 0.5]),
        "quartic" => (Landscape::Quartic { dim: 2 }, vec![0.8, -0.5]),
        other => return Err(format!("unknown landscape `{other}`")),
    })
}

/// Runs (noisy) gradient descent on a named landscape and tracks the
/// running Lyapunov estimate.
pub fn lyapunov(name: &str, eta: f64, steps: usize, noise: f64, seed: u64) -> Result<LyapunovTrace, String> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(format!("steps must be in 1..={MAX_STEPS}"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err("noise must be non-negative".into());
    }
    let (land, start) = landscape(name)?;
    let err = |e: ergoghost::Error| e.to_string();
    let mut estimator: Box<dyn GradientEstimator> = if noise > 0.0 {
        Box::new(NoisyLandscape::new(&land, noise))
    } else {
        Box::new(BatchSampler::new(&land, SamplerMode::FullBatch).map_err(err)?)
    };
    let mut state = SgdState::new(start, eta, seed).map_err(err)?;
    let probe = SpectralProbe {
        seed,
        ..SpectralProbe::default()
    };
    let mut obs = LyapunovObserver::new(HessianSource::Exact(&land), probe, eta, 1).map_err(err)?;
    let records = run_chain(&mut state, estimator.as_mut(), steps as u64, &mut [&mut obs]).map_err(err)?;
    let mut acc = ErgodicAccumulator::new();
    let mut gamma_hat = Vec::with_capacity(records.len());
    for r in &records {
        acc.push(r);
        gamma_hat.push(lyapunov_running(&acc).map_err(err)?);
    }
    let closed_form = match name {
        "quadratic" => Some((1.0 - 2.0 * eta).abs().ln()),
        "saddle" => Some((1.0 + eta).ln()),
        _ => None,
    };
    Ok(LyapunovTrace {
        landscape: name.into(),
        eta,
        gamma_hat,
        closed_form,
        mean_f: ergodic_means(&acc).map_err(err)?.f_ext,
        end: state.params,
    })
}

/// Final `γ̂` on a grid of `points` learning rates spread over `(0, eta_max]`.
pub fn lyapunov_sweep(
    name: &str,
    eta_max: f64,
    points: usize,
    steps: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>, String> {
    if points == 0 || points > 200 {
        return Err("points must be in 1..=200".into());
    }
    (1..=points)
        .map(|i| {
            let eta = eta_max * i as f64 / points as f64;
            let t = lyapunov(name, eta, steps, noise, seed)?;
            Ok((eta, *t.gamma_hat.last().expect("steps ≥ 1")))
        })
        .collect()
}

/// The ridge2d bypass path, re-verified against the required drop
/// `epsilon`.
pub fn bypass(epsilon: f64) -> Result<BypassDemo, String> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err("epsilon must be non-negative".into());
    }
    let mut demo = bypass_demo();
    demo.certificate.epsilon = epsilon;
    demo.verdict = verify_path_certificate(&demo.certificate);
    Ok(demo)
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    fn json<T: serde::Serialize>(r: Result<T, String>) -> Result<String, JsError> {
        r.map_err(|e| JsError::new(&e))
            .and_then(|v| serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string())))
    }

    #[wasm_bindgen]
    pub fn decompose(logits: &[f64], real: usize, label: usize) -> Result<String, JsError> {
        json(super::decompose(logits, real, label))
    }

    #[wasm_bindgen]
    pub fn lyapunov(landscape: &str, eta: f64, steps: usize, noise: f64, seed: u64) -> Result<String, JsError> {
        json(super::lyapunov(landscape, eta, steps, noise, seed))
    }

    #[wasm_bindgen]
    pub fn lyapunov_sweep(
        landscape: &str,
        eta_max: f64,
        points: usize,
        steps: usize,
        noise: f64,
        seed: u64,
    ) -> Result<String, JsError> {
        json(super::lyapunov_sweep(landscape, eta_max, points, steps, noise, seed))
    }

    #[wasm_bindgen]
    pub fn bypass(epsilon: f64) -> Result<String, JsError> {
        json(super::bypass(epsilon))
    }
}
