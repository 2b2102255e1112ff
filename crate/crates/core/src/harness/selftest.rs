//! Quick randomized property checks over the whole stack, runnable from a
//! release binary without the test harness.

use rand::Rng;

use crate::data::idx::{parse_idx, IdxFile, LABELS_MAGIC};
use crate::data::landscape::Landscape;
use crate::diagnostics::ergodic::HessianSource;
use crate::diagnostics::{
    first_peak, lyapunov_running, spectral_norm_shifted, DenseHessian, ErgodicAccumulator, LyapunovObserver,
    SpectralProbe,
};
use crate::error::{Error, Result};
use crate::ghost::{ghost_softmax_ce, ghost_softmax_ce_grad, ghost_softmax_ce_grad_literal, ClassLayout};
use crate::harness::bypass::bypass_demo;
use crate::optim::{run_chain, BatchSampler, SamplerMode, SgdState};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<()>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}

fn random_case(rng: &mut impl Rng, scale: f64) -> (Tensor, usize, ClassLayout) {
    let c = rng.random_range(1..=5);
    let e = rng.random_range(0..=3);
    let z: Vec<f64> = (0..c + e).map(|_| rng.random_range(-scale..scale)).collect();
    (
        Tensor::new(vec![1, c + e], z).expect("shape"),
        rng.random_range(0..c),
        ClassLayout::new(c, e),
    )
}

fn decomposition() -> Result<()> {
    let mut rng = stream_rng(11, Stream::Noise);
    for _ in 0..2000 {
        let (z, y, layout) = random_case(&mut rng, 50.0);
        let b = ghost_softmax_ce(&z, &[y], layout)?;
        ensure(
            (b.l_ext - b.l_orig - b.l_ghost).abs() <= 1e-12 && b.l_ghost >= 0.0,
            || format!("decomposition fails at {:?}: {b:?}", z.data()),
        )?;
    }
    Ok(())
}

fn gradient_forms() -> Result<()> {
    let mut rng = stream_rng(12, Stream::Noise);
    for _ in 0..100 {
        let (z, y, layout) = random_case(&mut rng, 5.0);
        let a = ghost_softmax_ce_grad(&z, &[y], layout)?;
        let b = ghost_softmax_ce_grad_literal(&z, &[y], layout)?;
        for i in 0..z.numel() {
            let h = 1e-5;
            let mut p = z.clone();
            let mut m = z.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd =
                (ghost_softmax_ce(&p, &[y], layout)?.l_ext - ghost_softmax_ce(&m, &[y], layout)?.l_ext) / (2.0 * h);
            let (ga, gb) = (a.data()[i], b.data()[i]);
            let tol = 1e-6 * ga.abs().max(1e-3);
            ensure((ga - gb).abs() <= tol && (ga - fd).abs() <= tol, || {
                format!("gradient forms disagree at {:?}[{i}]: {ga} {gb} {fd}", z.data())
            })?;
        }
    }
    Ok(())
}

fn lyapunov_closed_forms() -> Result<()> {
    for (land, w, expect) in [
        (Landscape::quadratic_diag(&[2.0]), vec![0.0], 0.8f64.ln()),
        (Landscape::Saddle, vec![0.0, 0.0], 1.1f64.ln()),
    ] {
        let mut sampler = BatchSampler::new(&land, SamplerMode::FullBatch)?;
        let mut state = SgdState::new(w, 0.1, 0)?;
        let mut obs = LyapunovObserver::new(HessianSource::Exact(&land), SpectralProbe::default(), 0.1, 1)?;
        let recs = run_chain(&mut state, &mut sampler, 50, &mut [&mut obs])?;
        let mut acc = ErgodicAccumulator::new();
        acc.extend(&recs);
        let g = lyapunov_running(&acc)?;
        ensure((g - expect).abs() <= 1e-6, || {
            format!("{}: γ̂ = {g}, expected {expect}", land.name())
        })?;
    }
    Ok(())
}

fn spectral_against_jacobi() -> Result<()> {
    let mut rng = stream_rng(13, Stream::Noise);
    for _ in 0..20 {
        let d = 10;
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v = rng.random_range(-2.0..2.0);
                h[i * d + j] = v;
                h[j * d + i] = v;
            }
        }
        let eta = 0.3;
        let a: Vec<f64> = (0..d * d)
            .map(|k| if k / d == k % d { 1.0 } else { 0.0 } - eta * h[k])
            .collect();
        let exact = jacobi_spectral_radius(a, d);
        let est = spectral_norm_shifted(&SpectralProbe::default(), &DenseHessian { dim: d, matrix: h }, eta)?;
        ensure((est.norm - exact).abs() <= 1e-6, || {
            format!("spectral norm {} vs {exact}", est.norm)
        })?;
    }
    Ok(())
}

/// Largest |eigenvalue| of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_spectral_radius(mut a: Vec<f64>, d: usize) -> f64 {
    for _ in 0..100 {
        let off: f64 = (0..d * d).filter(|k| k / d != k % d).map(|k| a[k] * a[k]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p * d + q] == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * a[p * d + q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i * d + i].abs()).fold(0.0, f64::max)
}

fn idx_round_trip() -> Result<()> {
    let mut rng = stream_rng(14, Stream::Noise);
    for _ in 0..50 {
        let n = rng.random_range(0..40u32);
        let f = IdxFile {
            magic: LABELS_MAGIC,
            dims: vec![n],
            payload: (0..n).map(|_| rng.random_range(0..10u8)).collect(),
        };
        let bytes = f.to_bytes();
        ensure(parse_idx(&bytes)? == f, || "IDX round trip changed the file".into())?;
        if !bytes.is_empty() {
            let cut = rng.random_range(0..bytes.len());
            ensure(parse_idx(&bytes[..cut]).is_err(), || {
                format!("truncation at {cut} accepted")
            })?;
        }
    }
    Ok(())
}

fn peak_rule() -> Result<()> {
    ensure(first_peak(&[2.0, 1.5, 1.6, 1.8, 1.4, 1.2], 1) == Some(3), || {
        "peak example".into()
    })?;
    ensure(first_peak(&[1.0, 2.0, 2.0, 1.0], 1) == Some(1), || {
        "plateau example".into()
    })
}

fn bypass() -> Result<()> {
    let d = bypass_demo();
    ensure(d.verdict.valid, || {
        format!("bypass certificate invalid: {:?}", d.verdict.violation)
    })
}

pub fn run() -> Vec<Check> {
    type Probe = fn() -> Result<()>;
    let checks: [(&str, Probe); 7] = [
        ("loss decomposition", decomposition),
        ("gradient forms agree", gradient_forms),
        ("Lyapunov closed forms", lyapunov_closed_forms),
        ("spectral norm vs Jacobi", spectral_against_jacobi),
        ("IDX round trip", idx_round_trip),
        ("first-peak rule", peak_rule),
        ("barrier bypass certificate", bypass),
    ];
    checks
        .into_iter()
        .map(|(name, f)| Check { name, outcome: f() })
        .collect()
}
