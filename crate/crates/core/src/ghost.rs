//! Ghost-category softmax heads.
//!
//! A classifier head with `c` real classes is extended by `e` ghost classes
//! that never appear as labels. The extended cross-entropy splits exactly as
//!
//! ```text
//! l_ext = l_orig + l_ghost,   l_ghost = log(1 + Σ_ghost e^z / Σ_real e^z) ≥ 0
//! ```
//!
//! and `l_ghost` does not depend on the label. Everything here is computed
//! from max-shifted log-sum-exps so that logits of any finite magnitude are
//! safe.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_forward, Activation, LossTarget};
use crate::error::{Error, Result};
use crate::models::{Model, ParamVector};
use crate::tensor::Tensor;

/// Split of the logit columns into `real` leading classes and `ghost`
/// trailing ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLayout {
    pub real: usize,
    pub ghost: usize,
}

impl ClassLayout {
    pub fn new(real: usize, ghost: usize) -> Self {
        Self { real, ghost }
    }

    pub fn total(self) -> usize {
        self.real + self.ghost
    }
}

/// Extended cross-entropy and its two parts, in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ext: f64,
    pub l_orig: f64,
    pub l_ghost: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_ext += other.l_ext;
        self.l_orig += other.l_orig;
        self.l_ghost += other.l_ghost;
    }

    fn scaled(self, s: f64) -> Self {
        Self {
            l_ext: self.l_ext * s,
            l_orig: self.l_orig * s,
            l_ghost: self.l_ghost * s,
        }
    }
}

/// Linear-plus-activation classifier head over `s` input features with `c`
/// real and `e` ghost outputs. Column `i` of `weights` feeds logit `i`; the
/// ghost parameters are columns `c..c+e` together with their biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostHeadConfig {
    pub c: usize,
    pub e: usize,
    pub s: usize,
    pub activation: Activation,
    /// `s × (c + e)`
    pub weights: Tensor,
    /// `c + e`
    pub biases: Vec<f64>,
}

impl GhostHeadConfig {
    pub fn zeros(c: usize, e: usize, s: usize, activation: Activation) -> Result<Self> {
        if c == 0 || s == 0 {
            return Err(Error::contract("head needs at least one class and one feature"));
        }
        Ok(Self {
            c,
            e,
            s,
            activation,
            weights: Tensor::zeros(vec![s, c + e])?,
            biases: vec![0.0; c + e],
        })
    }

    pub fn layout(&self) -> ClassLayout {
        ClassLayout::new(self.c, self.e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.shape() != [self.s, self.c + self.e] || self.biases.len() != self.c + self.e {
            return Err(Error::Dimension {
                op: "ghost_head",
                lhs: self.weights.shape().to_vec(),
                rhs: vec![self.s, self.c + self.e],
            });
        }
        Ok(())
    }

    /// Weight column `class` as a vector of length `s`.
    pub fn column(&self, class: usize) -> Vec<f64> {
        let w = self.c + self.e;
        (0..self.s).map(|j| self.weights.data()[j * w + class]).collect()
    }

    /// Flattened ghost parameters γ: ghost weight columns then ghost biases.
    pub fn ghost_parameters(&self) -> Vec<f64> {
        let mut out: Vec<f64> = (self.c..self.c + self.e).flat_map(|i| self.column(i)).collect();
        out.extend_from_slice(&self.biases[self.c..]);
        out
    }
}

/// `z_i = σ(Σ_j u_{j,i} ζ_j + b_i)` for every row of `features[batch×s]`.
pub fn head_forward(features: &Tensor, cfg: &GhostHeadConfig) -> Result<Tensor> {
    cfg.validate()?;
    if features.rank() != 2 || features.shape()[1] != cfg.s {
        return Err(Error::Dimension {
            op: "head_forward",
            lhs: features.shape().to_vec(),
            rhs: vec![cfg.s],
        });
    }
    let mut z = matmul_forward(features, &cfg.weights)?;
    let width = cfg.c + cfg.e;
    for row in z.data_mut().chunks_mut(width) {
        for (v, b) in row.iter_mut().zip(&cfg.biases) {
            *v = cfg.activation.apply(*v + b);
        }
    }
    Ok(z)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log(1 + e^d)` without overflow.
fn softplus(d: f64) -> f64 {
    if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    }
}

fn check_inputs(logits: &Tensor, labels: &[usize], layout: ClassLayout) -> Result<usize> {
    if layout.real == 0 {
        return Err(Error::contract("at least one real class is required"));
    }
    if logits.rank() != 2 || logits.shape()[1] != layout.total() {
        return Err(Error::Dimension {
            op: "ghost_softmax_ce",
            lhs: logits.shape().to_vec(),
            rhs: vec![layout.total()],
        });
    }
    let batch = logits.shape()[0];
    if labels.len() != batch {
        return Err(Error::Dimension {
            op: "ghost_softmax_ce labels",
            lhs: vec![batch],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= layout.real) {
        return Err(Error::contract(format!(
            "label {bad} is not a real class (0..{})",
            layout.real
        )));
    }
    if !logits.is_finite() {
        return Err(Error::contract("logits must be finite"));
    }
    Ok(batch)
}

fn sample_breakdown(row: &[f64], label: usize, layout: ClassLayout) -> LossBreakdown {
    let real = &row[..layout.real];
    let lse_all = log_sum_exp(row);
    let lse_real = log_sum_exp(real);
    let l_ghost = if layout.ghost == 0 {
        0.0
    } else {
        softplus(log_sum_exp(&row[layout.real..]) - lse_real)
    };
    LossBreakdown {
        l_ext: lse_all - row[label],
        l_orig: lse_real - row[label],
        l_ghost,
    }
}

/// Per-sample loss decomposition.
pub fn ghost_softmax_ce_per_sample(
    logits: &Tensor,
    labels: &[usize],
    layout: ClassLayout,
) -> Result<Vec<LossBreakdown>> {
    check_inputs(logits, labels, layout)?;
    Ok(logits
        .data()
        .chunks(layout.total())
        .zip(labels)
        .map(|(row, &y)| sample_breakdown(row, y, layout))
        .collect())
}

/// Batch-mean loss decomposition. Labels are 0-based real-class indices.
pub fn ghost_softmax_ce(logits: &Tensor, labels: &[usize], layout: ClassLayout) -> Result<LossBreakdown> {
    let per = ghost_softmax_ce_per_sample(logits, labels, layout)?;
    let mut total = LossBreakdown::default();
    per.iter().for_each(|b| total.accumulate(b));
    Ok(total.scaled(1.0 / per.len() as f64))
}

/// `∂l_ext/∂z = (ŷ − ỹ) / batch`, with the one-hot target padded by zeros on
/// the ghost coordinates.
pub fn ghost_softmax_ce_grad(logits: &Tensor, labels: &[usize], layout: ClassLayout) -> Result<Tensor> {
    let batch = check_inputs(logits, labels, layout)?;
    let width = layout.total();
    let inv = 1.0 / batch as f64;
    let mut out = Vec::with_capacity(logits.numel());
    for (row, &y) in logits.data().chunks(width).zip(labels) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().enumerate().map(|(i, &z)| {
            let p = (z - lse).exp();
            (if i == y { p - 1.0 } else { p }) * inv
        }));
    }
    Tensor::new(vec![batch, width], out)
}

/// Gradient of the extended loss written term by term: for a real class `i`
///
/// ```text
/// ((Σ_{j≠i} y_j) e^{z_i} − y_i Σ_{j≠i} e^{z_j}) / Σ_j e^{z_j}
/// ```
///
/// and for a ghost class `(Σ_{j≤c} y_j) e^{z_i} / Σ_j e^{z_j}`. Exponentials
/// share a max shift, which cancels in every ratio.
pub fn ghost_softmax_ce_grad_literal(logits: &Tensor, labels: &[usize], layout: ClassLayout) -> Result<Tensor> {
    let batch = check_inputs(logits, labels, layout)?;
    let width = layout.total();
    let inv = 1.0 / batch as f64;
    let mut out = Vec::with_capacity(logits.numel());
    for (row, &label) in logits.data().chunks(width).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ez: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let y: Vec<f64> = (0..width).map(|j| if j == label { 1.0 } else { 0.0 }).collect();
        let denom: f64 = ez.iter().sum();
        let real_mass: f64 = y[..layout.real].iter().sum();
        for i in 0..width {
            let d = if i < layout.real {
                let y_others: f64 = (0..width).filter(|&j| j != i).map(|j| y[j]).sum();
                let e_others: f64 = (0..width).filter(|&j| j != i).map(|j| ez[j]).sum();
                (y_others * ez[i] - y[i] * e_others) / denom
            } else {
                real_mass * ez[i] / denom
            };
            out.push(d * inv);
        }
    }
    Tensor::new(vec![batch, width], out)
}

/// Gradient of `l_orig` (softmax over the real columns only) with respect to
/// all `c + e` logits; ghost columns receive zero.
pub fn original_ce_grad(logits: &Tensor, labels: &[usize], layout: ClassLayout) -> Result<Tensor> {
    let batch = check_inputs(logits, labels, layout)?;
    let width = layout.total();
    if layout.ghost == 0 {
        return ghost_softmax_ce_grad(logits, labels, layout);
    }
    let real: Vec<f64> = logits
        .data()
        .chunks(width)
        .flat_map(|r| r[..layout.real].to_vec())
        .collect();
    let real = Tensor::new(vec![batch, layout.real], real)?;
    let g = ghost_softmax_ce_grad(&real, labels, ClassLayout::new(layout.real, 0))?;
    let mut out = Vec::with_capacity(logits.numel());
    for row in g.data().chunks(layout.real) {
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(0.0, layout.ghost));
    }
    Tensor::new(vec![batch, width], out)
}

/// How ghost columns are initialised when a head is extended.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GammaInit {
    /// Zero weights and biases: every ghost logit starts at σ(0).
    #[default]
    Zeros,
    /// Weights drawn from `N(0, std²)`, zero biases.
    SmallGaussian { std: f64 },
    /// Zero weights with biases fixed at `-magnitude`.
    FrozenAt { magnitude: f64 },
}

impl GammaInit {
    pub fn describe(&self) -> String {
        match self {
            GammaInit::Zeros => "zeros".into(),
            GammaInit::SmallGaussian { std } => format!("small-gaussian({std})"),
            GammaInit::FrozenAt { magnitude } => format!("frozen-at(-{magnitude})"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s == "zeros" {
            return Some(GammaInit::Zeros);
        }
        let inner = |prefix: &str| -> Option<f64> { s.strip_prefix(prefix)?.strip_suffix(')')?.trim().parse().ok() };
        if let Some(std) = inner("small-gaussian(") {
            return Some(GammaInit::SmallGaussian { std });
        }
        inner("frozen-at(-").map(|magnitude| GammaInit::FrozenAt { magnitude })
    }

    /// Fills `s × e` ghost weights (row-major) and `e` ghost biases.
    pub fn draw(&self, s: usize, e: usize, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(match *self {
            GammaInit::Zeros => (vec![0.0; s * e], vec![0.0; e]),
            GammaInit::SmallGaussian { std } => {
                let normal = Normal::new(0.0, std).map_err(|err| Error::contract(format!("gamma init std: {err}")))?;
                ((0..s * e).map(|_| normal.sample(rng)).collect(), vec![0.0; e])
            }
            GammaInit::FrozenAt { magnitude } => (vec![0.0; s * e], vec![-magnitude; e]),
        })
    }
}

/// Extends an `e = 0` head with `e_new` ghost classes. Real-class columns and
/// biases are copied unchanged.
pub fn embed_original(
    original: &GhostHeadConfig,
    e_new: usize,
    gamma_init: GammaInit,
    rng: &mut impl Rng,
) -> Result<GhostHeadConfig> {
    original.validate()?;
    if original.e != 0 {
        return Err(Error::contract("embed_original expects a head without ghost classes"));
    }
    let (c, s) = (original.c, original.s);
    let (gw, gb) = gamma_init.draw(s, e_new, rng)?;
    let width = c + e_new;
    let mut weights = Vec::with_capacity(s * width);
    for j in 0..s {
        weights.extend_from_slice(&original.weights.data()[j * c..(j + 1) * c]);
        weights.extend_from_slice(&gw[j * e_new..(j + 1) * e_new]);
    }
    let mut biases = original.biases.clone();
    biases.extend_from_slice(&gb);
    Ok(GhostHeadConfig {
        c,
        e: e_new,
        s,
        activation: original.activation,
        weights: Tensor::new(vec![s, width], weights)?,
        biases,
    })
}

/// Largest difference between the gradients of `l_ext` and `l_orig` over
/// the non-ghost parameters. When the ghost logits are very negative the
/// ghost softmax mass vanishes and the two gradients coincide; with no ghost
/// columns they are computed identically and the gap is exactly zero.
pub fn gradient_coincidence_gap(model: &Model, params: &ParamVector, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let (_, g_ext) = model.loss_and_grad(params, images, labels, LossTarget::Extended)?;
    let (_, g_orig) = model.loss_and_grad(params, images, labels, LossTarget::Original)?;
    Ok(params
        .backbone_indices()
        .map(|i| (g_ext[i] - g_orig[i]).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn symmetric_logits_breakdown() {
        let b = ghost_softmax_ce(&logits(&[&[0.0, 0.0, 0.0]]), &[0], ClassLayout::new(2, 1)).unwrap();
        assert!((b.l_ext - 3f64.ln()).abs() < 1e-15);
        assert!((b.l_orig - 2f64.ln()).abs() < 1e-15);
        assert!((b.l_ghost - 1.5f64.ln()).abs() < 1e-15);
        assert!((b.l_ext - 1.098612).abs() < 1e-6);
        assert!((b.l_orig - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((b.l_ghost - 0.405465).abs() < 1e-6);
    }

    #[test]
    fn no_ghost_closed_form() {
        // log(1 + e^{-1}) by hand
        let expected = (1.0 + (-1.0f64).exp()).ln();
        let b = ghost_softmax_ce(&logits(&[&[1.0, 2.0]]), &[1], ClassLayout::new(2, 0)).unwrap();
        assert!((b.l_ext - expected).abs() < 1e-15);
        assert_eq!(b.l_ext, b.l_orig);
        assert_eq!(b.l_ghost, 0.0);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn collapsed_ghosts_vanish() {
        let z = logits(&[&[0.3, -1.2, 2.0, -1e6, -1e6]]);
        let b = ghost_softmax_ce(&z, &[2], ClassLayout::new(3, 2)).unwrap();
        assert!(b.l_ext - b.l_orig <= 1e-12);
        assert_eq!(b.l_ghost, 0.0);
    }

    #[test]
    fn symmetric_gradient() {
        let z = logits(&[&[0.0, 0.0, 0.0]]);
        let g = ghost_softmax_ce_grad(&z, &[0], ClassLayout::new(2, 1)).unwrap();
        let want = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in g.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let lit = ghost_softmax_ce_grad_literal(&z, &[0], ClassLayout::new(2, 1)).unwrap();
        for (a, b) in lit.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let z = logits(&[&[0.0, 0.0, 0.0]]);
        assert!(matches!(
            ghost_softmax_ce(&z, &[2], ClassLayout::new(2, 1)),
            Err(Error::Contract(_))
        ));
        assert!(ghost_softmax_ce_grad(&z, &[5], ClassLayout::new(2, 1)).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let z = logits(&[&[800.0, -800.0, 799.0, 805.0]]);
        let b = ghost_softmax_ce(&z, &[1], ClassLayout::new(3, 1)).unwrap();
        assert!(b.l_ext.is_finite() && b.l_orig.is_finite() && b.l_ghost.is_finite());
        assert!((b.l_ext - (b.l_orig + b.l_ghost)).abs() <= 1e-12 * b.l_ext.abs().max(1.0));
    }

    #[test]
    fn head_forward_examples() {
        let cfg = GhostHeadConfig::zeros(2, 1, 4, Activation::Identity).unwrap();
        let f = Tensor::new(vec![2, 4], vec![1.0, -2.0, 3.0, 0.5, 7.0, 1.0, 0.0, -3.0]).unwrap();
        assert!(head_forward(&f, &cfg).unwrap().data().iter().all(|&v| v == 0.0));

        let mut eye = GhostHeadConfig::zeros(2, 1, 3, Activation::Identity).unwrap();
        for i in 0..3 {
            eye.weights.data_mut()[i * 3 + i] = 1.0;
        }
        let f = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 4.0, -5.0]).unwrap();
        assert_eq!(head_forward(&f, &eye).unwrap(), f);

        let bad = Tensor::zeros(vec![2, 5]).unwrap();
        assert!(matches!(head_forward(&bad, &eye), Err(Error::Dimension { .. })));
    }

    #[test]
    fn head_forward_matches_hand_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, e, s, batch) = (3, 2, 4, 3);
        let mut cfg = GhostHeadConfig::zeros(c, e, s, Activation::Tanh).unwrap();
        cfg.weights
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        cfg.biases.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let feats: Vec<f64> = (0..batch * s).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = Tensor::new(vec![batch, s], feats.clone()).unwrap();
        let z = head_forward(&f, &cfg).unwrap();
        for r in 0..batch {
            for i in 0..c + e {
                let mut acc = cfg.biases[i];
                for j in 0..s {
                    acc += cfg.weights.at(&[j, i]) * feats[r * s + j];
                }
                assert!((z.at(&[r, i]) - acc.tanh()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn embedding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut orig = GhostHeadConfig::zeros(3, 0, 2, Activation::Identity).unwrap();
        orig.weights
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        orig.biases = vec![0.1, -0.2, 0.3];

        let same = embed_original(&orig, 0, GammaInit::Zeros, &mut rng).unwrap();
        assert_eq!(same, orig);

        let feats = Tensor::new(vec![2, 2], vec![0.4, -0.9, 1.0, 0.2]).unwrap();
        let labels = [0, 2];

        let frozen = embed_original(&orig, 2, GammaInit::FrozenAt { magnitude: 30.0 }, &mut rng).unwrap();
        for i in 0..3 {
            assert_eq!(frozen.column(i), orig.column(i));
        }
        let b = ghost_softmax_ce(&head_forward(&feats, &frozen).unwrap(), &labels, frozen.layout()).unwrap();
        assert!((b.l_ext - b.l_orig).abs() <= 1e-12);

        let zeros = embed_original(&orig, 2, GammaInit::Zeros, &mut rng).unwrap();
        let z = head_forward(&feats, &zeros).unwrap();
        let per = ghost_softmax_ce_per_sample(&z, &labels, zeros.layout()).unwrap();
        for (row, b) in z.data().chunks(5).zip(per) {
            let real_sum: f64 = row[..3].iter().map(|v| v.exp()).sum();
            let want = (1.0 + 2.0 / real_sum).ln();
            assert!((b.l_ghost - want).abs() < 1e-14);
            assert!(b.l_ghost > 0.0);
        }
    }

    #[test]
    fn gamma_init_round_trips_through_text() {
        for g in [
            GammaInit::Zeros,
            GammaInit::SmallGaussian { std: 0.01 },
            GammaInit::FrozenAt { magnitude: 30.0 },
        ] {
            assert_eq!(GammaInit::parse(&g.describe()), Some(g));
        }
        assert_eq!(GammaInit::parse("ones"), None);
    }
}
