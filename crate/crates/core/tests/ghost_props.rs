use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ergoghost::autodiff::Activation;
use ergoghost::ghost::{
    embed_original, ghost_softmax_ce, ghost_softmax_ce_grad, ghost_softmax_ce_grad_literal,
    ghost_softmax_ce_per_sample, head_forward, ClassLayout, GammaInit, GhostHeadConfig,
};
use ergoghost::models::{Model, ModelSpec};
use ergoghost::Tensor;

/// `(logits, labels, layout)` for a batch of up to 3 rows.
fn batch(scale: f64) -> impl Strategy<Value = (Tensor, Vec<usize>, ClassLayout)> {
    (1usize..6, 0usize..4, 1usize..4).prop_flat_map(move |(c, e, n)| {
        (
            prop::collection::vec(-scale..scale, n * (c + e)),
            prop::collection::vec(0..c, n),
        )
            .prop_map(move |(z, y)| (Tensor::new(vec![n, c + e], z).unwrap(), y, ClassLayout::new(c, e)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decomposition_holds((z, y, layout) in batch(60.0)) {
        let b = ghost_softmax_ce(&z, &y, layout).unwrap();
        prop_assert!((b.l_ext - b.l_orig - b.l_ghost).abs() <= 1e-12, "{b:?}");
        prop_assert!(b.l_ghost >= 0.0);
        if layout.ghost == 0 {
            prop_assert_eq!(b.l_ghost, 0.0);
            prop_assert_eq!(b.l_ext, b.l_orig);
        }
    }

    #[test]
    fn ghost_loss_ignores_the_label((z, y, layout) in batch(8.0), shift in 1usize..5) {
        let moved: Vec<usize> = y.iter().map(|l| (l + shift) % layout.real).collect();
        let a = ghost_softmax_ce_per_sample(&z, &y, layout).unwrap();
        let b = ghost_softmax_ce_per_sample(&z, &moved, layout).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(p.l_ghost, q.l_ghost);
        }
    }

    #[test]
    fn lowering_ghost_logits_shrinks_ghost_loss((z, y, layout) in batch(5.0), delta in 0.01f64..5.0) {
        prop_assume!(layout.ghost > 0);
        let width = layout.total();
        let mut lowered = z.clone();
        for (i, v) in lowered.data_mut().iter_mut().enumerate() {
            if i % width >= layout.real {
                *v -= delta;
            }
        }
        let before = ghost_softmax_ce(&z, &y, layout).unwrap().l_ghost;
        let after = ghost_softmax_ce(&lowered, &y, layout).unwrap().l_ghost;
        prop_assert!(after < before, "{before} → {after}");
    }

    #[test]
    fn three_gradient_forms_agree((z, y, layout) in batch(6.0)) {
        let a = ghost_softmax_ce_grad(&z, &y, layout).unwrap();
        let b = ghost_softmax_ce_grad_literal(&z, &y, layout).unwrap();
        let scale = a.data().iter().fold(f64::MIN_POSITIVE, |m, g| m.max(g.abs()));
        let h = 1e-5;
        for i in 0..z.numel() {
            let (mut p, mut m) = (z.clone(), z.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (ghost_softmax_ce(&p, &y, layout).unwrap().l_ext - ghost_softmax_ce(&m, &y, layout).unwrap().l_ext)
                / (2.0 * h);
            let (ga, gb) = (a.data()[i], b.data()[i]);
            prop_assert!((ga - gb).abs() <= 1e-6 * scale, "[{i}] {ga} vs literal {gb}");
            prop_assert!((ga - fd).abs() <= 1e-6 * scale, "[{i}] {ga} vs fd {fd}");
            if i % layout.total() >= layout.real {
                prop_assert!(ga >= 0.0 && gb >= 0.0);
            }
        }
    }

    #[test]
    fn head_forward_is_an_affine_map(
        (s, c, e) in (1usize..5, 1usize..4, 0usize..3),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = c + e;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect() };
        let head = GhostHeadConfig {
            c, e, s,
            activation: Activation::Identity,
            weights: Tensor::new(vec![s, width], draw(s * width)).unwrap(),
            biases: draw(width),
        };
        let features = Tensor::new(vec![2, s], draw(2 * s)).unwrap();
        let z = head_forward(&features, &head).unwrap();
        for r in 0..2 {
            for i in 0..width {
                let expect = head.biases[i]
                    + (0..s).map(|j| features.data()[r * s + j] * head.weights.data()[j * width + i]).sum::<f64>();
                prop_assert!((z.data()[r * width + i] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn embedding_preserves_real_class_probabilities(
        (s, c, e) in (1usize..5, 2usize..5, 1usize..4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect() };
        let original = GhostHeadConfig {
            c, e: 0, s,
            activation: Activation::Identity,
            weights: Tensor::new(vec![s, c], draw(s * c)).unwrap(),
            biases: draw(c),
        };
        let features = Tensor::new(vec![3, s], draw(3 * s)).unwrap();
        let extended = embed_original(&original, e, GammaInit::FrozenAt { magnitude: 30.0 }, &mut rng).unwrap();
        prop_assert_eq!(extended.column(0), original.column(0));
        let softmax = |z: &[f64]| {
            let m = z.iter().copied().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = ex.iter().sum();
            ex.into_iter().map(|v| v / sum).collect::<Vec<_>>()
        };
        let z0 = head_forward(&features, &original).unwrap();
        let z1 = head_forward(&features, &extended).unwrap();
        for r in 0..3 {
            let p0 = softmax(&z0.data()[r * c..(r + 1) * c]);
            let p1 = softmax(&z1.data()[r * (c + e)..(r + 1) * (c + e)]);
            for k in 0..c {
                prop_assert!((p0[k] - p1[k]).abs() <= 1e-9, "row {r} class {k}: {} vs {}", p0[k], p1[k]);
            }
        }
        let labels = vec![0, 1, 0];
        let b = ghost_softmax_ce(&z1, &labels, extended.layout()).unwrap();
        prop_assert!((b.l_ext - b.l_orig).abs() <= 1e-12);

        let same = embed_original(&original, 0, GammaInit::Zeros, &mut rng).unwrap();
        prop_assert_eq!(same, original);
    }

    #[test]
    fn parameter_count_is_a_function_of_the_spec(
        hidden in prop::collection::vec(1usize..20, 0..3),
        ghosts in 0usize..4,
        seeds in (any::<u64>(), any::<u64>()),
    ) {
        let (a, pa) = Model::build(ModelSpec::mlp(hidden.clone(), 10, ghosts, seeds.0)).unwrap();
        let (b, pb) = Model::build(ModelSpec::mlp(hidden.clone(), 10, ghosts, seeds.1)).unwrap();
        prop_assert_eq!(a.num_params(), b.num_params());
        prop_assert_eq!(pa.len(), pb.len());
        let widths: Vec<usize> = std::iter::once(784).chain(hidden.iter().copied()).chain(std::iter::once(10 + ghosts)).collect();
        let expect: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        prop_assert_eq!(a.num_params(), expect);
        prop_assert_eq!(pa.ghost_len(), (widths[widths.len() - 2] + 1) * ghosts);
    }
}

#[test]
fn cnn_parameter_count() {
    let (model, params) = Model::build(ModelSpec::cnn2block(10, 2, 0)).unwrap();
    // 28 → 26 → 13, padded to 14 → 12 → 6; head 16·6·6 → 12
    let expect = (8 * 9 + 8) + (16 * 8 * 9 + 16) + (16 * 6 * 6 * 12 + 12);
    assert_eq!(model.num_params(), expect);
    assert_eq!(params.ghost_len(), 16 * 6 * 6 * 2 + 2);
}
