use std::path::PathBuf;

use proptest::prelude::*;

use ergoghost::autodiff::Activation;
use ergoghost::diagnostics::{first_peak, smooth, KrylovMethod};
use ergoghost::ghost::GammaInit;
use ergoghost::harness::bypass::MIN_SAMPLES;
use ergoghost::harness::config::Architecture;
use ergoghost::harness::report::Arm;
use ergoghost::harness::{
    emit_csv, parse_csv, verify_path_certificate, EpochRow, PathCertificate, PathPoint, StudyConfig,
};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        -1.0f64..1.0,
        Just(0.0),
        Just(f64::MIN_POSITIVE),
        Just(1e300)
    ]
}

fn row() -> impl Strategy<Value = EpochRow> {
    (
        0usize..40,
        any::<bool>(),
        1usize..300,
        (finite(), finite(), finite()),
        prop::option::of(finite()),
        finite(),
    )
        .prop_map(
            |(run_id, ghost, epoch, (train_loss, test_loss, test_acc), gamma_hat, f_ghost_mean)| EpochRow {
                run_id,
                arm: if ghost { Arm::Ghost } else { Arm::Baseline },
                epoch,
                train_loss,
                test_loss,
                test_acc,
                gamma_hat,
                f_ghost_mean,
            },
        )
}

fn certificate() -> impl Strategy<Value = PathCertificate> {
    (
        prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -1e-6f64..1e-6), 0..40),
        0.0f64..1.0,
        prop_oneof![Just(0.0), Just(1e-9), Just(1e-7)],
    )
        .prop_map(|(steps, epsilon, tolerance)| {
            // f_ext drifts downwards by tiny, sometimes positive, increments
            let mut f_ext = 1.0;
            let points = steps
                .iter()
                .enumerate()
                .map(|(i, &(a, b, d))| {
                    f_ext += d - 5e-7;
                    PathPoint {
                        t: i as f64,
                        w: [a, b],
                        gamma: 0.0,
                        f_orig: a * b,
                        f_ext,
                    }
                })
                .collect();
            PathCertificate {
                points,
                epsilon,
                tolerance,
            }
        })
}

fn config() -> impl Strategy<Value = StudyConfig> {
    (
        (
            "[a-z][a-z0-9_-]{0,10}",
            prop::option::of("[a-z/]{1,12}"),
            1usize..60,
            any::<u64>(),
        ),
        (
            prop_oneof![
                (1usize..9, 1usize..17).prop_map(|(a, b)| Architecture::Cnn2Block { channels: [a, b] }),
                prop::collection::vec(1usize..100, 0..3).prop_map(|hidden| Architecture::Mlp { hidden }),
            ],
            prop_oneof![Just(Activation::Identity), Just(Activation::Tanh)],
            prop_oneof![
                Just(GammaInit::Zeros),
                (1e-4f64..1.0).prop_map(|std| GammaInit::SmallGaussian { std }),
                (1.0f64..100.0).prop_map(|magnitude| GammaInit::FrozenAt { magnitude }),
            ],
        ),
        (1e-4f64..1.0, 1usize..500, 0usize..11, 1usize..5, 1usize..50),
        (
            0usize..20,
            1usize..50,
            any::<bool>(),
            1usize..9,
            0usize..2000,
            0usize..8,
        ),
    )
        .prop_map(
            |(
                (name, data_dir, per_class, seed),
                (architecture, head_activation, gamma_init),
                (eta, epochs, batch_size, ghosts, runs),
                (lyapunov_every, lyapunov_iterations, power, smooth_window, test_limit, threads),
            )| StudyConfig {
                name,
                data_dir: data_dir.map(PathBuf::from),
                per_class,
                seed,
                architecture,
                head_activation,
                gamma_init,
                eta,
                epochs,
                batch_size,
                ghosts,
                runs,
                lyapunov_every,
                lyapunov_iterations,
                lyapunov_method: if power {
                    KrylovMethod::PowerIteration
                } else {
                    KrylovMethod::Lanczos
                },
                smooth_window,
                test_limit,
                threads,
                output: PathBuf::from(format!("out/{seed}")),
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn certificate_verdict_matches_its_definition(cert in certificate()) {
        let p = &cert.points;
        let expect = p.len() >= MIN_SAMPLES
            && p.windows(2).all(|w| w[1].f_ext - w[0].f_ext <= cert.tolerance)
            && p[0].f_orig - p[p.len() - 1].f_orig > cert.epsilon;
        let verdict = verify_path_certificate(&cert);
        prop_assert_eq!(verdict.valid, expect, "{:?}", verdict);
        prop_assert_eq!(verdict.valid, verdict.violation.is_none());
    }

    #[test]
    fn first_peak_is_the_earliest_local_maximum(
        series in prop::collection::vec(0.0f64..3.0, 0..30),
        window in 0usize..6,
    ) {
        let s = smooth(&series, window);
        prop_assert_eq!(s.len(), series.len());
        let is_peak = |t: usize| s[t] > s[t - 1] && s[t] >= s[t + 1];
        match first_peak(&series, window) {
            Some(t) => {
                prop_assert!(t >= 1 && t + 1 < s.len() && is_peak(t));
                prop_assert!((1..t).all(|u| !is_peak(u)));
            }
            None => prop_assert!(s.len() < 3 || (1..s.len() - 1).all(|u| !is_peak(u))),
        }
    }

    #[test]
    fn csv_round_trips_bit_exactly(rows in prop::collection::vec(row(), 0..30)) {
        let text = emit_csv(&rows);
        let parsed = parse_csv(&text).unwrap();
        prop_assert_eq!(parsed.len(), rows.len());
        for (a, b) in rows.iter().zip(&parsed) {
            prop_assert_eq!((a.run_id, a.arm, a.epoch), (b.run_id, b.arm, b.epoch));
            for (x, y) in [(a.train_loss, b.train_loss), (a.test_loss, b.test_loss), (a.test_acc, b.test_acc), (a.f_ghost_mean, b.f_ghost_mean)] {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(a.gamma_hat.map(f64::to_bits), b.gamma_hat.map(f64::to_bits));
        }
        prop_assert_eq!(emit_csv(&parsed), text);
    }

    #[test]
    fn emitted_configs_parse_back(cfg in config()) {
        let text = cfg.emit();
        prop_assert_eq!(StudyConfig::parse(&text).unwrap(), cfg.clone());
        let no_ghosts = text.replace(&format!("ghosts = {}", cfg.ghosts), "ghosts = 0");
        prop_assert!(StudyConfig::parse(&no_ghosts).is_err());
        let unknown = format!("{text}unknown_key = 1\n");
        prop_assert!(StudyConfig::parse(&unknown).is_err());
    }
}
