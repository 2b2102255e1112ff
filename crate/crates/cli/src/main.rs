//! `ergoghost` command-line interface.
//!
//! Exit codes: 0 success, 1 validation failure (bad config, failed check,
//! invalid certificate), 2 I/O problems, a missing dataset, or bad usage.

mod fetch;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ergoghost::data::mnist::{load_mnist, resolve_data_dir};
use ergoghost::data::rmnist_sample;
use ergoghost::diagnostics::ergodic::HessianSource;
use ergoghost::diagnostics::{
    ergodic_means, lyapunov_running, measure_stability, ErgodicAccumulator, LyapunovObserver, MeasureSketch,
    SpectralProbe,
};
use ergoghost::harness::config::DiagTarget;
use ergoghost::harness::report::read_study_dir;
use ergoghost::harness::{bypass_demo, emit_plots, run_study, selftest, write_study_dir, DiagConfig, StudyConfig};
use ergoghost::models::{Model, ModelSpec};
use ergoghost::optim::{run_chain, BatchSampler, ModelObjective, Observer, SamplerMode, SgdState};
use ergoghost::{autodiff::LossTarget, data::NoisyLandscape, optim::GradientEstimator, Error};

#[derive(Parser)]
#[command(
    name = "ergoghost",
    version,
    about = "Ergodic SGD diagnostics and ghost-category classifier studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Paired baseline/ghost study on RMNIST subsets.
    Study {
        #[command(subcommand)]
        action: StudyAction,
    },
    /// Dataset management.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Standalone diagnostics.
    Diag {
        #[command(subcommand)]
        action: DiagAction,
    },
    /// Small self-contained demonstrations.
    Demo {
        #[command(subcommand)]
        action: DemoAction,
    },
    /// Run the built-in property checks.
    Selftest,
}

#[derive(Subcommand)]
enum StudyAction {
    /// Train every run of the study described by CONFIG and write results.
    Run {
        config: PathBuf,
        /// MNIST directory (overrides the config and the environment).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Output directory (overrides the config).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-draw the SVG plots of a finished study directory.
    Plot { dir: PathBuf },
}

#[derive(Subcommand)]
enum DataAction {
    /// Download the MNIST IDX files.
    Fetch {
        /// Verify the SHA-256 of every file against the pinned values.
        #[arg(long)]
        checksum: bool,
        /// Destination directory (default: the dataset directory).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DiagAction {
    /// Running Lyapunov estimate and ergodic averages for CONFIG.
    Lyapunov { config: PathBuf },
}

#[derive(Subcommand)]
enum DemoAction {
    /// Build and verify the ridge2d barrier-bypass certificate.
    Bypass {
        /// Also write the certificate as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::MissingDataset(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn study_run(config: &Path, data_dir: Option<PathBuf>, output: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = StudyConfig::parse(&read_text(config)?)?;
    if let Some(d) = data_dir {
        cfg.data_dir = Some(d);
    }
    if let Some(o) = output {
        cfg.output = o;
    }
    let dir = resolve_data_dir(cfg.data_dir.as_deref());
    let split = load_mnist(&dir)?;
    eprintln!(
        "study `{}`: {} runs × 2 arms × {} epochs, data from {}",
        cfg.name,
        cfg.runs,
        cfg.epochs,
        dir.display()
    );
    let report = run_study(&cfg, &split)?;
    write_study_dir(&report, &cfg.output)?;
    let (rows, summary) = read_study_dir(&cfg.output)?;
    emit_plots(&rows, &summary).write(&cfg.output)?;
    let s = &report.summary;
    println!("runs completed: {}/{}", s.runs_completed, s.runs_requested);
    for ex in &s.excluded {
        println!("excluded run {}: {}", ex.run_id, ex.reason);
    }
    println!(
        "paired peaks: {} (undetected in {} runs)",
        s.paired_runs, s.undetected_peak_runs
    );
    match s.mean_peak_shift {
        Some(m) => println!(
            "mean peak shift (baseline − ghost): {m:.3} epochs (sd {:.3}; reference {:.1})",
            s.peak_shift_sd.unwrap_or(0.0),
            s.reference_peak_shift
        ),
        None => println!("mean peak shift: undefined (no paired peaks)"),
    }
    println!(
        "initial test loss ghost ≥ baseline in every run: {}",
        s.initial_ghost_not_below_baseline
    );
    if let Some(r) = s.max_ghost_decay_ratio {
        println!("largest ghost-loss ratio (last quarter / first quarter): {r:.4}");
    }
    println!("results written to {}", cfg.output.display());
    Ok(())
}

fn study_plot(dir: &Path) -> Result<(), Failure> {
    let (rows, summary) = read_study_dir(dir)?;
    let plots = emit_plots(&rows, &summary);
    plots.write(dir)?;
    for (name, _) in &plots.files {
        println!("{}", dir.join(name).display());
    }
    Ok(())
}

fn diag_lyapunov(config: &Path) -> Result<(), Failure> {
    let cfg = DiagConfig::parse(&read_text(config)?)?;
    let probe = SpectralProbe {
        method: cfg.method,
        max_iterations: cfg.iterations,
        tolerance: 1e-8,
        seed: cfg.seed,
    };
    match &cfg.target {
        DiagTarget::Landscape(land) => {
            let start = if cfg.start.is_empty() {
                vec![0.5; land.dim()]
            } else {
                cfg.start.clone()
            };
            println!(
                "target {} (dim {}), eta {}, steps {}, noise {}",
                land.name(),
                land.dim(),
                cfg.eta,
                cfg.steps,
                cfg.noise
            );
            for &k in &cfg.cadences {
                let mut est: Box<dyn GradientEstimator> = if cfg.noise > 0.0 {
                    Box::new(NoisyLandscape::new(land, cfg.noise))
                } else {
                    Box::new(BatchSampler::new(land, SamplerMode::FullBatch)?)
                };
                let obs = LyapunovObserver::new(HessianSource::Exact(land), probe, cfg.eta, k)?;
                chain_report(k, start.clone(), cfg.eta, cfg.seed, cfg.steps, est.as_mut(), obs)?;
            }
        }
        DiagTarget::Mlp { hidden, per_class } => {
            let split = load_mnist(&resolve_data_dir(cfg.data_dir.as_deref()))?;
            let train = rmnist_sample(&split.train, *per_class, cfg.seed)?;
            let (model, template) = Model::build(ModelSpec::mlp(hidden.clone(), 10, 0, cfg.seed))?;
            let objective = ModelObjective {
                model: &model,
                template: &template,
                images: &train.images,
                labels: &train.labels,
                target: LossTarget::Extended,
            };
            println!(
                "target mlp {:?} on {} images ({} parameters), eta {}, steps {}",
                hidden,
                train.len(),
                template.len(),
                cfg.eta,
                cfg.steps
            );
            let mode = if cfg.batch_size == 0 {
                SamplerMode::FullBatch
            } else {
                SamplerMode::WithReplacement { batch: cfg.batch_size }
            };
            for &k in &cfg.cadences {
                let mut sampler = BatchSampler::new(&objective, mode)?;
                let obs = LyapunovObserver::new(HessianSource::FiniteDifference(&objective), probe, cfg.eta, k)?;
                chain_report(
                    k,
                    template.as_slice().to_vec(),
                    cfg.eta,
                    cfg.seed,
                    cfg.steps,
                    &mut sampler,
                    obs,
                )?;
            }
        }
    }
    println!("norm: spectral (operator 2-norm); γ̂ averages the probed steps only");
    Ok(())
}

fn chain_report(
    cadence: u64,
    start: Vec<f64>,
    eta: f64,
    seed: u64,
    steps: u64,
    estimator: &mut dyn GradientEstimator,
    mut lyap: LyapunovObserver,
) -> Result<(), Failure> {
    let mut sketch = MeasureSketch::new(start.len(), seed)?;
    let mut state = SgdState::new(start, eta, seed)?;
    let records = {
        let mut observers: [&mut dyn Observer; 2] = [&mut lyap, &mut sketch];
        run_chain(&mut state, estimator, steps, &mut observers)?
    };
    let mut acc = ErgodicAccumulator::new();
    acc.extend(&records);
    let means = ergodic_means(&acc)?;
    let gamma = lyapunov_running(&acc)
        .map(|g| format!("{g:+.6}"))
        .unwrap_or_else(|_| "n/a (no probes)".into());
    let tv = measure_stability(&sketch)
        .map(|t| format!("{t:.4}"))
        .unwrap_or_else(|_| "n/a (< 2000 steps)".into());
    println!(
        "k={cadence:<3} probes={:<6} γ̂={gamma} unconverged={} mean f={:.6} mean ‖∇f‖={:.6} half-TV={tv}",
        acc.probes(),
        lyap.unconverged,
        means.f_ext,
        means.grad_norm
    );
    Ok(())
}

fn demo_bypass(json: Option<PathBuf>) -> Result<(), Failure> {
    let demo = bypass_demo();
    let cert = &demo.certificate;
    let (first, last) = (&cert.points[0], &cert.points[cert.points.len() - 1]);
    println!(
        "ridge2d bypass: {} samples ({} climb, {} descent)",
        cert.points.len(),
        demo.climb_samples,
        demo.descent_samples
    );
    println!(
        "barrier height {:.6}, ghost budget f_ghost(γ₀) = {:.6}",
        demo.barrier, demo.ghost_budget
    );
    println!(
        "f_orig: {:.6} → {:.6} (drop {:.6}, required > {})",
        first.f_orig, last.f_orig, demo.verdict.drop, cert.epsilon
    );
    println!(
        "largest f_ext step change: {:.3e} (tolerance {:.0e})",
        demo.verdict.max_rise, cert.tolerance
    );
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&demo).map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })?;
        std::fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
    }
    if demo.verdict.valid {
        println!("certificate VALID");
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("certificate INVALID: {:?}", demo.verdict.violation),
        })
    }
}

fn run_selftest() -> Result<(), Failure> {
    let mut failed = 0;
    for check in selftest::run() {
        match &check.outcome {
            Ok(()) => println!("ok    {}", check.name),
            Err(e) => {
                failed += 1;
                println!("FAIL  {}: {e}", check.name);
            }
        }
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("{failed} check(s) failed"),
        })
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Study {
            action:
                StudyAction::Run {
                    config,
                    data_dir,
                    output,
                },
        } => study_run(&config, data_dir, output),
        Command::Study {
            action: StudyAction::Plot { dir },
        } => study_plot(&dir),
        Command::Data {
            action: DataAction::Fetch { checksum, dest },
        } => {
            let dest = dest.unwrap_or_else(|| resolve_data_dir(None));
            fetch::fetch(&dest, checksum)
        }
        Command::Diag {
            action: DiagAction::Lyapunov { config },
        } => diag_lyapunov(&config),
        Command::Demo {
            action: DemoAction::Bypass { json },
        } => demo_bypass(json),
        Command::Selftest => run_selftest(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
