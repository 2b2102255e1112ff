//! Flat `key = value` config files.
//!
//! Blank lines and `#` comments are ignored; keys are unique. Every config
//! serialises back with all of its keys, defaults included, so a copy
//! written next to the outputs fully describes the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::autodiff::Activation;
use crate::data::landscape::Landscape;
use crate::diagnostics::KrylovMethod;
use crate::error::{Error, Result};
use crate::ghost::GammaInit;
use crate::models::{ModelKind, ModelSpec};

/// Parsed key/value pairs with their source line numbers.
#[derive(Clone, Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config {
                    line,
                    msg: "empty key".into(),
                });
            }
            if entries.insert(k.to_string(), (v.to_string(), line)).is_some() {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    fn take_raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take_raw(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| Error::Config {
                line,
                msg: format!("cannot parse `{v}` for `{key}`"),
            }),
        }
    }

    fn take_with<T>(&mut self, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.take_raw(key) {
            None => Ok(default),
            Some((v, line)) => parse(&v).ok_or_else(|| Error::Config {
                line,
                msg: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        self.take_with(key, default, |v| {
            if v.trim().is_empty() {
                return Some(Vec::new());
            }
            v.split(',').map(|p| p.trim().parse().ok()).collect::<Option<Vec<T>>>()
        })
    }

    /// Errors on the first key nobody consumed.
    fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (_, line))| *line) {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Config {
                line,
                msg: format!("unknown key `{k}`"),
            }),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Which network the study trains.
#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Cnn2Block { channels: [usize; 2] },
    Mlp { hidden: Vec<usize> },
}

/// The paired baseline/ghost study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub name: String,
    /// Dataset directory; falls back to the environment variable, then
    /// `data/mnist`.
    pub data_dir: Option<PathBuf>,
    pub per_class: usize,
    /// Run `r` uses seed `seed + r` for its subset, initialisation and batches.
    pub seed: u64,
    pub architecture: Architecture,
    pub head_activation: Activation,
    pub gamma_init: GammaInit,
    pub eta: f64,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub ghosts: usize,
    pub runs: usize,
    /// Probe the Lyapunov summand every this many epochs; 0 disables.
    pub lyapunov_every: usize,
    pub lyapunov_iterations: usize,
    pub lyapunov_method: KrylovMethod,
    pub smooth_window: usize,
    /// Evaluate on the first `test_limit` test images; 0 means all.
    pub test_limit: usize,
    /// Concurrent runs; 0 lets the thread pool decide.
    pub threads: usize,
    pub output: PathBuf,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            name: "study".into(),
            data_dir: None,
            per_class: 30,
            seed: 0,
            architecture: Architecture::Cnn2Block { channels: [8, 16] },
            head_activation: Activation::Identity,
            gamma_init: GammaInit::Zeros,
            eta: 0.05,
            epochs: 200,
            batch_size: 0,
            ghosts: 2,
            runs: 30,
            lyapunov_every: 0,
            lyapunov_iterations: 20,
            lyapunov_method: KrylovMethod::Lanczos,
            smooth_window: 1,
            test_limit: 0,
            threads: 0,
            output: PathBuf::from("out/study"),
        }
    }
}

impl StudyConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let d = Self::default();
        let model = kv.take_with("model", "cnn2block".to_string(), |v| {
            matches!(v, "cnn2block" | "mlp").then(|| v.to_string())
        })?;
        let channels = kv.take_list("channels", vec![8usize, 16])?;
        let hidden = kv.take_list("hidden", vec![64usize])?;
        let architecture = match model.as_str() {
            "mlp" => Architecture::Mlp { hidden },
            _ => {
                if channels.len() != 2 {
                    return Err(Error::Config {
                        line: 0,
                        msg: "`channels` needs exactly two widths".into(),
                    });
                }
                Architecture::Cnn2Block {
                    channels: [channels[0], channels[1]],
                }
            }
        };
        let data_dir: String = kv.take("data_dir", String::new())?;
        let cfg = Self {
            name: kv.take("name", d.name)?,
            data_dir: (!data_dir.is_empty()).then(|| PathBuf::from(data_dir)),
            per_class: kv.take("per_class", d.per_class)?,
            seed: kv.take("seed", d.seed)?,
            architecture,
            head_activation: kv.take_with("head_activation", d.head_activation, Activation::parse)?,
            gamma_init: kv.take_with("gamma_init", d.gamma_init, GammaInit::parse)?,
            eta: kv.take("eta", d.eta)?,
            epochs: kv.take("epochs", d.epochs)?,
            batch_size: kv.take("batch_size", d.batch_size)?,
            ghosts: kv.take("ghosts", d.ghosts)?,
            runs: kv.take("runs", d.runs)?,
            lyapunov_every: kv.take("lyapunov_every", d.lyapunov_every)?,
            lyapunov_iterations: kv.take("lyapunov_iterations", d.lyapunov_iterations)?,
            lyapunov_method: kv.take_with("lyapunov_method", d.lyapunov_method, KrylovMethod::parse)?,
            smooth_window: kv.take("smooth_window", d.smooth_window)?,
            test_limit: kv.take("test_limit", d.test_limit)?,
            threads: kv.take("threads", d.threads)?,
            output: PathBuf::from(kv.take("output", d.output.display().to_string())?),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::Config {
                line: 0,
                msg: msg.into(),
            })
        };
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("`eta` must be positive");
        }
        if self.runs == 0 || self.epochs == 0 || self.per_class == 0 {
            return bad("`runs`, `epochs` and `per_class` must be positive");
        }
        if self.ghosts == 0 {
            return bad("`ghosts` must be positive: the baseline arm already has none");
        }
        if self.batch_size > 10 * self.per_class {
            return bad("`batch_size` exceeds the training set");
        }
        if self.lyapunov_every > 0 && self.lyapunov_iterations == 0 {
            return bad("`lyapunov_iterations` must be positive when probing");
        }
        Ok(())
    }

    /// The model for one arm of run `run`.
    pub fn model_spec(&self, run: usize, ghosts: usize) -> ModelSpec {
        let kind = match &self.architecture {
            Architecture::Cnn2Block { channels } => ModelKind::Cnn2Block { channels: *channels },
            Architecture::Mlp { hidden } => ModelKind::Mlp { hidden: hidden.clone() },
        };
        ModelSpec {
            kind,
            input: [1, 28, 28],
            classes: 10,
            ghosts,
            head_activation: self.head_activation,
            gamma_init: self.gamma_init,
            init_seed: self.run_seed(run),
        }
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    /// Every key, defaults included, in a fixed order.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let (model, channels, hidden) = match &self.architecture {
            Architecture::Cnn2Block { channels } => ("cnn2block", join(channels), "64".to_string()),
            Architecture::Mlp { hidden } => ("mlp", "8,16".to_string(), join(hidden)),
        };
        let data_dir = self
            .data_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let pairs: [(&str, String); 21] = [
            ("name", self.name.clone()),
            ("data_dir", data_dir),
            ("per_class", self.per_class.to_string()),
            ("seed", self.seed.to_string()),
            ("model", model.into()),
            ("channels", channels),
            ("hidden", hidden),
            ("head_activation", self.head_activation.name().into()),
            ("gamma_init", self.gamma_init.describe()),
            ("eta", format!("{:?}", self.eta)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("ghosts", self.ghosts.to_string()),
            ("runs", self.runs.to_string()),
            ("lyapunov_every", self.lyapunov_every.to_string()),
            ("lyapunov_iterations", self.lyapunov_iterations.to_string()),
            ("lyapunov_method", self.lyapunov_method.name().into()),
            ("smooth_window", self.smooth_window.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("threads", self.threads.to_string()),
            ("output", self.output.display().to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Target of `diag lyapunov`.
#[derive(Clone, Debug, PartialEq)]
pub enum DiagTarget {
    Landscape(Landscape),
    /// A small MLP trained on an RMNIST subset.
    Mlp {
        hidden: Vec<usize>,
        per_class: usize,
    },
}

/// Settings for a standalone Lyapunov / ergodicity diagnosis.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagConfig {
    pub target: DiagTarget,
    pub start: Vec<f64>,
    pub eta: f64,
    pub steps: u64,
    /// Gaussian gradient-noise scale for landscapes (0 = deterministic).
    pub noise: f64,
    /// Mini-batch size for the MLP target (0 = full batch).
    pub batch_size: usize,
    pub cadences: Vec<u64>,
    pub method: KrylovMethod,
    pub iterations: usize,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
}

impl DiagConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let kind: String = kv.take("target", "quadratic".to_string())?;
        let lambdas = kv.take_list("lambdas", vec![2.0f64])?;
        let dim: usize = kv.take("dim", 1)?;
        let hidden = kv.take_list("hidden", vec![16usize])?;
        let per_class: usize = kv.take("per_class", 10)?;
        let target = match kind.as_str() {
            "quadratic" => DiagTarget::Landscape(Landscape::quadratic_diag(&lambdas)),
            "saddle" => DiagTarget::Landscape(Landscape::Saddle),
            "ridge2d" => DiagTarget::Landscape(Landscape::Ridge2d),
            "quartic" => DiagTarget::Landscape(Landscape::Quartic { dim }),
            "mlp" => DiagTarget::Mlp { hidden, per_class },
            other => {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("unknown target `{other}`"),
                })
            }
        };
        let start = kv.take_list("start", Vec::new())?;
        let data_dir: String = kv.take("data_dir", String::new())?;
        let cfg = Self {
            target,
            start,
            eta: kv.take("eta", 0.1)?,
            steps: kv.take("steps", 1000)?,
            noise: kv.take("noise", 0.0)?,
            batch_size: kv.take("batch_size", 0)?,
            cadences: kv.take_list("cadences", vec![1u64, 10])?,
            method: kv.take_with("lyapunov_method", KrylovMethod::Lanczos, KrylovMethod::parse)?,
            iterations: kv.take("lyapunov_iterations", 100)?,
            seed: kv.take("seed", 0)?,
            data_dir: (!data_dir.is_empty()).then(|| PathBuf::from(data_dir)),
        };
        kv.finish()?;
        let bad = |msg: &str| {
            Err(Error::Config {
                line: 0,
                msg: msg.into(),
            })
        };
        if !(cfg.eta > 0.0 && cfg.eta.is_finite()) {
            return bad("`eta` must be positive");
        }
        if cfg.steps == 0 || cfg.cadences.is_empty() || cfg.cadences.contains(&0) {
            return bad("`steps` and every cadence must be positive");
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
        if !(cfg.noise >= 0.0) {
            return bad("`noise` must be non-negative");
        }
        if let DiagTarget::Landscape(l) = &cfg.target {
            if l.dim() == 0 {
                return bad("the landscape needs at least one dimension");
            }
            if !cfg.start.is_empty() && cfg.start.len() != l.dim() {
                return bad("`start` length does not match the landscape dimension");
            }
        }
        Ok(cfg)
    }
}
