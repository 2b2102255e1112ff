//! Observers of an SGD chain: ergodic averages, the running Lyapunov
//! estimate, empirical-measure sketches, and peak detection.
//!
//! Everything here reads the chain; nothing writes to it.

pub mod ergodic;
pub mod measure;
pub mod peaks;
pub mod spectral;

pub use ergodic::{ergodic_means, lyapunov_running, ErgodicAccumulator, ErgodicMeans, LyapunovObserver};
pub use measure::{measure_stability, MeasureSketch};
pub use peaks::{first_peak, smooth};
pub use spectral::{
    hvp, spectral_norm_shifted, DenseHessian, FdHessian, HessianOperator, KrylovMethod, SpectralEstimate, SpectralProbe,
};
