//! Data sources: MNIST IDX files, RMNIST subsampling, and closed-form
//! synthetic landscapes.

pub mod idx;
pub mod landscape;
pub mod mnist;

pub use idx::{parse_idx, IdxFile};
pub use landscape::{Landscape, LandscapeEval, NoisyLandscape};
pub use mnist::{load_mnist, resolve_data_dir, rmnist_sample, Dataset, MnistSplit, Provenance, DATA_DIR_ENV};
