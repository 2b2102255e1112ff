use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::optim::{Observer, TrajectoryRecord};
use crate::rng::{stream_rng, Stream};

pub const SKETCH_BINS: usize = 64;
pub const MIN_STABILITY_STEPS: usize = 2000;

/// Two fixed random projections of the iterates; a 2-D histogram of them
/// stands in for the empirical measure.
#[derive(Clone, Debug)]
pub struct MeasureSketch {
    projections: [Vec<f64>; 2],
    points: Vec<[f64; 2]>,
}

impl MeasureSketch {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("sketch dimension must be positive"));
        }
        let mut rng = stream_rng(seed, Stream::Projection);
        let mut draw = || {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        Ok(Self {
            projections: [draw(), draw()],
            points: Vec::new(),
        })
    }

    /// A sketch over already-projected coordinates.
    pub fn from_points(points: Vec<[f64; 2]>) -> Self {
        Self {
            projections: [vec![1.0, 0.0], vec![0.0, 1.0]],
            points,
        }
    }

    pub fn record(&mut self, w: &[f64]) {
        let p = |v: &[f64]| v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        self.points.push([p(&self.projections[0]), p(&self.projections[1])]);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-axis `[μ − 3σ, μ + 3σ]` over all recorded points.
    fn ranges(&self) -> [(f64, f64); 2] {
        let n = self.points.len() as f64;
        let mut out = [(0.0, 0.0); 2];
        for (axis, r) in out.iter_mut().enumerate() {
            let mean = self.points.iter().map(|p| p[axis]).sum::<f64>() / n;
            let var = self.points.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            *r = (mean - 3.0 * sd, mean + 3.0 * sd);
        }
        out
    }

    fn bin(v: f64, (lo, hi): (f64, f64)) -> usize {
        if hi <= lo {
            return 0;
        }
        let b = ((v - lo) / (hi - lo) * SKETCH_BINS as f64).floor();
        b.clamp(0.0, (SKETCH_BINS - 1) as f64) as usize
    }

    /// Counts of `points[range]` on the shared grid, row-major `64×64`.
    /// Points outside `μ ± 3σ` land in the edge bins.
    pub fn histogram(&self, range: std::ops::Range<usize>) -> Vec<u64> {
        let r = self.ranges();
        let mut h = vec![0u64; SKETCH_BINS * SKETCH_BINS];
        for p in &self.points[range] {
            h[Self::bin(p[0], r[0]) * SKETCH_BINS + Self::bin(p[1], r[1])] += 1;
        }
        h
    }
}

impl Observer for MeasureSketch {
    fn observe(&mut self, _step: u64, params: &[f64], _record: &mut TrajectoryRecord) -> Result<()> {
        self.record(params);
        Ok(())
    }
}

/// Total-variation distance between the histograms of the first and second
/// halves of the recorded iterates (the middle point is dropped for odd
/// counts).
pub fn measure_stability(sketch: &MeasureSketch) -> Result<f64> {
    let n = sketch.len();
    if n < MIN_STABILITY_STEPS {
        return Err(Error::contract(format!(
            "measure stability needs ≥ {MIN_STABILITY_STEPS} steps, have {n}"
        )));
    }
    let half = n / 2;
    let a = sketch.histogram(0..half);
    let b = sketch.histogram(n - half..n);
    let m = half as f64;
    Ok(0.5
        * a.iter()
            .zip(&b)
            .map(|(&x, &y)| (x as f64 / m - y as f64 / m).abs())
            .sum::<f64>())
}
