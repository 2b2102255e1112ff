//! Hand-written SVG charts. Coordinates are printed with fixed precision so
//! identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::harness::report::{Arm, EpochRow};
use crate::harness::study::{Band, StudySummary};

const BASELINE: &str = "#1f77b4";
const GHOST: &str = "#d62728";
const RUNS_PER_PAGE: usize = 15;

/// Named SVG documents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotSet {
    pub files: Vec<(String, String)>,
}

impl PlotSet {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, svg) in &self.files {
            std::fs::write(dir.join(name), svg)?;
        }
        Ok(())
    }
}

fn arm_color(arm: Arm) -> &'static str {
    match arm {
        Arm::Baseline => BASELINE,
        Arm::Ghost => GHOST,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plot area inside an SVG, with data ranges mapped onto it.
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(left: f64, top: f64, width: f64, height: f64, x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        Self {
            left,
            top,
            width,
            height,
            x: widen(x),
            y: widen(y),
        }
    }

    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y.0) / (self.y.1 - self.y.0) * self.height
    }

    fn point(&self, x: f64, y: f64) -> String {
        format!("{:.2},{:.2}", self.px(x), self.py(y))
    }

    fn axes(&self, s: &mut String, ticks: usize, font: u32) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        let _ = writeln!(
            s,
            r##"<rect x="{l:.2}" y="{t:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444" stroke-width="1"/>"##
        );
        for i in 0..=ticks {
            let f = i as f64 / ticks as f64;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (xp, yp) = (self.px(xv), self.py(yv));
            let _ = writeln!(
                s,
                r##"<line x1="{xp:.2}" y1="{:.2}" x2="{xp:.2}" y2="{:.2}" stroke="#444"/><text x="{xp:.2}" y="{:.2}" font-size="{font}" text-anchor="middle">{}</text>"##,
                t + h,
                t + h + 4.0,
                t + h + 4.0 + font as f64,
                tick_label(xv, self.x)
            );
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{yp:.2}" x2="{l:.2}" y2="{yp:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" font-size="{font}" text-anchor="end">{}</text>"##,
                l - 4.0,
                l - 6.0,
                yp + font as f64 / 3.0,
                tick_label(yv, self.y)
            );
        }
    }

    fn polyline(&self, s: &mut String, xs: &[f64], ys: &[f64], color: &str, width: f64) {
        let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| self.point(x, y)).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"#,
            pts.join(" ")
        );
    }

    fn band(&self, s: &mut String, xs: &[f64], band: &Band, color: &str) {
        let upper = xs
            .iter()
            .zip(&band.mean)
            .zip(&band.sd)
            .map(|((&x, m), sd)| self.point(x, m + sd));
        let lower = xs
            .iter()
            .zip(&band.mean)
            .zip(&band.sd)
            .rev()
            .map(|((&x, m), sd)| self.point(x, m - sd));
        let pts: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r#"<polygon fill="{color}" fill-opacity="0.2" stroke="none" points="{}"/>"#,
            pts.join(" ")
        );
    }
}

fn tick_label(v: f64, (lo, hi): (f64, f64)) -> String {
    let span = hi - lo;
    if span >= 10.0 {
        format!("{v:.0}")
    } else if span >= 1.0 {
        format!("{v:.1}")
    } else if span >= 0.1 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn open(width: u32, height: u32, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" font-size="16" text-anchor="middle">{}</text>"#,
        width / 2,
        escape(title)
    );
    s
}

fn legend(s: &mut String, x: f64, y: f64) {
    for (i, (arm, label)) in [(Arm::Baseline, "baseline"), (Arm::Ghost, "ghost")]
        .into_iter()
        .enumerate()
    {
        let yy = y + i as f64 * 18.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="{}" stroke-width="3"/><text x="{:.2}" y="{:.2}" font-size="12">{label}</text>"#,
            x + 24.0,
            arm_color(arm),
            x + 30.0,
            yy + 4.0
        );
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Mean test loss per arm with a ±1σ band.
pub fn band_plot(summary: &StudySummary) -> String {
    let mut s = open(720, 460, "Mean test loss ± 1σ");
    let bands = [
        (Arm::Baseline, &summary.band_baseline),
        (Arm::Ghost, &summary.band_ghost),
    ];
    let epochs = bands.iter().map(|(_, b)| b.mean.len()).max().unwrap_or(0);
    let xs: Vec<f64> = (0..epochs).map(|e| e as f64).collect();
    let y = range(
        bands
            .iter()
            .flat_map(|(_, b)| b.mean.iter().zip(&b.sd).flat_map(|(m, sd)| [m - sd, m + sd])),
    );
    let frame = Frame::new(70.0, 40.0, 610.0, 360.0, (0.0, epochs.saturating_sub(1) as f64), y);
    frame.axes(&mut s, 5, 11);
    for (arm, band) in bands {
        if band.mean.is_empty() {
            continue;
        }
        frame.band(&mut s, &xs[..band.mean.len()], band, arm_color(arm));
        frame.polyline(&mut s, &xs[..band.mean.len()], &band.mean, arm_color(arm), 2.0);
    }
    legend(&mut s, 560.0, 60.0);
    let _ = writeln!(
        s,
        r#"<text x="375" y="448" font-size="12" text-anchor="middle">epoch</text>"#
    );
    s.push_str("</svg>\n");
    s
}

/// Per-run first-peak epochs of both arms, joined by a segment.
pub fn peak_plot(summary: &StudySummary) -> String {
    let shift = match summary.mean_peak_shift {
        Some(m) => format!("mean shift {m:.2} epochs over {} paired runs", summary.paired_runs),
        None => "no paired peaks".into(),
    };
    let mut s = open(720, 460, &format!("First test-loss peak per run ({shift})"));
    let n = summary.peaks.len();
    let y = range(
        summary
            .peaks
            .iter()
            .flat_map(|p| [p.baseline, p.ghost])
            .flatten()
            .map(|v| v as f64),
    );
    let y = if y.0.is_finite() {
        (y.0 - 1.0, y.1 + 1.0)
    } else {
        (0.0, 1.0)
    };
    let frame = Frame::new(70.0, 40.0, 610.0, 360.0, (-0.5, n as f64 - 0.5), y);
    frame.axes(&mut s, 5, 11);
    for (i, p) in summary.peaks.iter().enumerate() {
        let x = i as f64;
        if let (Some(b), Some(g)) = (p.baseline, p.ghost) {
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999"/>"##,
                frame.px(x),
                frame.py(b as f64),
                frame.px(x),
                frame.py(g as f64)
            );
        }
        for (arm, v) in [(Arm::Baseline, p.baseline), (Arm::Ghost, p.ghost)] {
            if let Some(v) = v {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"/>"#,
                    frame.px(x),
                    frame.py(v as f64),
                    arm_color(arm)
                );
            }
        }
    }
    legend(&mut s, 560.0, 60.0);
    let _ = writeln!(
        s,
        r#"<text x="375" y="448" font-size="12" text-anchor="middle">run</text>"#
    );
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Copy)]
enum Metric {
    TrainLoss,
    TestLoss,
    TestAcc,
}

impl Metric {
    fn get(self, r: &EpochRow) -> f64 {
        match self {
            Metric::TrainLoss => r.train_loss,
            Metric::TestLoss => r.test_loss,
            Metric::TestAcc => r.test_acc,
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Metric::TrainLoss => "train_loss",
            Metric::TestLoss => "test_loss",
            Metric::TestAcc => "test_acc",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::TrainLoss => "Training loss",
            Metric::TestLoss => "Test loss",
            Metric::TestAcc => "Test accuracy",
        }
    }
}

/// Per run: `(epochs, values)` for the baseline and ghost arms.
type ArmCurves = [(Vec<f64>, Vec<f64>); 2];
type Curves = BTreeMap<usize, ArmCurves>;

fn curves(rows: &[EpochRow], metric: Metric) -> Curves {
    let mut out: Curves = BTreeMap::new();
    for r in rows {
        let slot = &mut out.entry(r.run_id).or_default()[matches!(r.arm, Arm::Ghost) as usize];
        slot.0.push(r.epoch as f64);
        slot.1.push(metric.get(r));
    }
    out
}

/// Small multiples, 5×3 runs per page.
fn grid_page(metric: Metric, page: usize, pages: usize, runs: &[(&usize, &ArmCurves)]) -> String {
    let (cols, cw, ch) = (5usize, 220.0, 170.0);
    let mut s = open(
        1140,
        580,
        &format!("{} per run (page {} of {pages})", metric.title(), page + 1),
    );
    for (i, (run_id, arms)) in runs.iter().enumerate() {
        let (col, row) = (i % cols, i / cols);
        let x = range(arms.iter().flat_map(|a| a.0.iter().copied()));
        let y = range(arms.iter().flat_map(|a| a.1.iter().copied()));
        let frame = Frame::new(
            50.0 + col as f64 * cw,
            50.0 + row as f64 * ch,
            cw - 60.0,
            ch - 50.0,
            x,
            y,
        );
        frame.axes(&mut s, 2, 9);
        for (k, arm) in [Arm::Baseline, Arm::Ghost].into_iter().enumerate() {
            if !arms[k].0.is_empty() {
                frame.polyline(&mut s, &arms[k].0, &arms[k].1, arm_color(arm), 1.2);
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">run {run_id}</text>"#,
            frame.left + frame.width / 2.0,
            frame.top - 4.0
        );
    }
    legend(&mut s, 1000.0, 20.0);
    s.push_str("</svg>\n");
    s
}

/// Band plot, peak comparison, and per-metric run grids.
pub fn emit_plots(rows: &[EpochRow], summary: &StudySummary) -> PlotSet {
    let mut files = vec![
        ("test_loss_band.svg".to_string(), band_plot(summary)),
        ("peak_comparison.svg".to_string(), peak_plot(summary)),
    ];
    for metric in [Metric::TrainLoss, Metric::TestLoss, Metric::TestAcc] {
        let c = curves(rows, metric);
        let runs: Vec<_> = c.iter().collect();
        let pages = runs.len().div_ceil(RUNS_PER_PAGE);
        for (page, chunk) in runs.chunks(RUNS_PER_PAGE).enumerate() {
            files.push((
                format!("grid_{}_p{}.svg", metric.slug(), page + 1),
                grid_page(metric, page, pages, chunk),
            ));
        }
    }
    PlotSet { files }
}
