//! CSV/JSON persistence of study results.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::study::{StudyReport, StudySummary};

pub const CSV_HEADER: &str = "run_id,arm,epoch,train_loss,test_loss,test_acc,gamma_hat,f_ghost_mean";

pub const CSV_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUNS_FILE: &str = "runs.json";
pub const CONFIG_FILE: &str = "config.cfg";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Baseline,
    Ghost,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Ghost => "ghost",
        }
    }
}

/// One `(run, arm, epoch)` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub run_id: usize,
    pub arm: Arm,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub gamma_hat: Option<f64>,
    pub f_ghost_mean: f64,
}

/// Rows for every completed run, ordered by run, arm, epoch.
pub fn rows(report: &StudyReport) -> Vec<EpochRow> {
    let mut out = Vec::new();
    for run in &report.runs {
        let Some((b, g)) = run.completed() else { continue };
        for (arm, s) in [(Arm::Baseline, b), (Arm::Ghost, g)] {
            for k in 0..s.test_loss.len() {
                out.push(EpochRow {
                    run_id: run.run_id,
                    arm,
                    epoch: k + 1,
                    train_loss: s.train_loss[k],
                    test_loss: s.test_loss[k],
                    test_acc: s.test_acc[k],
                    gamma_hat: s.gamma_hat[k],
                    f_ghost_mean: s.f_ghost_mean[k],
                });
            }
        }
    }
    out
}

/// 17 significant digits: enough to round-trip any `f64`.
fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn emit_csv(rows: &[EpochRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.run_id,
            r.arm.name(),
            r.epoch,
            float(r.train_loss),
            float(r.test_loss),
            float(r.test_acc),
            r.gamma_hat.map(float).unwrap_or_default(),
            float(r.f_ghost_mean)
        );
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<EpochRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Format(format!("unexpected CSV header {other:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |what: &str| Error::Format(format!("row {}: bad {what}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad("field count"));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        out.push(EpochRow {
            run_id: f[0].parse().map_err(|_| bad("run_id"))?,
            arm: match f[1] {
                "baseline" => Arm::Baseline,
                "ghost" => Arm::Ghost,
                _ => return Err(bad("arm")),
            },
            epoch: f[2].parse().map_err(|_| bad("epoch"))?,
            train_loss: num(f[3], "train_loss")?,
            test_loss: num(f[4], "test_loss")?,
            test_acc: num(f[5], "test_acc")?,
            gamma_hat: if f[6].is_empty() {
                None
            } else {
                Some(num(f[6], "gamma_hat")?)
            },
            f_ghost_mean: num(f[7], "f_ghost_mean")?,
        });
    }
    Ok(out)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Format(e.to_string()))
}

/// Writes the config copy, CSV, summary, per-run series and timings.
pub fn write_study_dir(report: &StudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write(dir, CONFIG_FILE, &report.config.emit())?;
    write(dir, CSV_FILE, &emit_csv(&rows(report)))?;
    write(dir, SUMMARY_FILE, &json(&report.summary)?)?;
    write(dir, RUNS_FILE, &json(&report.runs)?)?;
    let timing: Vec<(usize, f64)> = report.runs.iter().map(|r| (r.run_id, r.wall_seconds)).collect();
    write(dir, TIMING_FILE, &json(&timing)?)?;
    Ok(())
}

/// Reads back the CSV rows and the summary.
pub fn read_study_dir(dir: &Path) -> Result<(Vec<EpochRow>, StudySummary)> {
    let rows = parse_csv(&std::fs::read_to_string(dir.join(CSV_FILE))?)?;
    let summary = serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)
        .map_err(|e| Error::Format(format!("{SUMMARY_FILE}: {e}")))?;
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: usize, arm: Arm, epoch: usize, v: f64) -> EpochRow {
        EpochRow {
            run_id: run,
            arm,
            epoch,
            train_loss: v,
            test_loss: v * 1.1,
            test_acc: 0.1 + v / 7.0,
            gamma_hat: if epoch.is_multiple_of(2) { Some(-v / 3.0) } else { None },
            f_ghost_mean: 1e-300 * v,
        }
    }

    #[test]
    fn empty_is_header_only() {
        assert_eq!(emit_csv(&[]), format!("{CSV_HEADER}\n"));
        assert!(parse_csv(&emit_csv(&[])).unwrap().is_empty());
    }

    #[test]
    fn six_rows_round_trip_exactly() {
        let rows: Vec<EpochRow> = [Arm::Baseline, Arm::Ghost]
            .into_iter()
            .flat_map(|a| (1..=3).map(move |e| row(0, a, e, std::f64::consts::PI / e as f64)))
            .collect();
        let text = emit_csv(&rows);
        assert_eq!(text.lines().count(), 7);
        assert_eq!(parse_csv(&text).unwrap(), rows);
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(parse_csv("nope\n").is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\n0,other,1,1,1,1,,1\n")).is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\n0,ghost,1,1,1\n")).is_err());
    }
}
