use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scenario::Substrate;
use super::HarnessError;
use crate::student::{FailureCase, RestartRecord, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t_ms: f64,
    pub iteration: u64,
    pub images_per_s: f64,
    /// Buffered soft-label batches, summed over students.
    pub volume: usize,
    /// Teachers held, summed over students.
    pub teachers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub epoch: u64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub t_ms: f64,
    pub student: usize,
    pub teacher: String,
    pub case: FailureCase,
    pub redispatched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunReport {
    pub scenario: String,
    pub mode: TrainMode,
    pub substrate: Substrate,
    pub students: usize,
    pub series: Vec<SeriesPoint>,
    pub accuracy: Vec<AccuracyPoint>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub iterations: u64,
    pub images: u64,
    /// Wall-clock seconds (virtual seconds on the virtual substrate).
    pub total_s: f64,
    pub throughput: f64,
    /// Throughput after the first fifth of the steps.
    pub steady_throughput: f64,
    /// Mean over samples of (volume + teacher count).
    pub backlog_mean: f64,
    /// Largest buffer volume seen by any single student.
    pub max_volume: usize,
    pub volume_bound: usize,
    pub starved: bool,
    pub exactly_once: Option<bool>,
    pub failures: Vec<FailureRecord>,
    pub restarts: Vec<RestartRecord>,
    /// Flat parameters of the final student model, when training ran.
    #[serde(skip)]
    pub final_params: Option<Vec<f64>>,
}

impl RunReport {
    /// Mean of (volume + teachers) over each window of `width` consecutive
    /// samples, sliding by one.
    pub fn sliding_backlog(&self, width: usize) -> Vec<f64> {
        let vals: Vec<f64> = self
            .series
            .iter()
            .map(|p| (p.volume + p.teachers) as f64)
            .collect();
        if width == 0 || vals.len() < width {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(vals.len() - width + 1);
        let mut sum: f64 = vals[..width].iter().sum();
        out.push(sum / width as f64);
        for i in width..vals.len() {
            sum += vals[i] - vals[i - width];
            out.push(sum / width as f64);
        }
        out
    }
}

/// Writes `series.csv`, `accuracy.csv`, `report.json` and `summary.txt` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut series = fs::File::create(dir.join("series.csv"))?;
    writeln!(series, "t_ms,iteration,images_per_s,volume,teachers")?;
    for p in &report.series {
        writeln!(
            series,
            "{:.3},{},{:.3},{},{}",
            p.t_ms, p.iteration, p.images_per_s, p.volume, p.teachers
        )?;
    }
    let mut acc = fs::File::create(dir.join("accuracy.csv"))?;
    writeln!(acc, "epoch,top1,top5")?;
    for a in &report.accuracy {
        writeln!(acc, "{},{:.6},{:.6}", a.epoch, a.top1, a.top5)?;
    }
    fs::write(
        dir.join("report.json"),
        serde_json::to_vec_pretty(report).expect("report serializes"),
    )?;
    fs::write(dir.join("summary.txt"), summary_text(report))?;
    Ok(())
}

pub fn summary_text(r: &RunReport) -> String {
    let mut s = String::new();
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}%", v * 100.0));
    let _ = writeln!(s, "scenario        {}", r.scenario);
    let _ = writeln!(
        s,
        "mode            {:?} on {:?} substrate, {} student(s)",
        r.mode, r.substrate, r.students
    );
    let _ = writeln!(
        s,
        "iterations      {} ({} images in {:.2} s)",
        r.iterations, r.images, r.total_s
    );
    let _ = writeln!(
        s,
        "throughput      {:.1} images/s (steady {:.1})",
        r.throughput, r.steady_throughput
    );
    let _ = writeln!(s, "backlog mean    {:.3}", r.backlog_mean);
    let _ = writeln!(
        s,
        "max volume      {} (bound {})",
        r.max_volume, r.volume_bound
    );
    let _ = writeln!(s, "top-1 / top-5   {} / {}", pct(r.top1), pct(r.top5));
    let _ = writeln!(s, "teacher faults  {}", r.failures.len());
    let _ = writeln!(s, "restarts        {}", r.restarts.len());
    if let Some(ok) = r.exactly_once {
        let _ = writeln!(s, "exactly-once    {}", if ok { "ok" } else { "VIOLATED" });
    }
    if r.starved {
        let _ = writeln!(
            s,
            "STARVED: training made no progress within the watchdog period"
        );
    }
    s
}
