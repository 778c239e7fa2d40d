//! Measurement harness and analysis toolkit: wall-clock/peak-memory profiling
//! of recovery runs, roofline attainable-performance curves, perf-per-watt
//! and cross-platform ratio tables, and Pareto-front extraction.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One platform measurement row. Optional fields are explicitly absent
/// (`None`), never zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSample {
    pub label: String,
    pub runtime_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_power_w: Option<f64>,
    pub dram_mb: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_moved: Option<f64>,
}

impl PlatformSample {
    pub fn validate(&self) -> Result<()> {
        if !(self.runtime_s > 0.0) || !(self.dram_mb > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample `{}`: runtime_s and dram_mb must be > 0",
                self.label
            )));
        }
        for (name, v) in [
            ("avg_power_w", self.avg_power_w),
            ("freq_mhz", self.freq_mhz),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "sample `{}`: {name} must be > 0 when present",
                        self.label
                    )));
                }
            }
        }
        Ok(())
    }
}

pub const SAMPLE_CSV_HEADER: &str =
    "label,runtime_s,avg_power_w,dram_mb,error,freq_mhz,flops,bytes_moved";

pub fn write_samples_csv<W: Write>(samples: &[PlatformSample], mut w: W) -> Result<()> {
    writeln!(w, "{SAMPLE_CSV_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.label,
            s.runtime_s,
            opt(s.avg_power_w),
            s.dram_mb,
            opt(s.error),
            opt(s.freq_mhz),
            opt(s.flops),
            opt(s.bytes_moved)
        )?;
    }
    Ok(())
}

pub fn read_samples_csv<R: Read>(r: R) -> Result<Vec<PlatformSample>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != SAMPLE_CSV_HEADER {
        return Err(Error::Schema(format!(
            "expected header `{SAMPLE_CSV_HEADER}`, got `{header}`"
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let req = |f: usize| -> Result<f64> {
            rec.get(f)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::Parse {
                    line,
                    message: e.to_string(),
                })
        };
        let opt = |f: usize| -> Result<Option<f64>> {
            let raw = rec.get(f).unwrap_or("").trim();
            if raw.is_empty() {
                Ok(None)
            } else {
                raw.parse().map(Some).map_err(|e: std::num::ParseFloatError| {
                    Error::Parse {
                        line,
                        message: e.to_string(),
                    }
                })
            }
        };
        let s = PlatformSample {
            label: rec.get(0).unwrap_or("").to_string(),
            runtime_s: req(1)?,
            avg_power_w: opt(2)?,
            dram_mb: req(3)?,
            error: opt(4)?,
            freq_mhz: opt(5)?,
            flops: opt(6)?,
            bytes_moved: opt(7)?,
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// measurement

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub runtime_s: f64,
    /// Max resident set observed while the closure ran, sampled at 100 Hz.
    /// This is a proxy for DRAM footprint, not a per-device measurement.
    pub peak_memory_bytes: u64,
}

pub(crate) fn current_rss_bytes() -> u64 {
    if let Ok(status) = std::fs::read_to_string("/proc/self/status") {
        for l in status.lines() {
            if let Some(rest) = l.strip_prefix("VmRSS:") {
                let kb: u64 = rest
                    .trim()
                    .trim_end_matches("kB")
                    .trim()
                    .parse()
                    .unwrap_or(0);
                return kb * 1024;
            }
        }
    }
    0
}

/// Run a closure under a monotonic wall clock and a 100 Hz resident-memory
/// sampler. Closure errors are propagated with the partial wall time
/// attached.
pub fn measure_recovery<T>(run: impl FnOnce() -> Result<T>) -> Result<(T, Measurement)> {
    let stop = Arc::new(AtomicBool::new(false));
    let peak = Arc::new(AtomicU64::new(current_rss_bytes()));
    let sampler = {
        let stop = Arc::clone(&stop);
        let peak = Arc::clone(&peak);
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                peak.fetch_max(current_rss_bytes(), Ordering::Relaxed);
                std::thread::sleep(Duration::from_millis(10));
            }
        })
    };
    let start = Instant::now();
    let outcome = run();
    let runtime_s = start.elapsed().as_secs_f64();
    stop.store(true, Ordering::Relaxed);
    let _ = sampler.join();
    match outcome {
        Ok(v) => Ok((
            v,
            Measurement {
                runtime_s,
                peak_memory_bytes: peak.load(Ordering::Relaxed),
            },
        )),
        Err(e) => Err(Error::MeasuredFailure {
            runtime_s,
            source: Box::new(e),
        }),
    }
}

// ---------------------------------------------------------------------------
// roofline

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RooflineSpec {
    pub peak_gflops: f64,
    pub bandwidth_gbs: f64,
}

impl RooflineSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_gflops > 0.0) || !(self.bandwidth_gbs > 0.0) {
            return Err(Error::InvalidArgument(
                "roofline ceilings must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Operational intensity at which the two ceilings meet.
    pub fn ridge(&self) -> f64 {
        self.peak_gflops / self.bandwidth_gbs
    }
}

/// Attainable performance at an operational intensity (FLOPs/byte):
/// min(compute ceiling, bandwidth * oi).
pub fn roofline_attainable(spec: &RooflineSpec, oi: f64) -> Result<f64> {
    spec.validate()?;
    if !(oi > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "operational intensity must be > 0, got {oi}"
        )));
    }
    Ok(spec.peak_gflops.min(spec.bandwidth_gbs * oi))
}

/// Log-spaced (oi, attainable) pairs for log-log plotting.
pub fn roofline_sweep(
    spec: &RooflineSpec,
    oi_min: f64,
    oi_max: f64,
    points: usize,
) -> Result<Vec<(f64, f64)>> {
    if !(oi_min > 0.0) || !(oi_max > oi_min) || points < 2 {
        return Err(Error::InvalidArgument(
            "need 0 < oi_min < oi_max and points >= 2".into(),
        ));
    }
    let (lo, hi) = (oi_min.ln(), oi_max.ln());
    (0..points)
        .map(|k| {
            let oi = (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp();
            Ok((oi, roofline_attainable(spec, oi)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// perf/watt and ratio tables

/// Convention string echoed into ratio-report metadata.
pub const PERF_PER_WATT_CONVENTION: &str =
    "score = runtime_s / reference_runtime_s, perf_per_watt = score / avg_power_w; \
     only cross-platform ratios are meaningful";

/// Performance-per-watt score. The score is runtime-proportional and
/// normalized by `reference_runtime_s`, so the absolute number depends on the
/// chosen reference while every cross-platform ratio does not. Returns `None`
/// when the sample carries no power figure.
pub fn perf_per_watt(sample: &PlatformSample, reference_runtime_s: f64) -> Result<Option<f64>> {
    sample.validate()?;
    if !(reference_runtime_s > 0.0) {
        return Err(Error::InvalidArgument(
            "reference runtime must be > 0".into(),
        ));
    }
    Ok(sample
        .avg_power_w
        .map(|p| (sample.runtime_s / reference_runtime_s) / p))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioRow {
    pub label: String,
    /// baseline_runtime / runtime
    pub speedup: f64,
    /// baseline_dram / dram
    pub dram_ratio: f64,
    /// perf_per_watt(sample) / perf_per_watt(baseline), when both have power
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perf_per_watt_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioReport {
    pub baseline: String,
    pub convention: String,
    pub rows: Vec<RatioRow>,
}

/// Ratios of every sample against a named baseline.
pub fn ratio_report(samples: &[PlatformSample], baseline_label: &str) -> Result<RatioReport> {
    let baseline = samples
        .iter()
        .find(|s| s.label == baseline_label)
        .ok_or_else(|| {
            Error::InvalidArgument(format!("baseline label `{baseline_label}` not present"))
        })?;
    baseline.validate()?;
    let base_pw = perf_per_watt(baseline, 1.0)?;
    let mut rows = Vec::new();
    for s in samples {
        s.validate()?;
        let pw = perf_per_watt(s, 1.0)?;
        rows.push(RatioRow {
            label: s.label.clone(),
            speedup: baseline.runtime_s / s.runtime_s,
            dram_ratio: baseline.dram_mb / s.dram_mb,
            perf_per_watt_ratio: match (pw, base_pw) {
                (Some(a), Some(b)) => Some(a / b),
                _ => None,
            },
        });
    }
    Ok(RatioReport {
        baseline: baseline_label.to_string(),
        convention: PERF_PER_WATT_CONVENTION.to_string(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Pareto front

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleField {
    RuntimeS,
    AvgPowerW,
    DramMb,
    Error,
    FreqMhz,
    Flops,
    BytesMoved,
}

impl SampleField {
    pub fn get(&self, s: &PlatformSample) -> Option<f64> {
        match self {
            SampleField::RuntimeS => Some(s.runtime_s),
            SampleField::AvgPowerW => s.avg_power_w,
            SampleField::DramMb => Some(s.dram_mb),
            SampleField::Error => s.error,
            SampleField::FreqMhz => s.freq_mhz,
            SampleField::Flops => s.flops,
            SampleField::BytesMoved => s.bytes_moved,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SampleField::RuntimeS => "runtime_s",
            SampleField::AvgPowerW => "avg_power_w",
            SampleField::DramMb => "dram_mb",
            SampleField::Error => "error",
            SampleField::FreqMhz => "freq_mhz",
            SampleField::Flops => "flops",
            SampleField::BytesMoved => "bytes_moved",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub field: SampleField,
    pub direction: Direction,
}

impl Objective {
    pub fn minimize(field: SampleField) -> Self {
        Objective {
            field,
            direction: Direction::Minimize,
        }
    }
}

fn objective_matrix(samples: &[PlatformSample], objectives: &[Objective]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            objectives
                .iter()
                .map(|o| {
                    let v = o.field.get(s).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "sample `{}` is missing objective field `{}`",
                            s.label,
                            o.field.name()
                        ))
                    })?;
                    // flip sign so every objective is minimized
                    Ok(match o.direction {
                        Direction::Minimize => v,
                        Direction::Maximize => -v,
                    })
                })
                .collect()
        })
        .collect()
}

/// a dominates b: no worse everywhere, strictly better somewhere.
fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strict = true;
        }
    }
    strict
}

/// Indices of the non-dominated samples, in original order. Samples equal on
/// every objective are all retained.
pub fn pareto_front_indices(
    samples: &[PlatformSample],
    objectives: &[Objective],
) -> Result<Vec<usize>> {
    if objectives.is_empty() {
        return Err(Error::InvalidArgument("need at least one objective".into()));
    }
    let rows = objective_matrix(samples, objectives)?;
    Ok((0..samples.len())
        .filter(|&i| !rows.iter().enumerate().any(|(j, r)| j != i && dominates(r, &rows[i])))
        .collect())
}

pub fn pareto_front(
    samples: &[PlatformSample],
    objectives: &[Objective],
) -> Result<Vec<PlatformSample>> {
    Ok(pareto_front_indices(samples, objectives)?
        .into_iter()
        .map(|i| samples[i].clone())
        .collect())
}

/// `matrix[i][j]` is true when sample i dominates sample j.
pub fn dominance_matrix(
    samples: &[PlatformSample],
    objectives: &[Objective],
) -> Result<Vec<Vec<bool>>> {
    let rows = objective_matrix(samples, objectives)?;
    Ok(rows
        .iter()
        .map(|a| rows.iter().map(|b| dominates(a, b)).collect())
        .collect())
}

// ---------------------------------------------------------------------------
// published reference tables (fixtures)

/// Published AID comparison rows used as a reference fixture. Power for each
/// platform is as published; the absolute perf/watt values implied by the
/// convention above match the published column.
pub fn table2_aid_samples() -> Vec<PlatformSample> {
    vec![
        sample("FPGA", 253.84, Some(4.905), 214.23, Some(4.60), Some(173.0)),
        sample("MGPU", 562.75, Some(5.532), 2355.13, Some(3.07), Some(306.0)),
        sample("GPU", 423.28, Some(72.00), 6118.36, Some(2.90), Some(1410.0)),
    ]
}

/// Published cardiac comparison rows. The source table omits the power
/// column; the platform powers from the AID table reproduce its published
/// perf/watt values and are reused here.
pub fn table3_cardiac_samples() -> Vec<PlatformSample> {
    vec![
        sample("FPGA", 25.6, Some(4.905), 121.3, Some(7.20), None),
        sample("MGPU", 115.2, Some(5.532), 1061.3, Some(8.07), None),
        sample("GPU", 103.4, Some(72.00), 3101.6, Some(6.10), None),
    ]
}

fn sample(
    label: &str,
    runtime_s: f64,
    avg_power_w: Option<f64>,
    dram_mb: f64,
    error: Option<f64>,
    freq_mhz: Option<f64>,
) -> PlatformSample {
    PlatformSample {
        label: label.to_string(),
        runtime_s,
        avg_power_w,
        dram_mb,
        error,
        freq_mhz,
        flops: None,
        bytes_moved: None,
    }
}
