//! Measurement-side transformations: trajectories, additive noise,
//! downsampling, hidden-state masking, and CSV ingestion of OhioT1D-shaped
//! glucose data.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sampled multivariate time series with input channels and an
/// observability mask. `states[k]` is the length-n state at `times[k]`,
/// `inputs[k]` the length-m input row. `mask[j]` is true when state channel j
/// is measured; hidden channels keep their values for oracle comparison but
/// loss functions must ignore them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least 2 samples, got {}",
                self.len()
            )));
        }
        if self.states.len() != self.len() || self.inputs.len() != self.len() {
            return Err(Error::InvalidArgument(
                "times/states/inputs length mismatch".into(),
            ));
        }
        let n = self.state_dim();
        if self.mask.len() != n {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not match state dimension {}",
                self.mask.len(),
                n
            )));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument(
                "at least one state channel must be observable".into(),
            ));
        }
        for w in self.times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "times must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// CSV with header `t,state_0..,input_0..,mask_0..`; mask entries 0/1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|j| format!("state_{j}")));
        header.extend((0..m).map(|j| format!("input_{j}")));
        header.extend((0..n).map(|j| format!("mask_{j}")));
        wtr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![format_f64(self.times[k])];
            row.extend(self.states[k].iter().map(|v| format_f64(*v)));
            row.extend(self.inputs[k].iter().map(|v| format_f64(*v)));
            row.extend(self.mask.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Trajectory> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let n = header.iter().filter(|h| h.starts_with("state_")).count();
        let m = header.iter().filter(|h| h.starts_with("input_")).count();
        let n_mask = header.iter().filter(|h| h.starts_with("mask_")).count();
        if header.get(0) != Some("t") || n == 0 || n_mask != n {
            return Err(Error::Schema(format!(
                "expected header t,state_*,input_*,mask_*; got {header:?}"
            )));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        let mut mask = vec![false; n];
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2; // header is line 1
            let rec = rec?;
            let parse = |field: usize| -> Result<f64> {
                rec.get(field)
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("missing column {field}"),
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse {
                        line,
                        message: e.to_string(),
                    })
            };
            times.push(parse(0)?);
            states.push((0..n).map(|j| parse(1 + j)).collect::<Result<Vec<_>>>()?);
            inputs.push(
                (0..m)
                    .map(|j| parse(1 + n + j))
                    .collect::<Result<Vec<_>>>()?,
            );
            for (j, mj) in mask.iter_mut().enumerate() {
                *mj = parse(1 + n + m + j)? != 0.0;
            }
        }
        let traj = Trajectory {
            times,
            states,
            inputs,
            mask,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn read_csv_path(path: &Path) -> Result<Trajectory> {
        Trajectory::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn format_f64(v: f64) -> String {
    // Shortest representation that round-trips, so CSV round-trips losslessly.
    let mut buf = ryu_like(v);
    if buf.is_empty() {
        buf = v.to_string();
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // `{}` on f64 uses the shortest round-trip form in Rust.
    format!("{v}")
}

/// Noise level for [`corrupt`]: either a target SNR in dB (noise power scaled
/// per channel to the channel's mean-square signal power) or a fixed sigma
/// shared by all observed channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    SnrDb(f64),
    Sigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: NoiseLevel,
    /// ChaCha8 seed; identical seeds reproduce identical noise bitwise.
    pub seed: u64,
}

impl NoiseSpec {
    pub fn snr_db(snr_db: f64, seed: u64) -> Self {
        NoiseSpec {
            level: NoiseLevel::SnrDb(snr_db),
            seed,
        }
    }

    pub fn sigma(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            level: NoiseLevel::Sigma(sigma),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.level {
            NoiseLevel::SnrDb(s) if !s.is_nan() => Ok(()),
            NoiseLevel::Sigma(s) if s.is_finite() && s >= 0.0 => Ok(()),
            _ => Err(Error::InvalidArgument("invalid noise level".into())),
        }
    }
}

/// Additive zero-mean Gaussian noise on observed state channels only; inputs
/// and hidden channels are untouched. The RNG is ChaCha8 seeded from
/// `spec.seed`, drawing channel-major so output is reproducible.
pub fn corrupt(clean: &Trajectory, spec: &NoiseSpec) -> Result<Trajectory> {
    clean.validate()?;
    spec.validate()?;
    let mut out = clean.clone();
    let n = clean.state_dim();
    let num = clean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for j in 0..n {
        if !clean.mask[j] {
            continue;
        }
        let sigma = match spec.level {
            NoiseLevel::Sigma(s) => s,
            NoiseLevel::SnrDb(snr) => {
                if snr.is_infinite() && snr > 0.0 {
                    0.0
                } else {
                    let power =
                        clean.states.iter().map(|s| s[j] * s[j]).sum::<f64>() / num as f64;
                    (power / 10f64.powf(snr / 10.0)).sqrt()
                }
            }
        };
        if sigma == 0.0 {
            continue;
        }
        for k in 0..num {
            let g: f64 = StandardNormal.sample(&mut rng);
            out.states[k][j] += sigma * g;
        }
    }
    Ok(out)
}

/// Keep samples at indices 0, k, 2k, ...; index 0 is always retained.
pub fn downsample(traj: &Trajectory, keep_every: usize) -> Result<Trajectory> {
    if keep_every == 0 {
        return Err(Error::InvalidArgument("keep_every must be >= 1".into()));
    }
    let idx: Vec<usize> = (0..traj.len()).step_by(keep_every).collect();
    if idx.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "downsampling by {keep_every} leaves {} sample(s); need >= 2",
            idx.len()
        )));
    }
    Ok(Trajectory {
        times: idx.iter().map(|&i| traj.times[i]).collect(),
        states: idx.iter().map(|&i| traj.states[i].clone()).collect(),
        inputs: idx.iter().map(|&i| traj.inputs[i].clone()).collect(),
        mask: traj.mask.clone(),
    })
}

/// Replace the observability mask. State values of hidden channels are kept
/// (for oracle comparison) but downstream losses must skip them.
pub fn mask_hidden(traj: &Trajectory, observable: &[bool]) -> Result<Trajectory> {
    if observable.len() != traj.state_dim() {
        return Err(Error::InvalidArgument(format!(
            "mask length {} != state dimension {}",
            observable.len(),
            traj.state_dim()
        )));
    }
    if !observable.iter().any(|&m| m) {
        return Err(Error::InvalidArgument(
            "mask must have at least one observable channel".into(),
        ));
    }
    let mut out = traj.clone();
    out.mask = observable.to_vec();
    Ok(out)
}

/// Column-name mapping for OhioT1D-shaped CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OhioSchema {
    pub timestamp: String,
    pub glucose: String,
    pub basal_insulin: String,
    pub bolus_insulin: String,
    pub carbs: String,
}

impl Default for OhioSchema {
    fn default() -> Self {
        OhioSchema {
            timestamp: "timestamp".into(),
            glucose: "glucose".into(),
            basal_insulin: "basal_insulin".into(),
            bolus_insulin: "bolus_insulin".into(),
            carbs: "carbs".into(),
        }
    }
}

/// Load an OhioT1D-shaped CSV: one observed glucose channel and two input
/// channels (total insulin dose = basal + bolus, carb/glucose appearance).
/// Timestamps may be integer seconds or ISO-8601. Gaps larger than twice the
/// nominal spacing split the series into separate segments.
pub fn load_ohio_format(path: &Path, schema: &OhioSchema) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}` in {header:?}")))
    };
    let c_ts = col(&schema.timestamp)?;
    let c_glu = col(&schema.glucose)?;
    let c_basal = col(&schema.basal_insulin)?;
    let c_bolus = col(&schema.bolus_insulin)?;
    let c_carbs = col(&schema.carbs)?;

    let mut times = Vec::new();
    let mut glucose = Vec::new();
    let mut insulin = Vec::new();
    let mut carbs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let t = parse_timestamp(rec.get(c_ts).unwrap_or(""), line)?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::Parse {
                    line,
                    message: format!("non-monotone timestamp {t} after {prev}"),
                });
            }
        }
        let num = |field: usize| -> Result<f64> {
            let raw = rec.get(field).unwrap_or("").trim();
            if raw.is_empty() {
                return Ok(0.0); // missing value
            }
            raw.parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })
        };
        times.push(t);
        glucose.push(num(c_glu)?);
        insulin.push(num(c_basal)? + num(c_bolus)?);
        carbs.push(num(c_carbs)?);
    }
    if times.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{}: need at least 2 rows, got {}",
            path.display(),
            times.len()
        )));
    }

    // Nominal spacing is the median inter-sample gap (5 min for real CGM).
    let mut diffs: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nominal = diffs[diffs.len() / 2];

    let mut segments = Vec::new();
    let mut start = 0usize;
    for k in 1..times.len() {
        if times[k] - times[k - 1] > 2.0 * nominal {
            push_segment(&mut segments, &times, &glucose, &insulin, &carbs, start, k);
            start = k;
        }
    }
    push_segment(
        &mut segments,
        &times,
        &glucose,
        &insulin,
        &carbs,
        start,
        times.len(),
    );
    Ok(segments)
}

fn push_segment(
    segments: &mut Vec<Trajectory>,
    times: &[f64],
    glucose: &[f64],
    insulin: &[f64],
    carbs: &[f64],
    start: usize,
    end: usize,
) {
    if end - start < 2 {
        return; // isolated sample, not a usable segment
    }
    segments.push(Trajectory {
        times: times[start..end].to_vec(),
        states: glucose[start..end].iter().map(|&g| vec![g]).collect(),
        inputs: (start..end).map(|k| vec![insulin[k], carbs[k]]).collect(),
        mask: vec![true],
    });
}

fn parse_timestamp(raw: &str, line: usize) -> Result<f64> {
    let raw = raw.trim();
    if let Ok(secs) = raw.parse::<i64>() {
        return Ok(secs as f64);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Ok(f);
    }
    iso8601_to_unix(raw).ok_or_else(|| Error::Parse {
        line,
        message: format!("unparseable timestamp `{raw}`"),
    })
}

/// Minimal ISO-8601 parser for `YYYY-MM-DD[T ]HH:MM:SS` (UTC assumed).
fn iso8601_to_unix(s: &str) -> Option<f64> {
    let s = s.trim_end_matches('Z');
    let (date, time) = if let Some((d, t)) = s.split_once('T') {
        (d, t)
    } else {
        s.split_once(' ')?
    };
    let mut dp = date.split('-');
    let year: i64 = dp.next()?.parse().ok()?;
    let month: u32 = dp.next()?.parse().ok()?;
    let day: i64 = dp.next()?.parse::<i64>().ok()?;
    let mut tp = time.split(':');
    let hour: i64 = tp.next()?.parse().ok()?;
    let min: i64 = tp.next()?.parse().ok()?;
    let sec: f64 = tp.next().unwrap_or("0").parse().ok()?;
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return None;
    }
    // Days since Unix epoch, civil-calendar arithmetic.
    let y = if month <= 2 { year - 1 } else { year };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = (month as i64 + 9) % 12;
    let doy = (153 * mp + 2) / 5 + day - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146097 + doe - 719468;
    Some((days * 86400 + hour * 3600 + min * 60) as f64 + sec)
}
