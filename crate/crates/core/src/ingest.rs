//! Loading, validating and preprocessing replicated multichannel series.
//!
//! A dataset is `N` subjects, each observed as a `P`-channel series of the
//! same length `n`, together with one scalar outcome per subject. Outcomes
//! are mapped affinely onto `[0, 1]`; the map is kept so summaries can be
//! reported back on the raw axis.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shortest series the frequency machinery accepts.
pub const MIN_SERIES_LENGTH: usize = 15;

/// Largest channel count the sampler supports.
pub const MAX_CHANNELS: usize = 3;

/// Affine map from raw outcome units onto the unit interval:
/// `unit = (raw - offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTransform {
    pub offset: f64,
    pub scale: f64,
}

impl OutcomeTransform {
    pub fn identity() -> Self {
        OutcomeTransform {
            offset: 0.0,
            scale: 1.0,
        }
    }

    pub fn to_unit(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.scale
    }

    pub fn to_raw(&self, unit: f64) -> f64 {
        self.offset + self.scale * unit
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetrendMode {
    None,
    #[default]
    Mean,
    Linear,
}

impl std::str::FromStr for DetrendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DetrendMode::None),
            "mean" => Ok(DetrendMode::Mean),
            "linear" => Ok(DetrendMode::Linear),
            other => Err(Error::Config(format!("unknown detrend mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IngestOptions {
    pub detrend: DetrendMode,
}

/// `N` subjects by `n` time points by `P` channels, plus outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSubjectSeries {
    subject_ids: Vec<String>,
    n_time: usize,
    n_channels: usize,
    /// Row-major `[subject][time][channel]`.
    data: Vec<f64>,
    outcomes_raw: Vec<f64>,
    outcomes: Vec<f64>,
    transform: OutcomeTransform,
}

impl MultiSubjectSeries {
    /// Builds a validated dataset from per-subject `n x P` blocks given in
    /// time-major order, scaling the raw outcomes onto `[0, 1]`.
    pub fn new(
        subject_ids: Vec<String>,
        n_time: usize,
        n_channels: usize,
        data: Vec<f64>,
        outcomes_raw: Vec<f64>,
    ) -> Result<Self> {
        let (outcomes, transform) = scale_outcomes(&outcomes_raw)?;
        Self::with_unit_outcomes(
            subject_ids,
            n_time,
            n_channels,
            data,
            outcomes_raw,
            outcomes,
            transform,
        )
    }

    /// Builds a dataset whose outcomes are already on the unit scale and
    /// are used as-is (for example `u_j = j / N` in simulation designs).
    pub fn from_unit_outcomes(
        subject_ids: Vec<String>,
        n_time: usize,
        n_channels: usize,
        data: Vec<f64>,
        outcomes: Vec<f64>,
    ) -> Result<Self> {
        Self::with_unit_outcomes(
            subject_ids,
            n_time,
            n_channels,
            data,
            outcomes.clone(),
            outcomes,
            OutcomeTransform::identity(),
        )
    }

    fn with_unit_outcomes(
        subject_ids: Vec<String>,
        n_time: usize,
        n_channels: usize,
        data: Vec<f64>,
        outcomes_raw: Vec<f64>,
        outcomes: Vec<f64>,
        transform: OutcomeTransform,
    ) -> Result<Self> {
        let n_subjects = subject_ids.len();
        if n_subjects < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 subjects, found {n_subjects}"
            )));
        }
        if !(1..=MAX_CHANNELS).contains(&n_channels) {
            return Err(Error::Dimension(format!(
                "channel count must be 1..={MAX_CHANNELS}, found {n_channels}"
            )));
        }
        if n_time < MIN_SERIES_LENGTH {
            return Err(Error::Dimension(format!(
                "series length must be at least {MIN_SERIES_LENGTH}, found {n_time}"
            )));
        }
        if data.len() != n_subjects * n_time * n_channels {
            return Err(Error::Dimension(format!(
                "data has {} values, expected {n_subjects} x {n_time} x {n_channels}",
                data.len()
            )));
        }
        if outcomes.len() != n_subjects || outcomes_raw.len() != n_subjects {
            return Err(Error::Dimension(format!(
                "{} outcomes for {n_subjects} subjects",
                outcomes.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        if let Some(u) = outcomes.iter().find(|u| !(0.0..=1.0).contains(*u)) {
            return Err(Error::Domain(format!("unit outcome {u} outside [0, 1]")));
        }
        let mut seen = HashMap::new();
        for (j, id) in subject_ids.iter().enumerate() {
            if let Some(prev) = seen.insert(id.as_str(), j) {
                return Err(Error::InvalidInput(format!(
                    "duplicate subject id `{id}` (positions {prev} and {j})"
                )));
            }
        }
        Ok(MultiSubjectSeries {
            subject_ids,
            n_time,
            n_channels,
            data,
            outcomes_raw,
            outcomes,
            transform,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// Value of channel `p` for subject `j` at zero-based time index `t`.
    pub fn value(&self, j: usize, t: usize, p: usize) -> f64 {
        self.data[(j * self.n_time + t) * self.n_channels + p]
    }

    /// Channel `p` of subject `j` as a contiguous vector over time.
    pub fn channel(&self, j: usize, p: usize) -> Vec<f64> {
        (0..self.n_time).map(|t| self.value(j, t, p)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn outcomes_raw(&self) -> &[f64] {
        &self.outcomes_raw
    }

    pub fn outcome_transform(&self) -> OutcomeTransform {
        self.transform
    }

    /// Writes the series in the `subject_id,t,ch1..chP` layout.
    pub fn write_series_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("subject_id,t");
        for p in 1..=self.n_channels {
            out.push_str(&format!(",ch{p}"));
        }
        out.push('\n');
        for (j, id) in self.subject_ids.iter().enumerate() {
            for t in 0..self.n_time {
                out.push_str(&format!("{id},{}", t + 1));
                for p in 0..self.n_channels {
                    out.push_str(&format!(",{}", self.value(j, t, p)));
                }
                out.push('\n');
            }
        }
        write_file(path, out.as_bytes())
    }

    /// Writes raw outcomes in the `subject_id,outcome` layout.
    pub fn write_outcomes_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("subject_id,outcome\n");
        for (id, y) in self.subject_ids.iter().zip(&self.outcomes_raw) {
            out.push_str(&format!("{id},{y}\n"));
        }
        write_file(path, out.as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Maps raw outcomes onto `[0, 1]` with the observed min/max affine map.
pub fn scale_outcomes(raw: &[f64]) -> Result<(Vec<f64>, OutcomeTransform)> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("empty outcome vector".into()));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite outcome".into()));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::InvalidInput(format!(
            "constant outcome vector ({lo}); scale undefined"
        )));
    }
    let transform = OutcomeTransform {
        offset: lo,
        scale: hi - lo,
    };
    let unit = raw
        .iter()
        .map(|&x| transform.to_unit(x).clamp(0.0, 1.0))
        .collect();
    Ok((unit, transform))
}

/// Removes the per-subject, per-channel mean or least-squares line.
pub fn detrend(series: &MultiSubjectSeries, mode: DetrendMode) -> MultiSubjectSeries {
    let mut out = series.clone();
    if mode == DetrendMode::None {
        return out;
    }
    let n = series.n_time;
    let nf = n as f64;
    // Centered time index; t is 1..n but the fit is shift invariant.
    let t_mean = (nf + 1.0) / 2.0;
    let t_ss: f64 = (1..=n).map(|t| (t as f64 - t_mean).powi(2)).sum();
    for j in 0..series.n_subjects() {
        for p in 0..series.n_channels {
            let x = series.channel(j, p);
            let mean = x.iter().sum::<f64>() / nf;
            let slope = match mode {
                DetrendMode::Linear => {
                    x.iter()
                        .enumerate()
                        .map(|(t, v)| (t as f64 + 1.0 - t_mean) * (v - mean))
                        .sum::<f64>()
                        / t_ss
                }
                _ => 0.0,
            };
            for (t, v) in x.iter().enumerate() {
                let fitted = mean + slope * (t as f64 + 1.0 - t_mean);
                out.data[(j * n + t) * series.n_channels + p] = v - fitted;
            }
        }
    }
    out
}

fn csv_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_cell(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| csv_err(path, format!("line {line}: non-numeric {what} `{field}`")))
}

/// Loads the series and outcome CSV files, validates them, applies the
/// requested detrending and scales outcomes onto `[0, 1]`.
pub fn load_dataset(
    series_path: &Path,
    outcomes_path: &Path,
    options: IngestOptions,
) -> Result<MultiSubjectSeries> {
    let (ids, n_time, n_channels, data) = read_series_csv(series_path)?;
    let outcomes = read_outcomes_csv(outcomes_path)?;
    if outcomes.len() != ids.len() {
        return Err(Error::Dimension(format!(
            "{} subjects in series but {} in outcomes",
            ids.len(),
            outcomes.len()
        )));
    }
    let raw = ids
        .iter()
        .map(|id| {
            outcomes
                .get(id)
                .copied()
                .ok_or_else(|| Error::Dimension(format!("subject `{id}` has no outcome")))
        })
        .collect::<Result<Vec<_>>>()?;
    let series = MultiSubjectSeries::new(ids, n_time, n_channels, data, raw)?;
    Ok(detrend(&series, options.detrend))
}

type SeriesTable = (Vec<String>, usize, usize, Vec<f64>);

fn read_series_csv(path: &Path) -> Result<SeriesTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_err(path, e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "subject_id" || &headers[1] != "t" {
        return Err(csv_err(
            path,
            "expected header `subject_id,t,ch1[,ch2[,ch3]]`",
        ));
    }
    let n_channels = headers.len() - 2;
    for (p, name) in headers.iter().skip(2).enumerate() {
        if name != format!("ch{}", p + 1) {
            return Err(csv_err(path, format!("unexpected channel column `{name}`")));
        }
    }

    let mut ids: Vec<String> = Vec::new();
    let mut lengths: Vec<usize> = Vec::new();
    let mut data = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| csv_err(path, e.to_string()))?;
        if record.len() != n_channels + 2 {
            return Err(Error::Dimension(format!(
                "{}: line {line} has {} fields, expected {}",
                path.display(),
                record.len(),
                n_channels + 2
            )));
        }
        let id = record[0].to_string();
        let t = parse_cell(path, line, &record[1], "time index")?;
        if ids.last() != Some(&id) {
            if seen.contains_key(&id) {
                return Err(Error::InvalidInput(format!(
                    "{}: duplicate subject id `{id}` at line {line}",
                    path.display()
                )));
            }
            seen.insert(id.clone(), ids.len());
            ids.push(id);
            lengths.push(0);
        }
        let len = lengths.last_mut().expect("subject pushed above");
        *len += 1;
        if t != *len as f64 {
            return Err(csv_err(
                path,
                format!("line {line}: expected t = {len}, found {t}"),
            ));
        }
        for p in 0..n_channels {
            data.push(parse_cell(path, line, &record[p + 2], "value")?);
        }
    }
    let n_time = *lengths
        .first()
        .ok_or_else(|| csv_err(path, "no data rows"))?;
    if let Some((j, len)) = lengths.iter().enumerate().find(|(_, &l)| l != n_time) {
        return Err(Error::Dimension(format!(
            "subject `{}` has length {len}, expected {n_time}",
            ids[j]
        )));
    }
    Ok((ids, n_time, n_channels, data))
}

fn read_outcomes_csv(path: &Path) -> Result<HashMap<String, f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_err(path, e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "subject_id" || &headers[1] != "outcome" {
        return Err(csv_err(path, "expected header `subject_id,outcome`"));
    }
    let mut out = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| csv_err(path, e.to_string()))?;
        let id = record[0].to_string();
        let y = parse_cell(path, line, &record[1], "outcome")?;
        if out.insert(id.clone(), y).is_some() {
            return Err(Error::InvalidInput(format!(
                "{}: duplicate subject id `{id}`",
                path.display()
            )));
        }
    }
    Ok(out)
}
