//! Dataset ingestion, chronological splits, standardization and windowing.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Hourly border unit of the ETT protocol: 12 months of 30 days.
const ETT_HOURS_PER_YEAR: usize = 12 * 30 * 24;

const TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
];

#[derive(Clone, Debug)]
pub struct RawSeries {
    pub name: String,
    /// Channel names, excluding the date column.
    pub columns: Vec<String>,
    pub timestamps: Vec<NaiveDateTime>,
    /// `[total_len, M]`
    pub values: Tensor,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        writeln!(f, "date,{}", self.columns.join(","))?;
        let m = self.channels();
        for (ts, row) in self.timestamps.iter().zip(self.values.data().chunks(m)) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{},{}", ts.format("%Y-%m-%d %H:%M:%S"), cells.join(","))?;
        }
        Ok(())
    }
}

pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, &name)
}

/// Parses a header-first CSV whose first column is `date` and the rest numeric.
pub fn read_csv<R: Read>(reader: R, name: &str) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{name}: unreadable header: {e}")))?
        .clone();
    if headers.get(0).map(str::to_ascii_lowercase).as_deref() != Some("date") {
        return Err(Error::Data(format!(
            "{name}: first column must be \"date\", found {:?}",
            headers.get(0).unwrap_or("")
        )));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if columns.is_empty() {
        return Err(Error::Data(format!("{name}: no value columns")));
    }
    let m = columns.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Data(format!("{name}: row {row}: {e}")))?;
        if rec.len() != m + 1 {
            return Err(Error::Data(format!(
                "{name}: row {row} has {} cells, expected {}",
                rec.len(),
                m + 1
            )));
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| {
            Error::Data(format!(
                "{name}: row {row}, column date: bad timestamp {:?}",
                &rec[0]
            ))
        })?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(Error::Data(format!(
                    "{name}: row {row}: timestamp {ts} does not follow {prev}"
                )));
            }
        }
        timestamps.push(ts);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{name}: row {row}, column {}: cannot parse {cell:?}",
                    columns[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{name}: row {row}, column {}: non-finite value",
                    columns[j]
                )));
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{name}: no data rows")));
    }
    let values = Tensor::new(&[timestamps.len(), m], values)?;
    Ok(RawSeries {
        name: name.to_string(),
        columns,
        timestamps,
        values,
    })
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// How a series is cut into train/validation/test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Hourly ETT: 12/4/4 months.
    Etth,
    /// 15-minute ETT: the hourly borders times four.
    Ettm,
    /// 70/10/20 percent of the series.
    Ratio,
    /// Explicit end indices of the train, validation and test targets.
    Borders([usize; 3]),
}

impl FromStr for SplitRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "etth" => Ok(SplitRule::Etth),
            "ettm" => Ok(SplitRule::Ettm),
            "ratio" => Ok(SplitRule::Ratio),
            _ => Err(Error::Config(format!(
                "unknown dataset class {s:?} (expected etth, ettm or ratio)"
            ))),
        }
    }
}

impl fmt::Display for SplitRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitRule::Etth => f.write_str("etth"),
            SplitRule::Ettm => f.write_str("ettm"),
            SplitRule::Ratio => f.write_str("ratio"),
            SplitRule::Borders(b) => write!(f, "borders{b:?}"),
        }
    }
}

/// Target borders on the time axis. Validation and test inputs may reach
/// `lookback` points back across their start border.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
    pub lookback: usize,
}

impl SplitSpec {
    pub fn borders(&self) -> (usize, usize, usize) {
        (self.train_end, self.val_end, self.test_end)
    }

    pub fn train_span(&self) -> (usize, usize) {
        (0, self.train_end)
    }

    pub fn val_span(&self) -> (usize, usize) {
        (self.train_end.saturating_sub(self.lookback), self.val_end)
    }

    pub fn test_span(&self) -> (usize, usize) {
        (self.val_end.saturating_sub(self.lookback), self.test_end)
    }
}

pub fn split(total_len: usize, rule: SplitRule, lookback: usize) -> Result<SplitSpec> {
    let (train_end, val_end, test_end) = match rule {
        SplitRule::Etth => (
            ETT_HOURS_PER_YEAR,
            ETT_HOURS_PER_YEAR + 4 * 30 * 24,
            ETT_HOURS_PER_YEAR + 8 * 30 * 24,
        ),
        SplitRule::Ettm => (
            4 * ETT_HOURS_PER_YEAR,
            4 * (ETT_HOURS_PER_YEAR + 4 * 30 * 24),
            4 * (ETT_HOURS_PER_YEAR + 8 * 30 * 24),
        ),
        SplitRule::Ratio => {
            let train = total_len * 7 / 10;
            let test = total_len * 2 / 10;
            (train, total_len - test, total_len)
        }
        SplitRule::Borders([a, b, c]) => (a, b, c),
    };
    if !(0 < train_end && train_end < val_end && val_end < test_end) {
        return Err(Error::Data(format!(
            "borders must increase: ({train_end}, {val_end}, {test_end})"
        )));
    }
    if test_end > total_len {
        return Err(Error::Data(format!(
            "series has {total_len} points but the {rule} split needs {test_end}"
        )));
    }
    Ok(SplitSpec {
        train_end,
        val_end,
        test_end,
        lookback,
    })
}

/// Per-channel z-scoring statistics from the training span (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels with zero training variance; they are centred but not scaled.
    pub constant: Vec<usize>,
}

impl Scaler {
    pub fn fit(values: &Tensor, split: &SplitSpec) -> Result<Self> {
        let [total, m] = *values.shape() else {
            return Err(Error::shape("scaler input", values.shape(), &[0, 0]));
        };
        let n = split.train_end.min(total);
        let rows = &values.data()[..n * m];
        let mut mean = vec![0.0; m];
        for row in rows.chunks(m) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; m];
        for row in rows.chunks(m) {
            for j in 0..m {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let mut std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        let mut constant = Vec::new();
        for (j, s) in std.iter_mut().enumerate() {
            if *s <= f64::EPSILON * mean[j].abs().max(1.0) {
                log::warn!("channel {j} is constant over the training span; it will not be scaled");
                constant.push(j);
                *s = 1.0;
            }
        }
        Ok(Scaler {
            mean,
            std,
            constant,
        })
    }

    pub fn transform(&self, values: &Tensor) -> Result<Tensor> {
        let m = values.last_dim();
        if m != self.mean.len() {
            return Err(Error::shape("scaler channels", &[m], &[self.mean.len()]));
        }
        let mut out = values.clone();
        for row in out.data_mut().chunks_mut(m) {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, values: &Tensor) -> Result<Tensor> {
        let m = values.last_dim();
        let mut out = values.clone();
        for row in out.data_mut().chunks_mut(m) {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        Ok(out)
    }
}

/// Sliding `(input, target)` windows over one span of a standardized series.
#[derive(Clone, Debug)]
pub struct WindowDataset {
    values: Arc<Tensor>,
    offset: usize,
    span_len: usize,
    lookback: usize,
    horizon: usize,
}

/// Number of windows in a span, or an error naming the required length.
pub fn make_windows(span_len: usize, lookback: usize, horizon: usize) -> Result<usize> {
    let need = lookback + horizon;
    if span_len < need {
        return Err(Error::Data(format!(
            "span of {span_len} points is too short: at least lookback + horizon = {need} required"
        )));
    }
    Ok(span_len - need + 1)
}

impl WindowDataset {
    /// Windows whose inputs and targets lie inside `[start, end)` of `values: [total, M]`.
    pub fn new(
        values: Arc<Tensor>,
        (start, end): (usize, usize),
        lookback: usize,
        horizon: usize,
    ) -> Result<Self> {
        if end > values.shape()[0] || start >= end {
            return Err(Error::Data(format!(
                "span [{start}, {end}) outside series of {} points",
                values.shape()[0]
            )));
        }
        make_windows(end - start, lookback, horizon)?;
        Ok(WindowDataset {
            values,
            offset: start,
            span_len: end - start,
            lookback,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.span_len - self.lookback - self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Absolute series index of window `i`'s first input point.
    pub fn start(&self, i: usize) -> usize {
        self.offset + i
    }

    /// Absolute input and target index ranges of window `i`.
    pub fn indices(&self, i: usize) -> ((usize, usize), (usize, usize)) {
        let s = self.start(i);
        let t = s + self.lookback;
        ((s, t), (t, t + self.horizon))
    }

    /// Stacks windows into `([B, M, L], [B, M, T])`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let m = self.channels();
        let (l, t) = (self.lookback, self.horizon);
        let mut x = Vec::with_capacity(idx.len() * m * l);
        let mut y = Vec::with_capacity(idx.len() * m * t);
        let data = self.values.data();
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "window {i} out of range ({} windows)",
                    self.len()
                )));
            }
            let s = self.start(i);
            for c in 0..m {
                x.extend((s..s + l).map(|r| data[r * m + c]));
            }
            for c in 0..m {
                y.extend((s + l..s + l + t).map(|r| data[r * m + c]));
            }
        }
        Ok((
            Tensor::new(&[idx.len(), m, l], x)?,
            Tensor::new(&[idx.len(), m, t], y)?,
        ))
    }

    /// Window order for one epoch; shuffled when `rng` is given.
    pub fn order(&self, rng: Option<&mut Rng>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(r) = rng {
            order.shuffle(r);
        }
        order
    }
}

/// A loaded series with its split, train-fitted scaler and the three window sets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub series: RawSeries,
    pub split: SplitSpec,
    pub scaler: Scaler,
    pub standardized: Arc<Tensor>,
    pub train: WindowDataset,
    pub val: WindowDataset,
    pub test: WindowDataset,
}

pub fn prepare(
    series: RawSeries,
    rule: SplitRule,
    lookback: usize,
    horizon: usize,
) -> Result<Prepared> {
    let split = split(series.len(), rule, lookback)?;
    let scaler = Scaler::fit(&series.values, &split)?;
    let standardized = Arc::new(scaler.transform(&series.values)?);
    let train = WindowDataset::new(standardized.clone(), split.train_span(), lookback, horizon)?;
    let val = WindowDataset::new(standardized.clone(), split.val_span(), lookback, horizon)?;
    let test = WindowDataset::new(standardized.clone(), split.test_span(), lookback, horizon)?;
    Ok(Prepared {
        series,
        split,
        scaler,
        standardized,
        train,
        val,
        test,
    })
}

/// Noiseless sinusoids, one per channel with a phase offset, at hourly stamps.
pub fn sinusoid_series(len: usize, channels: usize, period: f64) -> RawSeries {
    let start = NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let timestamps = (0..len)
        .map(|i| start + Duration::hours(i as i64))
        .collect();
    let mut values = Vec::with_capacity(len * channels);
    for t in 0..len {
        for c in 0..channels {
            let phase = c as f64 * 0.7;
            values.push((2.0 * std::f64::consts::PI * t as f64 / period + phase).sin());
        }
    }
    RawSeries {
        name: "sinusoid".to_string(),
        columns: (0..channels).map(|c| format!("s{c}")).collect(),
        timestamps,
        values: Tensor::new(&[len, channels], values).expect("sinusoid shape"),
    }
}
