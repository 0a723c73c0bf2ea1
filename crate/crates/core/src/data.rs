//! Dataset loading, chronological splits, sliding windows and normalisation.

use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const TIME_FORMATS: [&str; 3] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S"];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)))
}

/// A multivariate series: `N` timestamps by `C` named channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub channels: Vec<String>,
    pub timestamps: Vec<NaiveDateTime>,
    /// Row-major `[N, C]`.
    pub values: Tensor<f64>,
}

impl SeriesDataset {
    pub fn new(channels: Vec<String>, timestamps: Vec<NaiveDateTime>, values: Tensor<f64>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != channels.len() || values.shape()[0] != timestamps.len() {
            return Err(Error::shape("series_dataset", values.shape(), &[timestamps.len(), channels.len()]));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at row {} ({} after {})",
                i + 2,
                timestamps[i + 1],
                timestamps[i]
            )));
        }
        Ok(Self {
            channels,
            timestamps,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Ok(Self {
            channels: self.channels.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values.rows(range)?,
        })
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let n = self.num_channels();
        self.values.data().iter().skip(c).step_by(n).copied().collect()
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::format(0, format!("unreadable header: {e}")))?.clone();
        if header.len() < 2 {
            return Err(Error::format(0, "expected a timestamp column and at least one channel"));
        }
        let channels: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let c = channels.len();
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let row = i + 2;
            let record = record.map_err(|e| Error::Parse {
                row,
                column: 0,
                message: e.to_string(),
            })?;
            if record.len() != c + 1 {
                return Err(Error::Parse {
                    row,
                    column: record.len(),
                    message: format!("expected {} cells, found {}", c + 1, record.len()),
                });
            }
            let ts = parse_timestamp(&record[0]).ok_or_else(|| Error::Parse {
                row,
                column: 1,
                message: format!("unrecognised timestamp `{}`", &record[0]),
            })?;
            timestamps.push(ts);
            for (j, cell) in record.iter().skip(1).enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    row,
                    column: j + 2,
                    message: format!("non-numeric cell `{cell}`"),
                })?;
                values.push(v);
            }
        }
        if timestamps.is_empty() {
            return Err(Error::format(0, "file has no data rows"));
        }
        let n = timestamps.len();
        Self::new(channels, timestamps, Tensor::new(&[n, c], values)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.channels.iter().cloned());
        w.write_record(&header).map_err(csv_io)?;
        let c = self.num_channels();
        for (i, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.format("%Y-%m-%d %H:%M:%S").to_string()];
            rec.extend(self.values.data()[i * c..(i + 1) * c].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Reads a `date,<ch1>,<ch2>,…` CSV.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if file.metadata()?.len() == 0 {
        return Err(Error::format(0, format!("{} is empty", path.display())));
    }
    SeriesDataset::from_reader(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub input_len: usize,
    pub horizon: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            input_len: 96,
            horizon: 96,
        }
    }
}

impl WindowSpec {
    pub fn new(input_len: usize, horizon: usize) -> Result<Self> {
        if input_len == 0 || horizon == 0 {
            return Err(Error::config("input length and horizon must be positive"));
        }
        Ok(Self { input_len, horizon })
    }

    pub fn span(&self) -> usize {
        self.input_len + self.horizon
    }

    /// Number of stride-1 windows in a view of `n` rows.
    pub fn count(&self, n: usize) -> usize {
        (n + 1).saturating_sub(self.span())
    }
}

/// How the series is cut into train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitScheme {
    /// Fractions of the rows; the test share is whatever remains.
    Ratio { train: f64, val: f64 },
    /// Fixed row counts (e.g. 12/4/4 months of hourly data).
    Rows { train: usize, val: usize, test: usize },
}

impl SplitScheme {
    /// 12/4/4 months at `per_hour` rows per hour.
    pub fn ett(per_hour: usize) -> Self {
        let month = 30 * 24 * per_hour;
        SplitScheme::Rows {
            train: 12 * month,
            val: 4 * month,
            test: 4 * month,
        }
    }

    fn bounds(&self, n: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitScheme::Ratio { train, val } => {
                if !(train > 0.0 && val >= 0.0 && train + val < 1.0) {
                    return Err(Error::config(format!("invalid split ratios {train}/{val}")));
                }
                let n_train = (n as f64 * train) as usize;
                let n_test = (n as f64 * (1.0 - train - val)) as usize;
                Ok((n_train, n - n_train - n_test, n_test))
            }
            SplitScheme::Rows { train, val, test } => {
                if train + val + test > n {
                    return Err(Error::Capacity(format!(
                        "split needs {} rows, dataset has {n}",
                        train + val + test
                    )));
                }
                Ok((train, val, test))
            }
        }
    }
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme::Ratio { train: 0.7, val: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub scheme: SplitScheme,
    /// Share of the training split kept, as a prefix.
    pub few_shot_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            scheme: SplitScheme::default(),
            few_shot_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
    /// Training rows before the few-shot cut.
    pub full_train_len: usize,
}

/// Disjoint chronological split; the training view keeps the first
/// `⌊f·N_train⌋` rows.
pub fn split(dataset: &SeriesDataset, spec: &SplitSpec, window: &WindowSpec) -> Result<Splits> {
    let f = spec.few_shot_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::config(format!("few-shot fraction {f} outside (0, 1]")));
    }
    let n = dataset.len();
    let (n_train, n_val, n_test) = spec.scheme.bounds(n)?;
    let kept = (f * n_train as f64).floor() as usize;
    let need = window.span();
    for (name, len) in [("training", kept), ("validation", n_val), ("test", n_test)] {
        if len < need {
            return Err(Error::Capacity(format!(
                "{name} split has {len} rows but one window needs {need} (dataset has {n} rows)"
            )));
        }
    }
    Ok(Splits {
        train: dataset.slice(0..kept)?,
        val: dataset.slice(n_train..n_train + n_val)?,
        test: dataset.slice(n_train + n_val..n_train + n_val + n_test)?,
        full_train_len: n_train,
    })
}

/// One input/target pair, `[T, C]` and `[H, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
}

/// All stride-1 windows of a view in order; none are dropped.
pub fn windows<'a>(view: &'a SeriesDataset, spec: &WindowSpec) -> Result<impl ExactSizeIterator<Item = Window> + 'a> {
    let count = spec.count(view.len());
    if count == 0 {
        return Err(Error::Capacity(format!(
            "view of {} rows is shorter than one window ({})",
            view.len(),
            spec.span()
        )));
    }
    let spec = *spec;
    Ok((0..count).map(move |start| window_at(view, &spec, start)))
}

pub fn window_at(view: &SeriesDataset, spec: &WindowSpec, start: usize) -> Window {
    let t = spec.input_len;
    Window {
        input: view.values.rows(start..start + t).expect("window in range"),
        target: view.values.rows(start + t..start + spec.span()).expect("window in range"),
    }
}

/// Stacks windows starting at `starts` into `[B, T, C]` and `[B, H, C]`.
pub fn batch<T: Scalar>(view: &SeriesDataset, spec: &WindowSpec, starts: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = view.num_channels();
    let (t, h) = (spec.input_len, spec.horizon);
    let data = view.values.data();
    let mut inputs = Vec::with_capacity(starts.len() * t * c);
    let mut targets = Vec::with_capacity(starts.len() * h * c);
    for &s in starts {
        if s + spec.span() > view.len() {
            return Err(Error::Capacity(format!("window at {s} runs past {} rows", view.len())));
        }
        inputs.extend(data[s * c..(s + t) * c].iter().map(|&v| T::lit(v)));
        targets.extend(data[(s + t) * c..(s + t + h) * c].iter().map(|&v| T::lit(v)));
    }
    Ok((
        Tensor::new(&[starts.len(), t, c], inputs)?,
        Tensor::new(&[starts.len(), h, c], targets)?,
    ))
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-series location and scale used to undo instance normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationState<T> {
    /// One entry per (sample, channel), sample-major.
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> NormalizationState<T> {
    /// Maps `[.., L, C]` values back to the original scale.
    pub fn denormalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, |v, m, s| v * s + m)
    }

    pub fn normalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    fn apply(&self, x: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(Error::shape("denormalize", shape, &[self.mean.len()]));
        }
        let c = shape[shape.len() - 1];
        let l = shape[shape.len() - 2];
        if c == 0 || x.len() / (l * c).max(1) * c != self.mean.len() {
            return Err(Error::shape("denormalize", shape, &[self.mean.len()]));
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let b = i / (l * c);
            let k = b * c + i % c;
            *v = f(*v, self.mean[k], self.std[k]);
        }
        Ok(out)
    }
}

/// Zero-mean, unit-variance per channel over the window axis of `[T, C]`
/// or `[B, T, C]`; `std = √(var + ε)` keeps constant channels finite.
pub fn instance_normalize<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, NormalizationState<T>)> {
    let shape = input.shape();
    if shape.len() != 2 && shape.len() != 3 {
        return Err(Error::shape("instance_normalize", shape, &[0, 0]));
    }
    let (t, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let b = input.len() / (t * c).max(1);
    let data = input.data();
    let mut mean = Vec::with_capacity(b * c);
    let mut std = Vec::with_capacity(b * c);
    for s in 0..b {
        for ch in 0..c {
            let col = (0..t).map(|i| data[s * t * c + i * c + ch].as_f64());
            let m = col.clone().sum::<f64>() / t as f64;
            let var = col.map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
            mean.push(T::lit(m));
            std.push(T::lit((var + NORM_EPS).sqrt()));
        }
    }
    let state = NormalizationState { mean, std };
    Ok((state.normalize(input)?, state))
}

/// Dataset-wide z-score fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GlobalScaler {
    pub fn fit(train: &SeriesDataset) -> Self {
        let n = train.len() as f64;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for c in 0..train.num_channels() {
            let col = train.column(c);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn transform(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        self.map(ds, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        self.map(ds, |v, m, s| v * s + m)
    }

    fn map(&self, ds: &SeriesDataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<SeriesDataset> {
        let c = ds.num_channels();
        if c != self.mean.len() {
            return Err(Error::shape("global_scaler", &[c], &[self.mean.len()]));
        }
        let mut out = ds.clone();
        for (i, v) in out.values.data_mut().iter_mut().enumerate() {
            *v = f(*v, self.mean[i % c], self.std[i % c]);
        }
        Ok(out)
    }
}

/// Sinusoids plus trend plus Gaussian noise, one phase/period per channel.
pub fn synthetic(n: usize, channels: usize, seed: u64) -> SeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let start = NaiveDate::from_ymd_opt(2016, 7, 1).and_then(|d| d.and_hms_opt(0, 0, 0)).expect("valid date");
    let mut values = Vec::with_capacity(n * channels);
    for i in 0..n {
        let t = i as f64;
        for c in 0..channels {
            let period = 24.0 * (1.0 + c as f64 * 0.5);
            let phase = c as f64 * 0.7;
            let seasonal = (2.0 * std::f64::consts::PI * t / period + phase).sin()
                + 0.5 * (2.0 * std::f64::consts::PI * t / (period * 7.0)).cos();
            let trend = 0.002 * t * (1.0 + c as f64 * 0.3);
            values.push(seasonal + trend + noise.sample(&mut rng));
        }
    }
    SeriesDataset {
        channels: (0..channels).map(|c| format!("ch{c}")).collect(),
        timestamps: (0..n).map(|i| start + Duration::hours(i as i64)).collect(),
        values: Tensor::new(&[n, channels], values).expect("sized"),
    }
}

/// M4 frequency subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum M4Frequency {
    Yearly,
    Quarterly,
    Monthly,
    Weekly,
    Daily,
    Hourly,
}

impl M4Frequency {
    pub const ALL: [M4Frequency; 6] = [
        M4Frequency::Yearly,
        M4Frequency::Quarterly,
        M4Frequency::Monthly,
        M4Frequency::Weekly,
        M4Frequency::Daily,
        M4Frequency::Hourly,
    ];

    pub fn horizon(self) -> usize {
        match self {
            M4Frequency::Yearly => 6,
            M4Frequency::Quarterly => 8,
            M4Frequency::Monthly => 18,
            M4Frequency::Weekly => 13,
            M4Frequency::Daily => 14,
            M4Frequency::Hourly => 48,
        }
    }

    pub fn seasonality(self) -> usize {
        match self {
            M4Frequency::Quarterly => 4,
            M4Frequency::Monthly => 12,
            M4Frequency::Hourly => 24,
            _ => 1,
        }
    }

    pub fn input_len(self) -> usize {
        2 * self.horizon()
    }

    pub fn name(self) -> &'static str {
        match self {
            M4Frequency::Yearly => "Yearly",
            M4Frequency::Quarterly => "Quarterly",
            M4Frequency::Monthly => "Monthly",
            M4Frequency::Weekly => "Weekly",
            M4Frequency::Daily => "Daily",
            M4Frequency::Hourly => "Hourly",
        }
    }
}

impl fmt::Display for M4Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Frequency selector as used on the command line; `others` covers the
/// weekly, daily and hourly subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum M4Group {
    Yearly,
    Quarterly,
    Monthly,
    Others,
}

impl M4Group {
    pub fn frequencies(self) -> &'static [M4Frequency] {
        match self {
            M4Group::Yearly => &[M4Frequency::Yearly],
            M4Group::Quarterly => &[M4Frequency::Quarterly],
            M4Group::Monthly => &[M4Frequency::Monthly],
            M4Group::Others => &[M4Frequency::Weekly, M4Frequency::Daily, M4Frequency::Hourly],
        }
    }
}

impl FromStr for M4Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "yearly" => Ok(M4Group::Yearly),
            "quarterly" => Ok(M4Group::Quarterly),
            "monthly" => Ok(M4Group::Monthly),
            "others" => Ok(M4Group::Others),
            other => Err(Error::usage(format!("unknown M4 frequency `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct M4Series {
    pub id: String,
    /// In-sample history; its tail is the model input and its seasonal
    /// differences give the MASE scale.
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct M4Collection {
    pub frequency: M4Frequency,
    pub series: Vec<M4Series>,
    pub skipped: usize,
}

impl M4Collection {
    pub fn horizon(&self) -> usize {
        self.frequency.horizon()
    }

    pub fn input_len(&self) -> usize {
        self.frequency.input_len()
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            input_len: self.input_len(),
            horizon: self.horizon(),
        }
    }
}

fn read_m4_file(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        let id = rec.get(0).unwrap_or_default().trim().to_string();
        let mut values = Vec::new();
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            values.push(cell.parse().map_err(|_| Error::Parse {
                row,
                column: j + 2,
                message: format!("non-numeric cell `{cell}`"),
            })?);
        }
        out.push((id, values));
    }
    Ok(out)
}

/// Loads `{Freq}-train.csv` / `{Freq}-test.csv` for each subset in `group`.
pub fn load_m4(dir: impl AsRef<Path>, group: M4Group) -> Result<Vec<M4Collection>> {
    let dir = dir.as_ref();
    group
        .frequencies()
        .iter()
        .map(|&freq| {
            let train = read_m4_file(&dir.join(format!("{}-train.csv", freq.name())))?;
            let test = read_m4_file(&dir.join(format!("{}-test.csv", freq.name())))?;
            if train.len() != test.len() {
                return Err(Error::Data(format!(
                    "{freq}: {} training series but {} test series",
                    train.len(),
                    test.len()
                )));
            }
            let h = freq.horizon();
            let mut series = Vec::new();
            let mut skipped = 0;
            for ((id, tr), (tid, te)) in train.into_iter().zip(test) {
                if id != tid {
                    return Err(Error::Data(format!("{freq}: series `{id}` paired with test row `{tid}`")));
                }
                if te.len() != h {
                    return Err(Error::Data(format!("{freq}: series `{id}` has {} test points, expected {h}", te.len())));
                }
                if tr.len() < 3 * h {
                    skipped += 1;
                    continue;
                }
                series.push(M4Series { id, train: tr, test: te });
            }
            if skipped > 0 {
                log::warn!("{freq}: skipped {skipped} series shorter than {} points", 3 * h);
            }
            Ok(M4Collection {
                frequency: freq,
                series,
                skipped,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "date,OT,HUFL\n2016-07-01 00:00:00,1.5,-2\n2016-07-01 01:00:00,2.25,0\n2016-07-01 02:00:00,3,7.125\n";

    #[test]
    fn csv_fixture_round_trips() {
        let ds = SeriesDataset::from_reader(FIXTURE.as_bytes()).unwrap();
        assert_eq!(ds.channels, ["OT", "HUFL"]);
        assert_eq!(ds.values.data(), &[1.5, -2.0, 2.25, 0.0, 3.0, 7.125]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        ds.write_csv(&p).unwrap();
        assert_eq!(load_csv(&p).unwrap(), ds);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(SeriesDataset::from_reader("date,a\n".as_bytes()), Err(Error::Format { .. })));
        let bad = "date,a,b\n2016-07-01,1,x\n";
        match SeriesDataset::from_reader(bad.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 3)),
            other => panic!("{other:?}"),
        }
        let unordered = "date,a\n2016-07-02,1\n2016-07-01,2\n";
        assert!(matches!(SeriesDataset::from_reader(unordered.as_bytes()), Err(Error::Data(_))));
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("e.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_csv(&empty), Err(Error::Format { .. })));
    }

    #[test]
    fn window_counts() {
        let ds = synthetic(100, 2, 0);
        let spec = WindowSpec::new(96, 4).unwrap();
        assert_eq!(windows(&ds, &spec).unwrap().len(), 1);
        let spec = WindowSpec::new(10, 5).unwrap();
        let all: Vec<_> = windows(&ds, &spec).unwrap().collect();
        assert_eq!(all.len(), 86);
        let last = all.last().unwrap();
        assert_eq!(last.target, ds.values.rows(95..100).unwrap());
        assert!(matches!(windows(&ds.slice(0..14).unwrap(), &spec), Err(Error::Capacity(_))));
    }

    #[test]
    fn splits_partition_and_prefix() {
        let ds = synthetic(2000, 2, 1);
        let w = WindowSpec::new(24, 8).unwrap();
        let s = split(&ds, &SplitSpec::default(), &w).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 2000);
        assert!(s.train.timestamps.last() < s.val.timestamps.first());
        assert!(s.val.timestamps.last() < s.test.timestamps.first());
        let few = split(
            &ds,
            &SplitSpec {
                few_shot_fraction: 0.1,
                ..SplitSpec::default()
            },
            &w,
        )
        .unwrap();
        assert_eq!(few.train.len(), 140);
        assert_eq!(few.train, s.train.slice(0..140).unwrap());
        assert!(matches!(split(&ds.slice(0..50).unwrap(), &SplitSpec::default(), &w), Err(Error::Capacity(_))));
    }

    #[test]
    fn instance_norm_properties() {
        let ds = synthetic(50, 3, 2);
        let mut x: Tensor<f64> = ds.values.rows(0..40).unwrap();
        for i in 0..40 {
            x.set(&[i, 1], 4.0);
        }
        let (n, state) = instance_normalize(&x).unwrap();
        for c in [0, 2] {
            let col: Vec<f64> = (0..40).map(|i| n.get(&[i, c])).collect();
            let m = col.iter().sum::<f64>() / 40.0;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 40.0).sqrt();
            assert!(m.abs() < 1e-6);
            assert!((sd - 1.0).abs() < 1e-4);
        }
        assert!((0..40).all(|i| n.get(&[i, 1]) == 0.0));
        assert!(state.denormalize(&n).unwrap().max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn m4_loading() {
        let dir = tempfile::tempdir().unwrap();
        let long: Vec<String> = (0..60).map(|i| i.to_string()).collect();
        let train = format!("V1,V2\nM1,{}\nM2,1,2,3\n", long.join(","));
        let test_row: Vec<String> = (0..18).map(|i| i.to_string()).collect();
        let test = format!("V1,V2\nM1,{}\nM2,{}\n", test_row.join(","), test_row.join(","));
        std::fs::write(dir.path().join("Monthly-train.csv"), train).unwrap();
        std::fs::write(dir.path().join("Monthly-test.csv"), test).unwrap();
        let c = load_m4(dir.path(), M4Group::Monthly).unwrap();
        assert_eq!(c[0].horizon(), 18);
        assert_eq!(c[0].input_len(), 36);
        assert_eq!(c[0].series.len(), 1);
        assert_eq!(c[0].skipped, 1);
        assert!(matches!("daily".parse::<M4Group>(), Err(Error::Usage(_))));
        assert!(M4Frequency::ALL.iter().all(|f| (6..=48).contains(&f.horizon())));
    }
}
