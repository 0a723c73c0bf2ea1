//! Point-forecast accuracy metrics and report formatting.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Denominator floor for MASE scales.
pub const MASE_EPS: f64 = 1e-8;

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("metric", &[pred.len()], &[truth.len()]));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `200/n · Σ |y − ŷ| / (|y| + |ŷ|)`; terms with a zero denominator add 0.
pub fn smape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let d = p.abs() + t.abs();
            if d == 0.0 {
                0.0
            } else {
                (t - p).abs() / d
            }
        })
        .sum();
    Ok(200.0 * sum / pred.len() as f64)
}

/// Mean absolute seasonal difference `mean |x_t − x_{t−m}|` of a history.
pub fn seasonal_scale(insample: &[f64], season: usize) -> Result<f64> {
    if season == 0 || insample.len() <= season {
        return Err(Error::usage(format!(
            "in-sample length {} must exceed the season {season}",
            insample.len()
        )));
    }
    let n = insample.len() - season;
    Ok((season..insample.len()).map(|t| (insample[t] - insample[t - season]).abs()).sum::<f64>() / n as f64)
}

/// Mean absolute error scaled by the in-sample seasonal-naive error.
pub fn mase(pred: &[f64], truth: &[f64], insample: &[f64], season: usize) -> Result<f64> {
    let mut scale = seasonal_scale(insample, season)?;
    if scale < MASE_EPS {
        log::warn!("MASE scale {scale} below {MASE_EPS}; clamping");
        scale = MASE_EPS;
    }
    Ok(mae(pred, truth)? / scale)
}

/// `½ · (smape / ref_smape + mase / ref_mase)`.
pub fn owa(smape: f64, mase: f64, ref_smape: f64, ref_mase: f64) -> Result<f64> {
    if !(ref_smape > 0.0 && ref_mase > 0.0) {
        return Err(Error::usage(format!(
            "OWA references must be positive, got {ref_smape} and {ref_mase}"
        )));
    }
    Ok(0.5 * (smape / ref_smape + mase / ref_mase))
}

/// Seasonal-naive forecast: repeats the last observed season.
pub fn seasonal_naive(insample: &[f64], season: usize, horizon: usize) -> Result<Vec<f64>> {
    let m = season.max(1);
    if insample.len() < m {
        return Err(Error::usage("history shorter than one season"));
    }
    let tail = &insample[insample.len() - m..];
    Ok((0..horizon).map(|i| tail[i % m]).collect())
}

/// Approximate OWA references from a seasonal-naive forecast of each
/// series. Official Naive2 references also deseasonalise, so these are
/// only a stand-in when the published values are not supplied.
pub fn seasonal_naive_reference<'a, I>(series: I, season: usize) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let (mut s, mut m, mut n) = (0.0, 0.0, 0usize);
    for (insample, truth) in series {
        let f = seasonal_naive(insample, season, truth.len())?;
        s += smape(&f, truth)?;
        m += mase(&f, truth, insample, season)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::usage("no series for the reference"));
    }
    Ok((s / n as f64, m / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Mse,
    Mae,
    Smape,
    Mase,
    Owa,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Mae => "mae",
            Metric::Smape => "smape",
            Metric::Mase => "mase",
            Metric::Owa => "owa",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mse" => Ok(Metric::Mse),
            "mae" => Ok(Metric::Mae),
            "smape" => Ok(Metric::Smape),
            "mase" => Ok(Metric::Mase),
            "owa" => Ok(Metric::Owa),
            other => Err(Error::config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Metric values per horizon plus their averages over horizons.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    /// `(metric, horizon, value)` in insertion order.
    pub entries: Vec<(Metric, usize, f64)>,
    /// Windows (or series) evaluated per horizon.
    pub counts: Vec<(usize, usize)>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, metric: Metric, horizon: usize, value: f64) {
        self.entries.push((metric, horizon, value));
    }

    pub fn set_count(&mut self, horizon: usize, count: usize) {
        match self.counts.iter_mut().find(|(h, _)| *h == horizon) {
            Some(slot) => slot.1 = count,
            None => self.counts.push((horizon, count)),
        }
    }

    pub fn merge(&mut self, other: MetricReport) {
        self.entries.extend(other.entries);
        for (h, c) in other.counts {
            self.set_count(h, c);
        }
    }

    pub fn get(&self, metric: Metric, horizon: usize) -> Option<f64> {
        self.entries.iter().find(|(m, h, _)| *m == metric && *h == horizon).map(|e| e.2)
    }

    pub fn metrics(&self) -> Vec<Metric> {
        let mut out = Vec::new();
        for (m, _, _) in &self.entries {
            if !out.contains(m) {
                out.push(*m);
            }
        }
        out
    }

    pub fn horizons(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (_, h, _) in &self.entries {
            if !out.contains(h) {
                out.push(*h);
            }
        }
        out
    }

    /// Mean of a metric over every horizon it was reported for.
    pub fn average(&self, metric: Metric) -> Option<f64> {
        let vals: Vec<f64> = self.entries.iter().filter(|e| e.0 == metric).map(|e| e.2).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// `metric,horizon,value` rows; averages use the horizon label `avg`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,horizon,value\n");
        for (m, h, v) in &self.entries {
            let _ = writeln!(s, "{m},{h},{v}");
        }
        for m in self.metrics() {
            if let Some(v) = self.average(m) {
                let _ = writeln!(s, "{m},avg,{v}");
            }
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let metrics = self.metrics();
        write!(f, "{:>8}", "horizon")?;
        for m in &metrics {
            write!(f, " {:>12}", m.name())?;
        }
        writeln!(f, " {:>8}", "windows")?;
        for h in self.horizons() {
            write!(f, "{h:>8}")?;
            for m in &metrics {
                match self.get(*m, h) {
                    Some(v) => write!(f, " {v:>12.6}")?,
                    None => write!(f, " {:>12}", "-")?,
                }
            }
            let count = self.counts.iter().find(|c| c.0 == h).map(|c| c.1.to_string()).unwrap_or_default();
            writeln!(f, " {count:>8}")?;
        }
        write!(f, "{:>8}", "avg")?;
        for m in &metrics {
            write!(f, " {:>12.6}", self.average(*m).unwrap_or(f64::NAN))?;
        }
        writeln!(f)
    }
}
