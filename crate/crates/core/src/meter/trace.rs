//! Power traces replayed as piecewise-linear functions of time.
//!
//! CSV layout: `timestamp_s,domain,watts`, header optional.

use std::path::Path;

use serde::Deserialize;

use super::{Domain, MeterError, PowerSample};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PowerTrace {
    /// Per domain, points sorted by time.
    series: [Vec<(f64, f64)>; 3],
}

#[derive(Deserialize)]
struct Row {
    timestamp_s: f64,
    domain: Domain,
    watts: f64,
}

impl PowerTrace {
    pub fn from_samples(samples: &[PowerSample]) -> Result<Self, MeterError> {
        let mut series: [Vec<(f64, f64)>; 3] = Default::default();
        for s in samples {
            if !(s.watts >= 0.0 && s.watts.is_finite() && s.timestamp.is_finite()) {
                return Err(MeterError::Trace(format!("invalid sample {s:?}")));
            }
            let points = &mut series[s.domain.index()];
            if let Some((prev, _)) = points.last() {
                if s.timestamp < *prev {
                    return Err(MeterError::Ordering {
                        prev: *prev,
                        next: s.timestamp,
                    });
                }
            }
            points.push((s.timestamp, s.watts));
        }
        Ok(Self { series })
    }

    pub fn parse_csv(text: &str) -> Result<Self, MeterError> {
        let has_header = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .is_some_and(|l| l.trim_start().starts_with("timestamp"));
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut samples = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| MeterError::Trace(format!("row {}: {e}", i + 1)))?;
            samples.push(PowerSample {
                timestamp: row.timestamp_s,
                watts: row.watts,
                domain: row.domain,
            });
        }
        Self::from_samples(&samples)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeterError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| MeterError::Trace(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.series.iter().all(|s| s.is_empty())
    }

    /// Power at `t`; held flat before the first and after the last point.
    pub fn watts_at(&self, domain: Domain, t: f64) -> Option<f64> {
        let pts = &self.series[domain.index()];
        let first = pts.first()?;
        if t <= first.0 {
            return Some(first.1);
        }
        let last = pts.last()?;
        if t >= last.0 {
            return Some(last.1);
        }
        let i = pts.partition_point(|(ts, _)| *ts <= t);
        let (t0, w0) = pts[i - 1];
        let (t1, w1) = pts[i];
        if t1 == t0 {
            return Some(w1);
        }
        Some(w0 + (w1 - w0) * (t - t0) / (t1 - t0))
    }

    pub fn samples_at(&self, t: f64) -> Vec<PowerSample> {
        Domain::ALL
            .into_iter()
            .filter_map(|domain| {
                self.watts_at(domain, t).map(|watts| PowerSample {
                    timestamp: t,
                    watts,
                    domain,
                })
            })
            .collect()
    }

    /// Trace knots strictly inside `(t0, t1)`.
    pub fn knots_between(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut ts: Vec<f64> = self
            .series
            .iter()
            .flatten()
            .map(|(t, _)| *t)
            .filter(|t| *t > t0 && *t < t1)
            .collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }
}
