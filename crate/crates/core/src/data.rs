//! Price-series ingestion, synthetic generation and chronological splitting.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, TimeZone, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTERVAL_MINUTES: i64 = 5;
pub const STEPS_PER_HOUR: usize = 12;
pub const STEPS_PER_DAY: usize = 288;
/// Longest gap (in minutes of missing data) filled by interpolation.
pub const MAX_GAP_MINUTES: i64 = 60;

pub const SERIES_SCHEMA: &str = "nneb.price_series.v1";

/// A contiguous 5-minute LMP series. Timestamps are UTC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub start: DateTime<Utc>,
    pub interval_minutes: i64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub after: DateTime<Utc>,
    pub missing: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gaps: Vec<Gap>,
}

impl GapReport {
    pub fn filled(&self) -> usize {
        self.gaps.iter().map(|g| g.missing).sum()
    }
}

fn format_ts(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

impl PriceSeries {
    pub fn new(start: DateTime<Utc>, values: Vec<f64>) -> Self {
        Self {
            start,
            interval_minutes: INTERVAL_MINUTES,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(self.interval_minutes * index as i64)
    }

    pub fn timestamp_string(&self, index: usize) -> String {
        format_ts(&self.timestamp(index))
    }

    pub fn days(&self) -> usize {
        self.len() / STEPS_PER_DAY
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.len() as f64
        }
    }

    /// Minute of the UTC day at which the series starts.
    pub fn start_minute_of_day(&self) -> u32 {
        self.start.hour() * 60 + self.start.minute()
    }

    pub fn slice(&self, from: usize, to: usize) -> PriceSeries {
        PriceSeries {
            start: self.timestamp(from),
            interval_minutes: self.interval_minutes,
            values: self.values[from..to].to_vec(),
        }
    }

    /// Trims to whole UTC days: starts at the first midnight and drops a
    /// trailing partial day.
    pub fn day_aligned(&self) -> Result<PriceSeries> {
        let minute = self.start_minute_of_day() as i64;
        let lead = if minute == 0 && self.start.second() == 0 {
            0
        } else {
            ((24 * 60 - minute) / self.interval_minutes) as usize
        };
        if lead >= self.len() {
            return Err(Error::InsufficientData("series holds no whole day".into()));
        }
        let days = (self.len() - lead) / STEPS_PER_DAY;
        if days == 0 {
            return Err(Error::InsufficientData("series holds no whole day".into()));
        }
        Ok(self.slice(lead, lead + days * STEPS_PER_DAY))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "lmp"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([self.timestamp_string(i), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Canonical JSON snapshot.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema": SERIES_SCHEMA,
            "start": format_ts(&self.start),
            "interval_minutes": self.interval_minutes,
            "values": self.values,
        })
    }
}

fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(raw) {
        return Some(ts.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|naive| Utc.from_utc_datetime(&naive))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<(PriceSeries, GapReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file)
}

/// Parses `timestamp,lmp` rows (lines starting with `#` are skipped), sorts them and fills gaps of up to one hour
/// by linear interpolation.
pub fn read_csv<R: Read>(reader: R) -> Result<(PriceSeries, GapReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MalformedRow {
                line: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let (ts_col, lmp_col) = (column("timestamp")?, column("lmp")?);

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let malformed = |message: String| Error::MalformedRow { line, message };
        let ts_raw = record.get(ts_col).ok_or_else(|| malformed("missing timestamp".into()))?;
        let ts = parse_timestamp(ts_raw)
            .ok_or_else(|| malformed(format!("unparseable timestamp `{ts_raw}`")))?;
        let lmp_raw = record.get(lmp_col).ok_or_else(|| malformed("missing lmp".into()))?;
        let lmp: f64 = lmp_raw
            .parse()
            .map_err(|_| malformed(format!("unparseable lmp `{lmp_raw}`")))?;
        if !lmp.is_finite() {
            return Err(malformed(format!("non-finite lmp `{lmp_raw}`")));
        }
        rows.push((ts, lmp, line));
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("no rows".into()));
    }
    rows.sort_by_key(|r| r.0);

    let mut values = vec![rows[0].1];
    let mut report = GapReport::default();
    for pair in rows.windows(2) {
        let ((t0, v0, _), (t1, v1, line)) = (pair[0], pair[1]);
        let minutes = (t1 - t0).num_minutes();
        if t1 == t0 {
            return Err(Error::MalformedRow {
                line,
                message: format!("duplicate timestamp {}", format_ts(&t1)),
            });
        }
        if (t1 - t0).num_seconds() % (INTERVAL_MINUTES * 60) != 0 {
            return Err(Error::MalformedRow {
                line,
                message: format!("timestamp {} is off the 5-minute grid", format_ts(&t1)),
            });
        }
        let steps = minutes / INTERVAL_MINUTES;
        let missing = (steps - 1) as usize;
        if missing > 0 {
            if (missing as i64) * INTERVAL_MINUTES > MAX_GAP_MINUTES {
                return Err(Error::Data(format!(
                    "gap of {} minutes after {} exceeds {MAX_GAP_MINUTES} minutes",
                    missing as i64 * INTERVAL_MINUTES,
                    format_ts(&t0)
                )));
            }
            for k in 1..=missing {
                let w = k as f64 / steps as f64;
                values.push(v0 + (v1 - v0) * w);
            }
            report.gaps.push(Gap { after: t0, missing });
        }
        values.push(v1);
    }
    Ok((PriceSeries::new(rows[0].0, values), report))
}

/// Parameters of the synthetic price generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Mean price level ($/MWh).
    pub base: f64,
    /// Half the peak-to-trough range of the daily curve ($/MWh).
    pub daily_amplitude: f64,
    /// Stationary standard deviation of the AR(1) noise ($/MWh).
    pub noise_sigma: f64,
    /// AR(1) coefficient between consecutive 5-minute intervals.
    pub noise_rho: f64,
    /// Expected price spikes per day.
    pub spike_rate_per_day: f64,
    /// Median spike height ($/MWh); heights are log-normal.
    pub spike_median: f64,
    pub spike_log_sigma: f64,
    pub start: DateTime<Utc>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            base: 40.0,
            daily_amplitude: 30.0,
            noise_sigma: 15.0,
            noise_rho: 0.5,
            spike_rate_per_day: 1.0,
            spike_median: 100.0,
            spike_log_sigma: 0.5,
            start: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

fn circular_bump(hour: f64, centre: f64, width: f64) -> f64 {
    let mut d = (hour - centre).abs();
    d = d.min(24.0 - d);
    (-0.5 * (d / width).powi(2)).exp()
}

/// Zero-mean two-peak daily profile scaled so (max - min) / 2 == 1.
pub fn daily_shape() -> Vec<f64> {
    let raw: Vec<f64> = (0..STEPS_PER_DAY)
        .map(|i| {
            let h = i as f64 / STEPS_PER_HOUR as f64;
            0.7 * circular_bump(h, 8.0, 1.5) + circular_bump(h, 19.0, 2.0)
                - 0.3 * (2.0 * PI * (h - 3.5) / 24.0).cos()
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let half_range = (hi - lo) / 2.0;
    raw.iter().map(|v| (v - mean) / half_range).collect()
}

pub fn synth_prices(seed: u64, days: usize, spec: &SynthSpec) -> PriceSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = daily_shape();
    let n = days * STEPS_PER_DAY;
    let mut values: Vec<f64> = (0..n)
        .map(|i| spec.base + spec.daily_amplitude * shape[i % STEPS_PER_DAY])
        .collect();

    if spec.noise_sigma > 0.0 {
        let rho = spec.noise_rho.clamp(-0.999_999, 0.999_999);
        let innovation = Normal::new(0.0, spec.noise_sigma * (1.0 - rho * rho).sqrt())
            .expect("finite noise scale");
        let mut x = Normal::new(0.0, spec.noise_sigma).expect("finite noise scale").sample(&mut rng);
        for v in values.iter_mut() {
            *v += x;
            x = rho * x + innovation.sample(&mut rng);
        }
    }

    if spec.spike_rate_per_day > 0.0 && spec.spike_median > 0.0 {
        let count = Poisson::new(spec.spike_rate_per_day).expect("positive spike rate");
        let height = LogNormal::new(spec.spike_median.ln(), spec.spike_log_sigma.max(0.0))
            .expect("valid spike distribution");
        for day in 0..days {
            let k = count.sample(&mut rng) as usize;
            for _ in 0..k {
                let at = day * STEPS_PER_DAY + rng.random_range(0..STEPS_PER_DAY);
                values[at] += height.sample(&mut rng);
            }
        }
    }
    PriceSeries::new(spec.start, values)
}

/// Chronological split into the first `train_days` and the following
/// `test_days` whole days.
pub fn split(series: &PriceSeries, train_days: usize, test_days: usize) -> Result<(PriceSeries, PriceSeries)> {
    if train_days == 0 || test_days == 0 {
        return Err(Error::InvalidParams("train and test spans must be non-empty".into()));
    }
    let aligned = series.day_aligned()?;
    if aligned.days() < train_days + test_days {
        return Err(Error::InsufficientData(format!(
            "requested {train_days}+{test_days} days but the series holds {}",
            aligned.days()
        )));
    }
    let cut = train_days * STEPS_PER_DAY;
    let end = cut + test_days * STEPS_PER_DAY;
    Ok((aligned.slice(0, cut), aligned.slice(cut, end)))
}
