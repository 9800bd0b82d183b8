//! Simulated real-time market for one storage unit.
//!
//! The time and history parts of each observation depend only on the price
//! series, so they are computed once per series. The environment steps at
//! 5-minute granularity; the caller supplies the market-cleared power.

use std::sync::Arc;

use chrono::{DateTime, Utc};

use crate::data::{PriceSeries, INTERVAL_MINUTES, STEPS_PER_HOUR};
use crate::error::{Error, Result};
use crate::ess::{apply_clamped, EssParams, EssState};
use crate::features::{encode_time, history_features, LONG_WINDOW_STEPS, OBS_DIM};
use crate::market::{settle, Settlement};
use crate::policy::snap;

const MINUTES_PER_DAY: i64 = 24 * 60;

/// A price series with its precomputed observation features.
#[derive(Debug, Clone)]
pub struct MarketData {
    prices: Vec<f64>,
    start: DateTime<Utc>,
    start_minute: i64,
    /// Time encoding (2) and history encoding (12) per interval.
    features: Vec<[f64; OBS_DIM - 1]>,
}

impl MarketData {
    /// Market over `series`; warm-up history is padded with the series mean.
    pub fn new(series: &PriceSeries) -> Result<Self> {
        Self::with_history(&[], series)
    }

    /// Market over `series` whose observations may read `history`, the
    /// prices immediately preceding it. Missing history is padded with the
    /// mean of `history`, or of `series` when no history is given.
    pub fn with_history(history: &[f64], series: &PriceSeries) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::InsufficientData("empty price series".into()));
        }
        if series.interval_minutes != INTERVAL_MINUTES {
            return Err(Error::Data(format!(
                "expected {INTERVAL_MINUTES}-minute intervals, got {}",
                series.interval_minutes
            )));
        }
        let pad = if history.is_empty() {
            series.mean()
        } else {
            history.iter().sum::<f64>() / history.len() as f64
        };
        let mut ext = vec![pad; LONG_WINDOW_STEPS];
        ext.extend_from_slice(history);
        ext.extend_from_slice(&series.values);
        let offset = LONG_WINDOW_STEPS + history.len();
        let start_minute = series.start_minute_of_day() as i64;

        let features = (0..series.len())
            .map(|t| {
                let end = offset + t;
                let minute = (start_minute + INTERVAL_MINUTES * t as i64).rem_euclid(MINUTES_PER_DAY);
                let mut f = [0.0; OBS_DIM - 1];
                f[..2].copy_from_slice(&encode_time(minute as f64 / 60.0));
                f[2..].copy_from_slice(&history_features(&ext[end - LONG_WINDOW_STEPS..end], pad));
                f
            })
            .collect();
        Ok(Self {
            prices: series.values.clone(),
            start: series.start,
            start_minute,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn price(&self, t: usize) -> f64 {
        self.prices[t]
    }

    fn minute_of_day(&self, t: usize) -> i64 {
        (self.start_minute + INTERVAL_MINUTES * t as i64).rem_euclid(MINUTES_PER_DAY)
    }

    /// Whether interval `t` is the last of its UTC day.
    pub fn is_day_end(&self, t: usize) -> bool {
        self.minute_of_day(t + 1) == 0
    }

    pub fn is_hour_start(&self, t: usize) -> bool {
        self.minute_of_day(t) % 60 == 0
    }

    pub fn timestamp_string(&self, t: usize) -> String {
        (self.start + chrono::Duration::minutes(INTERVAL_MINUTES * t as i64))
            .format("%Y-%m-%dT%H:%M:%SZ")
            .to_string()
    }

    /// Indices of intervals that start at minute 0 of a day.
    pub fn day_starts(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.minute_of_day(t) == 0).collect()
    }

    /// Observation for interval `t` given the SoC at submission time.
    pub fn observation(&self, t: usize, soc: f64, params: &EssParams) -> [f64; OBS_DIM] {
        let mut obs = [0.0; OBS_DIM];
        obs[..OBS_DIM - 1].copy_from_slice(&self.features[t]);
        obs[OBS_DIM - 1] = (soc / params.capacity_mwh).clamp(0.0, 1.0);
        obs
    }

    pub fn steps_per_hour(&self) -> usize {
        STEPS_PER_HOUR
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub price: f64,
    /// Power cleared by the market before discretisation and clamping.
    pub market_power: f64,
    /// Power physically delivered and settled.
    pub delivered: f64,
    pub settlement: Settlement,
    /// The episode (a UTC day, or the end of the data) ended with this step.
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct MarketEnv {
    data: Arc<MarketData>,
    ess: EssParams,
    t: usize,
    state: EssState,
    /// Candidate outputs when cleared power is snapped to reference levels.
    snap_to: Option<Vec<f64>>,
}

impl MarketEnv {
    pub fn new(data: Arc<MarketData>, ess: EssParams, start: usize) -> Self {
        assert!(start < data.len());
        Self {
            data,
            state: EssState::half_full(&ess),
            ess,
            t: start,
            snap_to: None,
        }
    }

    /// Snap every cleared power to the nearest of `candidates` (sorted).
    pub fn with_snapping(mut self, candidates: Vec<f64>) -> Self {
        self.snap_to = Some(candidates);
        self
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn state(&self) -> EssState {
        self.state
    }

    pub fn price(&self) -> f64 {
        self.data.price(self.t)
    }

    pub fn observation(&self) -> [f64; OBS_DIM] {
        self.data.observation(self.t, self.state.soc, &self.ess)
    }

    pub fn step(&mut self, market_power: f64) -> StepOutcome {
        let price = self.price();
        let requested = match &self.snap_to {
            Some(c) => snap(market_power, c),
            None => market_power,
        };
        let (delivered, next) = apply_clamped(requested, &self.state, &self.ess);
        let settlement = settle(price, delivered, &self.ess);
        self.state = next;
        let mut done = self.data.is_day_end(self.t);
        self.t += 1;
        if self.t == self.data.len() {
            self.t = 0;
            self.state = EssState::half_full(&self.ess);
            done = true;
        }
        StepOutcome {
            price,
            market_power,
            delivered,
            settlement,
            done,
        }
    }
}
