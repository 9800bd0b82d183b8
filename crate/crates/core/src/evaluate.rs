//! Market-faithful evaluation: a bid is fixed at the top of every hour from
//! the observation available then, cleared against the twelve 5-minute
//! prices of that hour, clamped to what the SoC allows and settled.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PriceSeries;
use crate::env::MarketData;
use crate::error::{Error, Result};
use crate::ess::{apply_clamped, EssParams, EssState};
use crate::extraction::{extract_bid, extraction_grid, EXTRACTION_GRID_POINTS};
use crate::features::{LONG_WINDOW_STEPS, OBS_DIM};
use crate::market::{clear_bid, settle, BidCurve};
use crate::policy::{BidMode, PolicyNetwork};

#[derive(Debug, Clone, PartialEq)]
pub struct SubmittedBid {
    pub curve: BidCurve,
    /// Extraction deviation on the sweep grid, for extracted bids.
    pub max_deviation: Option<f64>,
}

/// Anything that can produce an hourly bid from a submission-time observation.
pub trait HourlyBidder {
    fn name(&self) -> String;
    fn bid(&self, obs: &[f64; OBS_DIM]) -> Result<SubmittedBid>;
}

/// Never trades.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdleBidder;

impl HourlyBidder for IdleBidder {
    fn name(&self) -> String {
        "idle".into()
    }

    fn bid(&self, _obs: &[f64; OBS_DIM]) -> Result<SubmittedBid> {
        Ok(SubmittedBid {
            curve: BidCurve::flat(0.0),
            max_deviation: None,
        })
    }
}

/// A trained policy bidding in its own format: a fixed quantity, a frozen
/// zero-band action, or an extracted supply curve.
#[derive(Debug, Clone)]
pub struct PolicyBidder {
    pub policy: PolicyNetwork,
    grid: Vec<f64>,
}

impl PolicyBidder {
    pub fn new(policy: PolicyNetwork) -> Result<Self> {
        Self::with_grid_points(policy, EXTRACTION_GRID_POINTS)
    }

    pub fn with_grid_points(policy: PolicyNetwork, points: usize) -> Result<Self> {
        if policy.mode == BidMode::Nneb && policy.levels.is_none() {
            return Err(Error::InvalidParams(
                "an nneb policy needs reference levels before it can bid".into(),
            ));
        }
        let grid = extraction_grid(&policy.price_range, points);
        Ok(Self { policy, grid })
    }
}

impl HourlyBidder for PolicyBidder {
    fn name(&self) -> String {
        self.policy.mode.to_string()
    }

    fn bid(&self, obs: &[f64; OBS_DIM]) -> Result<SubmittedBid> {
        let p = &self.policy;
        let curve = match p.mode {
            BidMode::SelfSchedule => {
                let head = p.head(obs, 0.0)?;
                BidCurve::flat(p.power_from_action(&head.mean, 0.0))
            }
            // The actor does not see the price, so any price gives the same action.
            BidMode::TwoPair => p.zero_band_action(obs, 0.0)?.to_bid_curve(),
            BidMode::Nneb => {
                let ex = extract_bid(p, obs, &self.grid)?;
                return Ok(SubmittedBid {
                    curve: ex.curve,
                    max_deviation: Some(ex.max_deviation),
                });
            }
        };
        Ok(SubmittedBid {
            curve,
            max_deviation: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub index: usize,
    pub price: f64,
    /// SoC at the start of the interval (MWh).
    pub soc: f64,
    /// Power the bid clears at this price (MW).
    pub cleared: f64,
    /// Power physically delivered after the SoC clamp (MW).
    pub power: f64,
    pub net_income: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub name: String,
    pub profit: f64,
    pub hours: usize,
    /// Largest extraction deviation over all hours, when bids were extracted.
    pub max_deviation: Option<f64>,
    pub trace: Vec<TraceRow>,
}

impl Evaluation {
    pub fn write_trace_csv<W: Write>(&self, data: &MarketData, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "price", "soc", "cleared", "power", "net_income"])?;
        for r in &self.trace {
            w.write_record([
                data.timestamp_string(r.index),
                r.price.to_string(),
                r.soc.to_string(),
                r.cleared.to_string(),
                r.power.to_string(),
                r.net_income.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_trace_csv(&self, data: &MarketData, path: impl AsRef<Path>) -> Result<()> {
        self.write_trace_csv(data, std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Runs `bidder` over the whole of `data` from a half-full unit, carrying
/// SoC across days.
pub fn evaluate(bidder: &dyn HourlyBidder, data: &MarketData, ess: &EssParams) -> Result<Evaluation> {
    evaluate_with(bidder, data, ess, |_, _| Ok(()))
}

/// As `evaluate`, also handing each hour's bid to `on_bid` with its
/// interval index.
pub fn evaluate_with(
    bidder: &dyn HourlyBidder,
    data: &MarketData,
    ess: &EssParams,
    mut on_bid: impl FnMut(usize, &SubmittedBid) -> Result<()>,
) -> Result<Evaluation> {
    ess.validate()?;
    let mut state = EssState::half_full(ess);
    let mut bid: Option<SubmittedBid> = None;
    let mut trace = Vec::with_capacity(data.len());
    let mut profit = 0.0;
    let mut hours = 0;
    let mut worst: Option<f64> = None;
    for t in 0..data.len() {
        if bid.is_none() || data.is_hour_start(t) {
            let submitted = bidder.bid(&data.observation(t, state.soc, ess))?;
            if let Some(d) = submitted.max_deviation {
                worst = Some(worst.map_or(d, |w| w.max(d)));
            }
            on_bid(t, &submitted)?;
            bid = Some(submitted);
            hours += 1;
        }
        let price = data.price(t);
        let cleared = clear_bid(&bid.as_ref().expect("set above").curve, price)?;
        let (power, next) = apply_clamped(cleared, &state, ess);
        let net = settle(price, power, ess).net_income;
        trace.push(TraceRow {
            index: t,
            price,
            soc: state.soc,
            cleared,
            power,
            net_income: net,
        });
        profit += net;
        state = next;
    }
    Ok(Evaluation {
        name: bidder.name(),
        profit,
        hours,
        max_deviation: worst,
        trace,
    })
}

/// Test-window market whose features may read the last four days of the
/// training window, and nothing later than each bid's submission time.
pub fn test_market(train: &PriceSeries, test: &PriceSeries) -> Result<MarketData> {
    let from = train.len().saturating_sub(LONG_WINDOW_STEPS);
    MarketData::with_history(&train.values[from..], test)
}
