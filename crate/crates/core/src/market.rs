//! Bid curves, price-taker clearing, the zero-band action and settlement.
//!
//! A bid is a step function of price: `p_floor` below the first breakpoint,
//! then the quantity of the last breakpoint at or below the price. Intervals
//! are closed on the left and open on the right.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ess::EssParams;

pub const MAX_BID_PAIRS: usize = 10;

pub const BID_SCHEDULE_SCHEMA: &str = "nneb.bid_schedule.v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidPair {
    /// $/MWh
    pub price: f64,
    /// MW, discharging positive
    pub quantity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidCurve {
    pub pairs: Vec<BidPair>,
    /// Quantity cleared below the first price breakpoint.
    pub p_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BidViolation {
    TooManyPairs(usize),
    NonFinite { index: usize },
    PriceNotIncreasing { index: usize },
    QuantityDecreasing { index: usize },
    QuantityOutOfRange { index: usize, quantity: f64 },
    FloorOutOfRange(f64),
    FloorAboveFirstQuantity,
}

impl fmt::Display for BidViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooManyPairs(n) => write!(f, "{n} pairs exceeds the limit of {MAX_BID_PAIRS}"),
            Self::NonFinite { index } => write!(f, "pair {index} is not finite"),
            Self::PriceNotIncreasing { index } => {
                write!(f, "price of pair {index} does not strictly exceed the previous price")
            }
            Self::QuantityDecreasing { index } => {
                write!(f, "quantity of pair {index} is below the previous quantity")
            }
            Self::QuantityOutOfRange { index, quantity } => {
                write!(f, "quantity {quantity} of pair {index} outside [p_min, p_max]")
            }
            Self::FloorOutOfRange(q) => write!(f, "floor quantity {q} outside [p_min, p_max]"),
            Self::FloorAboveFirstQuantity => write!(f, "floor quantity exceeds the first quantity"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<BidViolation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidBid(self.violations))
        }
    }
}

impl BidCurve {
    /// Bid that clears the same quantity at every price.
    pub fn flat(quantity: f64) -> Self {
        Self {
            pairs: Vec::new(),
            p_floor: quantity,
        }
    }

    pub fn from_points(prices: &[f64], quantities: &[f64], p_floor: f64) -> Self {
        assert_eq!(prices.len(), quantities.len());
        Self {
            pairs: prices
                .iter()
                .zip(quantities)
                .map(|(&price, &quantity)| BidPair { price, quantity })
                .collect(),
            p_floor,
        }
    }

    pub fn prices(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|p| p.price)
    }
}

fn structural_violations(bid: &BidCurve) -> Vec<BidViolation> {
    let mut out = Vec::new();
    if bid.pairs.len() > MAX_BID_PAIRS {
        out.push(BidViolation::TooManyPairs(bid.pairs.len()));
    }
    for (i, pair) in bid.pairs.iter().enumerate() {
        if !pair.price.is_finite() || !pair.quantity.is_finite() {
            out.push(BidViolation::NonFinite { index: i });
        }
        if i > 0 {
            let prev = &bid.pairs[i - 1];
            if !(pair.price > prev.price) {
                out.push(BidViolation::PriceNotIncreasing { index: i });
            }
            if pair.quantity < prev.quantity {
                out.push(BidViolation::QuantityDecreasing { index: i });
            }
        }
    }
    if let Some(first) = bid.pairs.first() {
        if bid.p_floor > first.quantity {
            out.push(BidViolation::FloorAboveFirstQuantity);
        }
    }
    out
}

/// Reports every violated bid invariant. Never fails.
pub fn validate_bid(bid: &BidCurve, params: &EssParams) -> ValidationReport {
    let mut violations = structural_violations(bid);
    let in_range = |q: f64| q >= params.p_min() && q <= params.p_max;
    for (i, pair) in bid.pairs.iter().enumerate() {
        if pair.quantity.is_finite() && !in_range(pair.quantity) {
            violations.push(BidViolation::QuantityOutOfRange {
                index: i,
                quantity: pair.quantity,
            });
        }
    }
    if !bid.p_floor.is_finite() || !in_range(bid.p_floor) {
        violations.push(BidViolation::FloorOutOfRange(bid.p_floor));
    }
    ValidationReport { violations }
}

/// Cleared quantity of a price-taker bid at `price`.
pub fn clear_bid(bid: &BidCurve, price: f64) -> Result<f64> {
    let violations = structural_violations(bid);
    if !violations.is_empty() {
        return Err(Error::InvalidBid(violations));
    }
    Ok(clear_unchecked(bid, price))
}

/// Clearing without revalidation; `bid` must already be structurally valid.
pub(crate) fn clear_unchecked(bid: &BidCurve, price: f64) -> f64 {
    let above = bid.pairs.partition_point(|p| p.price <= price);
    match above {
        0 => bid.p_floor,
        i => bid.pairs[i - 1].quantity,
    }
}

/// A charge threshold pair and a discharge threshold pair with a zero band
/// in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroBandAction {
    pub lambda_c: f64,
    pub p_c: f64,
    pub lambda_d: f64,
    pub p_d: f64,
}

impl ZeroBandAction {
    /// The equivalent bid curve. Clearing it gives the same power as
    /// [`eval_zero_band`] at every price.
    pub fn to_bid_curve(&self) -> BidCurve {
        let mut pairs = Vec::with_capacity(2);
        // Charging holds for price <= lambda_c, so the zero step starts just above it.
        let zero_from = self.lambda_c.next_up();
        if zero_from < self.lambda_d {
            pairs.push(BidPair {
                price: zero_from,
                quantity: 0.0,
            });
        }
        pairs.push(BidPair {
            price: self.lambda_d,
            quantity: self.p_d,
        });
        BidCurve {
            pairs,
            p_floor: -self.p_c,
        }
    }
}

/// Signed power of a zero-band action at `price`; discharging wins when the
/// band is degenerate.
pub fn eval_zero_band(action: &ZeroBandAction, price: f64) -> f64 {
    if price >= action.lambda_d {
        action.p_d
    } else if price <= action.lambda_c {
        -action.p_c
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Settlement {
    pub cleared_power: f64,
    pub market_payment: f64,
    pub degradation: f64,
    pub net_income: f64,
}

pub fn settle(price: f64, cleared: f64, params: &EssParams) -> Settlement {
    debug_assert!(cleared.abs() <= params.p_max + 1e-12);
    let market_payment = params.tau * price * cleared;
    let degradation = params.tau * params.lambda_dep * cleared.abs();
    Settlement {
        cleared_power: cleared,
        market_payment,
        degradation,
        net_income: market_payment - degradation,
    }
}

/// One submitted bid for an operating hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourBid {
    pub p_floor: f64,
    pub pairs: Vec<BidPair>,
    /// Largest gap between the bid and the policy on the extraction grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_deviation: Option<f64>,
}

impl HourBid {
    pub fn curve(&self) -> BidCurve {
        BidCurve {
            pairs: self.pairs.clone(),
            p_floor: self.p_floor,
        }
    }
}

/// Bid schedule keyed by the ISO-8601 start of each operating hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidSchedule {
    pub schema: String,
    #[serde(default)]
    pub config: serde_json::Value,
    pub hours: BTreeMap<String, HourBid>,
}

impl BidSchedule {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            schema: BID_SCHEDULE_SCHEMA.into(),
            config,
            hours: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, timestamp: String, curve: &BidCurve, max_deviation: Option<f64>) {
        self.hours.insert(
            timestamp,
            HourBid {
                p_floor: curve.p_floor,
                pairs: curve.pairs.clone(),
                max_deviation,
            },
        );
    }
}
