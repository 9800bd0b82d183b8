//! Conversion of a monotone, discrete NNEB policy into a price-quantity bid.
//!
//! The supply function is swept over a price grid, repaired to be
//! non-decreasing, and each upward level change becomes one bid pair at
//! the leftmost grid price reaching the new level.

use crate::error::{Error, Result};
use crate::ess::EssParams;
use crate::features::OBS_DIM;
use crate::market::{clear_bid, BidCurve, BidPair, BidViolation, MAX_BID_PAIRS};
use crate::policy::{discretize, PolicyNetwork, PriceRange};

pub const EXTRACTION_GRID_POINTS: usize = 512;

/// Default sweep: evenly spaced over the policy's price range.
pub fn extraction_grid(range: &PriceRange, points: usize) -> Vec<f64> {
    range.grid(points)
}

/// Discretised supply power at every grid price.
pub fn sweep_supply(policy: &PolicyNetwork, obs: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let levels = policy
        .levels
        .as_ref()
        .ok_or_else(|| Error::InvalidParams("policy has no reference levels".into()))?;
    Ok(policy
        .supply_curve(obs, grid)?
        .into_iter()
        .map(|p| discretize(p, levels, &policy.ess))
        .collect())
}

/// Running maximum, left to right.
pub fn monotone_repair(powers: &[f64]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    powers
        .iter()
        .map(|&p| {
            best = best.max(p);
            best
        })
        .collect()
}

/// Bid reproducing a non-decreasing step curve sampled on `grid`.
pub fn to_bid_curve(grid: &[f64], repaired: &[f64], params: &EssParams) -> Result<BidCurve> {
    if grid.len() != repaired.len() {
        return Err(Error::Shape {
            expected: grid.len(),
            got: repaired.len(),
        });
    }
    let Some(&first) = repaired.first() else {
        return Err(Error::InvalidParams("empty extraction grid".into()));
    };
    if repaired.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParams("curve must be non-decreasing".into()));
    }
    let mut pairs = Vec::new();
    if first != params.p_min() {
        pairs.push(BidPair {
            price: grid[0],
            quantity: first,
        });
    }
    for g in 1..grid.len() {
        if repaired[g] > repaired[g - 1] {
            pairs.push(BidPair {
                price: grid[g],
                quantity: repaired[g],
            });
        }
    }
    if pairs.len() > MAX_BID_PAIRS {
        return Err(Error::InvalidBid(vec![BidViolation::TooManyPairs(pairs.len())]));
    }
    Ok(BidCurve {
        pairs,
        p_floor: params.p_min(),
    })
}

/// Largest gap between the bid's cleared power and the repaired, discretised
/// supply function over `grid`.
pub fn verify_equivalence(bid: &BidCurve, policy: &PolicyNetwork, obs: &[f64], grid: &[f64]) -> Result<f64> {
    let repaired = monotone_repair(&sweep_supply(policy, obs, grid)?);
    max_deviation(bid, grid, &repaired)
}

fn max_deviation(bid: &BidCurve, grid: &[f64], curve: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (&price, &p) in grid.iter().zip(curve) {
        worst = worst.max((clear_bid(bid, price)? - p).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub curve: BidCurve,
    /// Always 0 on the extraction grid; checked rather than assumed.
    pub max_deviation: f64,
    /// Grid points changed by the monotone repair.
    pub repaired_points: usize,
}

/// Sweep, repair, convert and verify for one observation.
pub fn extract_bid(policy: &PolicyNetwork, obs: &[f64; OBS_DIM], grid: &[f64]) -> Result<Extraction> {
    let swept = sweep_supply(policy, obs, grid)?;
    let repaired = monotone_repair(&swept);
    let repaired_points = swept.iter().zip(&repaired).filter(|(a, b)| a != b).count();
    let curve = to_bid_curve(grid, &repaired, &policy.ess)?;
    let max_deviation = max_deviation(&curve, grid, &repaired)?;
    Ok(Extraction {
        curve,
        max_deviation,
        repaired_points,
    })
}
