//! Hindsight-optimal dispatch with perfect price foresight, by backward
//! induction over a discretised state of charge, plus exhaustive oracles
//! for small instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ess::{apply_clamped, EssParams, EssState};
use crate::market::settle;

/// Largest instance `brute_force_optimal` will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 7u64.pow(6);

pub fn uniform_soc_nodes(n: usize, params: &EssParams) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| params.capacity_mwh * i as f64 / (n - 1) as f64)
        .collect()
}

/// `m` evenly spaced signed powers from `-p_max` to `p_max`; with odd `m`
/// the middle one is exactly 0.
pub fn power_levels(m: usize, params: &EssParams) -> Vec<f64> {
    assert!(m >= 2);
    let half = (m - 1) as f64 / 2.0;
    (0..m)
        .map(|i| params.p_max * (i as f64 - half) / half)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Net income of the dispatch below, simulated with exact dynamics ($).
    pub profit: f64,
    /// Value of the start state under the discretised model ($).
    pub dp_value: f64,
    /// Requested power per interval (MW, discharging positive).
    pub schedule: Vec<f64>,
    /// SoC before each interval, and after the last (MWh).
    pub soc: Vec<f64>,
    pub soc_nodes: usize,
    pub power_levels: usize,
}

impl OracleResult {
    /// Gap between the model value and the simulated profit ($).
    pub fn discretisation_gap(&self) -> f64 {
        self.dp_value - self.profit
    }
}

/// Position of a SoC among sorted nodes: `values[idx] + w * (values[idx + 1] - values[idx])`,
/// with `w == 0` (and no neighbour read) on a node or outside the node range.
#[derive(Debug, Clone, Copy)]
struct Located {
    idx: usize,
    w: f64,
}

fn locate(nodes: &[f64], soc: f64) -> Located {
    let i = nodes.partition_point(|n| *n < soc);
    if i < nodes.len() && nodes[i] == soc {
        return Located { idx: i, w: 0.0 };
    }
    if i == 0 {
        return Located { idx: 0, w: 0.0 };
    }
    if i == nodes.len() {
        return Located { idx: i - 1, w: 0.0 };
    }
    Located {
        idx: i - 1,
        w: (soc - nodes[i - 1]) / (nodes[i] - nodes[i - 1]),
    }
}

impl Located {
    fn eval(self, values: &[f64]) -> f64 {
        if self.w == 0.0 {
            values[self.idx]
        } else {
            values[self.idx] + self.w * (values[self.idx + 1] - values[self.idx])
        }
    }
}

/// Hindsight DP from half-full on an `n`-node uniform SoC grid with `m`
/// power levels.
pub fn hindsight_dp(prices: &[f64], params: &EssParams, n: usize, m: usize) -> Result<OracleResult> {
    if n < 2 || m < 3 || m.is_multiple_of(2) {
        return Err(Error::InvalidParams("need n >= 2 SoC nodes and an odd m >= 3 power levels".into()));
    }
    let nodes = uniform_soc_nodes(n, params);
    let powers = power_levels(m, params);
    dp_on_nodes(prices, params, &nodes, &powers, EssState::half_full(params).soc)
}

/// Hindsight DP over arbitrary sorted SoC `nodes` and candidate `powers`.
///
/// Every candidate is clamped to what the state of charge allows. Values
/// between nodes are interpolated linearly, so when all reachable states
/// are nodes the result is exact for the given power set.
pub fn dp_on_nodes(
    prices: &[f64],
    params: &EssParams,
    nodes: &[f64],
    powers: &[f64],
    start_soc: f64,
) -> Result<OracleResult> {
    params.validate()?;
    if prices.is_empty() {
        return Err(Error::InsufficientData("empty price series".into()));
    }
    if prices.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("prices must be finite".into()));
    }
    if nodes.len() < 2 || nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParams("SoC nodes must be strictly increasing, at least two".into()));
    }
    if powers.is_empty() {
        return Err(Error::InvalidParams("no power levels".into()));
    }
    let k = powers.len();
    // Per (node, power): delivered power and successor SoC. Time-invariant.
    let moves: Vec<(f64, Located)> = nodes
        .iter()
        .flat_map(|&s| {
            powers.iter().map(move |&p| {
                let (delivered, next) = apply_clamped(p, &EssState { soc: s }, params);
                (delivered, locate(nodes, next.soc))
            })
        })
        .collect();

    let t_len = prices.len();
    let mut values = vec![vec![0.0; nodes.len()]; t_len + 1];
    for t in (0..t_len).rev() {
        let (head, tail) = values.split_at_mut(t + 1);
        let next = &tail[0];
        for (i, v) in head[t].iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for &(delivered, at) in &moves[i * k..(i + 1) * k] {
                let q = settle(prices[t], delivered, params).net_income + at.eval(next);
                if q > best {
                    best = q;
                }
            }
            *v = best;
        }
    }

    // Roll forward with exact dynamics, choosing greedily against the values.
    let mut soc = start_soc.clamp(0.0, params.capacity_mwh);
    let mut trace = vec![soc];
    let mut schedule = Vec::with_capacity(t_len);
    let mut profit = 0.0;
    let ordered = powers_by_magnitude(powers);
    for t in 0..t_len {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0, soc);
        for &p in &ordered {
            let (delivered, next) = apply_clamped(p, &EssState { soc }, params);
            let r = settle(prices[t], delivered, params).net_income;
            let q = r + locate(nodes, next.soc).eval(&values[t + 1]);
            if q > best.0 {
                best = (q, p, r, next.soc);
            }
        }
        schedule.push(best.1);
        profit += best.2;
        soc = best.3;
        trace.push(soc);
    }
    Ok(OracleResult {
        profit,
        dp_value: locate(nodes, start_soc).eval(&values[0]),
        schedule,
        soc: trace,
        soc_nodes: nodes.len(),
        power_levels: powers.len(),
    })
}

/// Candidates ordered by |p| so ties resolve toward idling.
fn powers_by_magnitude(powers: &[f64]) -> Vec<f64> {
    let mut v = powers.to_vec();
    v.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    v
}

fn check_brute_force_size(steps: usize, actions: usize) -> Result<()> {
    let size = (actions as u64).checked_pow(steps as u32).unwrap_or(u64::MAX);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!(
            "{actions}^{steps} action sequences exceeds the limit of {BRUTE_FORCE_LIMIT}"
        )));
    }
    Ok(())
}

/// Best net income over every sequence drawn from `powers`, each step
/// clamped to the feasible range.
pub fn brute_force_optimal(prices: &[f64], params: &EssParams, powers: &[f64], start_soc: f64) -> Result<f64> {
    check_brute_force_size(prices.len(), powers.len())?;
    fn best(t: usize, soc: f64, prices: &[f64], params: &EssParams, powers: &[f64]) -> f64 {
        if t == prices.len() {
            return 0.0;
        }
        let mut top = f64::NEG_INFINITY;
        for &p in powers {
            let (delivered, next) = apply_clamped(p, &EssState { soc }, params);
            let q = settle(prices[t], delivered, params).net_income + best(t + 1, next.soc, prices, params, powers);
            if q > top {
                top = q;
            }
        }
        top
    }
    Ok(best(0, start_soc, prices, params, powers))
}

/// Every SoC reachable within `steps` steps from `start_soc`, sorted.
pub fn reachable_socs(steps: usize, params: &EssParams, powers: &[f64], start_soc: f64) -> Result<Vec<f64>> {
    check_brute_force_size(steps, powers.len())?;
    let mut all = vec![start_soc];
    let mut frontier = vec![start_soc];
    for _ in 0..steps {
        let mut next = Vec::new();
        for &soc in &frontier {
            for &p in powers {
                next.push(apply_clamped(p, &EssState { soc }, params).1.soc);
            }
        }
        next.sort_by(f64::total_cmp);
        next.dedup();
        all.extend_from_slice(&next);
        frontier = next;
    }
    all.sort_by(f64::total_cmp);
    all.dedup();
    Ok(all)
}

pub fn profit_ratio(policy_profit: f64, oracle_profit: f64) -> Result<f64> {
    if !(oracle_profit > 0.0) {
        return Err(Error::UndefinedRatio(oracle_profit));
    }
    Ok(policy_profit / oracle_profit)
}
