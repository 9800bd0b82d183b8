//! Reference output levels from a continuous policy's cleared powers,
//! via exact one-dimensional k-means.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{MarketData, MarketEnv};
use crate::error::{Error, Result};
use crate::ess::EssParams;
use crate::policy::{PolicyNetwork, ReferenceLevels};
use crate::ppo::rollout;

pub const DEFAULT_LEVELS: usize = 10;

/// Market-cleared powers (before discretisation) from stochastic
/// on-policy rollouts on `data`, started at random days.
pub fn collect_actions(
    policy: &PolicyNetwork,
    data: Arc<MarketData>,
    n_samples: usize,
    n_envs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_envs == 0 {
        return Err(Error::InvalidParams("n_envs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = data.day_starts();
    if starts.is_empty() {
        starts.push(0);
    }
    let mut envs: Vec<MarketEnv> = (0..n_envs)
        .map(|_| MarketEnv::new(data.clone(), policy.ess, starts[rng.random_range(0..starts.len())]))
        .collect();
    let mut out = Vec::with_capacity(n_samples);
    while out.len() < n_samples {
        let steps = (n_samples - out.len()).div_ceil(n_envs);
        let batch = rollout(&mut envs, policy, steps, true, &mut rng)?;
        out.extend(batch.transitions.iter().map(|t| t.market_power));
    }
    out.truncate(n_samples);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Sorted centroids.
    pub centroids: Vec<f64>,
    /// Within-cluster sum of squared distances.
    pub sse: f64,
}

/// Prefix sums over sorted distinct values with multiplicities.
struct Prefix {
    w: Vec<f64>,
    s: Vec<f64>,
    q: Vec<f64>,
}

impl Prefix {
    fn new(values: &[f64], weights: &[f64]) -> Self {
        let n = values.len();
        let (mut w, mut s, mut q) = (vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]);
        for i in 0..n {
            w[i + 1] = w[i] + weights[i];
            s[i + 1] = s[i] + weights[i] * values[i];
            q[i + 1] = q[i] + weights[i] * values[i] * values[i];
        }
        Self { w, s, q }
    }

    /// SSE of the cluster holding distinct values `i..j`.
    fn cost(&self, i: usize, j: usize) -> f64 {
        let w = self.w[j] - self.w[i];
        let s = self.s[j] - self.s[i];
        let q = self.q[j] - self.q[i];
        (q - s * s / w).max(0.0)
    }
}

/// Optimal k-means of 1-D samples by dynamic programming over the sorted
/// distinct values. Each layer is filled by divide and conquer, which is
/// valid because optimal split points are monotone in 1-D.
pub fn kmeans_1d(samples: &[f64], k: usize) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be positive".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("k-means samples must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut values: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for &x in &sorted {
        if values.last() == Some(&x) {
            *weights.last_mut().unwrap() += 1.0;
        } else {
            values.push(x);
            weights.push(1.0);
        }
    }
    let m = values.len();
    if m < k {
        return Err(Error::Degenerate(format!("{m} distinct samples, need at least {k}")));
    }
    // Centre for numerical stability of the prefix-sum costs.
    let shift = values.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>() / weights.iter().sum::<f64>();
    let centred: Vec<f64> = values.iter().map(|v| v - shift).collect();
    let pre = Prefix::new(&centred, &weights);

    // dp[j]: best SSE of the first j values with the current cluster count.
    let mut dp: Vec<f64> = (0..=m).map(|j| if j == 0 { 0.0 } else { pre.cost(0, j) }).collect();
    let mut splits = vec![vec![0usize; m + 1]; k];
    for c in 1..k {
        let mut next = vec![f64::INFINITY; m + 1];
        fill_layer(&dp, &mut next, &mut splits[c], &pre, c + 1, m, c, m - 1);
        dp = next;
    }

    let mut bounds = vec![m];
    let mut j = m;
    for c in (1..k).rev() {
        j = splits[c][j];
        bounds.push(j);
    }
    bounds.push(0);
    bounds.reverse();
    // Report the chosen partition from the raw sorted samples.
    let mut offsets = vec![0usize; m + 1];
    for i in 0..m {
        offsets[i + 1] = offsets[i] + weights[i] as usize;
    }
    let clusters: Vec<&[f64]> = bounds.windows(2).map(|b| &sorted[offsets[b[0]]..offsets[b[1]]]).collect();
    let centroids = clusters.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect::<Vec<_>>();
    let sse = partition_sse(&clusters);
    Ok(Clustering { centroids, sse })
}

/// Sum over clusters of squared distances to the cluster mean.
pub fn partition_sse(clusters: &[&[f64]]) -> f64 {
    clusters
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            c.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
        })
        .sum()
}

/// Fills `next[j]` for `j in lo..=hi` with `min_i prev[i] + cost(i, j)`,
/// searching `i in opt_lo..=opt_hi`; leftmost minimiser on ties.
#[allow(clippy::too_many_arguments)]
fn fill_layer(
    prev: &[f64],
    next: &mut [f64],
    split: &mut [usize],
    pre: &Prefix,
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = f64::INFINITY;
    let mut arg = opt_lo;
    for i in opt_lo..=opt_hi.min(mid - 1) {
        let v = prev[i] + pre.cost(i, mid);
        if v < best {
            best = v;
            arg = i;
        }
    }
    next[mid] = best;
    split[mid] = arg;
    if mid > lo {
        fill_layer(prev, next, split, pre, lo, mid - 1, opt_lo, arg);
    }
    fill_layer(prev, next, split, pre, mid + 1, hi, arg, opt_hi);
}

/// Clusters `samples` into `k` levels checked against the unit's range.
pub fn reference_levels(samples: &[f64], k: usize, params: &EssParams) -> Result<ReferenceLevels> {
    let clustering = kmeans_1d(samples, k)?;
    let lo = params.p_min();
    let centroids = clustering
        .centroids
        .into_iter()
        .map(|c| c.clamp(lo, params.p_max))
        .collect();
    ReferenceLevels::new(centroids, params)
}
