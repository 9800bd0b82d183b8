//! Actor/critic networks for the three bid formats, the zero-band action
//! head, the discretising output layer and the monotonicity penalty.
//!
//! The actor emits Gaussian means and log-standard-deviations. In NNEB
//! mode it also sees the normalised clearing price, so composing its mean
//! action with the zero-band rule yields a supply function `p(price)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ess::EssParams;
use crate::features::OBS_DIM;
use crate::market::{eval_zero_band, ZeroBandAction};
use crate::nn::{Dense, Gradients, Mlp};

pub const CHECKPOINT_SCHEMA: &str = "nneb.checkpoint.v1";
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
/// Points in the price grid used by the monotonicity metric.
pub const METRIC_GRID_POINTS: usize = 200;
const FINAL_LAYER_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BidMode {
    /// Quantity-only self-scheduling.
    #[serde(rename = "self")]
    SelfSchedule,
    /// One charge and one discharge threshold pair.
    #[serde(rename = "two-pair")]
    TwoPair,
    /// Full supply-function bids from a price-aware network.
    #[serde(rename = "nneb")]
    Nneb,
}

impl BidMode {
    pub const ALL: [BidMode; 3] = [BidMode::SelfSchedule, BidMode::TwoPair, BidMode::Nneb];

    pub fn action_dim(self) -> usize {
        match self {
            BidMode::SelfSchedule => 1,
            BidMode::TwoPair | BidMode::Nneb => 4,
        }
    }

    pub fn sees_price(self) -> bool {
        self == BidMode::Nneb
    }

    pub fn actor_input_dim(self) -> usize {
        OBS_DIM + usize::from(self.sees_price())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BidMode::SelfSchedule => "self",
            BidMode::TwoPair => "two-pair",
            BidMode::Nneb => "nneb",
        }
    }
}

impl fmt::Display for BidMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BidMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "self" => Ok(BidMode::SelfSchedule),
            "two-pair" | "2pair" | "two_pair" => Ok(BidMode::TwoPair),
            "nneb" => Ok(BidMode::Nneb),
            other => Err(Error::InvalidParams(format!(
                "unknown bid mode `{other}` (expected self, two-pair or nneb)"
            ))),
        }
    }
}

/// Price interval the action head maps onto, and the actor's price input
/// normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceRange {
    pub lo: f64,
    pub hi: f64,
}

impl PriceRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidParams(format!("price range [{lo}, {hi}] is empty")));
        }
        Ok(Self { lo, hi })
    }

    /// The 0.1% and 99.9% quantiles of `prices`.
    pub fn from_quantiles(prices: &[f64]) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::InsufficientData("no prices to derive a range from".into()));
        }
        let mut sorted = prices.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let (i, frac) = (pos.floor() as usize, pos.fract());
            let j = (i + 1).min(sorted.len() - 1);
            sorted[i] + (sorted[j] - sorted[i]) * frac
        };
        let (lo, hi) = (q(0.001), q(0.999));
        if hi > lo {
            Self::new(lo, hi)
        } else {
            Self::new(lo - 1.0, lo + 1.0)
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn normalize(&self, price: f64) -> f64 {
        ((price - self.lo) / self.width() * 2.0 - 1.0).clamp(-1.0, 1.0)
    }

    fn price_at(&self, x: f64) -> f64 {
        self.lo + (x + 1.0) / 2.0 * self.width()
    }

    /// `n` evenly spaced prices spanning the range.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        assert!(n >= 2);
        (0..n)
            .map(|i| self.lo + self.width() * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Maps raw actor outputs in [-1, 1] (clipped) to a zero-band action.
pub fn decode_action(raw: &[f64], params: &EssParams, range: &PriceRange) -> ZeroBandAction {
    let unit = |x: f64| x.clamp(-1.0, 1.0);
    let a = range.price_at(unit(raw[0]));
    let b = range.price_at(unit(raw[2]));
    let power = |x: f64| (unit(x) + 1.0) / 2.0 * params.p_max;
    ZeroBandAction {
        lambda_c: a.min(b),
        p_c: power(raw[1]),
        lambda_d: a.max(b),
        p_d: power(raw[3]),
    }
}

/// The discrete output levels, excluding the implicit `p_min` candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ReferenceLevels {
    levels: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ReferenceLevels {
    type Error = Error;

    fn try_from(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidParams("reference levels must be finite and non-empty".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParams("reference levels must be strictly increasing".into()));
        }
        Ok(Self { levels })
    }
}

impl From<ReferenceLevels> for Vec<f64> {
    fn from(r: ReferenceLevels) -> Self {
        r.levels
    }
}

impl ReferenceLevels {
    pub fn new(levels: Vec<f64>, params: &EssParams) -> Result<Self> {
        let r = Self::try_from(levels)?;
        r.check_range(params)?;
        Ok(r)
    }

    pub fn check_range(&self, params: &EssParams) -> Result<()> {
        let tol = 1e-12;
        if self.levels[0] < params.p_min() - tol || *self.levels.last().unwrap() > params.p_max + tol {
            return Err(Error::InvalidParams(format!(
                "reference levels must lie in [{}, {}]",
                params.p_min(),
                params.p_max
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Sorted, de-duplicated candidate outputs `{p_min} ∪ levels`.
    pub fn candidates(&self, params: &EssParams) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.levels.len() + 1);
        c.push(params.p_min());
        c.extend(self.levels.iter().copied().filter(|l| *l > params.p_min()));
        c
    }
}

/// Nearest candidate to `p`; ties go to the lower level.
pub fn discretize(p: f64, levels: &ReferenceLevels, params: &EssParams) -> f64 {
    snap(p, &levels.candidates(params))
}

/// Nearest value in a sorted candidate list, ties toward the lower one.
pub(crate) fn snap(p: f64, candidates: &[f64]) -> f64 {
    let i = candidates.partition_point(|c| *c < p);
    if i == 0 {
        return candidates[0];
    }
    if i == candidates.len() {
        return candidates[i - 1];
    }
    let (lo, hi) = (candidates[i - 1], candidates[i]);
    if hi - p < p - lo {
        hi
    } else {
        lo
    }
}

/// Diagonal Gaussian head read from one actor output row.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// Log-std is an affine image of the Tanh output onto (LOG_STD_MIN, LOG_STD_MAX).
pub const LOG_STD_SLOPE: f64 = (LOG_STD_MAX - LOG_STD_MIN) / 2.0;
const LOG_STD_CENTER: f64 = (LOG_STD_MAX + LOG_STD_MIN) / 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl GaussianHead {
    pub fn from_row(row: &[f64], action_dim: usize) -> Self {
        Self {
            mean: row[..action_dim].to_vec(),
            log_std: row[action_dim..2 * action_dim]
                .iter()
                .map(|y| LOG_STD_CENTER + LOG_STD_SLOPE * y)
                .collect(),
        }
    }

    pub fn log_prob(&self, action: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(action)
            .map(|((m, ls), a)| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - HALF_LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    pub mode: BidMode,
    pub actor: Mlp,
    pub critic: Mlp,
    pub price_range: PriceRange,
    /// Critic outputs are in (-1, 1); values are `value_scale * output`.
    pub value_scale: f64,
    pub levels: Option<ReferenceLevels>,
    pub ess: EssParams,
}

impl PolicyNetwork {
    pub fn new<R: Rng>(
        mode: BidMode,
        hidden: usize,
        price_range: PriceRange,
        value_scale: f64,
        ess: EssParams,
        rng: &mut R,
    ) -> Self {
        let actor = Mlp::new(
            &[mode.actor_input_dim(), hidden, hidden, 2 * mode.action_dim()],
            FINAL_LAYER_SCALE,
            rng,
        );
        let critic = Mlp::new(&[OBS_DIM, hidden, hidden, 1], FINAL_LAYER_SCALE, rng);
        Self {
            mode,
            actor,
            critic,
            price_range,
            value_scale,
            levels: None,
            ess,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.mode.action_dim()
    }

    /// Actor input row: the observation, plus the normalised price in NNEB mode.
    pub fn actor_input(&self, obs: &[f64], price: f64) -> Vec<f64> {
        let mut x = obs.to_vec();
        if self.mode.sees_price() {
            x.push(self.price_range.normalize(price));
        }
        x
    }

    pub fn head(&self, obs: &[f64], price: f64) -> Result<GaussianHead> {
        let out = self.actor.forward_one(&self.actor_input(obs, price))?;
        Ok(GaussianHead::from_row(&out, self.action_dim()))
    }

    /// Signed power the market clears for a raw action at `price`.
    pub fn power_from_action(&self, action: &[f64], price: f64) -> f64 {
        match self.mode {
            BidMode::SelfSchedule => action[0].clamp(-1.0, 1.0) * self.ess.p_max,
            BidMode::TwoPair | BidMode::Nneb => {
                eval_zero_band(&decode_action(action, &self.ess, &self.price_range), price)
            }
        }
    }

    /// Deterministic zero-band action (actor mean) at `price`.
    pub fn zero_band_action(&self, obs: &[f64], price: f64) -> Result<ZeroBandAction> {
        if self.mode == BidMode::SelfSchedule {
            return Err(Error::WrongMode {
                expected: "two-pair or nneb".into(),
                found: self.mode.to_string(),
            });
        }
        let head = self.head(obs, price)?;
        Ok(decode_action(&head.mean, &self.ess, &self.price_range))
    }

    fn require_nneb(&self) -> Result<()> {
        if self.mode != BidMode::Nneb {
            return Err(Error::WrongMode {
                expected: BidMode::Nneb.to_string(),
                found: self.mode.to_string(),
            });
        }
        Ok(())
    }

    /// Continuous supply function value at one price.
    pub fn supply_power(&self, obs: &[f64], price: f64) -> Result<f64> {
        self.require_nneb()?;
        let action = self.zero_band_action(obs, price)?;
        Ok(eval_zero_band(&action, price))
    }

    /// Continuous supply function over many prices with one batched pass.
    pub fn supply_curve(&self, obs: &[f64], prices: &[f64]) -> Result<Vec<f64>> {
        self.require_nneb()?;
        let input = self.price_batch(obs, prices)?;
        let out = self.actor.forward(input.view())?;
        Ok(prices
            .iter()
            .zip(out.rows())
            .map(|(&price, row)| {
                let row = row.as_slice().expect("standard layout");
                eval_zero_band(&decode_action(&row[..4], &self.ess, &self.price_range), price)
            })
            .collect())
    }

    fn price_batch(&self, obs: &[f64], prices: &[f64]) -> Result<Array2<f64>> {
        if obs.len() != OBS_DIM {
            return Err(Error::Shape {
                expected: OBS_DIM,
                got: obs.len(),
            });
        }
        let mut input = Array2::zeros((prices.len(), OBS_DIM + 1));
        for (mut row, &price) in input.rows_mut().into_iter().zip(prices) {
            for (dst, src) in row.iter_mut().zip(obs) {
                *dst = *src;
            }
            row[OBS_DIM] = self.price_range.normalize(price);
        }
        Ok(input)
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.value_scale * self.critic.forward_one(obs)?[0])
    }

    pub fn values(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self
            .critic
            .forward(obs)?
            .column(0)
            .iter()
            .map(|v| v * self.value_scale)
            .collect())
    }
}

/// Share of adjacent pairs that do not decrease.
pub fn monotone_fraction(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 1.0;
    }
    let ok = values.windows(2).filter(|w| w[1] >= w[0]).count();
    ok as f64 / (values.len() - 1) as f64
}

/// Average over observations of the monotone share of the continuous
/// supply curve on a 200-point price grid.
pub fn monotonicity_metric(policy: &PolicyNetwork, observations: &[[f64; OBS_DIM]]) -> Result<f64> {
    policy.require_nneb()?;
    if observations.is_empty() {
        return Ok(1.0);
    }
    let grid = policy.price_range.grid(METRIC_GRID_POINTS);
    let mut total = 0.0;
    for obs in observations {
        total += monotone_fraction(&policy.supply_curve(obs, &grid)?);
    }
    Ok(total / observations.len() as f64)
}

#[derive(Debug, Clone)]
pub struct MonotonicityLoss {
    pub loss: f64,
    /// Gradient of `loss` with respect to the actor parameters.
    pub grads: Gradients,
    /// Share of samples with a negative slope estimate.
    pub violating: f64,
}

/// Penalty on negative supply-curve slopes, `mean(d^2 * [d < 0])`, where
/// `d` is a central difference of the continuous supply function with
/// step `h` ($/MWh). Gradients flow through both evaluations.
pub fn monotonicity_loss(
    policy: &PolicyNetwork,
    observations: &[[f64; OBS_DIM]],
    prices: &[f64],
    h: f64,
) -> Result<MonotonicityLoss> {
    policy.require_nneb()?;
    if observations.len() != prices.len() {
        return Err(Error::Shape {
            expected: observations.len(),
            got: prices.len(),
        });
    }
    let n = observations.len();
    let mut grads = Gradients::zeros_like(&policy.actor);
    if n == 0 {
        return Ok(MonotonicityLoss {
            loss: 0.0,
            grads,
            violating: 0.0,
        });
    }
    let build = |shift: f64| {
        let mut x = Array2::zeros((n, OBS_DIM + 1));
        for (i, (obs, &price)) in observations.iter().zip(prices).enumerate() {
            for (j, v) in obs.iter().enumerate() {
                x[[i, j]] = *v;
            }
            x[[i, OBS_DIM]] = policy.price_range.normalize(price + shift);
        }
        x
    };
    let (x_up, x_down) = (build(h), build(-h));
    let cache_up = policy.actor.forward_cached(x_up.view())?;
    let cache_down = policy.actor.forward_cached(x_down.view())?;
    let out_dim = policy.actor.output_dim();
    let mut g_up = Array2::zeros((n, out_dim));
    let mut g_down = Array2::zeros((n, out_dim));
    let half_p = policy.ess.p_max / 2.0;

    // dp/d(mean) is nonzero only through the active branch's quantity head.
    let branch_grad = |row: &[f64], price: f64| -> (f64, [f64; 4]) {
        let action = decode_action(&row[..4], &policy.ess, &policy.price_range);
        let p = eval_zero_band(&action, price);
        let mut d = [0.0; 4];
        if price >= action.lambda_d {
            d[3] = half_p;
        } else if price <= action.lambda_c {
            d[1] = -half_p;
        }
        (p, d)
    };

    let mut loss = 0.0;
    let mut violating = 0usize;
    for i in 0..n {
        let price = prices[i];
        let up_row = cache_up.output().row(i);
        let down_row = cache_down.output().row(i);
        let (p_up, dp_up) = branch_grad(up_row.as_slice().unwrap(), price + h);
        let (p_down, dp_down) = branch_grad(down_row.as_slice().unwrap(), price - h);
        let slope = (p_up - p_down) / (2.0 * h);
        if slope < 0.0 {
            violating += 1;
            loss += slope * slope;
            let dl_dslope = 2.0 * slope / n as f64;
            for k in 0..4 {
                g_up[[i, k]] = dl_dslope * dp_up[k] / (2.0 * h);
                g_down[[i, k]] = -dl_dslope * dp_down[k] / (2.0 * h);
            }
        }
    }
    let (ga, _) = policy.actor.backward(&cache_up, g_up.view());
    let (gb, _) = policy.actor.backward(&cache_down, g_down.view());
    grads.add_assign(&ga);
    grads.add_assign(&gb);
    Ok(MonotonicityLoss {
        loss: loss / n as f64,
        grads,
        violating: violating as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub widths: Vec<usize>,
    pub layers: Vec<LayerSnapshot>,
}

impl From<&Mlp> for MlpSnapshot {
    fn from(mlp: &Mlp) -> Self {
        Self {
            widths: mlp.widths(),
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerSnapshot {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    weights: l.w.iter().copied().collect(),
                    bias: l.b.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<&MlpSnapshot> for Mlp {
    type Error = Error;

    fn try_from(s: &MlpSnapshot) -> Result<Self> {
        if s.widths.len() != s.layers.len() + 1 {
            return Err(Error::Data("checkpoint widths disagree with layer count".into()));
        }
        let layers = s
            .layers
            .iter()
            .zip(s.widths.windows(2))
            .map(|(l, w)| {
                if l.rows != w[1] || l.cols != w[0] || l.bias.len() != l.rows {
                    return Err(Error::Data("checkpoint layer shape mismatch".into()));
                }
                let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights.clone())
                    .map_err(|e| Error::Data(format!("checkpoint weights: {e}")))?;
                Ok(Dense {
                    w: weights,
                    b: l.bias.clone().into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mlp = Mlp { layers };
        if !mlp.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(mlp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub schema: String,
    pub mode: BidMode,
    pub ess: EssParams,
    pub price_range: PriceRange,
    pub value_scale: f64,
    pub amplitude_scale: f64,
    #[serde(default)]
    pub levels: Option<ReferenceLevels>,
    pub actor: MlpSnapshot,
    pub critic: MlpSnapshot,
    /// Resolved configuration that produced the checkpoint.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl PolicyNetwork {
    pub fn to_checkpoint(&self, config: serde_json::Value) -> PolicyCheckpoint {
        PolicyCheckpoint {
            schema: CHECKPOINT_SCHEMA.into(),
            mode: self.mode,
            ess: self.ess,
            price_range: self.price_range,
            value_scale: self.value_scale,
            amplitude_scale: crate::features::AMPLITUDE_SCALE,
            levels: self.levels.clone(),
            actor: (&self.actor).into(),
            critic: (&self.critic).into(),
            config,
        }
    }

    pub fn from_checkpoint(c: &PolicyCheckpoint) -> Result<Self> {
        if c.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Data(format!("unsupported checkpoint schema `{}`", c.schema)));
        }
        c.ess.validate()?;
        let actor = Mlp::try_from(&c.actor)?;
        let critic = Mlp::try_from(&c.critic)?;
        if actor.input_dim() != c.mode.actor_input_dim() || actor.output_dim() != 2 * c.mode.action_dim() {
            return Err(Error::Data(format!("actor shape does not fit mode {}", c.mode)));
        }
        if critic.input_dim() != OBS_DIM || critic.output_dim() != 1 {
            return Err(Error::Data("critic shape mismatch".into()));
        }
        if let Some(levels) = &c.levels {
            levels.check_range(&c.ess)?;
        }
        Ok(Self {
            mode: c.mode,
            actor,
            critic,
            price_range: PriceRange::new(c.price_range.lo, c.price_range.hi)?,
            value_scale: c.value_scale,
            levels: c.levels.clone(),
            ess: c.ess,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, config: serde_json::Value) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.to_checkpoint(config))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let checkpoint: PolicyCheckpoint = serde_json::from_reader(file)?;
        Self::from_checkpoint(&checkpoint)
    }
}
