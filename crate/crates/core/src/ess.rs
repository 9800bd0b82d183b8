//! Energy storage physics: state-of-charge evolution, power limits and
//! degradation cost.
//!
//! Power is signed, discharging positive. A single signed power per step
//! means simultaneous charge and discharge cannot be expressed at all.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack absorbed at the SoC boundaries after each step.
pub const SOC_TOLERANCE: f64 = 1e-12;

/// Five-minute interval expressed in hours.
pub const FIVE_MINUTES: f64 = 1.0 / 12.0;

/// Physical constants of a storage unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EssParams {
    /// Energy capacity (MWh).
    pub capacity_mwh: f64,
    /// Power rating (MW); the charging limit is `-p_max`.
    pub p_max: f64,
    /// Charging efficiency.
    pub eta_c: f64,
    /// Discharging efficiency.
    pub eta_d: f64,
    /// Degradation cost per MWh throughput ($/MWh).
    pub lambda_dep: f64,
    /// Step length in hours.
    pub tau: f64,
}

impl Default for EssParams {
    fn default() -> Self {
        Self {
            capacity_mwh: 8.0,
            p_max: 1.0,
            eta_c: 0.95,
            eta_d: 0.95,
            lambda_dep: 10.0,
            tau: FIVE_MINUTES,
        }
    }
}

impl EssParams {
    pub fn p_min(&self) -> f64 {
        -self.p_max
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.capacity_mwh > 0.0, "capacity_mwh must be > 0"),
            (self.p_max > 0.0, "p_max must be > 0"),
            (self.eta_c > 0.0 && self.eta_c <= 1.0, "eta_c must be in (0, 1]"),
            (self.eta_d > 0.0 && self.eta_d <= 1.0, "eta_d must be in (0, 1]"),
            (self.tau > 0.0, "tau must be > 0"),
            (self.lambda_dep >= 0.0, "lambda_dep must be >= 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidParams(msg.into()));
            }
        }
        let all = [
            self.capacity_mwh,
            self.p_max,
            self.eta_c,
            self.eta_d,
            self.lambda_dep,
            self.tau,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("ESS parameters must be finite".into()));
        }
        Ok(())
    }

    /// Storage duration at rated power, in hours.
    pub fn duration_hours(&self) -> f64 {
        self.capacity_mwh / self.p_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssState {
    /// Stored energy (MWh).
    pub soc: f64,
}

impl EssState {
    pub fn new(soc: f64, params: &EssParams) -> Result<Self> {
        if !(0.0..=params.capacity_mwh).contains(&soc) {
            return Err(Error::InvalidParams(format!(
                "soc {soc} outside [0, {}]",
                params.capacity_mwh
            )));
        }
        Ok(Self { soc })
    }

    pub fn half_full(params: &EssParams) -> Self {
        Self {
            soc: params.capacity_mwh / 2.0,
        }
    }
}

/// A complementary charge/discharge pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PowerDispatch {
    pub p_c: f64,
    pub p_d: f64,
}

impl PowerDispatch {
    /// Signed net power, discharging positive.
    pub fn net(&self) -> f64 {
        self.p_d - self.p_c
    }
}

pub fn dispatch_from_signed(p: f64, params: &EssParams) -> Result<PowerDispatch> {
    if !p.is_finite() || p.abs() > params.p_max {
        return Err(Error::PowerOutOfRange {
            power: p,
            p_max: params.p_max,
        });
    }
    Ok(if p >= 0.0 {
        PowerDispatch { p_c: 0.0, p_d: p }
    } else {
        PowerDispatch { p_c: -p, p_d: 0.0 }
    })
}

/// Signed power bounds `(p_lo, p_hi)` that keep the SoC within capacity
/// over one step.
pub fn feasible_range(state: &EssState, params: &EssParams) -> (f64, f64) {
    let p_hi = params.p_max.min(params.eta_d * state.soc / params.tau);
    let headroom = params.capacity_mwh - state.soc;
    let p_lo = (-params.p_max).max(-headroom / (params.tau * params.eta_c));
    (p_lo.min(0.0), p_hi.max(0.0))
}

/// Clamps a signed power to what the storage can physically deliver.
pub fn clamp_power(p: f64, state: &EssState, params: &EssParams) -> f64 {
    let (lo, hi) = feasible_range(state, params);
    p.clamp(lo, hi)
}

pub fn step_soc(state: &EssState, dispatch: &PowerDispatch, params: &EssParams) -> Result<EssState> {
    if dispatch.p_c < 0.0 || dispatch.p_d < 0.0 || (dispatch.p_c > 0.0 && dispatch.p_d > 0.0) {
        return Err(Error::Infeasible(format!(
            "dispatch ({}, {}) is not complementary",
            dispatch.p_c, dispatch.p_d
        )));
    }
    if dispatch.p_c > params.p_max || dispatch.p_d > params.p_max {
        return Err(Error::PowerOutOfRange {
            power: dispatch.net(),
            p_max: params.p_max,
        });
    }
    let soc = state.soc + params.tau * (params.eta_c * dispatch.p_c - dispatch.p_d / params.eta_d);
    if soc < -SOC_TOLERANCE || soc > params.capacity_mwh + SOC_TOLERANCE {
        return Err(Error::Infeasible(format!(
            "dispatch {} MW drives soc from {} to {soc}",
            dispatch.net(),
            state.soc
        )));
    }
    Ok(EssState {
        soc: soc.clamp(0.0, params.capacity_mwh),
    })
}

/// Clamps `p` to the feasible range and advances the state. Returns the
/// power actually delivered and the next state.
pub fn apply_clamped(p: f64, state: &EssState, params: &EssParams) -> (f64, EssState) {
    let delivered = clamp_power(p, state, params);
    let dispatch = dispatch_from_signed(delivered, params).expect("clamped power is in range");
    let next = step_soc(state, &dispatch, params).expect("clamped power is feasible");
    (delivered, next)
}

/// Degradation cost in dollars; the negative of the depreciation reward.
pub fn degradation_cost(dispatch: &PowerDispatch, params: &EssParams) -> f64 {
    params.tau * params.lambda_dep * dispatch.net().abs()
}
