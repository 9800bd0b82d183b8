//! The 15-dimensional observation: time of day, Fourier summary of recent
//! price history, and normalised state of charge.
//!
//! Only prices strictly before the interval being bid on are visible.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::data::STEPS_PER_HOUR;
use crate::error::{Error, Result};
use crate::ess::{EssParams, EssState};

pub const OBS_DIM: usize = 15;
pub const SHORT_WINDOW: usize = 72;
pub const LONG_WINDOW_HOURS: usize = 96;
pub const LONG_WINDOW_STEPS: usize = LONG_WINDOW_HOURS * STEPS_PER_HOUR;
/// Amplitudes are divided by this before entering the network ($/MWh).
pub const AMPLITUDE_SCALE: f64 = 100.0;
/// DFT bins below this amplitude are reported as exactly zero.
const ZERO_AMPLITUDE: f64 = 1e-9;
const BINS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time_enc: [f64; 2],
    pub history_enc: [f64; 12],
    pub soc_norm: f64,
}

impl Observation {
    pub fn to_array(&self) -> [f64; OBS_DIM] {
        let mut out = [0.0; OBS_DIM];
        out[..2].copy_from_slice(&self.time_enc);
        out[2..14].copy_from_slice(&self.history_enc);
        out[14] = self.soc_norm;
        out
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if x.len() != OBS_DIM {
            return Err(Error::Shape {
                expected: OBS_DIM,
                got: x.len(),
            });
        }
        let mut history_enc = [0.0; 12];
        history_enc.copy_from_slice(&x[2..14]);
        Ok(Self {
            time_enc: [x[0], x[1]],
            history_enc,
            soc_norm: x[14],
        })
    }
}

pub fn encode_time(hour_of_day: f64) -> [f64; 2] {
    let phase = 2.0 * PI * hour_of_day.rem_euclid(24.0) / 24.0;
    [phase.sin(), phase.cos()]
}

struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

fn twiddles(n: usize) -> &'static Twiddles {
    static SHORT: OnceLock<Twiddles> = OnceLock::new();
    static LONG: OnceLock<Twiddles> = OnceLock::new();
    let build = || {
        let (mut cos, mut sin) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let a = 2.0 * PI * i as f64 / n as f64;
            cos.push(a.cos());
            sin.push(a.sin());
        }
        Twiddles { cos, sin }
    };
    match n {
        SHORT_WINDOW => SHORT.get_or_init(build),
        LONG_WINDOW_HOURS => LONG.get_or_init(build),
        _ => unreachable!("no twiddle table for window {n}"),
    }
}

/// `(amplitude / N, angle)` of DFT bins 1..=3 of `window`.
fn dft_bins(window: &[f64]) -> [f64; 2 * BINS] {
    let n = window.len();
    let table = twiddles(n);
    let mean = window.iter().sum::<f64>() / n as f64;
    let mut out = [0.0; 2 * BINS];
    for k in 1..=BINS {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, x) in window.iter().enumerate() {
            let idx = (k * i) % n;
            let v = x - mean;
            re += v * table.cos[idx];
            im -= v * table.sin[idx];
        }
        let amplitude = re.hypot(im) / n as f64;
        let (amplitude, angle) = if amplitude < ZERO_AMPLITUDE {
            (0.0, 0.0)
        } else {
            (amplitude, im.atan2(re))
        };
        out[2 * (k - 1)] = amplitude;
        out[2 * (k - 1) + 1] = angle;
    }
    out
}

/// Fourier encoding of the short (72 five-minute prices) and long (96
/// hourly means) windows. Amplitudes are in $/MWh, angles in radians.
pub fn encode_history(recent_6h: &[f64], recent_4d: &[f64]) -> Result<[f64; 12]> {
    if recent_6h.len() != SHORT_WINDOW {
        return Err(Error::Shape {
            expected: SHORT_WINDOW,
            got: recent_6h.len(),
        });
    }
    if recent_4d.len() != LONG_WINDOW_HOURS {
        return Err(Error::Shape {
            expected: LONG_WINDOW_HOURS,
            got: recent_4d.len(),
        });
    }
    let mut out = [0.0; 12];
    out[..6].copy_from_slice(&dft_bins(recent_6h));
    out[6..].copy_from_slice(&dft_bins(recent_4d));
    Ok(out)
}

pub fn hourly_means(prices: &[f64]) -> Vec<f64> {
    prices
        .chunks(STEPS_PER_HOUR)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// History encoding as fed to the network (amplitudes rescaled).
///
/// `past` holds every price before the current interval; missing history
/// is left-padded with `pad`.
pub fn history_features(past: &[f64], pad: f64) -> [f64; 12] {
    let window = |len: usize| -> Vec<f64> {
        let have = past.len().min(len);
        let mut w = vec![pad; len - have];
        w.extend_from_slice(&past[past.len() - have..]);
        w
    };
    let short = window(SHORT_WINDOW);
    let long = hourly_means(&window(LONG_WINDOW_STEPS));
    let mut enc = encode_history(&short, &long).expect("window lengths are fixed");
    for amp in enc.iter_mut().step_by(2) {
        *amp /= AMPLITUDE_SCALE;
    }
    enc
}

/// Observation at bid-submission time for the interval starting at
/// `minute_of_day`.
pub fn build_observation(
    minute_of_day: f64,
    past: &[f64],
    pad: f64,
    state: &EssState,
    params: &EssParams,
) -> Observation {
    Observation {
        time_enc: encode_time(minute_of_day / 60.0),
        history_enc: history_features(past, pad),
        soc_norm: (state.soc / params.capacity_mwh).clamp(0.0, 1.0),
    }
}
