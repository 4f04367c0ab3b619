//! Excitation and noise sequences, plus the signal-to-noise figure.
//!
//! Gaussian samples come from `rand_distr::StandardNormal` (ziggurat) on a
//! ChaCha20 stream. A seed selects the key; the reference and the noise use
//! different stream ids, so one seed drives both without correlation.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REFERENCE_STREAM: u64 = 1;
pub const NOISE_STREAM: u64 = 2;

/// Pole of the reference smoothing filter, in 1/ms.
pub const DEFAULT_FILTER_POLE: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("signal has {signal} samples but noise has {noise}")]
    LengthMismatch { signal: usize, noise: usize },
}

/// Coefficients of `y[k] = -a1 y[k-1] - a2 y[k-2] + b1 x[k-1] + b2 x[k-2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recurrence {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
}

impl Recurrence {
    /// Steady-state gain `(b1 + b2) / (1 + a1 + a2)`.
    pub fn dc_gain(&self) -> f64 {
        (self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Roots of `z^2 + a1 z + a2`, assumed real.
    pub fn poles(&self) -> (f64, f64) {
        let disc = (self.a1 * self.a1 - 4.0 * self.a2).max(0.0).sqrt();
        ((-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0)
    }

    /// Filters `x` from zero initial state.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = Vec::with_capacity(x.len());
        let (mut y1, mut y2, mut x1, mut x2) = (0.0, 0.0, 0.0, 0.0);
        for &xk in x {
            let yk = -self.a1 * y1 - self.a2 * y2 + self.b1 * x1 + self.b2 * x2;
            y.push(yk);
            (y2, y1, x2, x1) = (y1, yk, x1, xk);
        }
        y
    }
}

/// Zero-order-hold discretization of `gain / (s + pole)^2` with period `ts`.
pub fn zoh_second_order_lag(pole: f64, gain: f64, ts: f64) -> Recurrence {
    assert!(pole > 0.0 && ts > 0.0, "pole and ts must be positive");
    let p = (-pole * ts).exp();
    let at = pole * ts;
    let k = gain / (pole * pole);
    Recurrence {
        a1: -2.0 * p,
        a2: p * p,
        b1: k * (1.0 - p - at * p),
        b2: k * (p * p - p + at * p),
    }
}

/// Reference `offset + clip(F w)` with `w` white Gaussian of std `sigma`
/// and `F` the unit-DC-gain filter `pole^2 / (s + pole)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilteredNoiseSpec {
    pub offset: f64,
    pub sigma: f64,
    #[serde(default = "default_pole")]
    pub pole: f64,
    pub truncation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_pole() -> f64 {
    DEFAULT_FILTER_POLE
}

/// Zero-mean white Gaussian noise of std `sigma`, clipped to `±truncation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhiteNoiseSpec {
    pub sigma: f64,
    pub truncation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn gaussian_stream(seed: u64, stream: u64, sigma: f64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect()
}

pub fn generate_reference(spec: &FilteredNoiseSpec, ts: f64, n: usize) -> Vec<f64> {
    let white = gaussian_stream(spec.seed, REFERENCE_STREAM, spec.sigma, n);
    let filter = zoh_second_order_lag(spec.pole, spec.pole * spec.pole, ts);
    filter
        .apply(&white)
        .into_iter()
        .map(|x| spec.offset + x.clamp(-spec.truncation, spec.truncation))
        .collect()
}

pub fn generate_noise(spec: &WhiteNoiseSpec, n: usize) -> Vec<f64> {
    gaussian_stream(spec.seed, NOISE_STREAM, spec.sigma, n)
        .into_iter()
        .map(|x| x.clamp(-spec.truncation, spec.truncation))
        .collect()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Sample autocorrelation coefficient at `lag`.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let den: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    let num: f64 = x
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum();
    num / den
}

/// `10 log10(var(y + e/c) / var(e/c))`: the power of the noise-free part
/// of the output against the noise it carries. Returns `+inf` for `e ≡ 0`.
pub fn snr_db(y: &[f64], e: &[f64], c: f64) -> Result<f64, SignalError> {
    if y.len() != e.len() {
        return Err(SignalError::LengthMismatch {
            signal: y.len(),
            noise: e.len(),
        });
    }
    let scaled: Vec<f64> = e.iter().map(|x| x / c).collect();
    let noise = variance(&scaled);
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    let clean: Vec<f64> = y.iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok(10.0 * (variance(&clean) / noise).log10())
}

/// `"inf"` for the noise-free case, two decimals otherwise.
pub fn format_db(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.2}")
    }
}
