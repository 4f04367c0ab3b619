//! Conductance-based membrane models and their forward-Euler closed loop.
//!
//! The data-generating system is the discrete-time stochastic loop
//!
//! ```text
//! c (v[k+1] - v[k]) / ts = -g(v[k], w[k]) + gamma (r[k] - v[k]) + e[k]
//!     (w[k+1] - w[k]) / ts = A(v[k]) w[k] + b(v[k])
//! ```
//!
//! with `g` the total internal (leak plus ionic) current. Gate values are
//! laid out channel by channel as `(m1, h1, m2, h2, ...)`, skipping gates
//! whose exponent is zero; the estimator relies on the same layout.

use thiserror::Error;

use crate::kinetics::{self, ChannelKinetics, GateKinetics, KineticsError, WORKING_RANGE};
use crate::trajectory::Trajectory;

/// Voltages beyond this magnitude (mV) abort a simulation.
pub const DIVERGENCE_LIMIT: f64 = 10.0 * WORKING_RANGE.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid closed-loop configuration: {0}")]
    InvalidConfig(String),
    #[error("sampling period {ts} ms exceeds the smallest gate time constant {tau_min} ms on [{v_min}, {v_max}] mV")]
    StepTooLarge {
        ts: f64,
        tau_min: f64,
        v_min: f64,
        v_max: f64,
    },
    #[error("{name} sequence has {len} samples, {needed} needed")]
    InputTooShort {
        name: &'static str,
        len: usize,
        needed: usize,
    },
    #[error("voltage diverged to {v} mV at step {step}")]
    Divergence { step: usize, v: f64 },
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

/// Closed voltage interval in mV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageRange {
    pub min: f64,
    pub max: f64,
}

impl VoltageRange {
    pub fn new(min: f64, max: f64) -> Self {
        assert!(min < max, "empty voltage range [{min}, {max}]");
        Self { min, max }
    }

    pub fn working() -> Self {
        Self::new(WORKING_RANGE.0, WORKING_RANGE.1)
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.min..=self.max).contains(&v)
    }

    pub fn intersect(&self, other: &Self) -> Self {
        Self::new(self.min.max(other.min), self.max.min(other.max))
    }

    /// 1 mV grid, always including both endpoints.
    pub fn grid(&self) -> Vec<f64> {
        let mut g: Vec<f64> = kinetics::grid(self.min.ceil(), self.max.floor(), 1.0);
        if g.first() != Some(&self.min) {
            g.insert(0, self.min);
        }
        if g.last() != Some(&self.max) {
            g.push(self.max);
        }
        g
    }
}

/// An ionic channel with its maximal conductance (mS/cm²) and reversal
/// potential (mV).
#[derive(Clone, Debug)]
pub struct Channel {
    pub key: String,
    pub g_max: f64,
    pub nu: f64,
    pub kinetics: ChannelKinetics,
}

impl Channel {
    pub fn new(key: impl Into<String>, g_max: f64, nu: f64, kinetics: ChannelKinetics) -> Self {
        Self {
            key: key.into(),
            g_max,
            nu,
            kinetics,
        }
    }

    /// Channel taken from the built-in kinetics registry.
    pub fn builtin(key: &str, g_max: f64, nu: f64) -> Result<Self, KineticsError> {
        Ok(Self::new(key, g_max, nu, kinetics::builtin_channel(key)?))
    }
}

/// Flattened view of the gates of a channel list.
#[derive(Clone, Debug)]
pub struct GateLayout {
    gates: Vec<GateKinetics>,
    /// Start offset of each channel's gates in the state vector.
    offsets: Vec<usize>,
}

impl GateLayout {
    pub fn new<'a>(channels: impl IntoIterator<Item = &'a ChannelKinetics>) -> Self {
        let mut gates = Vec::new();
        let mut offsets = Vec::new();
        for ch in channels {
            offsets.push(gates.len());
            gates.extend(ch.gates().cloned());
        }
        Self { gates, offsets }
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn gates(&self) -> &[GateKinetics] {
        &self.gates
    }

    /// Slice of `w` belonging to channel `j`.
    pub fn channel_slice<'w>(&self, w: &'w [f64], j: usize) -> &'w [f64] {
        let end = self.offsets.get(j + 1).copied().unwrap_or(self.gates.len());
        &w[self.offsets[j]..end]
    }

    pub fn channel_offset(&self, j: usize) -> usize {
        self.offsets[j]
    }

    pub fn steady_state(&self, v: f64) -> GateState {
        GateState(self.gates.iter().map(|g| g.x_inf(v)).collect())
    }

    /// One forward-Euler step of every gate at voltage `v`, in place.
    #[inline]
    pub fn step(&self, w: &mut [f64], v: f64, ts: f64) {
        for (x, g) in w.iter_mut().zip(&self.gates) {
            let (tau, x_inf) = g.eval(v);
            let k = ts / tau;
            *x = *x * (1.0 - k) + k * x_inf;
        }
    }

    /// Smallest and largest gate time constant over `range`.
    pub fn tau_bounds(&self, range: &VoltageRange) -> (f64, f64) {
        let grid = range.grid();
        self.gates
            .iter()
            .map(|g| g.tau_bounds(&grid))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
                (lo.min(a), hi.max(b))
            })
    }
}

/// Vector of gating values in `[0, 1]^n`, ordered `(m1, h1, m2, ...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState(pub Vec<f64>);

impl GateState {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn in_unit_box(&self) -> bool {
        self.0.iter().all(|x| (0.0..=1.0).contains(x))
    }
}

/// One forward-Euler step of a single gate:
/// `x + ts/tau (x_inf - x)`, written as a convex combination.
pub fn gate_step(kinetics: &GateKinetics, x: f64, v: f64, ts: f64) -> f64 {
    let (tau, x_inf) = kinetics.eval(v);
    let k = ts / tau;
    x * (1.0 - k) + k * x_inf
}

/// Membrane model: capacitance (µF/cm²), leak and a list of channels.
#[derive(Clone, Debug)]
pub struct ConductanceModel {
    pub c: f64,
    pub leak_g: f64,
    pub leak_nu: f64,
    channels: Vec<Channel>,
    layout: GateLayout,
}

impl ConductanceModel {
    pub fn new(
        c: f64,
        leak_g: f64,
        leak_nu: f64,
        channels: Vec<Channel>,
    ) -> Result<Self, SimulationError> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(SimulationError::InvalidModel(format!(
                "capacitance {c} must be positive"
            )));
        }
        if !(leak_g > 0.0 && leak_g.is_finite()) {
            return Err(SimulationError::InvalidModel(format!(
                "leak conductance {leak_g} must be positive"
            )));
        }
        if let Some(ch) = channels
            .iter()
            .find(|ch| !(ch.g_max >= 0.0 && ch.g_max.is_finite()))
        {
            return Err(SimulationError::InvalidModel(format!(
                "channel {} has maximal conductance {}",
                ch.key, ch.g_max
            )));
        }
        let layout = GateLayout::new(channels.iter().map(|ch| &ch.kinetics));
        Ok(Self {
            c,
            leak_g,
            leak_nu,
            channels,
            layout,
        })
    }

    /// The squid axon model: `c = 1`, leak `0.3 (v + 54.4)`,
    /// `120 m^3 h (v - 55)` and `36 n^4 (v + 77)`.
    pub fn hodgkin_huxley() -> Self {
        Self::new(
            1.0,
            0.3,
            -54.4,
            vec![
                Channel::new("hh.na", 120.0, 55.0, kinetics::hh_sodium()),
                Channel::new("hh.k", 36.0, -77.0, kinetics::hh_potassium()),
            ],
        )
        .expect("valid constants")
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn layout(&self) -> &GateLayout {
        &self.layout
    }

    pub fn gate_count(&self) -> usize {
        self.layout.len()
    }

    pub fn steady_state(&self, v: f64) -> GateState {
        self.layout.steady_state(v)
    }

    /// All reversal potentials, leak first.
    pub fn reversal_potentials(&self) -> Vec<f64> {
        std::iter::once(self.leak_nu)
            .chain(self.channels.iter().map(|ch| ch.nu))
            .collect()
    }

    /// Open fraction `m^a h^b` of every channel.
    pub fn open_fractions(&self, w: &[f64]) -> Vec<f64> {
        (0..self.channels.len())
            .map(|j| {
                self.channels[j]
                    .kinetics
                    .open_fraction(self.layout.channel_slice(w, j))
            })
            .collect()
    }

    /// Total internal current `g(v, w)` (µA/cm²).
    #[inline]
    pub fn internal_current(&self, v: f64, w: &[f64]) -> f64 {
        let mut g = self.leak_g * (v - self.leak_nu);
        for (j, ch) in self.channels.iter().enumerate() {
            let p = ch.kinetics.open_fraction(self.layout.channel_slice(w, j));
            g += ch.g_max * p * (v - ch.nu);
        }
        g
    }

    /// `dg/dv` at fixed gates: the total instantaneous conductance.
    pub fn conductance(&self, w: &[f64]) -> f64 {
        self.leak_g
            + self
                .channels
                .iter()
                .enumerate()
                .map(|(j, ch)| {
                    ch.g_max * ch.kinetics.open_fraction(self.layout.channel_slice(w, j))
                })
                .sum::<f64>()
    }

    /// `dg/dw`, one entry per gate in layout order.
    pub fn current_gate_gradient(&self, v: f64, w: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(w.len());
        for (j, ch) in self.channels.iter().enumerate() {
            let grad = ch
                .kinetics
                .open_fraction_gradient(self.layout.channel_slice(w, j));
            out.extend(grad.into_iter().map(|d| ch.g_max * d * (v - ch.nu)));
        }
        out
    }

    /// Smallest and largest gate time constant over `range`.
    pub fn tau_bounds(&self, range: &VoltageRange) -> (f64, f64) {
        self.layout.tau_bounds(range)
    }
}

/// Internal current of `model` at `(v, w)`.
pub fn internal_current(model: &ConductanceModel, v: f64, w: &GateState) -> f64 {
    model.internal_current(v, w.as_slice())
}

/// Voltage interval that the clamp brings trajectories back into when
/// `|r|, |e| <= beta`: it spans every reversal potential and
/// `±beta (gamma + 1) / gamma`.
pub fn clamp_interval(model: &ConductanceModel, gamma: f64, beta: f64) -> VoltageRange {
    let reach = beta * (gamma + 1.0) / gamma;
    let nus = model.reversal_potentials();
    let lo = nus.iter().copied().fold(-reach, f64::min);
    let hi = nus.iter().copied().fold(reach, f64::max);
    VoltageRange::new(lo, hi)
}

/// Settings of one closed-loop run.
#[derive(Clone, Debug)]
pub struct ClosedLoopConfig {
    /// Feedback gain (mS/cm²). Zero leaves the membrane in open loop.
    pub gamma: f64,
    /// Sampling period (ms).
    pub ts: f64,
    pub v0: f64,
    pub w0: GateState,
    pub steps: usize,
    /// Voltages over which `ts <= tau_min` is required.
    pub certified_range: VoltageRange,
}

impl ClosedLoopConfig {
    /// Starts from rest at `v0`, with gates at their steady state.
    pub fn at_rest(model: &ConductanceModel, gamma: f64, ts: f64, v0: f64, steps: usize) -> Self {
        Self {
            gamma,
            ts,
            v0,
            w0: model.steady_state(v0),
            steps,
            certified_range: VoltageRange::working(),
        }
    }

    pub fn with_certified_range(mut self, range: VoltageRange) -> Self {
        self.certified_range = range;
        self
    }

    pub fn validate(&self, model: &ConductanceModel) -> Result<(), SimulationError> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(SimulationError::InvalidConfig(format!(
                "gain {} must be >= 0",
                self.gamma
            )));
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(SimulationError::InvalidConfig(format!(
                "sampling period {} must be positive",
                self.ts
            )));
        }
        if self.w0.0.len() != model.gate_count() {
            return Err(SimulationError::InvalidConfig(format!(
                "initial gate state has {} entries, model has {} gates",
                self.w0.0.len(),
                model.gate_count()
            )));
        }
        if !self.w0.in_unit_box() {
            return Err(SimulationError::InvalidConfig(
                "initial gate state outside [0, 1]".into(),
            ));
        }
        if !model.layout().is_empty() {
            let (tau_min, _) = model.tau_bounds(&self.certified_range);
            if self.ts > tau_min {
                return Err(SimulationError::StepTooLarge {
                    ts: self.ts,
                    tau_min,
                    v_min: self.certified_range.min,
                    v_max: self.certified_range.max,
                });
            }
        }
        Ok(())
    }
}

/// Runs the forward-Euler closed loop for `config.steps` steps.
///
/// `reference` and `noise` are consumed sample by sample; `noise[k]` only
/// affects `v[k+1]`.
pub fn simulate_closed_loop(
    model: &ConductanceModel,
    config: &ClosedLoopConfig,
    reference: &[f64],
    noise: &[f64],
) -> Result<Trajectory, SimulationError> {
    config.validate(model)?;
    let n = config.steps;
    for (name, len) in [("reference", reference.len()), ("noise", noise.len())] {
        if len < n {
            return Err(SimulationError::InputTooShort {
                name,
                len,
                needed: n,
            });
        }
    }
    let nw = model.gate_count();
    let (ts, gamma, c) = (config.ts, config.gamma, model.c);

    let mut traj = Trajectory::with_capacity(nw, ts, gamma, n);
    let mut v = config.v0;
    let mut w = config.w0.0.clone();
    traj.push_state(v, &w);
    for k in 0..n {
        let (r, e) = (reference[k], noise[k]);
        let g = model.internal_current(v, &w);
        let u1 = gamma * (r - v);
        let v_next = v + (ts / c) * (-g + u1 + e);
        if !v_next.is_finite() || v_next.abs() > DIVERGENCE_LIMIT {
            return Err(SimulationError::Divergence {
                step: k + 1,
                v: v_next,
            });
        }
        model.layout().step(&mut w, v, ts);
        traj.push_input(r, e, u1, -(v_next - v) / ts);
        v = v_next;
        traj.push_state(v, &w);
    }
    Ok(traj)
}

/// `y[k] = -(v[k+1] - v[k]) / ts`, recomputed from the stored voltages.
pub fn forward_difference_output(traj: &Trajectory) -> Vec<f64> {
    let ts = traj.ts();
    traj.v().windows(2).map(|p| -(p[1] - p[0]) / ts).collect()
}
