//! Gating-variable kinetics.
//!
//! Every gate follows a first-order lag toward a voltage-dependent steady
//! state:
//!
//! ```text
//! tau(v) dx/dt = -x + x_inf(v)
//! ```
//!
//! A gate is either given through its opening/closing rates (`alpha`, `beta`,
//! with `tau = 1/(alpha+beta)` and `x_inf = alpha/(alpha+beta)`) or directly
//! through `tau` and `x_inf`. Channels combine an activation gate and an
//! optional inactivation gate, raised to integer exponents.
//!
//! The built-in libraries (Hodgkin-Huxley squid axon and a modified
//! Connor-Stevens model) are registered under stable string keys so that
//! model structures can be assembled from configuration files.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Shared scalar function of membrane voltage (mV).
pub type VoltageFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Voltage interval (mV) over which all grid-based checks are performed.
pub const WORKING_RANGE: (f64, f64) = (-120.0, 120.0);

/// Half-width of the band around a removable singularity in which the
/// analytic limit is used.
pub const SINGULARITY_GUARD: f64 = 1e-7;

/// Step (mV) of the central differences used for kinetic derivatives.
pub const DERIVATIVE_STEP: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticsError {
    #[error("alpha + beta = {sum} is not a positive finite rate at v = {v} mV")]
    Domain { v: f64, sum: f64 },
    #[error("unknown kinetics key `{0}`")]
    UnknownKey(String),
}

/// `x / (exp(x/k) - 1)`, continued by its limit `k` at `x = 0`.
///
/// This is the classic removable singularity in Hodgkin-Huxley style
/// opening rates.
pub fn vtrap(x: f64, k: f64) -> f64 {
    if x.abs() < SINGULARITY_GUARD {
        k
    } else {
        x / (x / k).exp_m1()
    }
}

/// Uniform 1 mV grid over [`WORKING_RANGE`].
pub fn working_grid() -> Vec<f64> {
    grid(WORKING_RANGE.0, WORKING_RANGE.1, 1.0)
}

/// Inclusive grid `lo, lo+step, ..., hi`.
pub fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

/// Opening and closing rates (1/ms) of a gate.
#[derive(Clone)]
pub struct RateFunctions {
    alpha: VoltageFn,
    beta: VoltageFn,
}

impl RateFunctions {
    pub fn new(
        alpha: impl Fn(f64) -> f64 + Send + Sync + 'static,
        beta: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            alpha: Arc::new(alpha),
            beta: Arc::new(beta),
        }
    }

    pub fn alpha(&self, v: f64) -> f64 {
        (self.alpha)(v)
    }

    pub fn beta(&self, v: f64) -> f64 {
        (self.beta)(v)
    }
}

impl fmt::Debug for RateFunctions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RateFunctions { .. }")
    }
}

#[derive(Clone)]
enum Form {
    Rates(RateFunctions),
    Direct { tau: VoltageFn, x_inf: VoltageFn },
}

/// Kinetics of a single gating variable together with the exponent it
/// carries in the channel conductance.
#[derive(Clone)]
pub struct GateKinetics {
    form: Form,
    exponent: u32,
}

impl fmt::Debug for GateKinetics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let form = match self.form {
            Form::Rates(_) => "rates",
            Form::Direct { .. } => "direct",
        };
        f.debug_struct("GateKinetics")
            .field("form", &form)
            .field("exponent", &self.exponent)
            .finish()
    }
}

impl GateKinetics {
    /// Builds a gate from its rates, checking them on the working grid.
    pub fn from_rates(rates: RateFunctions, exponent: u32) -> Result<Self, KineticsError> {
        Self::from_rates_on(rates, exponent, &working_grid())
    }

    /// Builds a gate from its rates, checking `alpha + beta` on `voltages`.
    pub fn from_rates_on(
        rates: RateFunctions,
        exponent: u32,
        voltages: &[f64],
    ) -> Result<Self, KineticsError> {
        for &v in voltages {
            let sum = rates.alpha(v) + rates.beta(v);
            if !sum.is_finite() || sum <= 0.0 {
                return Err(KineticsError::Domain { v, sum });
            }
        }
        Ok(Self {
            form: Form::Rates(rates),
            exponent,
        })
    }

    pub fn direct(
        tau: impl Fn(f64) -> f64 + Send + Sync + 'static,
        x_inf: impl Fn(f64) -> f64 + Send + Sync + 'static,
        exponent: u32,
    ) -> Self {
        Self {
            form: Form::Direct {
                tau: Arc::new(tau),
                x_inf: Arc::new(x_inf),
            },
            exponent,
        }
    }

    /// Voltage-independent gate, mostly useful in tests.
    pub fn constant(tau: f64, x_inf: f64, exponent: u32) -> Self {
        Self::direct(move |_| tau, move |_| x_inf, exponent)
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    /// `(tau(v), x_inf(v))`, evaluating the rates only once.
    #[inline]
    pub fn eval(&self, v: f64) -> (f64, f64) {
        match &self.form {
            Form::Rates(r) => {
                let a = r.alpha(v);
                let sum = a + r.beta(v);
                (1.0 / sum, a / sum)
            }
            Form::Direct { tau, x_inf } => (tau(v), x_inf(v)),
        }
    }

    pub fn tau(&self, v: f64) -> f64 {
        self.eval(v).0
    }

    pub fn x_inf(&self, v: f64) -> f64 {
        self.eval(v).1
    }

    /// `1 - x_inf(v)`, without cancellation for rate-form gates.
    pub fn x_inf_complement(&self, v: f64) -> f64 {
        match &self.form {
            Form::Rates(r) => {
                let b = r.beta(v);
                b / (r.alpha(v) + b)
            }
            Form::Direct { x_inf, .. } => 1.0 - x_inf(v),
        }
    }

    /// Rates underlying the gate. For directly specified gates they are
    /// reconstructed as `alpha = x_inf/tau`, `beta = (1 - x_inf)/tau`.
    pub fn rates_at(&self, v: f64) -> (f64, f64) {
        match &self.form {
            Form::Rates(r) => (r.alpha(v), r.beta(v)),
            Form::Direct { .. } => {
                let (tau, x) = self.eval(v);
                (x / tau, (1.0 - x) / tau)
            }
        }
    }

    /// `d/dv [(x_inf(v) - x) / tau(v)]`, the voltage sensitivity of the
    /// gate's vector field at gate value `x`.
    pub fn field_voltage_derivative(&self, v: f64, x: f64) -> f64 {
        let h = DERIVATIVE_STEP;
        let (tp, xp) = self.eval(v + h);
        let (tm, xm) = self.eval(v - h);
        ((xp - x) / tp - (xm - x) / tm) / (2.0 * h)
    }

    /// `(min tau, max tau)` over the given voltages.
    pub fn tau_bounds(&self, voltages: &[f64]) -> (f64, f64) {
        voltages
            .iter()
            .map(|&v| self.tau(v))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t), hi.max(t))
            })
    }
}

/// Kinetic part of an ionic channel: `m^a h^b`.
#[derive(Clone, Debug)]
pub struct ChannelKinetics {
    pub activation: GateKinetics,
    /// `None` means the inactivation factor is identically 1.
    pub inactivation: Option<GateKinetics>,
}

impl ChannelKinetics {
    pub fn new(activation: GateKinetics, inactivation: Option<GateKinetics>) -> Self {
        Self {
            activation,
            inactivation,
        }
    }

    /// Gates that carry state, in (activation, inactivation) order.
    /// Gates with a zero exponent do not enter the conductance and are skipped.
    pub fn gates(&self) -> impl Iterator<Item = &GateKinetics> {
        std::iter::once(&self.activation)
            .chain(self.inactivation.as_ref())
            .filter(|g| g.exponent > 0)
    }

    pub fn gate_count(&self) -> usize {
        self.gates().count()
    }

    /// `(activation exponent, inactivation exponent)`.
    pub fn exponents(&self) -> (u32, u32) {
        (
            self.activation.exponent,
            self.inactivation.as_ref().map_or(0, |g| g.exponent),
        )
    }

    /// Fraction of open channels given this channel's gate values.
    #[inline]
    pub fn open_fraction(&self, gates: &[f64]) -> f64 {
        self.gates()
            .zip(gates)
            .fold(1.0, |acc, (g, &x)| acc * x.powi(g.exponent as i32))
    }

    /// Partial derivatives of [`Self::open_fraction`] with respect to each gate.
    pub fn open_fraction_gradient(&self, gates: &[f64]) -> Vec<f64> {
        let kin: Vec<&GateKinetics> = self.gates().collect();
        (0..kin.len())
            .map(|i| {
                kin.iter()
                    .zip(gates)
                    .enumerate()
                    .fold(1.0, |acc, (j, (g, &x))| {
                        let p = g.exponent as i32;
                        if i == j {
                            acc * p as f64 * x.powi(p - 1)
                        } else {
                            acc * x.powi(p)
                        }
                    })
            })
            .collect()
    }

    /// `(min tau, max tau)` over all state-carrying gates.
    pub fn tau_bounds(&self, voltages: &[f64]) -> (f64, f64) {
        self.gates()
            .map(|g| g.tau_bounds(voltages))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
                (lo.min(a), hi.max(b))
            })
    }
}

fn rate_gate(alpha: fn(f64) -> f64, beta: fn(f64) -> f64, exponent: u32) -> GateKinetics {
    GateKinetics::from_rates(RateFunctions::new(alpha, beta), exponent)
        .expect("built-in rates are positive on the working range")
}

/// Hodgkin-Huxley sodium channel, `m^3 h`.
pub fn hh_sodium() -> ChannelKinetics {
    ChannelKinetics::new(
        rate_gate(
            |v| 0.1 * vtrap(-40.0 - v, 10.0),
            |v| 4.0 * ((-v - 65.0) / 18.0).exp(),
            3,
        ),
        Some(rate_gate(
            |v| 0.07 * ((-v - 65.0) / 20.0).exp(),
            |v| 1.0 / (((-35.0 - v) / 10.0).exp() + 1.0),
            1,
        )),
    )
}

/// Hodgkin-Huxley delayed-rectifier potassium channel, `m^4`.
pub fn hh_potassium() -> ChannelKinetics {
    ChannelKinetics::new(
        rate_gate(
            |v| 0.01 * vtrap(-55.0 - v, 10.0),
            |v| 0.125 * ((-v - 65.0) / 80.0).exp(),
            4,
        ),
        None,
    )
}

/// Connor-Stevens sodium channel, `m^3 h`.
pub fn cs_sodium() -> ChannelKinetics {
    ChannelKinetics::new(
        rate_gate(
            |v| 0.38 * vtrap(-29.7 - v, 10.0),
            |v| 15.2 * ((-54.7 - v) / 18.0).exp(),
            3,
        ),
        Some(rate_gate(
            |v| 0.266 * ((-v - 48.0) / 20.0).exp(),
            |v| 3.8 / (((-18.0 - v) / 10.0).exp() + 1.0),
            1,
        )),
    )
}

/// Connor-Stevens delayed-rectifier potassium channel, `m^4`.
pub fn cs_potassium() -> ChannelKinetics {
    ChannelKinetics::new(
        rate_gate(
            |v| 0.019 * vtrap(-45.7 - v, 10.0),
            |v| 0.2375 * ((-55.7 - v) / 80.0).exp(),
            4,
        ),
        None,
    )
}

/// Connor-Stevens A-type potassium channel, `m^3 h`.
///
/// The cube-root activation curve peaks slightly above 1 (about 1.014 near
/// +70 mV); it is clipped to 1 so that gates stay in the unit interval.
pub fn cs_a_type() -> ChannelKinetics {
    ChannelKinetics::new(
        GateKinetics::direct(
            |v| 0.3632 + 1.158 / (1.0 + ((v + 55.96) / 20.12).exp()),
            |v| {
                let ratio =
                    0.0761 * ((v + 94.22) / 31.84).exp() / (1.0 + ((v + 1.17) / 28.93).exp());
                ratio.cbrt().min(1.0)
            },
            3,
        ),
        Some(GateKinetics::direct(
            |v| 1.24 + 2.678 / (1.0 + ((v + 50.0) / 16.027).exp()),
            |v| (1.0 + ((v + 53.3) / 14.54).exp()).powi(-4),
            1,
        )),
    )
}

/// Connor-Stevens calcium channel, `m^2` with a constant 2.35 ms time constant.
pub fn cs_calcium() -> ChannelKinetics {
    ChannelKinetics::new(
        GateKinetics::direct(|_| 2.35, |v| 1.0 / (1.0 + (-0.15 * (v + 50.0)).exp()), 2),
        None,
    )
}

/// Hodgkin-Huxley channels: `[Na, K]`.
pub fn hh_library() -> Vec<ChannelKinetics> {
    vec![hh_sodium(), hh_potassium()]
}

/// Connor-Stevens channels: `[Na, K, A, Ca]`.
pub fn cs_library() -> Vec<ChannelKinetics> {
    vec![cs_sodium(), cs_potassium(), cs_a_type(), cs_calcium()]
}

/// Named registry of channel kinetics.
#[derive(Clone, Debug)]
pub struct KineticsLibrary {
    entries: BTreeMap<String, ChannelKinetics>,
}

impl KineticsLibrary {
    /// Registry holding `hh.na`, `hh.k`, `cs.na`, `cs.k`, `cs.a` and `cs.ca`.
    pub fn builtin() -> Self {
        let mut lib = Self {
            entries: BTreeMap::new(),
        };
        lib.register("hh.na", hh_sodium());
        lib.register("hh.k", hh_potassium());
        lib.register("cs.na", cs_sodium());
        lib.register("cs.k", cs_potassium());
        lib.register("cs.a", cs_a_type());
        lib.register("cs.ca", cs_calcium());
        lib
    }

    pub fn register(&mut self, key: impl Into<String>, kinetics: ChannelKinetics) {
        self.entries.insert(key.into(), kinetics);
    }

    pub fn get(&self, key: &str) -> Result<ChannelKinetics, KineticsError> {
        self.entries
            .get(key)
            .cloned()
            .ok_or_else(|| KineticsError::UnknownKey(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Looks a channel up in the built-in registry.
pub fn builtin_channel(key: &str) -> Result<ChannelKinetics, KineticsError> {
    KineticsLibrary::builtin().get(key)
}
