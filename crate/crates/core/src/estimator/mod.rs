//! Prediction-error identification of the inverse membrane dynamics.
//!
//! The predictor runs the candidate gate kinetics open loop on the measured
//! voltage `u2 = v` and predicts `y[k] = -(v[k+1] - v[k]) / ts` as
//! `ψ[k]·θ` with
//!
//! ```text
//! ψ = [1, p_1 .. p_n, u2, u2 p_1 .. u2 p_n, u1]
//! θ = [θ1_0 .. θ1_n, θ2_0 .. θ2_n, θ3]
//! ```
//!
//! where `p_j = m_j^a h_j^b` is channel `j`'s open fraction. For the true
//! model `θ1_j = -g_j ν_j / c`, `θ2_j = g_j / c` (index 0 is the leak) and
//! `θ3 = -1/c`, so the residual at the truth is `-e[k] / c`.

pub mod qr;

use std::fmt::Write as _;

use thiserror::Error;

use crate::kinetics::{self, ChannelKinetics, KineticsError};
use crate::neuron::{ConductanceModel, GateLayout, GateState, VoltageRange};
use crate::trajectory::Trajectory;

pub use qr::{IncrementalQr, RankDeficiency};

/// `|θ2_j|` below this fraction of `max |θ2|` leaves `ν_j` undetermined.
pub const INDETERMINATE_FRACTION: f64 = 1e-3;

/// Minimum eigenvalue over maximum eigenvalue required of the
/// column-equilibrated Gram matrix.
pub const PERSISTENCY_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("model structure: {0}")]
    Structure(String),
    #[error("sequences are misaligned: {0}")]
    Misaligned(String),
    #[error("regressor is rank deficient (singular value ratio {ratio:.3e}); near-null direction {direction:?}")]
    RankDeficient { direction: Vec<f64>, ratio: f64 },
    #[error("regressor is not persistently exciting (equilibrated condition number {:.3e})", .0.equilibrated_condition)]
    Persistency(PersistencyReport),
    #[error("invalid estimate: {0}")]
    InvalidEstimate(String),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

impl From<RankDeficiency> for EstimationError {
    fn from(r: RankDeficiency) -> Self {
        Self::RankDeficient {
            direction: r.direction,
            ratio: r.ratio,
        }
    }
}

/// Candidate channel set of the predictor.
#[derive(Clone, Debug)]
pub struct ModelStructure {
    keys: Vec<String>,
    channels: Vec<ChannelKinetics>,
    layout: GateLayout,
    initial_gates: GateState,
    ts: f64,
}

impl ModelStructure {
    /// `ts` must not exceed the smallest gate time constant over `range`.
    pub fn new(
        channels: Vec<(String, ChannelKinetics)>,
        initial_gates: GateState,
        ts: f64,
        range: &VoltageRange,
    ) -> Result<Self, EstimationError> {
        if channels.is_empty() {
            return Err(EstimationError::Structure(
                "at least one channel is required".into(),
            ));
        }
        let (keys, channels): (Vec<_>, Vec<_>) = channels.into_iter().unzip();
        let layout = GateLayout::new(&channels);
        if initial_gates.0.len() != layout.len() {
            return Err(EstimationError::Structure(format!(
                "{} initial gate values for {} gates",
                initial_gates.0.len(),
                layout.len()
            )));
        }
        if !initial_gates.in_unit_box() {
            return Err(EstimationError::Structure(
                "initial gates outside [0, 1]".into(),
            ));
        }
        let (tau_min, _) = layout.tau_bounds(range);
        if !(ts > 0.0 && ts <= tau_min) {
            return Err(EstimationError::Structure(format!(
                "sampling period {ts} ms exceeds tau_min = {tau_min} ms"
            )));
        }
        Ok(Self {
            keys,
            channels,
            layout,
            initial_gates,
            ts,
        })
    }

    /// Channels from the built-in registry, gates starting at steady state
    /// for `v0`.
    pub fn from_keys<S: AsRef<str>>(
        keys: &[S],
        ts: f64,
        v0: f64,
        range: &VoltageRange,
    ) -> Result<Self, EstimationError> {
        let channels = keys
            .iter()
            .map(|k| {
                Ok((
                    k.as_ref().to_string(),
                    kinetics::builtin_channel(k.as_ref())?,
                ))
            })
            .collect::<Result<Vec<_>, KineticsError>>()?;
        let w0 = GateLayout::new(channels.iter().map(|(_, c)| c)).steady_state(v0);
        Self::new(channels, w0, ts, range)
    }

    /// The channels of `model`, in its order.
    pub fn from_model(
        model: &ConductanceModel,
        initial_gates: GateState,
        ts: f64,
        range: &VoltageRange,
    ) -> Result<Self, EstimationError> {
        let channels = model
            .channels()
            .iter()
            .map(|ch| (ch.key.clone(), ch.kinetics.clone()))
            .collect();
        Self::new(channels, initial_gates, ts, range)
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn channels(&self) -> &[ChannelKinetics] {
        &self.channels
    }

    pub fn layout(&self) -> &GateLayout {
        &self.layout
    }

    pub fn initial_gates(&self) -> &GateState {
        &self.initial_gates
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// `2n + 3`: leak and channel pairs plus the feedback column.
    pub fn column_count(&self) -> usize {
        2 * self.channels.len() + 3
    }

    fn open_fractions_into(&self, w: &[f64], out: &mut [f64]) {
        for (j, ch) in self.channels.iter().enumerate() {
            out[j] = ch.open_fraction(self.layout.channel_slice(w, j));
        }
    }
}

/// Parameter blocks in regressor column order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub theta3: f64,
}

impl ParameterVector {
    pub fn from_slice(theta: &[f64]) -> Self {
        assert!(theta.len() >= 3 && theta.len() % 2 == 1, "length 2n + 3");
        let n1 = (theta.len() - 1) / 2;
        Self {
            theta1: theta[..n1].to_vec(),
            theta2: theta[n1..2 * n1].to_vec(),
            theta3: theta[2 * n1],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.theta1.clone();
        v.extend(&self.theta2);
        v.push(self.theta3);
        v
    }

    pub fn len(&self) -> usize {
        self.theta1.len() + self.theta2.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Names matching [`ParameterVector::to_vec`] order.
    pub fn labels(&self) -> Vec<String> {
        let n = self.theta1.len();
        (0..n)
            .map(|j| format!("theta1_{j}"))
            .chain((0..n).map(|j| format!("theta2_{j}")))
            .chain(std::iter::once("theta3".to_string()))
            .collect()
    }

    /// The parameters a structure should converge to when identifying
    /// `model`. Channels missing from the model get zero entries.
    pub fn truth<S: AsRef<str>>(model: &ConductanceModel, keys: &[S]) -> Self {
        let c = model.c;
        let mut theta1 = vec![-model.leak_g * model.leak_nu / c];
        let mut theta2 = vec![model.leak_g / c];
        for key in keys {
            let (g, nu) = model
                .channels()
                .iter()
                .find(|ch| ch.key == key.as_ref())
                .map_or((0.0, 0.0), |ch| (ch.g_max, ch.nu));
            theta1.push(-g * nu / c);
            theta2.push(g / c);
        }
        Self {
            theta1,
            theta2,
            theta3: -1.0 / c,
        }
    }

    pub fn dot(&self, row: &[f64]) -> f64 {
        let n = self.theta1.len();
        let a: f64 = self.theta1.iter().zip(&row[..n]).map(|(t, x)| t * x).sum();
        let b: f64 = self
            .theta2
            .iter()
            .zip(&row[n..2 * n])
            .map(|(t, x)| t * x)
            .sum();
        a + b + self.theta3 * row[2 * n]
    }
}

/// Row-major `N × (2n + 3)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorMatrix {
    cols: usize,
    data: Vec<f64>,
}

impl RegressorMatrix {
    pub fn from_rows(cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % cols, 0);
        Self { cols, data }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Rows `from..`, as a new matrix.
    pub fn tail(&self, from: usize) -> Self {
        Self {
            cols: self.cols,
            data: self.data[from * self.cols..].to_vec(),
        }
    }
}

/// Predicted gates, `N + 1` rows of `n_gates` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrajectory {
    n_gates: usize,
    data: Vec<f64>,
}

impl GateTrajectory {
    pub fn len(&self) -> usize {
        self.data.len() / self.n_gates.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_gates..(k + 1) * self.n_gates]
    }
}

/// Runs the structure's gates on the measured voltage only. Row `k` holds
/// the gates after consuming `u2[0..k]`.
pub fn simulate_predictor_gates(structure: &ModelStructure, u2: &[f64]) -> GateTrajectory {
    let nw = structure.layout.len();
    let mut data = Vec::with_capacity((u2.len() + 1) * nw);
    let mut w = structure.initial_gates.0.clone();
    data.extend_from_slice(&w);
    for &v in u2 {
        structure.layout.step(&mut w, v, structure.ts);
        data.extend_from_slice(&w);
    }
    GateTrajectory { n_gates: nw, data }
}

/// One row per sample `k < N`, built from `gates.at(k)`, `u1[k]`, `u2[k]`.
pub fn build_regressor(
    gates: &GateTrajectory,
    u1: &[f64],
    u2: &[f64],
    structure: &ModelStructure,
) -> Result<RegressorMatrix, EstimationError> {
    let n = u1.len();
    if u2.len() != n || gates.len() < n {
        return Err(EstimationError::Misaligned(format!(
            "u1 {}, u2 {}, gates {}",
            n,
            u2.len(),
            gates.len()
        )));
    }
    let nm = structure.channel_count();
    let cols = structure.column_count();
    let mut data = vec![0.0; n * cols];
    let mut p = vec![0.0; nm];
    for (k, row) in data.chunks_exact_mut(cols).enumerate() {
        structure.open_fractions_into(gates.at(k), &mut p);
        row[0] = 1.0;
        row[1..=nm].copy_from_slice(&p);
        row[nm + 1] = u2[k];
        for j in 0..nm {
            row[nm + 2 + j] = u2[k] * p[j];
        }
        row[cols - 1] = u1[k];
    }
    Ok(RegressorMatrix { cols, data })
}

/// Conditioning of `ΨᵀΨ / N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PersistencyReport {
    pub rows: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub condition: f64,
    /// Condition number after scaling every column to unit norm.
    pub equilibrated_condition: f64,
    pub passed: bool,
}

impl PersistencyReport {
    pub fn from_qr(qr: &IncrementalQr) -> Self {
        let n = qr.rows() as f64;
        let sv = qr.r_matrix().singular_values();
        let max = sv.max();
        let min = sv.min();
        let (eq, _) = qr.equilibrated_spectrum();
        let eq_ratio = (eq[eq.len() - 1] / eq[0]).powi(2);
        Self {
            rows: qr.rows(),
            min_eigenvalue: min * min / n,
            max_eigenvalue: max * max / n,
            condition: (max / min).powi(2),
            equilibrated_condition: 1.0 / eq_ratio,
            passed: eq_ratio > PERSISTENCY_THRESHOLD,
        }
    }
}

/// Eigenvalue spread of `ΨᵀΨ / N`. Passes when the column-equilibrated
/// matrix has minimum over maximum eigenvalue above 1e-10.
pub fn persistency_check(psi: &RegressorMatrix) -> PersistencyReport {
    let mut qr = IncrementalQr::new(psi.cols());
    for row in psi.iter_rows() {
        qr.push_row(row, 0.0);
    }
    PersistencyReport::from_qr(&qr)
}

fn check_lengths(psi: &RegressorMatrix, y: &[f64]) -> Result<(), EstimationError> {
    if psi.rows() != y.len() {
        return Err(EstimationError::Misaligned(format!(
            "{} regressor rows, {} outputs",
            psi.rows(),
            y.len()
        )));
    }
    Ok(())
}

pub fn least_squares(psi: &RegressorMatrix, y: &[f64]) -> Result<ParameterVector, EstimationError> {
    check_lengths(psi, y)?;
    let mut qr = IncrementalQr::new(psi.cols());
    for (row, &yk) in psi.iter_rows().zip(y) {
        qr.push_row(row, yk);
    }
    Ok(ParameterVector::from_slice(&qr.solve()?))
}

/// Conductance and reversal potential of one current.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEstimate {
    pub key: String,
    pub g: f64,
    /// `None` when the channel's conductance estimate is negligible.
    pub nu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalParameters {
    pub c: f64,
    pub leak: ChannelEstimate,
    pub channels: Vec<ChannelEstimate>,
}

/// `c = -1/θ3`, `g_j = -θ2_j/θ3`, `ν_j = -θ1_j/θ2_j`.
pub fn recover_physical<S: AsRef<str>>(
    theta: &ParameterVector,
    keys: &[S],
) -> Result<PhysicalParameters, EstimationError> {
    if !(theta.theta3 != 0.0 && theta.theta3.is_finite()) {
        return Err(EstimationError::InvalidEstimate(format!(
            "theta3 = {}",
            theta.theta3
        )));
    }
    if keys.len() + 1 != theta.theta1.len() {
        return Err(EstimationError::Misaligned(format!(
            "{} channel keys for {} parameter pairs",
            keys.len(),
            theta.theta1.len()
        )));
    }
    let scale = theta.theta2.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let estimate = |j: usize, key: &str| {
        let (t1, t2) = (theta.theta1[j], theta.theta2[j]);
        let nu = (t2 != 0.0 && t2.abs() >= INDETERMINATE_FRACTION * scale).then(|| -t1 / t2);
        ChannelEstimate {
            key: key.to_string(),
            g: -t2 / theta.theta3,
            nu,
        }
    };
    Ok(PhysicalParameters {
        c: -1.0 / theta.theta3,
        leak: estimate(0, "leak"),
        channels: keys
            .iter()
            .enumerate()
            .map(|(j, k)| estimate(j + 1, k.as_ref()))
            .collect(),
    })
}

/// Estimate after the first `n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryPoint {
    pub n: usize,
    pub theta: ParameterVector,
    /// `|θ̄ - θ̂|` per entry, empty when no truth was given.
    pub abs_error: Vec<f64>,
}

/// Solves on every prefix length in `checkpoints` with one pass over the
/// data.
pub fn error_history(
    psi: &RegressorMatrix,
    y: &[f64],
    checkpoints: &[usize],
    truth: Option<&ParameterVector>,
) -> Result<Vec<HistoryPoint>, EstimationError> {
    check_lengths(psi, y)?;
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EstimationError::Misaligned(
            "checkpoints must increase".into(),
        ));
    }
    if let Some(&last) = checkpoints.last() {
        if last > y.len() {
            return Err(EstimationError::Misaligned(format!(
                "checkpoint {last} beyond {} rows",
                y.len()
            )));
        }
    }
    let mut qr = IncrementalQr::new(psi.cols());
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    for (k, (row, &yk)) in psi.iter_rows().zip(y).enumerate() {
        qr.push_row(row, yk);
        if next.peek() == Some(&&(k + 1)) {
            next.next();
            let theta = ParameterVector::from_slice(&qr.solve()?);
            let abs_error = truth.map_or_else(Vec::new, |t| {
                t.to_vec()
                    .iter()
                    .zip(theta.to_vec())
                    .map(|(a, b)| (a - b).abs())
                    .collect()
            });
            out.push(HistoryPoint {
                n: k + 1,
                theta,
                abs_error,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EstimationResult {
    pub theta: ParameterVector,
    pub physical: PhysicalParameters,
    pub persistency: PersistencyReport,
    pub residual_variance: f64,
    pub history: Vec<HistoryPoint>,
}

/// Predictor, regressor and least squares on `traj`, dropping the first
/// `discard` samples. Checkpoints count rows after the discard.
pub fn estimate(
    structure: &ModelStructure,
    traj: &Trajectory,
    discard: usize,
    checkpoints: &[usize],
    truth: Option<&ParameterVector>,
) -> Result<EstimationResult, EstimationError> {
    if discard >= traj.len() {
        return Err(EstimationError::Misaligned(format!(
            "discarding {discard} of {} samples",
            traj.len()
        )));
    }
    let gates = simulate_predictor_gates(structure, traj.u2());
    let psi = build_regressor(&gates, traj.u1(), traj.u2(), structure)?.tail(discard);
    drop(gates);
    let y = &traj.y()[discard..];
    let mut qr = IncrementalQr::new(psi.cols());
    for (row, &yk) in psi.iter_rows().zip(y) {
        qr.push_row(row, yk);
    }
    let persistency = PersistencyReport::from_qr(&qr);
    if !persistency.passed {
        return Err(EstimationError::Persistency(persistency));
    }
    let theta = ParameterVector::from_slice(&qr.solve()?);
    let physical = recover_physical(&theta, structure.keys())?;
    let history = error_history(&psi, y, checkpoints, truth)?;
    Ok(EstimationResult {
        residual_variance: qr.rss() / y.len() as f64,
        theta,
        physical,
        persistency,
        history,
    })
}

impl EstimationResult {
    /// `parameter,true,estimate,abs_error` rows for θ followed by the
    /// physical parameters.
    pub fn report_csv(&self, truth: Option<(&ParameterVector, &ConductanceModel)>) -> String {
        let mut s = String::from("parameter,true,estimate,abs_error\n");
        let fmt = |x: Option<f64>| x.map_or_else(|| "NaN".to_string(), |v| format!("{v:.10e}"));
        let est = self.theta.to_vec();
        let tru = truth.map(|(t, _)| t.to_vec());
        for (i, label) in self.theta.labels().iter().enumerate() {
            let t = tru.as_ref().map(|t| t[i]);
            let _ = writeln!(
                s,
                "{label},{},{},{}",
                fmt(t),
                fmt(Some(est[i])),
                fmt(t.map(|t| (t - est[i]).abs()))
            );
        }
        let model = truth.map(|(_, m)| m);
        let mut row = |name: String, t: Option<f64>, e: Option<f64>| {
            let err = t.zip(e).map(|(a, b)| (a - b).abs());
            let _ = writeln!(s, "{name},{},{},{}", fmt(t), fmt(e), fmt(err));
        };
        row("c".into(), model.map(|m| m.c), Some(self.physical.c));
        row(
            "g_leak".into(),
            model.map(|m| m.leak_g),
            Some(self.physical.leak.g),
        );
        row(
            "nu_leak".into(),
            model.map(|m| m.leak_nu),
            self.physical.leak.nu,
        );
        for ch in &self.physical.channels {
            let t = model.and_then(|m| m.channels().iter().find(|c| c.key == ch.key));
            let g_true = model.map(|_| t.map_or(0.0, |c| c.g_max));
            let nu_true = t.filter(|c| c.g_max > 0.0).map(|c| c.nu);
            row(format!("g_{}", ch.key), g_true, Some(ch.g));
            row(format!("nu_{}", ch.key), nu_true, ch.nu);
        }
        s
    }

    pub fn summary(&self) -> String {
        let p = &self.persistency;
        let mut s = String::new();
        let _ = writeln!(s, "{{");
        let _ = writeln!(s, "  rows: {}", p.rows);
        let _ = writeln!(s, "  gram_min_eigenvalue: {:.6e}", p.min_eigenvalue);
        let _ = writeln!(s, "  gram_max_eigenvalue: {:.6e}", p.max_eigenvalue);
        let _ = writeln!(s, "  condition_number: {:.6e}", p.condition);
        let _ = writeln!(
            s,
            "  equilibrated_condition_number: {:.6e}",
            p.equilibrated_condition
        );
        let _ = writeln!(s, "  residual_variance: {:.6e}", self.residual_variance);
        let _ = writeln!(s, "  c: {:.8}", self.physical.c);
        let nu =
            |x: Option<f64>| x.map_or_else(|| "indeterminate".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "  leak: g = {:.6}, nu = {}",
            self.physical.leak.g,
            nu(self.physical.leak.nu)
        );
        for ch in &self.physical.channels {
            let _ = writeln!(s, "  {}: g = {:.6}, nu = {}", ch.key, ch.g, nu(ch.nu));
        }
        let _ = writeln!(s, "}}");
        s
    }
}
