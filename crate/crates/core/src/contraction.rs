//! Contraction certificates for the clamped membrane.
//!
//! With `Θ = blockdiag(c, Θ_w)` and `P_w = Θ_wᵀΘ_w`, the generalized
//! Jacobian of the closed loop is
//!
//! ```text
//! F = [ -(g_v + γ)/c      -g_w Θ_w⁻¹      ]
//!     [ Θ_w d / c         Θ_w A Θ_w⁻¹     ]
//! ```
//!
//! where `d_i = ∂/∂v (x∞_i(v) - w_i) / τ_i(v)` and `A = -diag(1/τ_i)`.
//! `F + Fᵀ ≺ 0` holds iff `γ > c Q (-S)⁻¹ Qᵀ - g_v` with
//! `Q = (F12 + F21ᵀ)/2` and `S = sym(F22)`; `γ > (c/λ_w) σ_max(Q)²` is a
//! simpler sufficient condition.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::neuron::{
    self, simulate_closed_loop, ClosedLoopConfig, ConductanceModel, SimulationError, VoltageRange,
};

#[derive(Debug, Error, PartialEq)]
pub enum ContractionError {
    #[error("metric is not symmetric positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("metric is {got}×{got}, model has {expected} gates")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Constant metric `P = ΘᵀΘ` on the gate coordinates, with `Θ` the
/// symmetric square root.
#[derive(Clone, Debug)]
pub struct Metric {
    p: DMatrix<f64>,
    theta: DMatrix<f64>,
    theta_inv: DMatrix<f64>,
    eig_min: f64,
    eig_max: f64,
}

impl Metric {
    pub fn new(p: DMatrix<f64>) -> Result<Self, ContractionError> {
        let sym = (&p + p.transpose()) * 0.5;
        if (&sym - &p).amax() > 1e-12 * p.amax() {
            return Err(ContractionError::NotPositiveDefinite(f64::NAN));
        }
        let eig = SymmetricEigen::new(sym.clone());
        let eig_min = eig.eigenvalues.min();
        let eig_max = eig.eigenvalues.max();
        if !(eig_min > 0.0) {
            return Err(ContractionError::NotPositiveDefinite(eig_min));
        }
        let q = &eig.eigenvectors;
        let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        let inv_root = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x.sqrt()));
        Ok(Self {
            theta: q * root * q.transpose(),
            theta_inv: q * inv_root * q.transpose(),
            p: sym,
            eig_min,
            eig_max,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity is positive definite")
    }

    pub fn diagonal(weights: &[f64]) -> Result<Self, ContractionError> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(weights)))
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eig_min
    }

    /// `λ_max(P) / λ_min(P)`.
    pub fn condition_number(&self) -> f64 {
        self.eig_max / self.eig_min
    }
}

/// Voltage interval times the unit gate box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateBox {
    pub v_range: VoltageRange,
    pub n_gates: usize,
}

impl StateBox {
    pub fn new(v_range: VoltageRange, n_gates: usize) -> Self {
        Self { v_range, n_gates }
    }

    pub fn contains(&self, v: f64, w: &[f64]) -> bool {
        self.v_range.contains(v)
            && w.len() == self.n_gates
            && w.iter().all(|x| (0.0..=1.0).contains(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InternalRate {
    /// Certified rate `1/τ_max` of the gate subsystem with `P_w = I`.
    pub lambda_w: f64,
    pub tau_max: f64,
    pub tau_min: f64,
}

/// Contraction rate of the gates, uniform over `v_grid`. Any constant
/// diagonal metric gives the same rate since `A(v)` is diagonal.
pub fn internal_contraction_rate(model: &ConductanceModel, v_grid: &[f64]) -> InternalRate {
    let (tau_min, tau_max) = model
        .layout()
        .gates()
        .iter()
        .map(|g| g.tau_bounds(v_grid))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (lo, hi)| {
            (a.min(lo), b.max(hi))
        });
    InternalRate {
        lambda_w: 1.0 / tau_max,
        tau_max,
        tau_min,
    }
}

/// Generalized Jacobian `Θ J Θ⁻¹` of the closed loop at `(v, w)`.
pub fn closed_loop_jacobian(
    model: &ConductanceModel,
    gamma: f64,
    v: f64,
    w: &[f64],
    metric: &Metric,
) -> Result<DMatrix<f64>, ContractionError> {
    let n = model.gate_count();
    if metric.dim() != n {
        return Err(ContractionError::DimensionMismatch {
            got: metric.dim(),
            expected: n,
        });
    }
    let c = model.c;
    let g_v = model.conductance(w);
    let g_w = DMatrix::from_row_slice(1, n, &model.current_gate_gradient(v, w));
    let gates = model.layout().gates();
    let d = DVector::from_iterator(
        n,
        gates
            .iter()
            .zip(w)
            .map(|(g, &x)| g.field_voltage_derivative(v, x)),
    );
    let a = DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        gates.iter().map(|g| -1.0 / g.tau(v)),
    ));

    let mut f = DMatrix::zeros(n + 1, n + 1);
    f[(0, 0)] = -(g_v + gamma) / c;
    f.view_mut((0, 1), (1, n))
        .copy_from(&(-g_w * &metric.theta_inv));
    f.view_mut((1, 0), (n, 1))
        .copy_from(&(&metric.theta * d / c));
    f.view_mut((1, 1), (n, n))
        .copy_from(&(&metric.theta * a * &metric.theta_inv));
    Ok(f)
}

/// Both gain bounds at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointBound {
    /// `c Q (-S)⁻¹ Qᵀ - g_v`.
    pub necessary: f64,
    /// `σ_max(Q)²`.
    pub q_norm_sq: f64,
    /// `-λ_max(S)`.
    pub gate_rate: f64,
}

pub fn point_bound(
    model: &ConductanceModel,
    v: f64,
    w: &[f64],
    metric: &Metric,
) -> Result<PointBound, ContractionError> {
    let n = model.gate_count();
    let f = closed_loop_jacobian(model, 0.0, v, w, metric)?;
    let q = DVector::from_fn(n, |i, _| 0.5 * (f[(0, i + 1)] + f[(i + 1, 0)]));
    let f22 = f.view((1, 1), (n, n)).into_owned();
    let neg_s = (&f22 + f22.transpose()) * -0.5;
    let gate_rate = SymmetricEigen::new(neg_s.clone()).eigenvalues.min();
    let quad = match neg_s.cholesky() {
        Some(ch) => q.dot(&ch.solve(&q)),
        None => f64::INFINITY,
    };
    Ok(PointBound {
        necessary: model.c * quad - model.conductance(w),
        q_norm_sq: q.norm_squared(),
        gate_rate,
    })
}

/// Candidate states for the gain search.
#[derive(Clone, Debug)]
pub enum Sampler {
    /// Explicit states; those outside the box are skipped.
    Points(Vec<(f64, Vec<f64>)>),
    /// Independent uniform draws over the box.
    Uniform { count: usize, seed: u64 },
}

impl Sampler {
    fn states(&self, state_box: &StateBox) -> Vec<(f64, Vec<f64>)> {
        match self {
            Sampler::Points(points) => points
                .iter()
                .filter(|(v, w)| state_box.contains(*v, w))
                .cloned()
                .collect(),
            Sampler::Uniform { count, seed } => {
                let mut rng = ChaCha20Rng::seed_from_u64(*seed);
                let VoltageRange { min, max } = state_box.v_range;
                (0..*count)
                    .map(|_| {
                        let v = min + (max - min) * rng.random::<f64>();
                        let w = (0..state_box.n_gates)
                            .map(|_| rng.random::<f64>())
                            .collect();
                        (v, w)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainBoundReport {
    /// `(c/λ_w) max σ_max(Q)²`, with `λ_w` the smallest sampled gate rate.
    pub bound_sufficient: f64,
    /// Largest sampled `c Q (-S)⁻¹ Qᵀ - g_v`.
    pub bound_necessary_sampled: f64,
    pub sample_count: usize,
    pub argmax_state: Option<(f64, Vec<f64>)>,
    pub lambda_w: f64,
    pub metric_min_eigenvalue: f64,
}

impl GainBoundReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "gain bounds ({} sampled states)", self.sample_count);
        let _ = writeln!(
            s,
            "  necessary (sampled max): {:.6e} mS/cm^2",
            self.bound_necessary_sampled
        );
        let _ = writeln!(
            s,
            "  sufficient:              {:.6e} mS/cm^2",
            self.bound_sufficient
        );
        let _ = writeln!(s, "  gate contraction rate:   {:.6e} 1/ms", self.lambda_w);
        let _ = writeln!(
            s,
            "  metric min eigenvalue:   {:.6e}",
            self.metric_min_eigenvalue
        );
        if let Some((v, w)) = &self.argmax_state {
            let _ = writeln!(s, "  attained at v = {v:.4} mV, w = {w:.4?}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,value\n");
        let _ = writeln!(
            s,
            "bound_necessary_sampled,{:.10e}",
            self.bound_necessary_sampled
        );
        let _ = writeln!(s, "bound_sufficient,{:.10e}", self.bound_sufficient);
        let _ = writeln!(s, "sample_count,{}", self.sample_count);
        let _ = writeln!(s, "lambda_w,{:.10e}", self.lambda_w);
        let _ = writeln!(
            s,
            "metric_min_eigenvalue,{:.10e}",
            self.metric_min_eigenvalue
        );
        if let Some((v, w)) = &self.argmax_state {
            let _ = writeln!(s, "argmax_v,{v:.10e}");
            for (i, x) in w.iter().enumerate() {
                let _ = writeln!(s, "argmax_w_{i},{x:.10e}");
            }
        }
        s
    }
}

/// Lower bounds on the feedback gain that make the closed loop contract in
/// `metric` at every sampled state of `state_box`.
pub fn gain_bound(
    model: &ConductanceModel,
    metric: &Metric,
    state_box: &StateBox,
    sampler: &Sampler,
) -> Result<GainBoundReport, ContractionError> {
    if metric.dim() != model.gate_count() {
        return Err(ContractionError::DimensionMismatch {
            got: metric.dim(),
            expected: model.gate_count(),
        });
    }
    let states = sampler.states(state_box);
    let bounds = states
        .par_iter()
        .map(|(v, w)| point_bound(model, *v, w, metric))
        .collect::<Result<Vec<_>, _>>()?;
    let (arg, necessary) = bounds.iter().map(|b| b.necessary).enumerate().fold(
        (None, f64::NEG_INFINITY),
        |(ai, am), (i, x)| {
            if x > am {
                (Some(i), x)
            } else {
                (ai, am)
            }
        },
    );
    let q_max = bounds.iter().map(|b| b.q_norm_sq).fold(0.0, f64::max);
    let lambda_w = bounds
        .iter()
        .map(|b| b.gate_rate)
        .fold(f64::INFINITY, f64::min);
    Ok(GainBoundReport {
        bound_sufficient: model.c / lambda_w * q_max,
        bound_necessary_sampled: necessary,
        sample_count: states.len(),
        argmax_state: arg.map(|i| states[i].clone()),
        lambda_w,
        metric_min_eigenvalue: metric.min_eigenvalue(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EulerRate {
    Contracting {
        alpha: f64,
        alpha_sq: f64,
    },
    /// `ts` at or beyond `max_ts` loses the certificate.
    Rejected {
        alpha_sq: f64,
        max_ts: f64,
    },
}

/// Contraction factor per Euler step: `α² = 1 - 2 ts λ + ts² κ σ̄²` with
/// `κ` the condition number of the metric.
pub fn euler_rate_bound(lambda: f64, metric: &Metric, sigma_bar: f64, ts: f64) -> EulerRate {
    let kappa = metric.condition_number();
    let alpha_sq = 1.0 - 2.0 * ts * lambda + ts * ts * kappa * sigma_bar * sigma_bar;
    if alpha_sq < 1.0 {
        EulerRate::Contracting {
            alpha: alpha_sq.max(0.0).sqrt(),
            alpha_sq,
        }
    } else {
        EulerRate::Rejected {
            alpha_sq,
            max_ts: 2.0 * lambda / (kappa * sigma_bar * sigma_bar),
        }
    }
}

/// Protocol of a step-response experiment.
#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub gamma: f64,
    pub ts: f64,
    pub baselines: Vec<f64>,
    pub step_to: f64,
    /// ms
    pub step_time: f64,
    /// ms
    pub duration: f64,
    /// Spread is judged from this time on (ms).
    pub settle_time: f64,
    /// Largest spread (mV) still counted as converged.
    pub tolerance: f64,
    /// Injected current shared by all runs; zeros when empty.
    pub input_current: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub ts: f64,
    pub baselines: Vec<f64>,
    /// One voltage trace per baseline, `steps + 1` samples each.
    pub traces: Vec<Vec<f64>>,
    /// Max minus min over baselines at each sample.
    pub spread: Vec<f64>,
    pub max_spread_after_settle: f64,
    /// Per-step contraction factor fitted to the spread.
    pub fitted_factor: Option<f64>,
    pub contracting: bool,
}

impl ProbeReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "step-response probe, {} baselines", self.baselines.len());
        let _ = writeln!(
            s,
            "  max spread after settling: {:.6e} mV",
            self.max_spread_after_settle
        );
        match self.fitted_factor {
            Some(a) => {
                let _ = writeln!(s, "  fitted factor per step:    {a:.10}");
                let _ = writeln!(
                    s,
                    "  fitted decay rate:         {:.6} 1/ms",
                    -a.ln() / self.ts
                );
            }
            None => {
                let _ = writeln!(s, "  fitted factor per step:    n/a");
            }
        }
        let _ = writeln!(
            s,
            "  verdict: {}",
            if self.contracting {
                "contracting"
            } else {
                "not contracting"
            }
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,value\n");
        let _ = writeln!(s, "baselines,{}", self.baselines.len());
        let _ = writeln!(
            s,
            "max_spread_after_settle,{:.10e}",
            self.max_spread_after_settle
        );
        let _ = writeln!(
            s,
            "fitted_factor,{:.16e}",
            self.fitted_factor.unwrap_or(f64::NAN)
        );
        let _ = writeln!(s, "contracting,{}", u8::from(self.contracting));
        s
    }

    /// `t,v_<baseline>..,spread`, one row per sample.
    pub fn traces_csv(&self) -> String {
        let mut s = String::from("t");
        for b in &self.baselines {
            let _ = write!(s, ",v_{b}");
        }
        s.push_str(",spread\n");
        for k in 0..self.spread.len() {
            let _ = write!(s, "{:.6e}", k as f64 * self.ts);
            for tr in &self.traces {
                let _ = write!(s, ",{:.16e}", tr[k]);
            }
            let _ = writeln!(s, ",{:.16e}", self.spread[k]);
        }
        s
    }
}

/// Least-squares slope of `ln x[k]` against `k`, as a per-step factor.
/// Entries at or below `floor` are ignored.
pub fn fit_decay_rate(x: &[f64], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > floor && v.is_finite())
        .map(|(k, v)| (k as f64, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mk = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mk).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mk) * (p.1 - ml)).sum();
    (sxx > 0.0).then(|| (sxy / sxx).exp())
}

/// Voltage interval used to validate the sampling period of a probe or an
/// experiment. Without feedback the whole working range applies.
pub fn certified_range(model: &ConductanceModel, gamma: f64, beta: f64) -> VoltageRange {
    let working = VoltageRange::working();
    if gamma > 0.0 {
        neuron::clamp_interval(model, gamma, beta).intersect(&working)
    } else {
        working
    }
}

/// Runs one closed loop per baseline: reference at the baseline, stepped to
/// `step_to` at `step_time`, starting from rest at the baseline.
pub fn step_response_probe(
    model: &ConductanceModel,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, SimulationError> {
    let steps = (cfg.duration / cfg.ts).round() as usize;
    let step_k = (cfg.step_time / cfg.ts).round() as usize;
    let settle_k = ((cfg.settle_time / cfg.ts).round() as usize).min(steps);
    let current = if cfg.input_current.is_empty() {
        vec![0.0; steps]
    } else {
        cfg.input_current.clone()
    };
    let beta = cfg
        .baselines
        .iter()
        .chain(std::iter::once(&cfg.step_to))
        .chain(current.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let range = certified_range(model, cfg.gamma, beta);
    let traces = cfg
        .baselines
        .par_iter()
        .map(|&b| {
            let r: Vec<f64> = (0..steps)
                .map(|k| if k < step_k { b } else { cfg.step_to })
                .collect();
            let loop_cfg = ClosedLoopConfig::at_rest(model, cfg.gamma, cfg.ts, b, steps)
                .with_certified_range(range);
            simulate_closed_loop(model, &loop_cfg, &r, &current).map(|t| t.v().to_vec())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spread: Vec<f64> = (0..=steps)
        .map(|k| {
            let (lo, hi) = traces
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                    (lo.min(t[k]), hi.max(t[k]))
                });
            if traces.is_empty() {
                0.0
            } else {
                hi - lo
            }
        })
        .collect();
    let max_spread_after_settle = spread[settle_k..].iter().copied().fold(0.0, f64::max);
    let fitted_factor = fit_decay_rate(&spread[step_k.min(steps)..], 1e-12);
    Ok(ProbeReport {
        ts: cfg.ts,
        baselines: cfg.baselines.clone(),
        traces,
        spread,
        max_spread_after_settle,
        fitted_factor,
        contracting: max_spread_after_settle < cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{self, ChannelKinetics, GateKinetics};
    use crate::neuron::Channel;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn hh() -> ConductanceModel {
        ConductanceModel::hodgkin_huxley()
    }

    #[test]
    fn hh_internal_rate() {
        let r = internal_contraction_rate(&hh(), &kinetics::working_grid());
        assert!((r.tau_max - 8.6).abs() / 8.6 < 0.02);
        assert_relative_eq!(r.lambda_w, 1.0 / r.tau_max);
        assert!((r.lambda_w - 0.1163).abs() < 0.003);
    }

    #[test]
    fn constant_tau_rate() {
        let ch = ChannelKinetics::new(GateKinetics::constant(2.0, 0.3, 1), None);
        let m =
            ConductanceModel::new(1.0, 0.1, -60.0, vec![Channel::new("x", 1.0, 0.0, ch)]).unwrap();
        let r = internal_contraction_rate(&m, &kinetics::working_grid());
        assert_eq!(r.lambda_w, 0.5);
    }

    #[test]
    fn cs_internal_rate_is_grid_max() {
        let lib = kinetics::cs_library();
        let grid = kinetics::working_grid();
        let tau_max = lib
            .iter()
            .flat_map(|c| c.gates())
            .flat_map(|g| grid.iter().map(|&v| g.tau(v)))
            .fold(0.0, f64::max);
        let channels = lib
            .into_iter()
            .enumerate()
            .map(|(i, k)| Channel::new(format!("c{i}"), 1.0, 0.0, k))
            .collect();
        let m = ConductanceModel::new(1.0, 0.3, -17.0, channels).unwrap();
        assert_eq!(internal_contraction_rate(&m, &grid).tau_max, tau_max);
    }

    #[test]
    fn hh_gate_block_contracts_on_grid() {
        let m = hh();
        let lambda = internal_contraction_rate(&m, &kinetics::working_grid()).lambda_w;
        let metric = Metric::identity(3);
        for v in kinetics::working_grid() {
            let f = closed_loop_jacobian(&m, 50.0, v, &[0.5, 0.5, 0.5], &metric).unwrap();
            let f22 = f.view((1, 1), (3, 3)).into_owned();
            let s = (&f22 + f22.transpose()) * 0.5;
            assert!(SymmetricEigen::new(s).eigenvalues.max() <= -lambda + 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_of_the_vector_field() {
        let m = hh();
        let gamma = 50.0;
        let field = |x: &[f64]| -> Vec<f64> {
            let (v, w) = (x[0], &x[1..]);
            let mut out = vec![(-m.internal_current(v, w) - gamma * v) / m.c];
            for (g, &wi) in m.layout().gates().iter().zip(w) {
                let (tau, xi) = g.eval(v);
                out.push((xi - wi) / tau);
            }
            out
        };
        let x0 = [-30.0, 0.4, 0.3, 0.6];
        let f = closed_loop_jacobian(&m, gamma, x0[0], &x0[1..], &Metric::identity(3)).unwrap();
        for j in 0..4 {
            let h = if j == 0 { 1e-4 } else { 1e-6 };
            let (mut xp, mut xm) = (x0, x0);
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (field(&xp), field(&xm));
            for i in 0..4 {
                // Θ = diag(c, I) with c = 1
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!(
                    (f[(i, j)] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                    "({i},{j}) {} vs {fd}",
                    f[(i, j)]
                );
            }
        }
    }

    #[test]
    fn identity_metric_point_bound() {
        let m = hh();
        let b = gain_bound(
            &m,
            &Metric::identity(3),
            &StateBox::new(VoltageRange::new(-77.0, 55.0), 3),
            &Sampler::Points(vec![(-77.0, vec![1.0, 1.0, 1.0])]),
        )
        .unwrap();
        assert_eq!(b.sample_count, 1);
        assert!((b.bound_necessary_sampled - 5.1e8).abs() / 5.1e8 < 0.05);
        assert!(b.bound_sufficient >= b.bound_necessary_sampled);
    }

    #[test]
    fn decoupled_model_has_zero_bound() {
        let ch = ChannelKinetics::new(GateKinetics::constant(1.0, 0.5, 1), None);
        // zero conductance removes ∂g/∂w; constant kinetics remove ∂f/∂v
        let m =
            ConductanceModel::new(1.0, 0.3, -60.0, vec![Channel::new("x", 0.0, 0.0, ch)]).unwrap();
        let b = gain_bound(
            &m,
            &Metric::identity(1),
            &StateBox::new(VoltageRange::new(-80.0, 40.0), 1),
            &Sampler::Uniform {
                count: 100,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(b.bound_sufficient, 0.0);
        assert_eq!(b.bound_necessary_sampled.max(0.0), 0.0);
    }

    #[test]
    fn metric_validation() {
        assert!(Metric::diagonal(&[1.0, -1.0]).is_err());
        let m = Metric::diagonal(&[4.0, 9.0]).unwrap();
        assert_relative_eq!(m.theta()[(1, 1)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(m.condition_number(), 2.25, epsilon = 1e-12);
        assert!(matches!(
            closed_loop_jacobian(&hh(), 1.0, 0.0, &[0.0; 3], &m),
            Err(ContractionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn euler_rate_examples() {
        let p = Metric::identity(2);
        match euler_rate_bound(0.1, &p, 1.0, 0.005) {
            EulerRate::Contracting { alpha, alpha_sq } => {
                assert_relative_eq!(alpha_sq, 0.999025, epsilon = 1e-15);
                assert_relative_eq!(alpha, 0.999025f64.sqrt());
                assert!((alpha - 0.99951).abs() < 1e-5);
            }
            r => panic!("{r:?}"),
        }
        match euler_rate_bound(0.1, &p, 1.0, 0.3) {
            EulerRate::Rejected { max_ts, .. } => assert_relative_eq!(max_ts, 0.2),
            r => panic!("{r:?}"),
        }
        let mut last = 0.0;
        for ts in [1e-1, 1e-2, 1e-3, 1e-4, 1e-6] {
            let EulerRate::Contracting { alpha, .. } = euler_rate_bound(0.1, &p, 1.0, ts) else {
                panic!()
            };
            assert!(alpha < 1.0 && alpha > last);
            last = alpha;
        }
    }

    #[test]
    fn single_baseline_probe_has_zero_spread() {
        let cfg = ProbeConfig {
            gamma: 50.0,
            ts: 0.005,
            baselines: vec![-60.0],
            step_to: -45.0,
            step_time: 10.0,
            duration: 20.0,
            settle_time: 15.0,
            tolerance: 0.1,
            input_current: vec![],
        };
        let r = step_response_probe(&hh(), &cfg).unwrap();
        assert!(r.spread.iter().all(|&s| s == 0.0));
        assert!(r.contracting);
    }

    #[test]
    fn unclamped_spiking_does_not_contract() {
        let ts = 0.005;
        let duration = 100.0;
        let cfg = ProbeConfig {
            gamma: 0.0,
            ts,
            baselines: vec![-80.0, -60.0, -40.0, -20.0, 0.0, 20.0],
            step_to: -45.0,
            step_time: 10.0,
            duration,
            settle_time: 50.0,
            tolerance: 0.1,
            input_current: vec![10.0; (duration / ts) as usize],
        };
        let r = step_response_probe(&hh(), &cfg).unwrap();
        assert!(!r.contracting);
        assert!(r.max_spread_after_settle >= 1.0);
    }

    #[test]
    fn decay_fit_recovers_geometric_factor() {
        let x: Vec<f64> = (0..100).map(|k| 3.0 * 0.97f64.powi(k)).collect();
        assert_relative_eq!(fit_decay_rate(&x, 0.0).unwrap(), 0.97, epsilon = 1e-12);
        assert_eq!(fit_decay_rate(&[0.0, 0.0], 0.0), None);
    }

    fn gate_candidates(seed: u64, n: usize) -> Vec<(f64, Vec<f64>)> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = rng.random_range(-120.0..120.0);
                (v, (0..3).map(|_| rng.random::<f64>()).collect())
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn enlarging_the_box_never_lowers_the_bound(
            seed in 0u64..1000, lo in -100.0f64..0.0, width in 1.0f64..60.0, grow in 0.0f64..40.0
        ) {
            let m = hh();
            let metric = Metric::diagonal(&[0.21e6, 3.80e6, 3.16e6]).unwrap();
            let sampler = Sampler::Points(gate_candidates(seed, 300));
            let small = StateBox::new(VoltageRange::new(lo, lo + width), 3);
            let big = StateBox::new(VoltageRange::new(lo - grow, lo + width + grow), 3);
            let a = gain_bound(&m, &metric, &small, &sampler).unwrap();
            let b = gain_bound(&m, &metric, &big, &sampler).unwrap();
            prop_assert!(b.sample_count >= a.sample_count);
            prop_assert!(b.bound_necessary_sampled >= a.bound_necessary_sampled);
        }

        #[test]
        fn sufficient_bound_dominates_necessary(seed in 0u64..1000, w0 in 0.01f64..1e6) {
            let m = hh();
            let metric = Metric::diagonal(&[w0, 1.0, 2.0]).unwrap();
            let state_box = StateBox::new(VoltageRange::new(-77.0, 55.0), 3);
            let r = gain_bound(&m, &metric, &state_box, &Sampler::Uniform { count: 200, seed }).unwrap();
            prop_assert!(r.bound_sufficient >= r.bound_necessary_sampled);
        }

        #[test]
        fn euler_formula_is_exact(lambda in 1e-3f64..10.0, sigma in 1e-3f64..100.0, ts in 1e-6f64..1.0, d in 1.0f64..100.0) {
            let metric = Metric::diagonal(&[1.0, d]).unwrap();
            let kappa = metric.condition_number();
            let expected = 1.0 - 2.0 * ts * lambda + ts * ts * kappa * sigma * sigma;
            match euler_rate_bound(lambda, &metric, sigma, ts) {
                EulerRate::Contracting { alpha, alpha_sq } => {
                    prop_assert_eq!(alpha_sq, expected);
                    prop_assert!(alpha < 1.0);
                    prop_assert!(ts < 2.0 * lambda / (kappa * sigma * sigma));
                }
                EulerRate::Rejected { alpha_sq, max_ts } => {
                    prop_assert_eq!(alpha_sq, expected);
                    prop_assert!(ts >= max_ts * (1.0 - 1e-12));
                }
            }
        }

        // certified gate-subsystem bounds are never beaten by the data
        #[test]
        fn empirical_gate_rate_respects_certificate(seed in 0u64..1000, ts in 2e-6f64..3e-5) {
            let m = hh();
            let rate = internal_contraction_rate(&m, &kinetics::working_grid());
            let sigma_bar = 1.0 / rate.tau_min;
            let EulerRate::Contracting { alpha, .. } =
                euler_rate_bound(rate.lambda_w, &Metric::identity(3), sigma_bar, ts)
            else {
                return Err(TestCaseError::fail("certificate rejected"));
            };
            let certified = -alpha.ln() / ts;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n = (0.2 / ts) as usize;
            let drive: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..50.0)).collect();
            let mut a = vec![0.0; 3];
            let mut b = vec![1.0; 3];
            let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let d0 = dist(&a, &b);
            for &v in &drive {
                m.layout().step(&mut a, v, ts);
                m.layout().step(&mut b, v, ts);
            }
            let empirical = -(dist(&a, &b) / d0).ln() / (n as f64 * ts);
            prop_assert!(empirical >= certified * (1.0 - 0.2), "{empirical} < {certified}");
        }
    }
}
