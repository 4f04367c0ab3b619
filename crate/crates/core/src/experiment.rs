//! Declarative experiments: identification runs over noise seeds,
//! step-response probes, gain-bound searches and trajectory verification.
//!
//! Configurations are TOML files:
//!
//! ```toml
//! [experiment]
//! model = "hh"            # hh | cs-a | cs-b | cs-c | custom
//! gamma = 50.0            # mS/cm^2
//! ts = 0.005              # ms
//! duration = 5.0          # s
//! discard = 0.5           # s
//! structure = ["hh.na", "hh.k"]
//! seeds = [1, 2, 3]
//! checkpoints = [100000, 900000]
//!
//! [reference]
//! offset = -45.0
//! sigma = 100.0
//! truncation = 100.0
//!
//! [noise]
//! sigma = 2.5
//! truncation = 20.0
//! ```
//!
//! Optional `[model]`, `[probe]` and `[[gainbound]]` sections are described
//! on their types.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::contraction::{
    self, gain_bound, step_response_probe, GainBoundReport, Metric, ProbeConfig, ProbeReport,
    Sampler, StateBox,
};
use crate::estimator::{
    estimate, EstimationError, EstimationResult, HistoryPoint, ModelStructure, ParameterVector,
    PersistencyReport, PhysicalParameters,
};
use crate::neuron::{
    simulate_closed_loop, Channel, ClosedLoopConfig, ConductanceModel, GateState, SimulationError,
    VoltageRange,
};
use crate::signals::{self, FilteredNoiseSpec, WhiteNoiseSpec};
use crate::trajectory::{CsvError, Trajectory};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("simulation stage (seed {seed}): {source}")]
    Simulation { seed: u64, source: SimulationError },
    #[error("persistency stage (seed {seed}): {source}")]
    Persistency { seed: u64, source: EstimationError },
    #[error("estimation stage (seed {seed}): {source}")]
    Estimation { seed: u64, source: EstimationError },
    #[error("probe: {0}")]
    Probe(SimulationError),
    #[error("gain bound: {0}")]
    GainBound(#[from] contraction::ContractionError),
    #[error("trajectory file: {0}")]
    Csv(#[from] CsvError),
}

impl ExperimentError {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Persistency { .. } => 2,
            Self::Simulation {
                source: SimulationError::Divergence { .. },
                ..
            }
            | Self::Probe(SimulationError::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub model: String,
    pub gamma: f64,
    /// ms
    pub ts: f64,
    /// s
    pub duration: f64,
    /// s
    pub discard: f64,
    #[serde(default = "default_v0")]
    pub v0: f64,
    pub structure: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub save_trajectories: bool,
}

fn default_v0() -> f64 {
    -65.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub offset: f64,
    pub sigma: f64,
    pub truncation: f64,
    /// 1/ms
    #[serde(default = "default_pole")]
    pub pole: f64,
}

fn default_pole() -> f64 {
    signals::DEFAULT_FILTER_POLE
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma: f64,
    pub truncation: f64,
}

/// `[model]` table used with `model = "custom"`. Channel keys refer to the
/// built-in kinetics registry.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModel {
    pub c: f64,
    pub leak_g: f64,
    pub leak_nu: f64,
    #[serde(default)]
    pub channels: Vec<CustomChannel>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomChannel {
    pub key: String,
    pub g: f64,
    pub nu: f64,
}

/// `[probe]`: step-response experiment. Times in ms.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub baselines: Vec<f64>,
    pub step_to: f64,
    pub step_time: f64,
    pub duration: f64,
    pub settle_time: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Defaults to the experiment gain.
    pub gamma: Option<f64>,
    /// Constant injected current (µA/cm²).
    #[serde(default)]
    pub input_current: f64,
}

fn default_tolerance() -> f64 {
    0.1
}

/// `[[gainbound]]`: one search. Either `points` (rows `[v, w_0, ..]`) or
/// `samples` uniform draws from `seed`. `metric` holds diagonal weights;
/// the identity is used when absent.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainBoundSection {
    pub name: String,
    pub v_min: f64,
    pub v_max: f64,
    pub metric: Option<Vec<f64>>,
    pub points: Option<Vec<Vec<f64>>>,
    pub samples: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub reference: ReferenceSection,
    pub noise: NoiseSection,
    pub model: Option<CustomModel>,
    pub probe: Option<ProbeSection>,
    #[serde(default)]
    pub gainbound: Vec<GainBoundSection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            ExperimentError::Config(msg) => {
                ExperimentError::Config(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    /// Total number of Euler steps.
    pub fn steps(&self) -> usize {
        (self.experiment.duration * 1000.0 / self.experiment.ts).round() as usize
    }

    /// Number of leading samples left out of the estimation.
    pub fn discard_samples(&self) -> usize {
        (self.experiment.discard * 1000.0 / self.experiment.ts).round() as usize
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let e = &self.experiment;
        let fail = |m: String| Err(ExperimentError::Config(m));
        if !(e.ts > 0.0) {
            return fail(format!("ts = {} must be positive", e.ts));
        }
        if !(e.gamma >= 0.0) {
            return fail(format!("gamma = {} must be non-negative", e.gamma));
        }
        if !(e.discard >= 0.0 && e.discard < e.duration) {
            return fail(format!(
                "discard {} s must lie in [0, duration = {} s)",
                e.discard, e.duration
            ));
        }
        if e.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if e.structure.is_empty() {
            return fail("structure must list at least one channel".into());
        }
        let usable = self.steps() - self.discard_samples();
        if e.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return fail("checkpoints must increase".into());
        }
        if let Some(&c) = e.checkpoints.last() {
            if c > usable || e.checkpoints[0] == 0 {
                return fail(format!("checkpoints must lie in [1, {usable}]"));
            }
        }
        if e.model == "custom" && self.model.is_none() {
            return fail("model = \"custom\" needs a [model] section".into());
        }
        Ok(())
    }

    pub fn true_model(&self) -> Result<ConductanceModel, ExperimentError> {
        if self.experiment.model == "custom" {
            let m = self.model.as_ref().expect("validated");
            let channels = m
                .channels
                .iter()
                .map(|ch| Channel::builtin(&ch.key, ch.g, ch.nu))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            return ConductanceModel::new(m.c, m.leak_g, m.leak_nu, channels)
                .map_err(|e| ExperimentError::Config(e.to_string()));
        }
        BuiltinModelCatalog::get(&self.experiment.model).ok_or_else(|| {
            ExperimentError::Config(format!("unknown model {:?}", self.experiment.model))
        })
    }

    /// Bound on `|r|` and `|e|`.
    pub fn input_bound(&self) -> f64 {
        (self.reference.offset.abs() + self.reference.truncation).max(self.noise.truncation)
    }

    pub fn reference_spec(&self, seed: u64) -> FilteredNoiseSpec {
        FilteredNoiseSpec {
            offset: self.reference.offset,
            sigma: self.reference.sigma,
            pole: self.reference.pole,
            truncation: self.reference.truncation,
            seed,
        }
    }

    pub fn noise_spec(&self, seed: u64) -> WhiteNoiseSpec {
        WhiteNoiseSpec {
            sigma: self.noise.sigma,
            truncation: self.noise.truncation,
            seed,
        }
    }
}

/// The true systems shipped with the tool.
///
/// The Connor-Stevens variants share `c = 1`, leak `0.3 (v + 17)`,
/// `120 m^3 h (v - 55)` and `20 n^4 (v + 75)`, and differ in the A-type
/// current `g3 a^3 b (v + 75)` and the calcium current `g4 m^2 (v - 120)`:
/// A has `(g3, g4) = (0, 0)`, B `(90, 0)` and C `(0, 0.4)`.
pub struct BuiltinModelCatalog;

impl BuiltinModelCatalog {
    pub const KEYS: [&'static str; 4] = ["hh", "cs-a", "cs-b", "cs-c"];

    pub fn get(key: &str) -> Option<ConductanceModel> {
        let (g3, g4) = match key {
            "hh" => return Some(ConductanceModel::hodgkin_huxley()),
            "cs-a" => (0.0, 0.0),
            "cs-b" => (90.0, 0.0),
            "cs-c" => (0.0, 0.4),
            _ => return None,
        };
        let ch = |k: &str, g, nu| Channel::builtin(k, g, nu).expect("registered key");
        Some(
            ConductanceModel::new(
                1.0,
                0.3,
                -17.0,
                vec![
                    ch("cs.na", 120.0, 55.0),
                    ch("cs.k", 20.0, -75.0),
                    ch("cs.a", g3, -75.0),
                    ch("cs.ca", g4, 120.0),
                ],
            )
            .expect("valid constants"),
        )
    }
}

/// Outcome of one noise realization.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub theta: ParameterVector,
    pub physical: PhysicalParameters,
    pub persistency: PersistencyReport,
    pub residual_variance: f64,
    pub snr_db: f64,
    pub history: Vec<HistoryPoint>,
}

#[derive(Clone, Debug)]
pub struct IdentificationSummary {
    pub structure: Vec<String>,
    pub truth: ParameterVector,
    pub seeds: Vec<SeedOutcome>,
    /// `(N, mean |θ̄ - θ̂_N| per entry)` across seeds.
    pub mean_error: Vec<(usize, Vec<f64>)>,
    pub mean_snr_db: f64,
}

impl IdentificationSummary {
    /// Seed average of the final physical estimates. `ν` averages skip
    /// seeds where it is indeterminate.
    pub fn mean_physical(&self) -> PhysicalParameters {
        let n = self.seeds.len() as f64;
        let avg = |f: &dyn Fn(&PhysicalParameters) -> f64| {
            self.seeds.iter().map(|s| f(&s.physical)).sum::<f64>() / n
        };
        let avg_opt = |f: &dyn Fn(&PhysicalParameters) -> Option<f64>| {
            let xs: Vec<f64> = self.seeds.iter().filter_map(|s| f(&s.physical)).collect();
            (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        };
        let first = &self.seeds[0].physical;
        let est = |j: Option<usize>| {
            let pick = move |p: &PhysicalParameters| match j {
                None => p.leak.clone(),
                Some(j) => p.channels[j].clone(),
            };
            crate::estimator::ChannelEstimate {
                key: pick(first).key,
                g: avg(&|p| pick(p).g),
                nu: avg_opt(&|p| pick(p).nu),
            }
        };
        PhysicalParameters {
            c: avg(&|p| p.c),
            leak: est(None),
            channels: (0..first.channels.len()).map(|j| est(Some(j))).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "structure: {}", self.structure.join(", "));
        let _ = writeln!(s, "seeds: {}", self.seeds.len());
        let _ = writeln!(s, "mean SNR: {} dB", signals::format_db(self.mean_snr_db));
        let p = self.mean_physical();
        let nu =
            |x: Option<f64>| x.map_or_else(|| "indeterminate".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "mean estimates:");
        let _ = writeln!(s, "  c = {:.6}", p.c);
        let _ = writeln!(s, "  leak: g = {:.6}, nu = {}", p.leak.g, nu(p.leak.nu));
        for ch in &p.channels {
            let _ = writeln!(s, "  {}: g = {:.6}, nu = {}", ch.key, ch.g, nu(ch.nu));
        }
        let _ = writeln!(s, "per seed:");
        for o in &self.seeds {
            let g: Vec<String> = o
                .physical
                .channels
                .iter()
                .map(|c| format!("{:.4}", c.g))
                .collect();
            let _ = writeln!(
                s,
                "  seed {:>4}: c = {:.6}, g = [{}], SNR = {} dB, equilibrated cond = {:.3e}",
                o.seed,
                o.physical.c,
                g.join(", "),
                signals::format_db(o.snr_db),
                o.persistency.equilibrated_condition
            );
        }
        s
    }

    /// `n` followed by the mean absolute error of every θ entry.
    pub fn mean_error_csv(&self) -> String {
        let mut s = String::from("n");
        for l in self.truth.labels() {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for (n, errs) in &self.mean_error {
            let _ = write!(s, "{n}");
            for e in errs {
                let _ = write!(s, ",{e:.10e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn snr_csv(&self) -> String {
        let mut s = String::from("seed,snr_db\n");
        for o in &self.seeds {
            let _ = writeln!(s, "{},{}", o.seed, signals::format_db(o.snr_db));
        }
        s
    }
}

/// `n, err_<θ>.., est_<θ>.., g_leak, g_<key>..` per checkpoint.
pub fn history_csv(history: &[HistoryPoint], keys: &[String]) -> String {
    let mut s = String::from("n");
    if let Some(h) = history.first() {
        let labels = h.theta.labels();
        if !h.abs_error.is_empty() {
            for l in &labels {
                let _ = write!(s, ",err_{l}");
            }
        }
        for l in &labels {
            let _ = write!(s, ",est_{l}");
        }
    }
    s.push_str(",g_leak");
    for k in keys {
        let _ = write!(s, ",g_{k}");
    }
    s.push('\n');
    for h in history {
        let _ = write!(s, "{}", h.n);
        for x in h.abs_error.iter().chain(&h.theta.to_vec()) {
            let _ = write!(s, ",{x:.10e}");
        }
        for t2 in &h.theta.theta2 {
            let _ = write!(s, ",{:.10e}", -t2 / h.theta.theta3);
        }
        s.push('\n');
    }
    s
}

/// Execution options of [`run_identification`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Output directory; nothing is written when absent.
    pub out: Option<PathBuf>,
    /// Worker threads; 0 or 1 runs seeds one after another.
    pub jobs: usize,
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    if jobs <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    model: &ConductanceModel,
    structure: &ModelStructure,
    range: VoltageRange,
    truth: &ParameterVector,
    seed: u64,
    out: Option<&Path>,
) -> Result<SeedOutcome, ExperimentError> {
    let e = &cfg.experiment;
    let steps = cfg.steps();
    let discard = cfg.discard_samples();
    let r = signals::generate_reference(&cfg.reference_spec(seed), e.ts, steps);
    let noise = signals::generate_noise(&cfg.noise_spec(seed), steps);
    let loop_cfg =
        ClosedLoopConfig::at_rest(model, e.gamma, e.ts, e.v0, steps).with_certified_range(range);
    let traj = simulate_closed_loop(model, &loop_cfg, &r, &noise)
        .map_err(|source| ExperimentError::Simulation { seed, source })?;
    drop((r, noise));
    if let (Some(dir), true) = (out, e.save_trajectories) {
        let path = dir.join(format!("trajectory_seed{seed}.csv"));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        traj.write_csv(std::io::BufWriter::new(file))?;
    }
    let snr = signals::snr_db(&traj.y()[discard..], &traj.e()[discard..], model.c)
        .expect("equal lengths");
    let result: EstimationResult = estimate(structure, &traj, discard, &e.checkpoints, Some(truth))
        .map_err(|source| match source {
            EstimationError::Persistency(_) | EstimationError::RankDeficient { .. } => {
                ExperimentError::Persistency { seed, source }
            }
            source => ExperimentError::Estimation { seed, source },
        })?;
    if let Some(dir) = out {
        write_file(
            &dir.join(format!("estimate_seed{seed}.csv")),
            &result.report_csv(Some((truth, model))),
        )?;
        let mut summary = result.summary();
        let _ = writeln!(summary, "snr_db: {}", signals::format_db(snr));
        write_file(&dir.join(format!("summary_seed{seed}.txt")), &summary)?;
        write_file(
            &dir.join(format!("history_seed{seed}.csv")),
            &history_csv(&result.history, structure.keys()),
        )?;
    }
    Ok(SeedOutcome {
        seed,
        theta: result.theta,
        physical: result.physical,
        persistency: result.persistency,
        residual_variance: result.residual_variance,
        snr_db: snr,
        history: result.history,
    })
}

/// Voltage range over which the sampling period and the predictor are
/// validated for this experiment.
pub fn experiment_range(cfg: &ExperimentConfig, model: &ConductanceModel) -> VoltageRange {
    contraction::certified_range(model, cfg.experiment.gamma, cfg.input_bound())
}

/// Simulates and identifies one data set per seed.
pub fn run_identification(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<IdentificationSummary, ExperimentError> {
    use rayon::prelude::*;

    let e = &cfg.experiment;
    let model = cfg.true_model()?;
    let range = experiment_range(cfg, &model);
    let structure = ModelStructure::from_keys(&e.structure, e.ts, e.v0, &range)
        .map_err(|err| ExperimentError::Config(err.to_string()))?;
    let truth = ParameterVector::truth(&model, structure.keys());
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let out = opts.out.as_deref();
    let outcomes = with_pool(opts.jobs, || {
        e.seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, &model, &structure, range, &truth, seed, out))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let n = outcomes.len() as f64;
    let mean_error = e
        .checkpoints
        .iter()
        .enumerate()
        .map(|(i, &cp)| {
            let mut acc = vec![0.0; truth.len()];
            for o in &outcomes {
                for (a, x) in acc.iter_mut().zip(&o.history[i].abs_error) {
                    *a += x / n;
                }
            }
            (cp, acc)
        })
        .collect();
    let mean_snr_db = outcomes.iter().map(|o| o.snr_db).sum::<f64>() / n;
    let summary = IdentificationSummary {
        structure: structure.keys().to_vec(),
        truth,
        seeds: outcomes,
        mean_error,
        mean_snr_db,
    };
    if let Some(dir) = out {
        write_file(&dir.join("mean_error.csv"), &summary.mean_error_csv())?;
        write_file(&dir.join("snr.csv"), &summary.snr_csv())?;
        write_file(&dir.join("summary.txt"), &summary.to_text())?;
    }
    Ok(summary)
}

pub fn probe_config(cfg: &ExperimentConfig) -> Result<ProbeConfig, ExperimentError> {
    let p = cfg
        .probe
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("no [probe] section".into()))?;
    let ts = cfg.experiment.ts;
    let steps = (p.duration / ts).round() as usize;
    Ok(ProbeConfig {
        gamma: p.gamma.unwrap_or(cfg.experiment.gamma),
        ts,
        baselines: p.baselines.clone(),
        step_to: p.step_to,
        step_time: p.step_time,
        duration: p.duration,
        settle_time: p.settle_time,
        tolerance: p.tolerance,
        input_current: vec![p.input_current; steps],
    })
}

pub fn run_contraction_probe(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<ProbeReport, ExperimentError> {
    let model = cfg.true_model()?;
    let report =
        step_response_probe(&model, &probe_config(cfg)?).map_err(ExperimentError::Probe)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_file(&dir.join("probe_traces.csv"), &report.traces_csv())?;
        write_file(&dir.join("probe_report.txt"), &report.to_text())?;
        write_file(&dir.join("probe_report.csv"), &report.to_csv())?;
    }
    Ok(report)
}

pub fn run_gain_bound(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<(String, GainBoundReport)>, ExperimentError> {
    if cfg.gainbound.is_empty() {
        return Err(ExperimentError::Config("no [[gainbound]] section".into()));
    }
    let model = cfg.true_model()?;
    let n = model.gate_count();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut reports = Vec::new();
    for gb in &cfg.gainbound {
        let metric = match &gb.metric {
            Some(w) => Metric::diagonal(w)?,
            None => Metric::identity(n),
        };
        if !(gb.v_min < gb.v_max) {
            return Err(ExperimentError::Config(format!(
                "{}: empty voltage range",
                gb.name
            )));
        }
        let state_box = StateBox::new(VoltageRange::new(gb.v_min, gb.v_max), n);
        let sampler = match (&gb.points, gb.samples) {
            (Some(points), None) => Sampler::Points(
                points
                    .iter()
                    .map(|p| match p.split_first() {
                        Some((&v, w)) if w.len() == n => Ok((v, w.to_vec())),
                        _ => Err(ExperimentError::Config(format!(
                            "{}: points need 1 + {n} entries",
                            gb.name
                        ))),
                    })
                    .collect::<Result<_, _>>()?,
            ),
            (None, Some(count)) => Sampler::Uniform {
                count,
                seed: gb.seed,
            },
            _ => {
                return Err(ExperimentError::Config(format!(
                    "{}: give exactly one of `points` or `samples`",
                    gb.name
                )))
            }
        };
        let report = gain_bound(&model, &metric, &state_box, &sampler)?;
        if let Some(dir) = out {
            write_file(
                &dir.join(format!("gainbound_{}.txt", gb.name)),
                &report.to_text(),
            )?;
            write_file(
                &dir.join(format!("gainbound_{}.csv", gb.name)),
                &report.to_csv(),
            )?;
        }
        reports.push((gb.name.clone(), report));
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub steps: usize,
    /// Largest `|c Δv/ts + g - γ(r - v) - e|` relative to the largest term.
    pub max_step_residual: f64,
    /// Largest deviation between the file and a fresh simulation.
    pub max_resimulation_error: f64,
    pub passed: bool,
}

impl VerifyReport {
    pub fn to_text(&self) -> String {
        format!(
            "steps: {}\nmax relative step residual: {:.3e}\nmax re-simulation deviation: {:.3e}\nverdict: {}\n",
            self.steps,
            self.max_step_residual,
            self.max_resimulation_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks a recorded trajectory against the experiment's model: every step
/// must satisfy the Euler update, and re-simulating from the recorded
/// initial state and inputs must reproduce the file.
pub fn verify(traj_path: &Path, cfg: &ExperimentConfig) -> Result<VerifyReport, ExperimentError> {
    let file = fs::File::open(traj_path).map_err(io_err(traj_path))?;
    let traj = Trajectory::read_csv(std::io::BufReader::new(file), cfg.experiment.gamma)?;
    let model = cfg.true_model()?;
    if traj.gate_count() != model.gate_count() {
        return Err(ExperimentError::Config(format!(
            "trajectory has {} gates, model {}",
            traj.gate_count(),
            model.gate_count()
        )));
    }
    let ts = cfg.experiment.ts;
    if !traj.is_empty() && (traj.ts() - ts).abs() > 1e-9 * ts {
        return Err(ExperimentError::Config(format!(
            "trajectory sampled at {} ms, configuration says {ts} ms",
            traj.ts()
        )));
    }
    let gamma = cfg.experiment.gamma;
    let v = traj.v();
    let mut max_step_residual: f64 = 0.0;
    for k in 0..traj.len() {
        let g = model.internal_current(v[k], traj.gates_at(k));
        let terms = [
            model.c * (v[k + 1] - v[k]) / ts,
            g,
            gamma * (traj.r()[k] - v[k]),
            traj.e()[k],
        ];
        let scale = terms.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let res = (terms[0] + terms[1] - terms[2] - terms[3]).abs() / scale;
        max_step_residual = max_step_residual.max(res);
    }
    let loop_cfg = ClosedLoopConfig {
        gamma,
        ts,
        v0: v[0],
        w0: GateState(traj.gates_at(0).to_vec()),
        steps: traj.len(),
        certified_range: experiment_range(cfg, &model),
    };
    let max_resimulation_error = match simulate_closed_loop(&model, &loop_cfg, traj.r(), traj.e()) {
        Ok(fresh) => (0..=traj.len())
            .map(|k| {
                let dv = (fresh.v()[k] - v[k]).abs();
                fresh
                    .gates_at(k)
                    .iter()
                    .zip(traj.gates_at(k))
                    .fold(dv, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    };
    Ok(VerifyReport {
        steps: traj.len(),
        max_step_residual,
        max_resimulation_error,
        passed: max_step_residual <= 1e-10 && max_resimulation_error <= 1e-9,
    })
}
