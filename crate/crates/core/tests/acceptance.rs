//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use neuroclamp::contraction::{
    euler_rate_bound, fit_decay_rate, gain_bound, step_response_probe, EulerRate, Metric,
    ProbeConfig, Sampler, StateBox,
};
use neuroclamp::estimator::qr::{normal_equations, IncrementalQr};
use neuroclamp::estimator::{
    build_regressor, simulate_predictor_gates, ModelStructure, ParameterVector,
};
use neuroclamp::experiment::{
    experiment_range, run_identification, BuiltinModelCatalog, ExperimentConfig,
    IdentificationSummary, RunOptions,
};
use neuroclamp::neuron::{simulate_closed_loop, ClosedLoopConfig, ConductanceModel, VoltageRange};
use neuroclamp::signals::{self, zoh_second_order_lag};

struct Verdict {
    passed: bool,
    detail: String,
}

struct Checks(Vec<(bool, String)>);

impl Checks {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn add(&mut self, ok: bool, msg: String) {
        self.0.push((ok, msg));
    }

    fn verdict(self) -> Verdict {
        let passed = self.0.iter().all(|(ok, _)| *ok);
        let detail = self
            .0
            .iter()
            .map(|(ok, m)| format!("{}{m}", if *ok { "" } else { "[x] " }))
            .collect::<Vec<_>>()
            .join("; ");
        Verdict { passed, detail }
    }
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

fn identify(name: &str) -> (ExperimentConfig, IdentificationSummary) {
    let cfg = config(name);
    let summary =
        run_identification(&cfg, &RunOptions::default()).unwrap_or_else(|e| panic!("{name}: {e}"));
    (cfg, summary)
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn hh_consistency(s: &IdentificationSummary) -> Verdict {
    let mut c = Checks::new();
    let first = &s.mean_error.first().expect("checkpoints").1;
    let last = s.mean_error.last().expect("checkpoints");
    let labels = s.truth.labels();
    let grew: Vec<&str> = labels
        .iter()
        .zip(first.iter().zip(&last.1))
        .filter(|(_, (a, b))| b >= a)
        .map(|(l, _)| l.as_str())
        .collect();
    c.add(
        grew.is_empty() && s.mean_error[0].0 == 100_000 && last.0 == 900_000,
        if grew.is_empty() {
            "all 7 mean errors smaller at N=9e5 than at N=1e5".into()
        } else {
            format!("mean error did not fall for {grew:?}")
        },
    );
    let p = s.mean_physical();
    let pairs = [
        ("g0", p.leak.g, 0.3),
        ("g1", p.channels[0].g, 120.0),
        ("g2", p.channels[1].g, 36.0),
        ("nu0", p.leak.nu.unwrap_or(f64::NAN), -54.4),
        ("nu1", p.channels[0].nu.unwrap_or(f64::NAN), 55.0),
        ("nu2", p.channels[1].nu.unwrap_or(f64::NAN), -77.0),
        ("c", p.c, 1.0),
    ];
    for (name, est, truth) in pairs {
        c.add(
            rel(est, truth) <= 0.01,
            format!("{name} = {est:.5} ({:.3}%)", 100.0 * rel(est, truth)),
        );
    }
    c.verdict()
}

fn snr(results: &[(&str, f64, f64, f64)]) -> Verdict {
    let mut c = Checks::new();
    for &(name, got, want, tol) in results {
        c.add(
            (got - want).abs() <= tol,
            format!("{name} {got:.2} dB (target {want} ± {tol})"),
        );
    }
    c.verdict()
}

fn gain_bounds() -> Verdict {
    let mut c = Checks::new();
    let start = Instant::now();
    let hh = ConductanceModel::hodgkin_huxley();
    let state_box = StateBox::new(VoltageRange::new(-77.0, 55.0), 3);
    let point = gain_bound(
        &hh,
        &Metric::identity(3),
        &state_box,
        &Sampler::Points(vec![(-77.0, vec![1.0, 1.0, 1.0])]),
    )
    .expect("valid metric");
    let b = point.bound_necessary_sampled;
    c.add(rel(b, 5.1e8) <= 0.05, format!("identity point {b:.4e}"));
    let metric = Metric::diagonal(&[0.21e6, 3.80e6, 3.16e6]).expect("positive weights");
    let search = gain_bound(
        &hh,
        &metric,
        &state_box,
        &Sampler::Uniform {
            count: 100_000,
            seed: 1,
        },
    )
    .expect("valid metric");
    let b = search.bound_necessary_sampled;
    c.add(
        (1.35e3..=5.4e3).contains(&b),
        format!(
            "diagonal search {b:.1} over {} samples",
            search.sample_count
        ),
    );
    let secs = start.elapsed().as_secs_f64();
    c.add(secs <= 10.0, format!("{secs:.2} s"));
    c.verdict()
}

fn structure_selection(
    a: &IdentificationSummary,
    b: &IdentificationSummary,
    cc: &IdentificationSummary,
) -> Verdict {
    let mut c = Checks::new();
    let g = |s: &IdentificationSummary, j: usize| s.mean_physical().channels[j].g;
    let (a3, a4) = (g(a, 2), g(a, 3));
    let (b3, b4) = (g(b, 2), g(b, 3));
    let (c3, c4) = (g(cc, 2), g(cc, 3));
    c.add(a3.abs() < 1.0, format!("A g3 = {a3:.4}"));
    c.add(c3.abs() < 1.0, format!("C g3 = {c3:.4}"));
    c.add(rel(b3, 90.0) <= 0.05, format!("B g3 = {b3:.4}"));
    c.add(a4.abs() < 0.01, format!("A g4 = {a4:.4}"));
    c.add(b4.abs() < 0.01, format!("B g4 = {b4:.4}"));
    c.add(rel(c4, 0.4) <= 0.10, format!("C g4 = {c4:.4}"));
    c.verdict()
}

fn probe() -> Verdict {
    let cfg = ProbeConfig {
        gamma: 50.0,
        ts: 0.005,
        baselines: vec![-80.0, -60.0, -40.0, -20.0, 0.0, 20.0],
        step_to: -45.0,
        step_time: 10.0,
        duration: 100.0,
        settle_time: 30.0,
        tolerance: 0.1,
        input_current: vec![],
    };
    let mut c = Checks::new();
    match step_response_probe(&ConductanceModel::hodgkin_huxley(), &cfg) {
        Ok(r) => c.add(
            r.contracting && r.max_spread_after_settle < 0.1,
            format!(
                "max spread for t >= 30 ms: {:.3e} mV",
                r.max_spread_after_settle
            ),
        ),
        Err(e) => c.add(false, e.to_string()),
    }
    c.verdict()
}

fn gating_invariance(c: &mut Checks) {
    let steps = 1_000_000;
    let mut worst = Vec::new();
    for (key, cfg_name) in BuiltinModelCatalog::KEYS
        .iter()
        .zip(["hh.cfg", "cs_a.cfg", "cs_b.cfg", "cs_c.cfg"])
    {
        let cfg = config(cfg_name);
        let model = BuiltinModelCatalog::get(key).expect("catalog key");
        let ts = cfg.experiment.ts;
        let r = signals::generate_reference(&cfg.reference_spec(99), ts, steps);
        let e = signals::generate_noise(&cfg.noise_spec(99), steps);
        let loop_cfg = ClosedLoopConfig::at_rest(&model, cfg.experiment.gamma, ts, -65.0, steps)
            .with_certified_range(experiment_range(&cfg, &model));
        match simulate_closed_loop(&model, &loop_cfg, &r, &e) {
            Ok(t) => {
                let inside =
                    (0..=steps).all(|k| t.gates_at(k).iter().all(|x| (0.0..=1.0).contains(x)));
                worst.push((key, inside));
            }
            Err(err) => {
                eprintln!("{key}: {err}");
                worst.push((key, false));
            }
        }
    }
    let bad: Vec<_> = worst
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(k, _)| **k)
        .collect();
    c.add(
        bad.is_empty(),
        format!(
            "(a) gates in [0,1] for 1e6 steps on {} models{}",
            worst.len(),
            if bad.is_empty() {
                String::new()
            } else {
                format!(", violated by {bad:?}")
            }
        ),
    );
}

fn residual_identity(c: &mut Checks) {
    let cfg = config("hh.cfg");
    let model = ConductanceModel::hodgkin_huxley();
    let n = 200_000;
    let ts = cfg.experiment.ts;
    let r = signals::generate_reference(&cfg.reference_spec(7), ts, n);
    let e = signals::generate_noise(&cfg.noise_spec(7), n);
    let loop_cfg = ClosedLoopConfig::at_rest(&model, 50.0, ts, -65.0, n);
    let traj = simulate_closed_loop(&model, &loop_cfg, &r, &e).expect("stable run");
    let structure = ModelStructure::from_model(
        &model,
        model.steady_state(-65.0),
        ts,
        &VoltageRange::working(),
    )
    .expect("valid structure");
    let gates = simulate_predictor_gates(&structure, traj.u2());
    let psi = build_regressor(&gates, traj.u1(), traj.u2(), &structure).expect("aligned");
    let theta = ParameterVector::truth(&model, structure.keys());
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let pred = theta.dot(psi.row(k));
        let y = traj.y()[k];
        let target = -traj.e()[k] / model.c;
        let scale = y.abs().max(pred.abs()).max(target.abs());
        worst = worst.max(((y - pred) - target).abs() / scale);
    }
    c.add(
        worst <= 1e-10,
        format!("(b) residual vs -e/c max rel {worst:.2e}"),
    );
}

fn least_squares_oracle(c: &mut Checks) {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut qr = IncrementalQr::new(7);
        for (row, &b) in rows.iter().zip(&y) {
            qr.push_row(row, b);
        }
        let theta = qr.solve().expect("full rank");
        let oracle = normal_equations(&rows, &y).expect("positive definite");
        for (a, b) in theta.iter().zip(&oracle) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    c.add(
        worst <= 1e-10,
        format!("(c) QR vs normal equations on 200 random 50x7 problems, max dev {worst:.2e}"),
    );
}

fn forgetting(c: &mut Checks) {
    // γ above the sampled necessary bound of the diagonal metric, ts well
    // inside both the gate invariance and the Euler stability limits
    let model = ConductanceModel::hodgkin_huxley();
    let metric = Metric::diagonal(&[0.21e6, 3.80e6, 3.16e6]).expect("positive weights");
    let state_box = StateBox::new(VoltageRange::new(-77.0, 55.0), 3);
    let bound = gain_bound(
        &model,
        &metric,
        &state_box,
        &Sampler::Uniform {
            count: 100_000,
            seed: 1,
        },
    )
    .expect("valid metric")
    .bound_necessary_sampled;
    let (gamma, ts) = (3000.0, 1e-4);
    let n = 200_000;
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let r: Vec<f64> = (0..n)
        .map(|k| -11.0 + 50.0 * ((k / 5000) as f64 * 0.7).sin() + rng.random_range(-5.0..5.0))
        .collect();
    let e: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let runs: Vec<_> = [(-70.0, -70.0), (40.0, 10.0)]
        .iter()
        .map(|&(v0, w_at)| {
            let mut cfg = ClosedLoopConfig::at_rest(&model, gamma, ts, v0, n);
            cfg.w0 = model.steady_state(w_at);
            simulate_closed_loop(&model, &cfg, &r, &e).expect("stable run")
        })
        .collect();
    let diff: Vec<f64> = (0..=n)
        .map(|k| {
            let dv = runs[0].v()[k] - runs[1].v()[k];
            let dw: f64 = runs[0]
                .gates_at(k)
                .iter()
                .zip(runs[1].gates_at(k))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            (dv * dv + dw).sqrt()
        })
        .collect();
    let factor = fit_decay_rate(&diff, 1e-12);
    c.add(
        gamma > bound && factor.is_some_and(|a| a < 1.0),
        format!(
            "(d) gamma {gamma} > bound {bound:.0}, ts {ts}: fitted factor per step {}",
            factor.map_or("n/a".into(), |a| format!("{a:.8}"))
        ),
    );
}

fn euler_formula(c: &mut Checks) {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut exact = true;
    for _ in 0..10_000 {
        let lambda = rng.random_range(1e-3..10.0);
        let sigma = rng.random_range(1e-3..50.0);
        let ts = rng.random_range(1e-6..0.5);
        let metric = Metric::diagonal(&[1.0, rng.random_range(1.0..100.0)]).expect("positive");
        let kappa = metric.condition_number();
        let want = 1.0 - 2.0 * ts * lambda + ts * ts * kappa * sigma * sigma;
        exact &= match euler_rate_bound(lambda, &metric, sigma, ts) {
            EulerRate::Contracting { alpha, alpha_sq } => {
                alpha_sq == want && alpha < 1.0 && alpha == want.max(0.0).sqrt()
            }
            EulerRate::Rejected { alpha_sq, .. } => alpha_sq == want && want >= 1.0,
        };
    }
    c.add(
        exact,
        "(e) Euler rate formula exact on 10^4 random inputs".into(),
    );
}

fn zoh_step(c: &mut Checks) {
    let mut worst: f64 = 0.0;
    for &(g, ts) in &[(10.0, 0.005), (1.0, 0.01), (0.5, 0.1)] {
        let f = zoh_second_order_lag(g, g * g, ts);
        let y = f.apply(&vec![1.0; 20_000]);
        for (k, yk) in y.iter().enumerate() {
            let t = k as f64 * ts;
            worst = worst.max((yk - (1.0 - (1.0 + g * t) * (-g * t).exp())).abs());
        }
    }
    c.add(
        worst <= 1e-10,
        format!("(f) ZOH step response max dev {worst:.2e}"),
    );
}

fn properties() -> Verdict {
    let mut c = Checks::new();
    gating_invariance(&mut c);
    residual_identity(&mut c);
    least_squares_oracle(&mut c);
    forgetting(&mut c);
    euler_formula(&mut c);
    zoh_step(&mut c);
    c.verdict()
}

fn main() -> ExitCode {
    let start = Instant::now();
    let (_, hh) = identify("hh.cfg");
    let (_, a) = identify("cs_a.cfg");
    let (_, b) = identify("cs_b.cfg");
    let (_, cs_c) = identify("cs_c.cfg");

    let verdicts = [
        ("1", "HH consistency", hh_consistency(&hh)),
        (
            "2",
            "SNR reproduction",
            snr(&[
                ("HH", hh.mean_snr_db, 30.8, 1.5),
                ("CS-A", a.mean_snr_db, 28.0, 2.0),
                ("CS-B", b.mean_snr_db, 26.0, 2.0),
                ("CS-C", cs_c.mean_snr_db, 29.0, 2.0),
            ]),
        ),
        ("3", "gain bounds", gain_bounds()),
        (
            "4",
            "structure selection",
            structure_selection(&a, &b, &cs_c),
        ),
        ("5", "contraction probe", probe()),
        ("6", "property suite", properties()),
    ];
    let mut all = true;
    for (id, name, v) in &verdicts {
        all &= v.passed;
        println!(
            "criterion {id} ({name}): {}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1} s",
        verdicts.iter().filter(|v| v.2.passed).count(),
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
