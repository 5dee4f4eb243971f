//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{rel_err, Fx};
use wlqmc::bounds::{decay_bound, decay_constants, finite_speed_constants, gap_lower_bound};
use wlqmc::checks::{
    check_balance, check_commutation, check_locality, check_radon_nikodym, free_point_count_p_values, CheckOutcome,
};
use wlqmc::estimators::{
    autocorrelation_rate, estimate_all, importance_correlations, importance_sampling_with, sample_series, DecayRate, Estimate,
    ImportanceParams, McmcParams,
};
use wlqmc::model::{model_constants, ModelConfig};
use wlqmc::{Boundary, Dynamics, Lifting, ModelSpec, Observable, ThermalState, WeightSign};

const TARGET_STDERR: f64 = 5e-3;

struct Line {
    id: u32,
    title: &'static str,
    pass: bool,
    soft: bool,
    detail: String,
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let started = Instant::now();
    let lines = vec![
        representation(),
        reversibility(),
        symmetry_identities(),
        locality(),
        bound_formulas(),
        decay_dominance(),
        free_factorization(),
        mixing_consistency(),
    ];
    let mut hard_failures = 0;
    for l in &lines {
        let verdict = match (l.pass, l.soft) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "SOFT-FAIL",
        };
        println!("criterion {} [{}] {verdict}: {}", l.id, l.title, l.detail);
        if !l.pass && !l.soft {
            hard_failures += 1;
        }
    }
    println!("acceptance finished in {:.1}s", started.elapsed().as_secs_f64());
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

struct Comparison {
    worst_z: f64,
    worst_stderr: f64,
    count: usize,
    failures: Vec<String>,
}

impl Comparison {
    fn new() -> Self {
        Self { worst_z: 0.0, worst_stderr: 0.0, count: 0, failures: Vec::new() }
    }

    fn add(&mut self, label: &str, est: &Estimate, exact: f64) {
        let z = (est.mean - exact).abs() / est.stderr;
        self.count += 1;
        self.worst_z = self.worst_z.max(z);
        self.worst_stderr = self.worst_stderr.max(est.stderr);
        if !(z <= 3.0) || est.stderr > TARGET_STDERR {
            self.failures.push(format!("{label}: {:.5} ± {:.5} vs exact {exact:.5}", est.mean, est.stderr));
        }
    }
}

fn chain(n: usize, lambda: f64, beta: f64) -> ModelSpec {
    ModelSpec::ising_chain(n, 1.0, 0.0, lambda, beta, Boundary::Free)
}

/// Quantum means and truncated correlations from the chain and from
/// importance sampling against the exact oracle.
fn representation() -> Line {
    let mut models = Vec::new();
    for beta in [0.2, 0.5, 1.0] {
        for h in [0.0, 0.3] {
            for lambda in [0.5, 1.0] {
                models.push((format!("site h={h} λ={lambda} β={beta}"), ModelSpec::ising_chain(1, 0.0, h, lambda, beta, Boundary::Free)));
            }
        }
        for n in [4, 6] {
            for lambda in [0.5, 1.0] {
                models.push((format!("chain{n} λ={lambda} β={beta}"), chain(n, lambda, beta)));
            }
        }
    }
    let mut mcmc = Comparison::new();
    let mut is = Comparison::new();
    for (k, (label, spec)) in models.iter().enumerate() {
        let n = spec.n_sites();
        let (mean_obs, pair) = if n == 1 {
            (Observable::spin(0), (Observable::spin(0), Observable::spin(0)))
        } else {
            (Observable::spin_product(&[0, 1]).unwrap(), (Observable::spin(0), Observable::spin(2)))
        };
        let exact = ThermalState::new(spec).unwrap();
        let exact_mean = exact.expectation(&mean_obs).unwrap();
        let exact_corr = exact.truncated_correlation(&pair.0, &pair.1).unwrap();
        let seed = 1000 + k as u64;

        let mut run_length = 20_000.0;
        let (m, c) = loop {
            let params = McmcParams::new(20.0, run_length, 50, seed).with_chains(4);
            let run = estimate_all(spec, std::slice::from_ref(&mean_obs), std::slice::from_ref(&pair), &params, None).unwrap();
            let worst = run.means[0].stderr.max(run.correlations[0].stderr);
            if worst <= TARGET_STDERR || run_length > 2e6 {
                break (run.means[0], run.correlations[0]);
            }
            run_length *= (worst / (0.9 * TARGET_STDERR)).powi(2);
        };
        mcmc.add(&format!("{label} mean (chain)"), &m, exact_mean);
        mcmc.add(&format!("{label} corr (chain)"), &c, exact_corr);

        let mut samples = 100_000usize;
        let (m, c) = loop {
            let params = ImportanceParams::new(samples, seed);
            let m = importance_sampling_with(spec, std::slice::from_ref(&mean_obs), &params).unwrap()[0];
            let c = importance_correlations(spec, std::slice::from_ref(&pair), &params).unwrap()[0];
            let worst = m.stderr.max(c.stderr);
            if worst <= TARGET_STDERR || samples > 20_000_000 {
                break (m, c);
            }
            samples = (samples as f64 * (worst / (0.9 * TARGET_STDERR)).powi(2)) as usize;
        };
        is.add(&format!("{label} mean (IS)"), &m, exact_mean);
        is.add(&format!("{label} corr (IS)"), &c, exact_corr);
    }
    let failures: Vec<String> = mcmc.failures.iter().chain(&is.failures).cloned().collect();
    Line {
        id: 1,
        title: "representation",
        pass: failures.is_empty(),
        soft: false,
        detail: format!(
            "{} models, {} chain and {} IS comparisons; worst |z| chain {:.2}, IS {:.2}; worst stderr {:.4}{}",
            models.len(),
            mcmc.count,
            is.count,
            mcmc.worst_z,
            is.worst_z,
            mcmc.worst_stderr.max(is.worst_stderr),
            if failures.is_empty() { String::new() } else { format!("; outside 3σ or stderr target: {}", failures.join(", ")) }
        ),
    }
}

fn probe_models() -> Vec<(&'static str, ModelSpec)> {
    let plaquette: ModelConfig = serde_json::from_value(serde_json::json!({
        "dimension": 2,
        "box": [3, 3],
        "boundary": "periodic",
        "beta": 1.3,
        "terms": [
            {"sites": [[0, 0], [1, 0]], "coeff": -1.0},
            {"sites": [[1, 0], [1, 1]], "coeff": -0.7},
            {"sites": [[0, 0], [1, 1], [2, 2]], "coeff": 0.4},
            {"sites": [[2, 1]], "coeff": 0.25},
            {"sites": [[0, 2], [2, 0]], "coeff": 0.5}
        ],
        "fields": [0.3, 1.0, 0.8, 1.2, 0.5, 0.9, 1.1, 0.7, 0.6]
    }))
    .unwrap();
    vec![
        ("chain6", ModelSpec::ising_chain(6, 1.0, 0.3, 1.0, 1.0, Boundary::Free)),
        ("ring5-half-positive", ModelSpec::ising_chain(5, 0.8, -0.2, 0.7, 2.0, Boundary::Periodic)
            .with_lifting(Lifting::HalfIntensity)
            .with_weight_sign(WeightSign::Positive)),
        ("lattice3x3", ModelSpec::from_config(&plaquette).unwrap()),
        ("free4", ModelSpec::ising_chain(4, 0.0, 0.0, 1.0, 1.5, Boundary::Free)),
    ]
}

fn summarize(outcomes: &[(&str, CheckOutcome)]) -> (bool, String) {
    let pass = outcomes.iter().all(|(_, o)| o.passed);
    let parts: Vec<String> = outcomes
        .iter()
        .map(|(name, o)| format!("{name}: {} probes, max {:.2e}{}", o.trials, o.max_residual, if o.passed { "" } else { " FAILED" }))
        .collect();
    (pass, parts.join("; "))
}

fn reversibility() -> Line {
    let outcomes: Vec<(&str, CheckOutcome)> = probe_models()
        .into_iter()
        .map(|(name, spec)| (name, check_balance(&Dynamics::new(&spec), 1000, 11).unwrap()))
        .collect();
    let (pass, detail) = summarize(&outcomes);
    Line { id: 2, title: "reversibility", pass, soft: false, detail: format!("tolerance 1e-12 relative; {detail}") }
}

fn symmetry_identities() -> Line {
    let mut outcomes = Vec::new();
    let mut sym_notes = Vec::new();
    for (name, spec) in probe_models() {
        let dynamics = Dynamics::new(&spec);
        let rn = check_radon_nikodym(&dynamics, 1000, 12).unwrap();
        sym_notes.push(format!("{name}: {}", rn.note.clone().unwrap_or_default()));
        outcomes.push((name, rn));
        outcomes.push((name, check_commutation(&dynamics, 1000, 13).unwrap()));
    }
    let (pass, detail) = summarize(&outcomes);
    Line {
        id: 3,
        title: "symmetry identities",
        pass,
        soft: false,
        detail: format!("Radon–Nikodym 1e-12 relative, commutation exact; {detail}; {}", sym_notes.join("; ")),
    }
}

fn locality() -> Line {
    let outcomes: Vec<(&str, CheckOutcome)> = probe_models()
        .into_iter()
        .map(|(name, spec)| (name, check_locality(&Dynamics::new(&spec), 1000, 14).unwrap()))
        .collect();
    let (pass, detail) = summarize(&outcomes);
    Line { id: 4, title: "locality", pass, soft: false, detail: format!("tolerance 1e-10 relative and |Δ| ≤ βC; {detail}") }
}

fn fx_gamma(c: f64, r: u64, lambda: f64, beta: f64, d: u32) -> Fx {
    let (c, lambda, beta) = (Fx::from_f64(c), Fx::from_f64(lambda), Fx::from_f64(beta));
    let bc = beta.mul(&c);
    let first = bc.mul(&Fx::int(-2)).exp();
    let growth = bc.mul(&Fx::int(3)).exp().sub(&Fx::int(1));
    let volume = Fx::int(2 * r as i64).powi(d);
    let spread = Fx::int(5).mul(&Fx::int(1).max(beta.mul(&lambda))).mul(&volume).mul(&growth);
    first.sub(&spread)
}

fn fx_speed(c: f64, lambda: f64, beta: f64) -> Fx {
    let (c, lambda, beta) = (Fx::from_f64(c), Fx::from_f64(lambda), Fx::from_f64(beta));
    Fx::int(10).mul(&Fx::int(1).max(lambda.mul(&beta))).mul(&beta.mul(&c).add(&Fx::int(1)).exp())
}

fn fx_volume(r: u64, d: u32) -> Fx {
    let r = Fx::int(r.max(1) as i64);
    let e = Fx::int(-1).div(&r).exp();
    Fx::int(2).div(&Fx::int(1).sub(&e)).powi(d)
}

fn bound_formulas() -> Line {
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut evaluated = 0;
    let mut note = |name: &str, got: f64, exact: &Fx, at: String| {
        let err = rel_err(got, exact.to_f64());
        evaluated += 1;
        if err > worst {
            worst = err;
            worst_at = format!("{name} at {at}");
        }
    };
    for c in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
        for r in [0u64, 1, 2, 3] {
            for lambda in [0.1, 1.0, 3.0] {
                for beta in [1e-6, 1e-4, 1e-3, 0.01, 0.1, 0.5, 1.0, 2.0] {
                    for d in [1u32, 2, 3] {
                        let at = format!("C={c} R={r} λ={lambda} β={beta} d={d}");
                        let gamma = gap_lower_bound(c, r, lambda, beta, d).unwrap();
                        let exact_gamma = fx_gamma(c, r, lambda, beta, d);
                        note("γ", gamma, &exact_gamma, at.clone());
                        let (n_fsp, m, eps) = finite_speed_constants(c, r, lambda, beta, d).unwrap();
                        let exact_n = fx_volume(r, d);
                        note("N", n_fsp, &exact_n, at.clone());
                        let exact_m = fx_speed(c, lambda, beta);
                        note("M", m, &exact_m, at.clone());
                        note("ε", eps, &Fx::int(1).div(&Fx::int(2 * r.max(1) as i64)), at.clone());
                        if gamma > 0.0 {
                            let (n, delta) = decay_constants(c, r, lambda, beta, d).unwrap();
                            note("N", n, &exact_n, at.clone());
                            let ratio = exact_gamma.div(&exact_m).min(Fx::int(1).div(&Fx::int(2)));
                            let exact_delta = ratio.div(&Fx::int(2 * r.max(1) as i64));
                            note("δ", delta, &exact_delta, at);
                        }
                    }
                }
            }
        }
    }
    let formulas_ok = worst <= 1e-12;

    let limit = gap_lower_bound(4.0, 1, 1.0, 1e-9, 1).unwrap();
    let limit_ok = limit > 1.0 - 1e-6;

    let mut monotone_ok = true;
    for (c, r, lambda, d) in [(4.0, 1u64, 1.0, 1u32), (2.0, 1, 0.5, 2), (0.7, 2, 3.0, 1), (8.0, 0, 1.0, 3)] {
        let values: Vec<f64> = (0..100).map(|k| gap_lower_bound(c, r, lambda, 0.02 * k as f64, d).unwrap()).collect();
        monotone_ok &= values.windows(2).all(|w| w[1] < w[0]);
    }
    Line {
        id: 5,
        title: "bound formulas",
        pass: formulas_ok && limit_ok && monotone_ok,
        soft: false,
        detail: format!(
            "{evaluated} evaluations against 256-bit fixed point, worst relative error {worst:.2e} ({worst_at}); γ(β=1e-9) = {limit:.12}; strictly decreasing on 100-point β grids: {monotone_ok}"
        ),
    }
}

fn decay_dominance() -> Line {
    let mut models = Vec::new();
    for n in [2usize, 4, 6, 8, 10] {
        for lambda in [0.5, 2.0] {
            models.push(ModelSpec::ising_chain(n, 1.0, 0.2, lambda, 0.003, Boundary::Free));
        }
    }
    models.push(ModelSpec::ising_chain(6, 1.0, 0.0, 1.0, 0.002, Boundary::Periodic));
    models.push(ModelSpec::ising_chain(3, 0.0, 0.4, 1.0, 2.0, Boundary::Free));
    let lattice: ModelConfig = serde_json::from_value(serde_json::json!({
        "dimension": 2, "box": [2, 3], "boundary": "free", "beta": 0.002,
        "terms": [
            {"sites": [[0, 0], [1, 0]], "coeff": -0.5}, {"sites": [[0, 1], [1, 1]], "coeff": -0.5},
            {"sites": [[0, 2], [1, 2]], "coeff": -0.5}, {"sites": [[0, 0], [0, 1]], "coeff": -0.5},
            {"sites": [[0, 1], [0, 2]], "coeff": -0.5}, {"sites": [[1, 0], [1, 1]], "coeff": -0.5},
            {"sites": [[1, 1], [1, 2]], "coeff": -0.5}
        ],
        "fields": 1.5
    }))
    .unwrap();
    models.push(ModelSpec::from_config(&lattice).unwrap());

    let mut pairs = 0;
    let mut tightest: f64 = 0.0;
    let mut violations = Vec::new();
    let mut skipped = 0;
    for spec in &models {
        let k = model_constants(spec);
        let gamma = gap_lower_bound(k.c, k.r, k.lambda_max, spec.beta(), spec.lattice().dimension() as u32).unwrap();
        if gamma <= 0.0 {
            skipped += 1;
            continue;
        }
        let exact = ThermalState::new(spec).unwrap();
        let n = spec.n_sites();
        for i in 0..n {
            for j in 0..n {
                let (f, g) = (Observable::spin(i), Observable::spin(j));
                let corr = exact.truncated_correlation(&f, &g).unwrap().abs();
                let bound = decay_bound(spec, &f, &g).unwrap();
                pairs += 1;
                tightest = tightest.max(corr / bound);
                if corr > bound + 1e-12 {
                    violations.push(format!("n={n} ({i},{j}): {corr:e} > {bound:e}"));
                }
            }
        }
    }
    Line {
        id: 6,
        title: "decay-bound dominance",
        pass: violations.is_empty() && skipped == 0,
        soft: false,
        detail: format!(
            "{} models with γ > 0, {pairs} single-site pairs, largest |corr|/bound {tightest:.3e}{}",
            models.len() - skipped,
            if violations.is_empty() { String::new() } else { format!("; violations: {}", violations.join(", ")) }
        ),
    }
}

fn fitted(rate: &DecayRate) -> String {
    match rate {
        DecayRate::Fitted { rate, stderr, lags } => format!("{rate:.3} ± {stderr:.3} over {lags} lags"),
        DecayRate::ExceedsResolution { lower_bound } => format!("> {lower_bound:.3} (beyond lag resolution)"),
    }
}

fn free_factorization() -> Line {
    let mut pass = true;
    let mut parts = Vec::new();
    for lifting in [Lifting::HalfIntensity, Lifting::Trace] {
        let fields = serde_json::json!([0.5, 1.0, 2.0]);
        let config: ModelConfig = serde_json::from_value(serde_json::json!({
            "dimension": 1, "box": [3], "beta": 1.5, "terms": [], "fields": fields,
        }))
        .unwrap();
        let spec = ModelSpec::from_config(&config).unwrap().with_lifting(lifting);
        let p = free_point_count_p_values(&spec, 4000, 5.0, 21);
        let ok = p.iter().all(|v| v.is_some_and(|p| p > 0.01));
        pass &= ok;
        let law = match lifting {
            Lifting::HalfIntensity => "Poisson(λβ/2)",
            Lifting::Trace => "Poisson(λβ) with doubled empty weight",
        };
        parts.push(format!(
            "{law} p-values [{}]",
            p.iter().map(|v| format!("{:.3}", v.unwrap_or(f64::NAN))).collect::<Vec<_>>().join(", ")
        ));

        let single = ModelSpec::ising_chain(1, 0.0, 0.0, 1.0, 1.0, Boundary::Free).with_lifting(lifting);
        let series = sample_series(&single, &Observable::spin(0), 20.0, 400_000, 0.05, 22, false).unwrap();
        let rate = autocorrelation_rate(&series).unwrap();
        let ok = rate.rate() >= 1.0 - 2.0 * rate.stderr();
        pass &= ok;
        parts.push(format!("σ0(0) decay rate {}{}", fitted(&rate), if ok { "" } else { " (< 1)" }));
    }
    Line { id: 7, title: "free-field factorization", pass, soft: false, detail: parts.join("; ") }
}

fn mixing_consistency() -> Line {
    let mut pass = true;
    let mut parts = Vec::new();
    for lifting in [Lifting::Trace, Lifting::HalfIntensity] {
        for (n, boundary) in [(4usize, Boundary::Free), (6, Boundary::Periodic)] {
            let spec = ModelSpec::ising_chain(n, 1.0, 0.0, 1.0, 0.004, boundary).with_lifting(lifting);
            let k = model_constants(&spec);
            let gamma = gap_lower_bound(k.c, k.r, k.lambda_max, spec.beta(), 1).unwrap();
            assert!(gamma > 0.3);
            let series = sample_series(&spec, &Observable::spin(0), 20.0, 200_000, 0.05, 31, false).unwrap();
            let rate = autocorrelation_rate(&series).unwrap();
            let ok = rate.rate() >= gamma - 2.0 * rate.stderr();
            pass &= ok;
            parts.push(format!("{lifting:?} n={n}: γ = {gamma:.3}, rate {}", fitted(&rate)));
        }
    }
    Line { id: 8, title: "mixing consistency (soft)", pass, soft: true, detail: parts.join("; ") }
}
