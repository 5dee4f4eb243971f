//! Randomized verification of the pointwise identities of the dynamics and
//! a goodness-of-fit test of the free stationary point counts.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

use crate::dynamics::{random_config, random_move, random_move_of, ChainState, Dynamics};
use crate::estimators::chain_rng;
use crate::model::ModelSpec;
use crate::worldline::{apply_move, path_energy, LocalEnergy, Mark, Move, MoveClass, WorldlineConfig, WorldlineError};

pub const BALANCE_TOLERANCE: f64 = 1e-12;
pub const RADON_NIKODYM_TOLERANCE: f64 = 1e-12;
/// Swapping the two moves of `r` reorders a handful of floating point
/// operations; anything beyond a few ulps is a real asymmetry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-13;
pub const LOCALITY_TOLERANCE: f64 = 1e-10;
pub const POISSON_LEVEL: f64 = 0.01;
const PROBE_POINTS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Balance,
    Rn,
    Commute,
    Locality,
    Poisson,
}

impl CheckKind {
    pub const ALL: [CheckKind; 5] = [CheckKind::Rn, CheckKind::Commute, CheckKind::Balance, CheckKind::Poisson, CheckKind::Locality];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Balance => "balance",
            CheckKind::Rn => "rn",
            CheckKind::Commute => "commute",
            CheckKind::Locality => "locality",
            CheckKind::Poisson => "poisson",
        }
    }

    pub fn parse(s: &str) -> Option<CheckKind> {
        CheckKind::ALL.into_iter().find(|k| k.name() == s)
    }

    fn stream(self) -> u64 {
        match self {
            CheckKind::Balance => 1,
            CheckKind::Rn => 2,
            CheckKind::Commute => 3,
            CheckKind::Locality => 4,
            CheckKind::Poisson => 5,
        }
    }
}

/// A configuration and the moves a check was evaluated on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub config: WorldlineConfig,
    pub moves: Vec<Move>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check: CheckKind,
    pub trials: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub failing_probe: Option<Probe>,
    pub note: Option<String>,
}

struct Worst {
    residual: f64,
    failing: Option<Probe>,
}

impl Worst {
    fn new() -> Self {
        Self { residual: 0.0, failing: None }
    }

    fn record(&mut self, residual: f64, tolerance: f64, probe: impl FnOnce() -> Probe) {
        let residual = if residual.is_nan() { f64::INFINITY } else { residual };
        self.residual = self.residual.max(residual);
        if residual > tolerance && self.failing.is_none() {
            self.failing = Some(probe());
        }
    }
}

fn finish(check: CheckKind, trials: usize, tolerance: f64, worst: Worst, note: Option<String>) -> CheckOutcome {
    CheckOutcome {
        check,
        trials,
        max_residual: worst.residual,
        tolerance,
        passed: worst.failing.is_none(),
        failing_probe: worst.failing,
        note,
    }
}

/// Detailed balance on random `(config, move)` probes.
pub fn check_balance(dynamics: &Dynamics, trials: usize, seed: u64) -> Result<CheckOutcome, WorldlineError> {
    let mut rng = chain_rng(seed, CheckKind::Balance.stream());
    let mut worst = Worst::new();
    for _ in 0..trials {
        let config = random_config(dynamics.spec(), &mut rng, PROBE_POINTS);
        let m = random_move(&config, &mut rng);
        let r = dynamics.detailed_balance_residual(&config, &m)?;
        worst.record(r, BALANCE_TOLERANCE, || Probe { config, moves: vec![m] });
    }
    Ok(finish(CheckKind::Balance, trials, BALANCE_TOLERANCE, worst, None))
}

/// Two random moves on distinct random sites.
fn random_pair<R: Rng + ?Sized>(config: &WorldlineConfig, rng: &mut R) -> Option<(Move, Move)> {
    let n = config.n_sites();
    if n < 2 {
        return None;
    }
    let classes = [MoveClass::Addition, MoveClass::Removal, MoveClass::Flip];
    loop {
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        let g = random_move_of(config, i, classes[rng.random_range(0..3)], rng);
        let d = random_move_of(config, j, classes[rng.random_range(0..3)], rng);
        if let (Some(g), Some(d)) = (g, d) {
            return Some((g, d));
        }
    }
}

/// Symmetry of `r` and the Radon–Nikodym identities on random pairs of
/// moves at distinct sites. The worst residual is the larger of the two
/// relative to its own tolerance.
pub fn check_radon_nikodym(dynamics: &Dynamics, trials: usize, seed: u64) -> Result<CheckOutcome, WorldlineError> {
    let mut rng = chain_rng(seed, CheckKind::Rn.stream());
    let mut sym = Worst::new();
    let mut rn = Worst::new();
    let mut done = 0;
    let mut add_add = 0;
    for _ in 0..trials {
        let config = random_config(dynamics.spec(), &mut rng, PROBE_POINTS);
        let Some((g, d)) = random_pair(&config, &mut rng) else { break };
        let report = dynamics.check_symmetry_identities(&config, &g, &d)?;
        done += 1;
        if g.class() == MoveClass::Addition && d.class() == MoveClass::Addition {
            add_add += 1;
        }
        let probe = || Probe { config: config.clone(), moves: vec![g, d] };
        sym.record(report.symmetry_residual, SYMMETRY_TOLERANCE, probe);
        if let Some(r) = report.radon_nikodym_residual {
            rn.record(r, RADON_NIKODYM_TOLERANCE, probe);
        }
    }
    let note = Some(format!(
        "max symmetry residual {:.2e} (tolerance {SYMMETRY_TOLERANCE:e}); {add_add} addition/addition pairs",
        sym.residual
    ));
    let worst = Worst { residual: rn.residual, failing: sym.failing.or(rn.failing) };
    let note = if done == 0 { Some("needs at least two sites".to_string()) } else { note };
    Ok(finish(CheckKind::Rn, done, RADON_NIKODYM_TOLERANCE, worst, note))
}

/// Moves at distinct sites commute exactly.
pub fn check_commutation(dynamics: &Dynamics, trials: usize, seed: u64) -> Result<CheckOutcome, WorldlineError> {
    let mut rng = chain_rng(seed, CheckKind::Commute.stream());
    let mut worst = Worst::new();
    let mut done = 0;
    for _ in 0..trials {
        let config = random_config(dynamics.spec(), &mut rng, PROBE_POINTS);
        let Some((g, d)) = random_pair(&config, &mut rng) else { break };
        let gd = apply_move(&apply_move(&config, &g)?, &d)?;
        let dg = apply_move(&apply_move(&config, &d)?, &g)?;
        done += 1;
        let defect = if gd == dg { 0.0 } else { 1.0 };
        worst.record(defect, 0.0, || Probe { config: config.clone(), moves: vec![g, d] });
    }
    let note = if done == 0 { Some("needs at least two sites".to_string()) } else { None };
    Ok(finish(CheckKind::Commute, done, 0.0, worst, note))
}

/// Residual of the local increment against the difference of global path
/// energies, relative to the largest of `|Δ|`, `|Ĥ(x)|`, `|Ĥ(m x)|`; a
/// probe also fails if `|Δ| > βC`.
pub fn locality_residual(dynamics: &Dynamics, local: &mut LocalEnergy, config: &WorldlineConfig, m: &Move) -> Result<f64, WorldlineError> {
    let spec = dynamics.spec();
    let delta = local.move_delta(spec, config, m)?;
    let before = path_energy(spec, config);
    let after = path_energy(spec, &apply_move(config, m)?);
    let scale = delta.abs().max(before.abs()).max(after.abs());
    let residual = if scale == 0.0 { 0.0 } else { (delta - (after - before)).abs() / scale };
    let envelope = spec.beta() * dynamics.constants().c;
    Ok(if delta.abs() > envelope * (1.0 + 1e-12) { f64::INFINITY } else { residual })
}

pub fn check_locality(dynamics: &Dynamics, trials: usize, seed: u64) -> Result<CheckOutcome, WorldlineError> {
    let mut rng = chain_rng(seed, CheckKind::Locality.stream());
    let mut local = LocalEnergy::new(dynamics.spec().n_sites());
    let mut worst = Worst::new();
    for _ in 0..trials {
        let config = random_config(dynamics.spec(), &mut rng, PROBE_POINTS);
        let m = random_move(&config, &mut rng);
        let r = locality_residual(dynamics, &mut local, &config, &m)?;
        worst.record(r, LOCALITY_TOLERANCE, || Probe { config, moves: vec![m] });
    }
    Ok(finish(CheckKind::Locality, trials, LOCALITY_TOLERANCE, worst, None))
}

/// Stationary law of `|ξ_i|` when `H ≡ 0`: Poisson with mean `κ_i β`,
/// with the zero class reweighted by `1 + (ε - 1) e^{-κ_i β}` for empty
/// site weight `ε`.
pub fn free_count_law(kappa_beta: f64, empty_weight: f64, max: usize) -> Vec<f64> {
    let pois = Poisson::new(kappa_beta).expect("positive mean");
    let mut p: Vec<f64> = (0..=max).map(|a| pois.pmf(a as u64)).collect();
    p[0] *= 1.0 + (empty_weight - 1.0) * (-kappa_beta).exp();
    let norm = 1.0 + (empty_weight - 1.0) * (-2.0 * kappa_beta).exp();
    p.iter_mut().for_each(|v| *v /= norm);
    p
}

/// Pearson chi-square p-value of `counts` (one sample per entry) against
/// `law`; bins with expectation below 5 are pooled into the tail.
pub fn chi_square_p_value(samples: &[usize], law: impl Fn(usize) -> Vec<f64>) -> f64 {
    let n = samples.len() as f64;
    let top = samples.iter().copied().max().unwrap_or(0) + 1;
    let probs = law(top + 50);
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut covered = 0.0;
    let mut a = 0;
    while a < probs.len() && n * probs[a] >= 5.0 && n * (1.0 - covered - probs[a]) >= 5.0 {
        let observed = samples.iter().filter(|&&s| s == a).count() as f64;
        bins.push((observed, n * probs[a]));
        covered += probs[a];
        a += 1;
    }
    let tail_observed = samples.iter().filter(|&&s| s >= a).count() as f64;
    bins.push((tail_observed, n * (1.0 - covered)));
    if bins.len() < 2 {
        return 1.0;
    }
    let stat: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let df = (bins.len() - 1) as f64;
    1.0 - ChiSquared::new(df).expect("positive degrees of freedom").cdf(stat)
}

/// Per-site chi-square p-values for `|ξ_i|` in the free chain, sampled
/// every `spacing` units of process time; `None` for sites without
/// transverse field.
pub fn free_point_count_p_values(spec: &ModelSpec, samples: usize, spacing: f64, seed: u64) -> Vec<Option<f64>> {
    let free = spec.without_interactions();
    let dynamics = Dynamics::new(&free);
    let mut rng = chain_rng(seed, CheckKind::Poisson.stream());
    let start = dynamics.sample_prior(&mut rng);
    let mut state = ChainState::new(start, rng);
    let n = free.n_sites();
    let mut counts: Vec<Vec<usize>> = vec![Vec::with_capacity(samples); n];
    let mut next = 10.0;
    while counts[0].len() < samples {
        let snapshot: Vec<usize> = state.config.sites().iter().map(|w| w.count(Mark::Xi)).collect();
        dynamics.step(&mut state);
        while next < state.clock && counts[0].len() < samples {
            for (c, &s) in counts.iter_mut().zip(&snapshot) {
                c.push(s);
            }
            next += spacing;
        }
    }
    let beta = free.beta();
    let empty_weight = free.lifting().empty_site_weight();
    (0..n)
        .map(|i| {
            let kb = dynamics.intensity(i) * beta;
            (kb > 0.0).then(|| chi_square_p_value(&counts[i], |max| free_count_law(kb, empty_weight, max)))
        })
        .collect()
}

/// Free point counts at every site pass at level 0.01 after a Bonferroni
/// correction over sites.
pub fn check_poisson(dynamics: &Dynamics, trials: usize, seed: u64) -> CheckOutcome {
    let p = free_point_count_p_values(dynamics.spec(), trials.max(200), 5.0, seed);
    let tested: Vec<f64> = p.iter().flatten().copied().collect();
    let level = POISSON_LEVEL / tested.len().max(1) as f64;
    let min_p = tested.iter().copied().fold(1.0, f64::min);
    CheckOutcome {
        check: CheckKind::Poisson,
        trials: trials.max(200),
        max_residual: min_p,
        tolerance: level,
        passed: min_p > level,
        failing_probe: None,
        note: Some(format!("smallest per-site p-value {min_p:.4} over {} sites", tested.len())),
    }
}

pub fn run_check(dynamics: &Dynamics, kind: CheckKind, trials: usize, seed: u64) -> Result<CheckOutcome, WorldlineError> {
    match kind {
        CheckKind::Balance => check_balance(dynamics, trials, seed),
        CheckKind::Rn => check_radon_nikodym(dynamics, trials, seed),
        CheckKind::Commute => check_commutation(dynamics, trials, seed),
        CheckKind::Locality => check_locality(dynamics, trials, seed),
        CheckKind::Poisson => Ok(check_poisson(dynamics, trials, seed)),
    }
}
