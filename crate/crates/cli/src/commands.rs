use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use wlqmc::checks::{run_check, CheckKind, CheckOutcome};
use wlqmc::estimators::{estimate_all, importance_correlations, importance_sampling_with, write_series_csv, write_trace_csv, ImportanceParams, Recorder};
use wlqmc::model::support_distance;
use wlqmc::oracle::{build_hamiltonian_with_cap, ThermalState};
use wlqmc::worldline::write_trajectory_csv;
use wlqmc::{bounds_report, decay_bound, Dynamics, McmcParams, ModelConfig, ModelSpec, MoveKind, Observable, ObservableConfig, Observation, OracleError};

use crate::report::*;
use crate::{BoundsArgs, Common, ExactArgs, SampleArgs, VerifyArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Cap(String),
    #[error("{0}")]
    Verification(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Io { .. } => 1,
            CliError::Cap(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

struct Setup {
    spec: ModelSpec,
    observables: Vec<(String, Observable)>,
}

fn setup(common: &Common) -> Result<Setup, CliError> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(input)?;
    }
    let raw: ModelConfig = read_json(&common.config)?;
    let spec = ModelSpec::from_config(&raw).map_err(|e| CliError::Input(format!("{}: {e}", common.config.display())))?;
    let mut observables = Vec::new();
    for path in &common.observables {
        let raw: ObservableConfig = read_json(path)?;
        let f = Observable::from_config(spec.lattice(), &raw).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        observables.push((id, f));
    }
    if observables.is_empty() {
        observables.push(("sigma_0".to_string(), Observable::spin(0)));
    }
    Ok(Setup { spec, observables })
}

fn pairs(observables: &[(String, Observable)]) -> Vec<(String, (Observable, Observable))> {
    let mut out = Vec::new();
    for (a, (ia, fa)) in observables.iter().enumerate() {
        for (ib, fb) in &observables[a..] {
            out.push((format!("{ia}|{ib}"), (fa.clone(), fb.clone())));
        }
    }
    out
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).map_err(io_err(path)),
        None => io::stdout().write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>"))),
    }
}

fn oracle_error(e: OracleError) -> CliError {
    match e {
        OracleError::CapExceeded { .. } => CliError::Cap(e.to_string()),
        OracleError::ObservableSite { .. } => CliError::Input(e.to_string()),
    }
}

pub fn bounds(args: &BoundsArgs) -> Result<(), CliError> {
    let mut timings = Timings::default();
    let Setup { spec, observables } = setup(&args.common)?;
    let report = timings.record("bounds", || bounds_report(&spec));
    let decay_bounds = if args.common.observables.is_empty() {
        Vec::new()
    } else {
        pairs(&observables)
            .into_iter()
            .map(|(id, (f, g))| DecayBoundEntry {
                observable_id: id,
                distance: support_distance(spec.lattice(), &f.effective_support(), &g.effective_support()),
                bound: decay_bound(&spec, &f, &g).ok(),
            })
            .collect()
    };
    emit(&BoundsOutput { report, decay_bounds, timings }, args.common.out.as_deref())
}

pub fn exact(args: &ExactArgs) -> Result<(), CliError> {
    let mut timings = Timings::default();
    let Setup { spec, observables } = setup(&args.common)?;
    let h = build_hamiltonian_with_cap(&spec, args.cap).map_err(oracle_error)?;
    if let Some(path) = &args.dump_matrix {
        let mut w = create(path)?;
        h.write_dump(&mut w).and_then(|_| w.flush()).map_err(io_err(path))?;
    }
    let state = timings.record("diagonalize", || ThermalState::with_cap(&spec, args.cap)).map_err(oracle_error)?;
    let mut means = Vec::new();
    for (id, f) in &observables {
        means.push(ExactValue { observable_id: id.clone(), value: state.expectation(f).map_err(oracle_error)? });
    }
    let mut correlations = Vec::new();
    for (id, (f, g)) in pairs(&observables) {
        correlations.push(ExactValue { observable_id: id, value: state.truncated_correlation(&f, &g).map_err(oracle_error)? });
    }
    let output = ExactOutput {
        spec_hash: spec.spec_hash(),
        n_sites: spec.n_sites(),
        beta: spec.beta(),
        eigen_residual: state.eigen_residual(&h),
        means,
        correlations,
        timings,
    };
    emit(&output, args.common.out.as_deref())
}

fn parse_checks(names: &[String]) -> Result<Vec<CheckKind>, CliError> {
    names
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| CheckKind::parse(s).ok_or_else(|| CliError::Input(format!("unknown check `{s}`"))))
        .collect()
}

fn run_checks(dynamics: &Dynamics, kinds: &[CheckKind], trials: usize, seed: u64) -> Result<Vec<CheckOutcome>, CliError> {
    kinds.iter().map(|&k| run_check(dynamics, k, trials, seed).map_err(input)).collect()
}

/// Reports every failing probe on stderr so it can be replayed.
fn failure(outcomes: &[CheckOutcome]) -> Option<CliError> {
    let failed: Vec<&CheckOutcome> = outcomes.iter().filter(|o| !o.passed).collect();
    if failed.is_empty() {
        return None;
    }
    for o in &failed {
        if let Some(probe) = &o.failing_probe {
            eprintln!("{} probe: {}", o.check.name(), serde_json::to_string(probe).expect("probe serializes"));
        }
    }
    let names: Vec<&str> = failed.iter().map(|o| o.check.name()).collect();
    Some(CliError::Verification(format!("verification failed: {}", names.join(", "))))
}

pub fn verify(args: &VerifyArgs) -> Result<(), CliError> {
    let mut timings = Timings::default();
    let Setup { spec, .. } = setup(&args.common)?;
    let kinds = parse_checks(&args.checks)?;
    if args.trials == 0 {
        return Err(CliError::Input("--trials must be positive".into()));
    }
    let mut dynamics = Dynamics::new(&spec);
    if let Some(factor) = args.corrupt_rate {
        dynamics = dynamics.with_corrupted_add_rate(factor);
    }
    let checks = timings.record("checks", || run_checks(&dynamics, &kinds, args.trials, args.common.seed))?;
    let err = failure(&checks);
    let report = VerifyReport { spec_hash: spec.spec_hash(), seed: args.common.seed, trials: args.trials, passed: err.is_none(), checks, timings };
    emit(&report, args.common.out.as_deref())?;
    err.map_or(Ok(()), Err)
}

pub fn sample(args: &SampleArgs, correlate: bool) -> Result<(), CliError> {
    let mut timings = Timings::default();
    let seed = args.common.seed;
    let Setup { spec, observables } = setup(&args.common)?;
    let observation = match args.grid {
        Some(dt) => Observation::Grid { dt },
        None => Observation::TimeWeighted,
    };
    let params = McmcParams::new(args.burn_in, args.run_length, args.batches, seed)
        .with_chains(args.chains)
        .with_observation(observation)
        .with_rotation_average(args.rotation_average);
    params.validate().map_err(input)?;
    if args.importance.is_some_and(|n| n < 100) {
        return Err(CliError::Input("--importance needs at least 100 samples".into()));
    }
    let kinds = parse_checks(&args.checks)?;

    let dynamics = Dynamics::new(&spec);
    let checks = timings.record("checks", || run_checks(&dynamics, &kinds, args.trials, seed))?;
    if let Some(err) = failure(&checks) {
        return Err(err);
    }

    let exact = if args.exact {
        let state = timings.record("exact", || ThermalState::new(&spec)).map_err(oracle_error)?;
        let values: Result<Vec<ExactValue>, CliError> = if correlate {
            pairs(&observables)
                .into_iter()
                .map(|(id, (f, g))| Ok(ExactValue { observable_id: id, value: state.truncated_correlation(&f, &g).map_err(oracle_error)? }))
                .collect()
        } else {
            observables
                .iter()
                .map(|(id, f)| Ok(ExactValue { observable_id: id.clone(), value: state.expectation(f).map_err(oracle_error)? }))
                .collect()
        };
        Some(values?)
    } else {
        None
    };

    let pair_list = pairs(&observables);
    let (mean_obs, pair_obs): (Vec<Observable>, Vec<(Observable, Observable)>) = if correlate {
        (Vec::new(), pair_list.iter().map(|(_, p)| p.clone()).collect())
    } else {
        (observables.iter().map(|(_, f)| f.clone()).collect(), Vec::new())
    };
    let ids: Vec<String> = if correlate { pair_list.iter().map(|(id, _)| id.clone()).collect() } else { observables.iter().map(|(id, _)| id.clone()).collect() };

    let mut recorder = Recorder { trace: args.trace.as_ref().map(|_| Vec::new()), series: args.series.as_ref().map(|_| Vec::new()) };
    let wants_recorder = args.trace.is_some() || args.series.is_some();
    let run = timings
        .record("chain", || estimate_all(&spec, &mean_obs, &pair_obs, &params, wants_recorder.then_some(&mut recorder as _)))
        .map_err(input)?;
    let chain_estimates = if correlate { &run.correlations } else { &run.means };
    let mut estimates: Vec<EstimateEntry> = ids.iter().zip(chain_estimates).map(|(id, e)| EstimateEntry::chain(id.clone(), *e, &params)).collect();

    if let Some(n) = args.importance {
        let ip = ImportanceParams::new(n, seed);
        let is = timings
            .record("importance", || if correlate { importance_correlations(&spec, &pair_obs, &ip) } else { importance_sampling_with(&spec, &mean_obs, &ip) })
            .map_err(input)?;
        estimates.extend(ids.iter().zip(is).map(|(id, e)| EstimateEntry::importance(id.clone(), e, n, seed)));
    }

    if let (Some(path), Some(trace)) = (&args.trace, &recorder.trace) {
        let mut w = create(path)?;
        write_trace_csv(trace, &mut w).and_then(|_| w.flush()).map_err(io_err(path))?;
    }
    if let (Some(path), Some(series)) = (&args.series, &recorder.series) {
        let mut w = create(path)?;
        write_series_csv(series, &mut w).and_then(|_| w.flush()).map_err(io_err(path))?;
    }
    if let Some(path) = &args.final_config {
        let mut w = create(path)?;
        write_trajectory_csv(&run.data.final_configs[0], &mut w).and_then(|_| w.flush()).map_err(io_err(path))?;
    }

    let stats = &run.data.stats;
    let moves = MoveKind::ALL
        .iter()
        .map(|&k| MoveSummary { kind: k.name(), proposed: stats.proposed[k.index()], accepted: stats.accepted[k.index()] })
        .collect();
    let report = ExperimentReport {
        command: if correlate { "correlate" } else { "sample" },
        spec_hash: spec.spec_hash(),
        seed,
        params,
        estimates,
        exact,
        bounds: bounds_report(&spec),
        checks,
        moves,
        timings,
    };
    emit(&report, args.common.out.as_deref())
}
