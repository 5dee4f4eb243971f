//! Estimates of quantum means and truncated correlations from the worldline
//! chain (time-weighted batch means, jackknife over batches) and from
//! independent draws of the prior (self-normalized importance sampling).

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ChainState, Dynamics, EventRecord, MoveStats};
use crate::model::{ModelSpec, Observable, Spin};
use crate::worldline::{path_energy, WorldlineConfig};

/// Shortest batch, in process time, the batch-means error bars accept.
pub const MIN_BATCH_DURATION: f64 = 1.0;
pub const MIN_BATCHES: usize = 8;
pub const DEFAULT_ESS_FLOOR: f64 = 50.0;
const CORRELATION_CUTOFF: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("run length must be positive and finite, got {0}")]
    RunLength(f64),
    #[error("burn-in must be nonnegative and finite, got {0}")]
    BurnIn(f64),
    #[error("batch count must be at least {MIN_BATCHES}, got {0}")]
    TooFewBatches(usize),
    #[error("run too short: {batches} batches of {duration} process time each, need at least {MIN_BATCH_DURATION}")]
    RunTooShort { batches: usize, duration: f64 },
    #[error("grid spacing {dt} leaves a batch without observations")]
    GridTooCoarse { dt: f64 },
    #[error("grid spacing must be positive and finite, got {0}")]
    GridSpacing(f64),
    #[error("at least one chain is required")]
    NoChains,
    #[error("importance sampling needs at least 100 samples, got {0}")]
    TooFewSamples(usize),
    #[error("effective sample size {ess:.1} is below the floor {floor}")]
    LowEss { ess: f64, floor: f64 },
    #[error("observable refers to site {site} but the model has {n_sites} sites")]
    ObservableSite { site: usize, n_sites: usize },
    #[error("series is constant; autocorrelation undefined")]
    ConstantSeries,
    #[error("autocorrelation window too short: {lags} usable lags")]
    WindowTooShort { lags: usize },
    #[error("series timestamps are not equally spaced")]
    UnevenSpacing,
}

/// A point estimate with its error bar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: u64,
    /// Integrated autocorrelation time in process time units.
    pub tau_int: f64,
    pub ess: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Observation {
    /// Every holding interval contributes its value times its duration.
    TimeWeighted,
    /// Snapshots every `dt` units of process time.
    Grid { dt: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcParams {
    pub burn_in: f64,
    pub run_length: f64,
    pub batch_count: usize,
    pub seed: u64,
    /// Independent chains, each with its own stream; batches are pooled.
    pub chains: usize,
    pub observation: Observation,
    /// Replace `f(σ(0))` by its average over the circle.
    pub rotation_average: bool,
}

impl McmcParams {
    pub fn new(burn_in: f64, run_length: f64, batch_count: usize, seed: u64) -> Self {
        Self {
            burn_in,
            run_length,
            batch_count,
            seed,
            chains: 1,
            observation: Observation::TimeWeighted,
            rotation_average: false,
        }
    }

    pub fn with_chains(mut self, chains: usize) -> Self {
        self.chains = chains;
        self
    }

    pub fn with_observation(mut self, observation: Observation) -> Self {
        self.observation = observation;
        self
    }

    pub fn with_rotation_average(mut self, on: bool) -> Self {
        self.rotation_average = on;
        self
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.run_length.is_finite() && self.run_length > 0.0) {
            return Err(EstimatorError::RunLength(self.run_length));
        }
        if !(self.burn_in.is_finite() && self.burn_in >= 0.0) {
            return Err(EstimatorError::BurnIn(self.burn_in));
        }
        if self.batch_count < MIN_BATCHES {
            return Err(EstimatorError::TooFewBatches(self.batch_count));
        }
        if self.chains == 0 {
            return Err(EstimatorError::NoChains);
        }
        let duration = self.batch_duration();
        if duration < MIN_BATCH_DURATION {
            return Err(EstimatorError::RunTooShort { batches: self.batch_count, duration });
        }
        if let Observation::Grid { dt } = self.observation {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(EstimatorError::GridSpacing(dt));
            }
            if dt > duration {
                return Err(EstimatorError::GridTooCoarse { dt });
            }
        }
        Ok(())
    }

    pub fn batch_duration(&self) -> f64 {
        self.run_length / self.batch_count as f64
    }
}

/// Callbacks for chain 0 of a run: every event, and every holding interval
/// of the measurement window with the channel values held during it.
pub trait ChainObserver: Send {
    fn on_event(&mut self, _event: &EventRecord) {}
    fn on_interval(&mut self, _start: f64, _duration: f64, _values: &[f64]) {}
}

/// Pooled output of all chains.
#[derive(Clone, Debug)]
pub struct BatchData {
    /// `batches[b][c]`: average of channel `c` over batch `b`.
    pub batches: Vec<Vec<f64>>,
    pub batch_duration: f64,
    pub n_samples: u64,
    pub stats: MoveStats,
    pub final_configs: Vec<WorldlineConfig>,
}

impl BatchData {
    fn channel_means(&self) -> Vec<f64> {
        let b = self.batches.len() as f64;
        let width = self.batches.first().map_or(0, Vec::len);
        (0..width).map(|c| self.batches.iter().map(|row| row[c]).sum::<f64>() / b).collect()
    }

    fn total_time(&self) -> f64 {
        self.batch_duration * self.batches.len() as f64
    }

    /// Estimate from a batch statistic given the stationary point variance.
    fn finish(&self, mean: f64, stderr: f64, point_variance: f64) -> Estimate {
        let n = self.n_samples;
        let (tau_int, ess) = if point_variance > 0.0 && stderr > 0.0 {
            let tau = self.total_time() * stderr * stderr / (2.0 * point_variance);
            (tau, (point_variance / (stderr * stderr)).min(n as f64))
        } else {
            (0.0, n as f64)
        };
        Estimate { mean, stderr, n_samples: n, tau_int, ess }
    }
}

/// Mean of each observable at circle time 0 under the stationary chain.
pub fn run_mcmc(spec: &ModelSpec, observables: &[Observable], params: &McmcParams) -> Result<Vec<Estimate>, EstimatorError> {
    Ok(run_mcmc_with(spec, observables, params, None)?.0)
}

/// As [`run_mcmc`], also returning the raw batch data; `observer` sees
/// chain 0.
pub fn run_mcmc_with(
    spec: &ModelSpec,
    observables: &[Observable],
    params: &McmcParams,
    observer: Option<&mut dyn ChainObserver>,
) -> Result<(Vec<Estimate>, BatchData), EstimatorError> {
    let run = estimate_all(spec, observables, &[], params, observer)?;
    Ok((run.means, run.data))
}

/// `Cov(f(σ(0)), g(σ(0)))` under the stationary chain, jackknifed over
/// batches.
pub fn truncated_correlation(spec: &ModelSpec, f: &Observable, g: &Observable, params: &McmcParams) -> Result<Estimate, EstimatorError> {
    truncated_correlations(spec, &[(f.clone(), g.clone())], params).map(|mut v| v.remove(0))
}

/// Several covariances from one set of chains.
pub fn truncated_correlations(spec: &ModelSpec, pairs: &[(Observable, Observable)], params: &McmcParams) -> Result<Vec<Estimate>, EstimatorError> {
    Ok(estimate_all(spec, &[], pairs, params, None)?.correlations)
}

/// Means and covariances from one set of chains.
#[derive(Clone, Debug)]
pub struct McmcRun {
    pub means: Vec<Estimate>,
    pub correlations: Vec<Estimate>,
    pub data: BatchData,
}

pub fn estimate_all(
    spec: &ModelSpec,
    observables: &[Observable],
    pairs: &[(Observable, Observable)],
    params: &McmcParams,
    observer: Option<&mut dyn ChainObserver>,
) -> Result<McmcRun, EstimatorError> {
    let mut channels = Vec::with_capacity(2 * observables.len() + MOMENTS * pairs.len());
    for f in observables {
        channels.push(f.clone());
        channels.push(f.product(f));
    }
    let offset = channels.len();
    for (f, g) in pairs {
        channels.extend(moment_channels(f, g));
    }
    let data = run_batches(spec, &channels, params, observer)?;
    let means = data.channel_means();
    let b = data.batches.len() as f64;
    let mean_estimates = (0..observables.len())
        .map(|k| {
            let mean = means[2 * k];
            let var_batch = data.batches.iter().map(|row| (row[2 * k] - mean).powi(2)).sum::<f64>() / (b - 1.0);
            let stderr = (var_batch / b).sqrt();
            let point_variance = (means[2 * k + 1] - mean * mean).max(0.0);
            data.finish(mean, stderr, point_variance)
        })
        .collect();
    let correlations = (0..pairs.len()).map(|k| covariance_from_batches(&data, offset + k * MOMENTS)).collect();
    Ok(McmcRun { means: mean_estimates, correlations, data })
}

const MOMENTS: usize = 8;

/// `f, g, fg, f², g², f²g, fg², f²g²`.
fn moment_channels(f: &Observable, g: &Observable) -> [Observable; MOMENTS] {
    let ff = f.product(f);
    let gg = g.product(g);
    [f.clone(), g.clone(), f.product(g), ff.clone(), gg.clone(), ff.product(g), f.product(&gg), ff.product(&gg)]
}

fn covariance_of(m: &[f64]) -> f64 {
    m[2] - m[0] * m[1]
}

/// `Var[(f - a)(g - b)]` at `a = E f`, `b = E g`, from the moment channels.
fn product_variance(m: &[f64]) -> f64 {
    let (a, b) = (m[0], m[1]);
    let second = m[7] - 2.0 * b * m[5] - 2.0 * a * m[6] + b * b * m[3] + a * a * m[4] + 4.0 * a * b * m[2]
        - 2.0 * a * b * b * m[0]
        - 2.0 * a * a * b * m[1]
        + a * a * b * b;
    let cov = covariance_of(m);
    (second - cov * cov).max(0.0)
}

fn covariance_from_batches(data: &BatchData, offset: usize) -> Estimate {
    let b = data.batches.len() as f64;
    let mut totals = [0.0; MOMENTS];
    for r in &data.batches {
        for c in 0..MOMENTS {
            totals[c] += r[offset + c];
        }
    }
    let jack = Jackknife {
        full: totals.iter().map(|t| t / b).collect(),
        leave_one_out: data
            .batches
            .iter()
            .map(|r| (0..MOMENTS).map(|c| (totals[c] - r[offset + c]) / (b - 1.0)).collect())
            .collect(),
    };
    let (mean, stderr) = jack.covariance(0, 1, 2);
    data.finish(mean, stderr, product_variance(&jack.full))
}

/// Delete-one jackknife over blocks of channel means.
struct Jackknife {
    full: Vec<f64>,
    /// Channel means with block `b` left out.
    leave_one_out: Vec<Vec<f64>>,
}

impl Jackknife {
    /// Bias-corrected value of a smooth statistic and its standard error.
    fn apply(&self, stat: impl Fn(&[f64]) -> f64) -> (f64, f64) {
        let nb = self.leave_one_out.len() as f64;
        let loo: Vec<f64> = self.leave_one_out.iter().map(|m| stat(m)).collect();
        let jack_mean = loo.iter().sum::<f64>() / nb;
        let estimate = nb * stat(&self.full) - (nb - 1.0) * jack_mean;
        let var = (nb - 1.0) / nb * loo.iter().map(|v| (v - jack_mean).powi(2)).sum::<f64>();
        (estimate, var.sqrt())
    }

    /// Jackknife covariance of two channel means.
    fn mean_covariance(&self, a: usize, b: usize) -> f64 {
        let nb = self.leave_one_out.len() as f64;
        let ma = self.leave_one_out.iter().map(|m| m[a]).sum::<f64>() / nb;
        let mb = self.leave_one_out.iter().map(|m| m[b]).sum::<f64>() / nb;
        (nb - 1.0) / nb * self.leave_one_out.iter().map(|m| (m[a] - ma) * (m[b] - mb)).sum::<f64>()
    }

    /// `E[fg] - E[f]E[g]` from channels `f`, `g`, `fg`. The jackknife error
    /// is first order in the fluctuations of the means and vanishes where
    /// `E f = E g = 0`; the second-order term `Var f̄ Var ḡ + Cov(f̄, ḡ)²`
    /// of the product of fluctuations is added to keep the error bar honest
    /// there.
    fn covariance(&self, f: usize, g: usize, fg: usize) -> (f64, f64) {
        let (estimate, stderr) = self.apply(|m| m[fg] - m[f] * m[g]);
        let second = self.mean_covariance(f, f) * self.mean_covariance(g, g) + self.mean_covariance(f, g).powi(2);
        (estimate, (stderr * stderr + second).sqrt())
    }
}

/// Run all chains and collect per-batch channel averages.
pub fn run_batches(
    spec: &ModelSpec,
    channels: &[Observable],
    params: &McmcParams,
    observer: Option<&mut dyn ChainObserver>,
) -> Result<BatchData, EstimatorError> {
    params.validate()?;
    for ch in channels {
        check_sites(ch, spec.n_sites())?;
    }
    let dynamics = Dynamics::new(spec);
    let (first, rest) = rayon::join(
        || run_chain(&dynamics, channels, params, 0, observer),
        || (1..params.chains).into_par_iter().map(|c| run_chain(&dynamics, channels, params, c, None)).collect::<Vec<_>>(),
    );
    let mut data = BatchData {
        batches: Vec::with_capacity(params.chains * params.batch_count),
        batch_duration: params.batch_duration(),
        n_samples: 0,
        stats: MoveStats::default(),
        final_configs: Vec::with_capacity(params.chains),
    };
    for run in std::iter::once(first).chain(rest) {
        data.batches.extend(run.batches);
        data.n_samples += run.n_samples;
        data.stats.merge(&run.stats);
        data.final_configs.push(run.final_config);
    }
    Ok(data)
}

fn check_sites(f: &Observable, n_sites: usize) -> Result<(), EstimatorError> {
    match f.sites().iter().find(|&&s| s >= n_sites) {
        Some(&site) => Err(EstimatorError::ObservableSite { site, n_sites }),
        None => Ok(()),
    }
}

/// The random stream of chain `index` for a given seed.
pub fn chain_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct ChainRun {
    batches: Vec<Vec<f64>>,
    n_samples: u64,
    stats: MoveStats,
    final_config: WorldlineConfig,
}

/// Current channel values, updated incrementally after accepted moves.
struct Channels<'a> {
    channels: &'a [Observable],
    by_site: Vec<Vec<usize>>,
    sigma0: Vec<Spin>,
    values: Vec<f64>,
    rotation_average: bool,
}

impl<'a> Channels<'a> {
    fn new(channels: &'a [Observable], config: &WorldlineConfig, rotation_average: bool) -> Self {
        let mut by_site = vec![Vec::new(); config.n_sites()];
        for (c, f) in channels.iter().enumerate() {
            for &s in f.sites() {
                by_site[s].push(c);
            }
        }
        let mut this = Self {
            channels,
            by_site,
            sigma0: config.sigma_at(0.0),
            values: vec![0.0; channels.len()],
            rotation_average,
        };
        for c in 0..channels.len() {
            this.values[c] = this.evaluate(c, config);
        }
        this
    }

    fn evaluate(&self, c: usize, config: &WorldlineConfig) -> f64 {
        let f = &self.channels[c];
        if self.rotation_average {
            circle_average(f, config)
        } else {
            f.value_with(|s| self.sigma0[s])
        }
    }

    fn site_changed(&mut self, site: usize, config: &WorldlineConfig) {
        if !self.rotation_average {
            let v = config.site(site).value_at(0.0);
            if v == self.sigma0[site] {
                return;
            }
            self.sigma0[site] = v;
        }
        for k in 0..self.by_site[site].len() {
            let c = self.by_site[site][k];
            self.values[c] = self.evaluate(c, config);
        }
    }
}

/// `β⁻¹ ∫_0^β f(σ(t)) dt`.
pub fn circle_average(f: &Observable, config: &WorldlineConfig) -> f64 {
    let beta = config.beta();
    let mut times: Vec<f64> = f
        .sites()
        .iter()
        .flat_map(|&s| config.site(s).events().iter().map(|e| e.time))
        .collect();
    if times.is_empty() {
        return f.value_with(|s| config.site(s).value_at(0.0));
    }
    times.sort_by(f64::total_cmp);
    let m = times.len();
    let mut acc = 0.0;
    for k in 0..m {
        let length = if k + 1 < m { times[k + 1] - times[k] } else { beta - times[k] + times[0] };
        if length > 0.0 {
            let t = times[k];
            acc += length * f.value_with(|s| config.site(s).value_at(t));
        }
    }
    acc / beta
}

fn run_chain(
    dynamics: &Dynamics,
    channels: &[Observable],
    params: &McmcParams,
    index: usize,
    mut observer: Option<&mut dyn ChainObserver>,
) -> ChainRun {
    let mut rng = chain_rng(params.seed, index as u64);
    let start = dynamics.sample_prior(&mut rng);
    let mut state = ChainState::new(start, rng);
    let t0 = params.burn_in;
    let t_end = t0 + params.run_length;
    let nb = params.batch_count;
    let duration = params.batch_duration();
    let width = channels.len();

    while state.clock < t0 {
        let event = dynamics.step(&mut state);
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_event(&event);
        }
    }

    let mut sums = vec![vec![0.0; width]; nb];
    let mut counts = vec![0u64; nb];
    let mut tracked = Channels::new(channels, &state.config, params.rotation_average);
    let mut n_samples = 0u64;
    let mut next_grid = t0;

    loop {
        let before = state.clock;
        let event = dynamics.step(&mut state);
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_event(&event);
        }
        // The state before the jump was held on [max(before, t0), clock).
        let lo = before.max(t0);
        let hi = state.clock.min(t_end);
        if hi > lo {
            n_samples += 1;
            if let Some(obs) = observer.as_deref_mut() {
                obs.on_interval(lo, hi - lo, &tracked.values);
            }
            match params.observation {
                Observation::TimeWeighted => {
                    let mut a = lo;
                    while a < hi {
                        let b = (((a - t0) / duration) as usize).min(nb - 1);
                        let edge = if b + 1 == nb { t_end } else { t0 + (b + 1) as f64 * duration };
                        let piece = hi.min(edge) - a;
                        for (s, v) in sums[b].iter_mut().zip(&tracked.values) {
                            *s += v * piece;
                        }
                        a = hi.min(edge).max(a + f64::EPSILON * a.abs().max(1.0));
                    }
                }
                Observation::Grid { dt } => {
                    while next_grid < hi {
                        let b = (((next_grid - t0) / duration) as usize).min(nb - 1);
                        for (s, v) in sums[b].iter_mut().zip(&tracked.values) {
                            *s += v;
                        }
                        counts[b] += 1;
                        next_grid += dt;
                    }
                }
            }
        }
        if event.accepted {
            tracked.site_changed(event.site, &state.config);
        }
        if state.clock >= t_end {
            break;
        }
    }

    let batches = sums
        .into_iter()
        .zip(counts)
        .map(|(row, count)| {
            let norm = match params.observation {
                Observation::TimeWeighted => duration,
                Observation::Grid { .. } => count.max(1) as f64,
            };
            row.into_iter().map(|s| s / norm).collect()
        })
        .collect();
    if let Observation::Grid { .. } = params.observation {
        n_samples = ((params.run_length / grid_dt(params)).ceil()) as u64;
    }
    ChainRun { batches, n_samples, stats: state.stats, final_config: state.config }
}

fn grid_dt(params: &McmcParams) -> f64 {
    match params.observation {
        Observation::Grid { dt } => dt,
        Observation::TimeWeighted => f64::NAN,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceParams {
    pub n_samples: usize,
    pub seed: u64,
    pub ess_floor: f64,
    /// Jackknife blocks; also the unit of parallel work.
    pub blocks: usize,
}

impl ImportanceParams {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self { n_samples, seed, ess_floor: DEFAULT_ESS_FLOOR, blocks: 100 }
    }
}

/// Per-block weighted sums, scaled by `exp(-shift)`.
struct WeightedBlock {
    shift: f64,
    w: f64,
    w2: f64,
    wf: Vec<f64>,
}

struct WeightedData {
    blocks: Vec<WeightedBlock>,
    ess: f64,
    n_samples: u64,
}

fn draw_weighted(spec: &ModelSpec, channels: &[Observable], params: &ImportanceParams) -> Result<WeightedData, EstimatorError> {
    if params.n_samples < 100 {
        return Err(EstimatorError::TooFewSamples(params.n_samples));
    }
    for ch in channels {
        check_sites(ch, spec.n_sites())?;
    }
    let dynamics = Dynamics::new(spec);
    let nblocks = params.blocks.clamp(2, params.n_samples);
    let sign = spec.weight_sign().factor();
    let log_empty = spec.lifting().empty_site_weight().ln();
    let mut blocks: Vec<WeightedBlock> = (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let size = params.n_samples / nblocks + usize::from(b < params.n_samples % nblocks);
            let mut rng = chain_rng(params.seed, b as u64);
            let mut draws = Vec::with_capacity(size);
            for _ in 0..size {
                let config = dynamics.sample_prior(&mut rng);
                let log_w = sign * path_energy(spec, &config) + log_empty * config.empty_sites() as f64;
                let sigma = config.sigma_at(0.0);
                let values: Vec<f64> = channels.iter().map(|f| f.value(&sigma)).collect();
                draws.push((log_w, values));
            }
            let shift = draws.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
            let mut block = WeightedBlock { shift, w: 0.0, w2: 0.0, wf: vec![0.0; channels.len()] };
            for (log_w, values) in draws {
                let w = (log_w - shift).exp();
                block.w += w;
                block.w2 += w * w;
                for (acc, v) in block.wf.iter_mut().zip(values) {
                    *acc += w * v;
                }
            }
            block
        })
        .collect();
    let shift = blocks.iter().map(|b| b.shift).fold(f64::NEG_INFINITY, f64::max);
    for b in &mut blocks {
        let scale = (b.shift - shift).exp();
        b.w *= scale;
        b.w2 *= scale * scale;
        b.wf.iter_mut().for_each(|v| *v *= scale);
        b.shift = shift;
    }
    let w: f64 = blocks.iter().map(|b| b.w).sum();
    let w2: f64 = blocks.iter().map(|b| b.w2).sum();
    let ess = w * w / w2;
    if !(ess >= params.ess_floor) {
        return Err(EstimatorError::LowEss { ess, floor: params.ess_floor });
    }
    Ok(WeightedData { blocks, ess, n_samples: params.n_samples as u64 })
}

impl WeightedData {
    /// Jackknife over blocks of the self-normalized channel means.
    fn jackknife(&self) -> Jackknife {
        let width = self.blocks[0].wf.len();
        let w: f64 = self.blocks.iter().map(|b| b.w).sum();
        let totals: Vec<f64> = (0..width).map(|c| self.blocks.iter().map(|b| b.wf[c]).sum()).collect();
        Jackknife {
            full: totals.iter().map(|t| t / w).collect(),
            leave_one_out: self
                .blocks
                .iter()
                .map(|b| (0..width).map(|c| (totals[c] - b.wf[c]) / (w - b.w)).collect())
                .collect(),
        }
    }

    fn estimate(&self, mean: f64, stderr: f64) -> Estimate {
        Estimate { mean, stderr, n_samples: self.n_samples, tau_int: 0.0, ess: self.ess }
    }
}

/// Self-normalized importance sampling of `f(σ(0))` over i.i.d. draws of
/// the prior, weighted by the path functional.
pub fn importance_sampling(spec: &ModelSpec, observables: &[Observable], n_samples: usize, seed: u64) -> Result<Vec<Estimate>, EstimatorError> {
    importance_sampling_with(spec, observables, &ImportanceParams::new(n_samples, seed))
}

pub fn importance_sampling_with(spec: &ModelSpec, observables: &[Observable], params: &ImportanceParams) -> Result<Vec<Estimate>, EstimatorError> {
    let data = draw_weighted(spec, observables, params)?;
    let jack = data.jackknife();
    Ok((0..observables.len())
        .map(|k| {
            let (mean, stderr) = jack.apply(|m| m[k]);
            data.estimate(mean, stderr)
        })
        .collect())
}

/// Truncated correlations by importance sampling.
pub fn importance_correlations(spec: &ModelSpec, pairs: &[(Observable, Observable)], params: &ImportanceParams) -> Result<Vec<Estimate>, EstimatorError> {
    let mut channels = Vec::with_capacity(3 * pairs.len());
    for (f, g) in pairs {
        channels.push(f.clone());
        channels.push(g.clone());
        channels.push(f.product(g));
    }
    let data = draw_weighted(spec, &channels, params)?;
    let jack = data.jackknife();
    Ok((0..pairs.len())
        .map(|k| {
            let (mean, stderr) = jack.covariance(3 * k, 3 * k + 1, 3 * k + 2);
            data.estimate(mean, stderr)
        })
        .collect())
}

/// Equally spaced scalar observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(dt: f64, values: Vec<f64>) -> Self {
        Self { dt, values }
    }

    /// From time stamps, which must be equally spaced to 1e-9 relative.
    pub fn from_stamped(times: &[f64], values: Vec<f64>) -> Result<Self, EstimatorError> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(EstimatorError::WindowTooShort { lags: 0 });
        }
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        if !(dt > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0)) {
            return Err(EstimatorError::UnevenSpacing);
        }
        Ok(Self { dt, values })
    }

    /// Normalized autocovariance at lags `0..=max_lag`.
    pub fn autocorrelation(&self, max_lag: usize) -> Result<Vec<f64>, EstimatorError> {
        let n = self.values.len();
        let mean = self.values.iter().sum::<f64>() / n as f64;
        let centered: Vec<f64> = self.values.iter().map(|v| v - mean).collect();
        let c0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
        if c0 <= 0.0 {
            return Err(EstimatorError::ConstantSeries);
        }
        Ok((0..=max_lag.min(n - 1))
            .map(|k| centered[..n - k].iter().zip(&centered[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 / c0)
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecayRate {
    Fitted { rate: f64, stderr: f64, lags: usize },
    /// Correlation already below the cutoff at the first lag.
    ExceedsResolution { lower_bound: f64 },
}

impl DecayRate {
    /// The fitted rate, or the resolution bound.
    pub fn rate(&self) -> f64 {
        match *self {
            DecayRate::Fitted { rate, .. } => rate,
            DecayRate::ExceedsResolution { lower_bound } => lower_bound,
        }
    }

    pub fn stderr(&self) -> f64 {
        match *self {
            DecayRate::Fitted { stderr, .. } => stderr,
            DecayRate::ExceedsResolution { .. } => 0.0,
        }
    }
}

/// Least-squares slope of `ln ρ(k Δt)` over the initial lags where the
/// normalized autocovariance exceeds 0.05.
pub fn autocorrelation_rate(series: &TimeSeries) -> Result<DecayRate, EstimatorError> {
    let n = series.values.len();
    let rho = series.autocorrelation(n / 4)?;
    let lags: Vec<usize> = (1..rho.len()).take_while(|&k| rho[k] > CORRELATION_CUTOFF).collect();
    if lags.is_empty() {
        if rho.len() < 2 {
            return Err(EstimatorError::WindowTooShort { lags: 0 });
        }
        return Ok(DecayRate::ExceedsResolution { lower_bound: (1.0 / CORRELATION_CUTOFF).ln() / series.dt });
    }
    if lags.len() < 3 {
        return Err(EstimatorError::WindowTooShort { lags: lags.len() });
    }
    let xs: Vec<f64> = lags.iter().map(|&k| k as f64 * series.dt).collect();
    let ys: Vec<f64> = lags.iter().map(|&k| rho[k].ln()).collect();
    let m = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = (ssr / (m - 2.0) / sxx).sqrt();
    Ok(DecayRate::Fitted { rate: -slope, stderr, lags: lags.len() })
}

/// Grid samples of `f(σ(0))` (or its circle average) from one chain.
pub fn sample_series(
    spec: &ModelSpec,
    f: &Observable,
    burn_in: f64,
    length: usize,
    dt: f64,
    seed: u64,
    rotation_average: bool,
) -> Result<TimeSeries, EstimatorError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(EstimatorError::GridSpacing(dt));
    }
    check_sites(f, spec.n_sites())?;
    let dynamics = Dynamics::new(spec);
    let mut rng = chain_rng(seed, 0);
    let start = dynamics.sample_prior(&mut rng);
    let mut state = ChainState::new(start, rng);
    while state.clock < burn_in {
        dynamics.step(&mut state);
    }
    let channels = std::slice::from_ref(f);
    let mut tracked = Channels::new(channels, &state.config, rotation_average);
    let mut values = Vec::with_capacity(length);
    let mut next = state.clock;
    while values.len() < length {
        let before_values = tracked.values[0];
        let event = dynamics.step(&mut state);
        while next < state.clock && values.len() < length {
            values.push(before_values);
            next += dt;
        }
        if event.accepted {
            tracked.site_changed(event.site, &state.config);
        }
    }
    Ok(TimeSeries { dt, values })
}

/// Collects the event trace and the time-weighted series of the first
/// channel.
#[derive(Debug, Default)]
pub struct Recorder {
    pub trace: Option<Vec<EventRecord>>,
    pub series: Option<Vec<(f64, f64, f64)>>,
}

impl ChainObserver for Recorder {
    fn on_event(&mut self, event: &EventRecord) {
        if let Some(trace) = &mut self.trace {
            trace.push(*event);
        }
    }

    fn on_interval(&mut self, start: f64, duration: f64, values: &[f64]) {
        if let (Some(series), Some(&v)) = (&mut self.series, values.first()) {
            series.push((start, v, duration));
        }
    }
}

/// `clock,kind,site,time_on_circle,accepted,delta`.
pub fn write_trace_csv<W: Write>(events: &[EventRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "clock,kind,site,time_on_circle,accepted,delta")?;
    for e in events {
        let time = e.time_on_circle.map(|t| t.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{}", e.clock, e.kind.name(), e.site, time, e.accepted, e.delta)?;
    }
    Ok(())
}

/// `clock,value,weight`.
pub fn write_series_csv<W: Write>(rows: &[(f64, f64, f64)], mut out: W) -> io::Result<()> {
    writeln!(out, "clock,value,weight")?;
    for (clock, value, weight) in rows {
        writeln!(out, "{clock},{value},{weight}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Boundary, Lifting};
    use rand::Rng;

    fn single_site(h: f64, lambda: f64, beta: f64) -> ModelSpec {
        ModelSpec::ising_chain(1, 0.0, h, lambda, beta, Boundary::Free)
    }

    #[test]
    fn params_validation() {
        assert_eq!(McmcParams::new(0.0, 4.0, 8, 1).validate(), Err(EstimatorError::RunTooShort { batches: 8, duration: 0.5 }));
        assert_eq!(McmcParams::new(0.0, 40.0, 4, 1).validate(), Err(EstimatorError::TooFewBatches(4)));
        assert_eq!(McmcParams::new(0.0, -1.0, 8, 1).validate(), Err(EstimatorError::RunLength(-1.0)));
        assert!(McmcParams::new(1.0, 8.0, 8, 1).validate().is_ok());
    }

    #[test]
    fn free_spin_has_zero_mean() {
        let spec = single_site(0.0, 1.0, 1.0);
        let est = run_mcmc(&spec, &[Observable::spin(0)], &McmcParams::new(10.0, 4000.0, 20, 7)).unwrap();
        assert!(est[0].mean.abs() < 3.0 * est[0].stderr + 1e-12, "{:?}", est[0]);
        assert!(est[0].ess <= est[0].n_samples as f64);
    }

    #[test]
    fn single_site_matches_closed_form() {
        let (h, lambda, beta) = (0.3f64, 0.8f64, 1.0f64);
        let r = (h * h + lambda * lambda).sqrt();
        let exact = -(h / r) * (beta * r).tanh();
        let spec = single_site(h, lambda, beta);
        let est = run_mcmc(&spec, &[Observable::spin(0)], &McmcParams::new(10.0, 20000.0, 20, 9)).unwrap()[0];
        assert!((est.mean - exact).abs() < 3.0 * est.stderr, "{est:?} vs {exact}");
        let is = importance_sampling(&spec, &[Observable::spin(0)], 50_000, 9).unwrap()[0];
        assert!((is.mean - exact).abs() < 3.0 * is.stderr, "{is:?} vs {exact}");
    }

    #[test]
    fn classical_pair_correlation_is_tanh() {
        let (j, beta) = (1.0f64, 0.5f64);
        let spec = ModelSpec::ising_chain(2, j, 0.0, 0.0, beta, Boundary::Free);
        let est = truncated_correlation(&spec, &Observable::spin(0), &Observable::spin(1), &McmcParams::new(5.0, 4000.0, 20, 3)).unwrap();
        assert!((est.mean - (beta * j).tanh()).abs() < 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn variance_estimate_is_nonnegative() {
        let spec = ModelSpec::ising_chain(3, 1.0, 0.0, 1.0, 0.5, Boundary::Free);
        let f = Observable::spin(1);
        let est = truncated_correlation(&spec, &f, &f, &McmcParams::new(5.0, 2000.0, 16, 5)).unwrap();
        assert!(est.mean >= -3.0 * est.stderr);
    }

    #[test]
    fn grid_and_time_weighted_agree() {
        let spec = ModelSpec::ising_chain(3, 1.0, 0.2, 1.0, 0.5, Boundary::Free);
        let f = [Observable::spin(0)];
        let tw = run_mcmc(&spec, &f, &McmcParams::new(5.0, 4000.0, 20, 1)).unwrap()[0];
        let grid = run_mcmc(&spec, &f, &McmcParams::new(5.0, 4000.0, 20, 2).with_observation(Observation::Grid { dt: 0.1 })).unwrap()[0];
        let rot = run_mcmc(&spec, &f, &McmcParams::new(5.0, 4000.0, 20, 3).with_rotation_average(true)).unwrap()[0];
        let sigma = (tw.stderr.powi(2) + grid.stderr.powi(2)).sqrt();
        assert!((tw.mean - grid.mean).abs() < 4.0 * sigma);
        let sigma = (tw.stderr.powi(2) + rot.stderr.powi(2)).sqrt();
        assert!((tw.mean - rot.mean).abs() < 4.0 * sigma);
    }

    #[test]
    fn determinism_and_chain_pooling() {
        let spec = ModelSpec::ising_chain(2, 1.0, 0.0, 1.0, 0.5, Boundary::Free);
        let params = McmcParams::new(1.0, 80.0, 8, 42).with_chains(3);
        let a = run_mcmc(&spec, &[Observable::spin(0)], &params).unwrap();
        let b = run_mcmc(&spec, &[Observable::spin(0)], &params).unwrap();
        assert_eq!(a, b);
        let (_, data) = run_mcmc_with(&spec, &[Observable::spin(0)], &params, None).unwrap();
        assert_eq!(data.batches.len(), 24);
    }

    #[test]
    fn uniform_weights_reduce_to_plain_monte_carlo() {
        let spec = single_site(0.0, 1.0, 1.0).with_lifting(Lifting::HalfIntensity);
        let est = importance_sampling(&spec, &[Observable::spin(0)], 10_000, 4).unwrap()[0];
        assert!((est.ess - 10_000.0).abs() < 1e-6);
        assert!(est.mean.abs() < 3.0 * est.stderr);
    }

    #[test]
    fn low_ess_is_an_error() {
        let spec = ModelSpec::ising_chain(6, 4.0, 0.0, 1.0, 4.0, Boundary::Free);
        let err = importance_sampling(&spec, &[Observable::spin(0)], 200, 1).unwrap_err();
        assert!(matches!(err, EstimatorError::LowEss { .. }));
        assert_eq!(importance_sampling(&spec, &[], 10, 1).unwrap_err(), EstimatorError::TooFewSamples(10));
    }

    #[test]
    fn iid_series_exceeds_resolution() {
        let mut rng = chain_rng(1, 0);
        let values: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let fit = autocorrelation_rate(&TimeSeries::new(0.5, values)).unwrap();
        assert!(matches!(fit, DecayRate::ExceedsResolution { .. }));
        assert!((fit.rate() - 20f64.ln() / 0.5).abs() < 1e-12);
    }

    #[test]
    fn ar1_series_recovers_rate() {
        let (rate, dt) = (0.7f64, 0.1f64);
        let phi = (-rate * dt).exp();
        let mut rng = chain_rng(2, 0);
        let mut x = 0.0;
        let values: Vec<f64> = (0..200_000)
            .map(|_| {
                let noise: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                x = phi * x + (1.0 - phi * phi).sqrt() * noise;
                x
            })
            .collect();
        let fit = autocorrelation_rate(&TimeSeries::new(dt, values)).unwrap();
        assert!((fit.rate() - rate).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn constant_series_is_rejected() {
        assert_eq!(autocorrelation_rate(&TimeSeries::new(1.0, vec![1.0; 100])), Err(EstimatorError::ConstantSeries));
        assert!(TimeSeries::from_stamped(&[0.0, 1.0, 3.0], vec![0.0; 3]).is_err());
    }

    #[test]
    fn circle_average_of_two_arcs() {
        use crate::worldline::{PointSet, SiteWorldline};
        let beta = 2.0;
        let xi = PointSet::new(vec![0.5], beta).unwrap();
        let eta = PointSet::new(vec![1.0], beta).unwrap();
        let config = WorldlineConfig::from_sites(beta, vec![SiteWorldline::new(&xi, &eta, 1).unwrap()]).unwrap();
        // σ = -1 on [0.5, 1.0), +1 elsewhere.
        assert!((circle_average(&Observable::spin(0), &config) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_series_csv(&[(0.0, 1.0, 0.5)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "clock,value,weight\n0,1,0.5\n");
    }
}
