//! The continuous-time jump process on worldline configurations.
//!
//! Points are added at envelope rate `κ_i β e^{βC}` per mark and accepted
//! with probability `exp(s∇Ĥ) / e^{βC}`, every existing point is removed at
//! unit rate, and `ρ_i` is flipped at envelope rate `e^{βC/2}` with
//! acceptance `exp(s∇Ĥ/2) / e^{βC/2}`. Here `s` is the weight sign and `κ_i`
//! the per-mark intensity of the chosen lifting. Under the `Trace` lifting an
//! addition to an empty site is additionally thinned by the empty-site
//! weight, which keeps the doubled weight of empty sites in balance.
//!
//! Besides simulation this module evaluates the rate densities, the
//! symmetric kernel `r(x, γ, δ)` used in the spectral gap argument, and the
//! pointwise identities (detailed balance, symmetry, commutation,
//! Radon–Nikodym ratios) that the kernel and the rates must satisfy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};

use crate::model::{model_constants, ModelConstants, ModelSpec};
use crate::worldline::{
    path_energy, LocalEnergy, Mark, Move, MoveClass, MoveKind, SiteWorldline, WorldlineConfig, WorldlineError,
};

/// Envelope rates of the three clock families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    /// Both marks combined, per site: `2 κ_i β e^{βC}`.
    pub add_rate_per_site: Vec<f64>,
    /// Rate of each existing point.
    pub removal_rate: f64,
    pub removal_total: f64,
    /// Per site: `e^{βC/2}`.
    pub flip_envelope: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub proposed: [u64; 5],
    pub accepted: [u64; 5],
}

impl MoveStats {
    fn record(&mut self, kind: MoveKind, accepted: bool) {
        self.proposed[kind.index()] += 1;
        if accepted {
            self.accepted[kind.index()] += 1;
        }
    }

    pub fn merge(&mut self, other: &MoveStats) {
        for k in 0..5 {
            self.proposed[k] += other.proposed[k];
            self.accepted[k] += other.accepted[k];
        }
    }

    pub fn acceptance_rate(&self, kind: MoveKind) -> f64 {
        let p = self.proposed[kind.index()];
        if p == 0 {
            f64::NAN
        } else {
            self.accepted[kind.index()] as f64 / p as f64
        }
    }
}

/// One firing of the envelope clocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// Process time right after the event.
    pub clock: f64,
    pub holding: f64,
    pub kind: MoveKind,
    pub site: usize,
    pub time_on_circle: Option<f64>,
    pub accepted: bool,
    /// `Ĥ_β` increment the proposal would cause.
    pub delta: f64,
}

/// State of one chain.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub config: WorldlineConfig,
    pub clock: f64,
    pub rng: ChaCha8Rng,
    pub stats: MoveStats,
    local: LocalEnergy,
}

impl ChainState {
    pub fn new(config: WorldlineConfig, rng: ChaCha8Rng) -> Self {
        let local = LocalEnergy::new(config.n_sites());
        Self { config, clock: 0.0, rng, stats: MoveStats::default(), local }
    }
}

/// Rates and kernels of the dynamics for one model.
#[derive(Clone, Debug)]
pub struct Dynamics {
    spec: ModelSpec,
    constants: ModelConstants,
    beta_c: f64,
    sign: f64,
    intensity: Vec<f64>,
    log_intensity: Vec<f64>,
    log_empty_weight: f64,
    add_cumulative: Vec<f64>,
    add_total: f64,
    flip_envelope: f64,
    add_rate_scale: f64,
}

impl Dynamics {
    pub fn new(spec: &ModelSpec) -> Self {
        let constants = model_constants(spec);
        let beta = spec.beta();
        let beta_c = beta * constants.c;
        let lifting = spec.lifting();
        let intensity: Vec<f64> = spec.fields().iter().map(|&l| lifting.mark_intensity(l)).collect();
        let mut add_cumulative = Vec::with_capacity(intensity.len());
        let mut acc = 0.0;
        for &k in &intensity {
            acc += 2.0 * k * beta * beta_c.exp();
            add_cumulative.push(acc);
        }
        Self {
            spec: spec.clone(),
            constants,
            beta_c,
            sign: spec.weight_sign().factor(),
            log_intensity: intensity.iter().map(|k| k.ln()).collect(),
            intensity,
            log_empty_weight: lifting.empty_site_weight().ln(),
            add_total: acc,
            add_cumulative,
            flip_envelope: (0.5 * beta_c).exp(),
            add_rate_scale: 1.0,
        }
    }

    /// Negative-control hook: scales the addition rate density seen by the
    /// pointwise identity checks (not the simulated chain).
    #[doc(hidden)]
    pub fn with_corrupted_add_rate(mut self, factor: f64) -> Self {
        self.add_rate_scale = factor;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn constants(&self) -> ModelConstants {
        self.constants
    }

    /// Per-mark Poisson intensity of the prior at `site`.
    pub fn intensity(&self, site: usize) -> f64 {
        self.intensity[site]
    }

    pub fn total_rates(&self, config: &WorldlineConfig) -> RateTable {
        let n = self.spec.n_sites();
        let mut add_rate_per_site = Vec::with_capacity(n);
        let mut prev = 0.0;
        for &c in &self.add_cumulative {
            add_rate_per_site.push(c - prev);
            prev = c;
        }
        let removal_total = config.total_points() as f64;
        let total = self.add_total + removal_total + n as f64 * self.flip_envelope;
        RateTable { add_rate_per_site, removal_rate: 1.0, removal_total, flip_envelope: self.flip_envelope, total }
    }

    fn acceptance_from_delta(&self, m: &Move, delta: f64, site_empty: bool) -> f64 {
        let p = match m.class() {
            MoveClass::Addition => {
                let thinning = if site_empty { self.log_empty_weight } else { 0.0 };
                (self.sign * delta - self.beta_c - thinning).exp()
            }
            MoveClass::Flip => (0.5 * (self.sign * delta - self.beta_c)).exp(),
            MoveClass::Removal => 1.0,
        };
        debug_assert!(p <= 1.0 + 1e-9, "acceptance {p} exceeds one for {m:?}");
        p.min(1.0)
    }

    /// Probability of accepting a proposed move.
    pub fn acceptance_prob(&self, config: &WorldlineConfig, m: &Move) -> Result<f64, WorldlineError> {
        let delta = LocalEnergy::new(config.n_sites()).move_delta(&self.spec, config, m)?;
        Ok(self.acceptance_from_delta(m, delta, config.site(m.site()).is_empty()))
    }

    /// Density of the rate measure at `m`: additions `κ_i exp(s∇Ĥ)` (divided
    /// by the empty-site weight on an empty site), removals `1`, flips
    /// `exp(s∇Ĥ/2)`.
    pub fn rate_density(&self, local: &mut LocalEnergy, config: &WorldlineConfig, m: &Move) -> Result<f64, WorldlineError> {
        let delta = local.move_delta(&self.spec, config, m)?;
        Ok(match m.class() {
            MoveClass::Addition => {
                let thinning = if config.site(m.site()).is_empty() { self.log_empty_weight } else { 0.0 };
                self.add_rate_scale * self.intensity[m.site()] * (self.sign * delta - thinning).exp()
            }
            MoveClass::Removal => 1.0,
            MoveClass::Flip => (0.5 * self.sign * delta).exp(),
        })
    }

    /// Advance the chain by one envelope event.
    pub fn step(&self, state: &mut ChainState) -> EventRecord {
        let beta = self.spec.beta();
        let n = self.spec.n_sites();
        let points = state.config.total_points() as f64;
        let flip_total = n as f64 * self.flip_envelope;
        let total = self.add_total + points + flip_total;
        let e: f64 = Exp1.sample(&mut state.rng);
        let holding = e / total;
        let u = state.rng.random::<f64>() * total;

        let m = if u < self.add_total {
            let site = self.add_cumulative.partition_point(|&c| c <= u).min(n - 1);
            let mark = if state.rng.random::<bool>() { Mark::Xi } else { Mark::Eta };
            let w = state.config.site(site);
            let time = loop {
                let t = state.rng.random::<f64>() * beta;
                if t < beta && !w.contains_time(t) {
                    break t;
                }
            };
            Move::Add { site, mark, time }
        } else if u < self.add_total + points {
            let mut k = ((u - self.add_total) as usize).min(points as usize - 1);
            let mut chosen = None;
            for (site, w) in state.config.sites().iter().enumerate() {
                if k < w.len() {
                    let ev = w.events()[k];
                    chosen = Some(Move::Remove { site, mark: ev.mark, time: ev.time });
                    break;
                }
                k -= w.len();
            }
            chosen.expect("point index within total count")
        } else {
            let site = (((u - self.add_total - points) / self.flip_envelope) as usize).min(n - 1);
            Move::Flip { site }
        };

        let delta = state
            .local
            .move_delta(&self.spec, &state.config, &m)
            .expect("proposed moves are applicable");
        let p = self.acceptance_from_delta(&m, delta, state.config.site(m.site()).is_empty());
        let accepted = p >= 1.0 || state.rng.random::<f64>() < p;
        if accepted {
            state.config.apply(&m).expect("proposed moves are applicable");
        }
        state.stats.record(m.kind(), accepted);
        state.clock += holding;
        EventRecord {
            clock: state.clock,
            holding,
            kind: m.kind(),
            site: m.site(),
            time_on_circle: m.time(),
            accepted,
            delta,
        }
    }

    /// `∇_γ∇_δ Ĥ_β(x) = ∇_δĤ(γx) - ∇_δĤ(x)`.
    pub fn second_difference(&self, local: &mut LocalEnergy, config: &WorldlineConfig, g: &Move, d: &Move) -> Result<f64, WorldlineError> {
        let moved = crate::worldline::apply_move(config, g)?;
        Ok(local.move_delta(&self.spec, &moved, d)? - local.move_delta(&self.spec, config, d)?)
    }

    /// The symmetric kernel `r(x, γ, δ)`.
    pub fn r_value(&self, config: &WorldlineConfig, g: &Move, d: &Move) -> Result<f64, WorldlineError> {
        if g.site() == d.site() {
            return Ok(0.0);
        }
        let mut local = LocalEnergy::new(config.n_sites());
        use MoveClass::*;
        Ok(match (g.class(), d.class()) {
            (Removal, _) | (_, Removal) => 1.0,
            (Addition, Addition) => (self.sign * self.second_difference(&mut local, config, g, d)?).exp(),
            (Addition, Flip) | (Flip, Addition) => (0.5 * self.sign * self.second_difference(&mut local, config, g, d)?).exp(),
            (Flip, Flip) => 0.5 * (1.0 + (0.5 * self.sign * self.second_difference(&mut local, config, g, d)?).exp()),
        })
    }

    /// Pointwise identities for a pair of moves on distinct sites.
    pub fn check_symmetry_identities(&self, config: &WorldlineConfig, g: &Move, d: &Move) -> Result<SymmetryReport, WorldlineError> {
        let r_gd = self.r_value(config, g, d)?;
        let r_dg = self.r_value(config, d, g)?;
        let symmetry_residual = relative_gap(r_gd, r_dg);

        let gd = crate::worldline::apply_move(&crate::worldline::apply_move(config, g)?, d)?;
        let dg = crate::worldline::apply_move(&crate::worldline::apply_move(config, d)?, g)?;
        let commutes = gd == dg;

        let mut local = LocalEnergy::new(config.n_sites());
        let ratio = |local: &mut LocalEnergy, first: &Move, second: &Move| -> Result<f64, WorldlineError> {
            let moved = crate::worldline::apply_move(config, first)?;
            Ok(self.rate_density(local, &moved, second)? / self.rate_density(local, config, second)?)
        };
        use MoveClass::*;
        let radon_nikodym_residual = if g.site() == d.site() {
            None
        } else {
            match (g.class(), d.class()) {
                (Addition, _) => Some(relative_gap(r_gd, ratio(&mut local, g, d)?)),
                (Flip, Addition) => Some(relative_gap(r_gd, ratio(&mut local, d, g)?)),
                (Flip, Flip) => Some(relative_gap(r_gd, 0.5 * (1.0 + ratio(&mut local, g, d)?))),
                _ => None,
            }
        };
        Ok(SymmetryReport { symmetry_residual, commutes, radon_nikodym_residual })
    }

    /// Log of the unnormalised density of the lifted measure with respect
    /// to the unit-intensity reference process: `s Ĥ_β + Σ n_i ln κ_i +
    /// (#empty sites) ln(empty weight)`.
    pub fn log_density(&self, config: &WorldlineConfig) -> f64 {
        let mut log = self.sign * path_energy(&self.spec, config);
        for (i, w) in config.sites().iter().enumerate() {
            if w.is_empty() {
                log += self.log_empty_weight;
            } else {
                log += w.len() as f64 * self.log_intensity[i];
            }
        }
        log
    }

    /// Relative gap between `π̂(x) c(x, m)` and `π̂(m x) c(m x, m⁻¹)`.
    pub fn detailed_balance_residual(&self, config: &WorldlineConfig, m: &Move) -> Result<f64, WorldlineError> {
        let mut local = LocalEnergy::new(config.n_sites());
        let forward = self.rate_density(&mut local, config, m)?;
        let moved = crate::worldline::apply_move(config, m)?;
        let backward = self.rate_density(&mut local, &moved, &m.inverse())?;
        let lhs = self.log_density(config) + forward.ln();
        let rhs = self.log_density(&moved) + backward.ln();
        if lhs == f64::NEG_INFINITY && rhs == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        Ok((-(lhs - rhs).abs()).exp_m1().abs())
    }

    /// One independent draw from the prior of the lifted measure: Poisson
    /// point sets of intensity `κ_i` per mark and a uniform `ρ_i`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> WorldlineConfig {
        let beta = self.spec.beta();
        let sites = self
            .intensity
            .iter()
            .map(|&k| random_site(rng, k * beta, beta))
            .collect();
        WorldlineConfig::from_sites(beta, sites).expect("prior draws lie on the circle")
    }
}

/// Residuals of the kernel identities for one pair of moves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    /// `|r(x,γ,δ) - r(x,δ,γ)|`, relative.
    pub symmetry_residual: f64,
    /// `γ(δ(x)) == δ(γ(x))`.
    pub commutes: bool,
    /// `r` against the rate ratio it should equal, for the pair classes
    /// where such an identity holds.
    pub radon_nikodym_residual: Option<f64>,
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn poisson_count<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> usize {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("finite positive mean").sample(rng) as usize
    }
}

/// Two independent Poisson point sets with `mean` points each, uniform on
/// `[0, beta)`, and a uniform `ρ`.
pub(crate) fn random_site<R: Rng + ?Sized>(rng: &mut R, mean: f64, beta: f64) -> SiteWorldline {
    let draw = |rng: &mut R, count: usize| -> Vec<f64> {
        let mut pts: Vec<f64> = (0..count)
            .map(|_| loop {
                let t = rng.random::<f64>() * beta;
                if t < beta {
                    break t;
                }
            })
            .collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    };
    let rho = if rng.random::<bool>() { 1 } else { -1 };
    loop {
        let nx = poisson_count(rng, mean);
        let ny = poisson_count(rng, mean);
        let xi = draw(rng, nx);
        let eta = draw(rng, ny);
        let xi = crate::worldline::PointSet::new(xi, beta);
        let eta = crate::worldline::PointSet::new(eta, beta);
        if let (Ok(xi), Ok(eta)) = (xi, eta) {
            if let Ok(w) = SiteWorldline::new(&xi, &eta, rho) {
                return w;
            }
        }
    }
}

/// Random configuration for identity probes: every site with a positive
/// mark intensity gets Poisson point sets of the given mean.
pub fn random_config<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R, mean_points: f64) -> WorldlineConfig {
    let beta = spec.beta();
    let lifting = spec.lifting();
    let sites = spec
        .fields()
        .iter()
        .map(|&l| {
            let mean = if lifting.mark_intensity(l) > 0.0 { mean_points } else { 0.0 };
            random_site(rng, mean, beta)
        })
        .collect();
    WorldlineConfig::from_sites(beta, sites).expect("probe draws lie on the circle")
}

/// A random applicable move of the given class at `site`, or `None` for a
/// removal at an empty site.
pub fn random_move_of<R: Rng + ?Sized>(config: &WorldlineConfig, site: usize, class: MoveClass, rng: &mut R) -> Option<Move> {
    let w = config.site(site);
    match class {
        MoveClass::Addition => {
            let mark = if rng.random::<bool>() { Mark::Xi } else { Mark::Eta };
            let time = loop {
                let t = rng.random::<f64>() * config.beta();
                if t < config.beta() && !w.contains_time(t) {
                    break t;
                }
            };
            Some(Move::Add { site, mark, time })
        }
        MoveClass::Removal => {
            if w.is_empty() {
                return None;
            }
            let ev = w.events()[rng.random_range(0..w.len())];
            Some(Move::Remove { site, mark: ev.mark, time: ev.time })
        }
        MoveClass::Flip => Some(Move::Flip { site }),
    }
}

/// A random applicable move: uniform site, then uniform class among the
/// applicable ones.
pub fn random_move<R: Rng + ?Sized>(config: &WorldlineConfig, rng: &mut R) -> Move {
    let site = rng.random_range(0..config.n_sites());
    loop {
        let class = [MoveClass::Addition, MoveClass::Removal, MoveClass::Flip][rng.random_range(0..3)];
        if let Some(m) = random_move_of(config, site, class, rng) {
            return m;
        }
    }
}
