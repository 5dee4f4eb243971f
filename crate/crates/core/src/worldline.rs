//! Marked point configurations on the imaginary-time circle `[0, β)`.
//!
//! Each site carries two point sets, `ξ` (points labelled `+1`) and `η`
//! (points labelled `-1`), plus a spin `ρ` used only when the site has no
//! points. The coloring of a site is right-continuous: on `[x_j, x_{j+1})` it
//! takes the label of `x_{j+1}`, cyclically, so every point's left limit is
//! its own label.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelSpec, Spin};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldlineError {
    #[error("time {time} is outside [0, {beta})")]
    TimeOutOfRange { time: f64, beta: f64 },
    #[error("point set is not strictly increasing at {0}")]
    NotSorted(f64),
    #[error("time {0} appears in both point sets")]
    Coincident(f64),
    #[error("rho must be +1 or -1, got {0}")]
    InvalidRho(i64),
    #[error("site {site} is outside a configuration of {len} sites")]
    SiteIndex { site: usize, len: usize },
    #[error("site {site} already has a point at time {time}")]
    PointExists { site: usize, time: f64 },
    #[error("site {site} has no {mark:?} point at time {time}")]
    PointMissing { site: usize, mark: Mark, time: f64 },
}

/// Which of the two point sets a point belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Xi,
    Eta,
}

impl Mark {
    pub fn label(self) -> Spin {
        match self {
            Mark::Xi => 1,
            Mark::Eta => -1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub mark: Mark,
}

/// A finite, strictly increasing set of times in `[0, β)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointSet(Vec<f64>);

impl PointSet {
    pub fn new(points: Vec<f64>, beta: f64) -> Result<Self, WorldlineError> {
        for (k, &t) in points.iter().enumerate() {
            if !(0.0..beta).contains(&t) {
                return Err(WorldlineError::TimeOutOfRange { time: t, beta });
            }
            if k > 0 && points[k - 1] >= t {
                return Err(WorldlineError::NotSorted(t));
            }
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The triple `(ξ_i, η_i, ρ_i)` of one site, stored as one merged, sorted
/// event list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteWorldline {
    events: Vec<Event>,
    rho: Spin,
}

impl SiteWorldline {
    pub fn empty(rho: Spin) -> Self {
        assert!(rho == 1 || rho == -1, "rho must be ±1");
        Self { events: Vec::new(), rho }
    }

    pub fn new(xi: &PointSet, eta: &PointSet, rho: Spin) -> Result<Self, WorldlineError> {
        if rho != 1 && rho != -1 {
            return Err(WorldlineError::InvalidRho(rho as i64));
        }
        let mut events: Vec<Event> = xi
            .points()
            .iter()
            .map(|&time| Event { time, mark: Mark::Xi })
            .chain(eta.points().iter().map(|&time| Event { time, mark: Mark::Eta }))
            .collect();
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        if let Some(w) = events.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(WorldlineError::Coincident(w[0].time));
        }
        Ok(Self { events, rho })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn rho(&self) -> Spin {
        self.rho
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn count(&self, mark: Mark) -> usize {
        self.events.iter().filter(|e| e.mark == mark).count()
    }

    fn points_of(&self, mark: Mark) -> PointSet {
        PointSet(self.events.iter().filter(|e| e.mark == mark).map(|e| e.time).collect())
    }

    pub fn xi(&self) -> PointSet {
        self.points_of(Mark::Xi)
    }

    pub fn eta(&self) -> PointSet {
        self.points_of(Mark::Eta)
    }

    /// Index of the first event strictly after `t`, wrapping to 0.
    fn successor(&self, t: f64) -> usize {
        let k = self.events.partition_point(|e| e.time <= t);
        if k == self.events.len() {
            0
        } else {
            k
        }
    }

    /// Spin of the colored trajectory at time `t`.
    pub fn value_at(&self, t: f64) -> Spin {
        if self.events.is_empty() {
            self.rho
        } else {
            self.events[self.successor(t)].mark.label()
        }
    }

    /// Value of the trajectory just after event `k`.
    fn value_after(&self, k: usize) -> Spin {
        self.events[(k + 1) % self.events.len()].mark.label()
    }

    fn position(&self, time: f64) -> Result<usize, usize> {
        self.events.binary_search_by(|e| e.time.total_cmp(&time))
    }

    pub fn contains_time(&self, time: f64) -> bool {
        self.position(time).is_ok()
    }

    /// Push `(offset, value after)` for each event with offset from `start`
    /// in the open window `(0, length)`, cyclically.
    fn window_events(&self, start: f64, length: f64, beta: f64, mut push: impl FnMut(f64, Spin)) {
        let n = self.events.len();
        if n == 0 {
            return;
        }
        let end = start + length;
        let lo = self.events.partition_point(|e| e.time <= start);
        if end <= beta {
            let hi = self.events.partition_point(|e| e.time < end);
            for k in lo..hi.max(lo) {
                push(self.events[k].time - start, self.value_after(k));
            }
        } else {
            for k in lo..n {
                push(self.events[k].time - start, self.value_after(k));
            }
            let wrap_end = end - beta;
            let hi = self.events.partition_point(|e| e.time < wrap_end).min(lo);
            for k in 0..hi {
                push(self.events[k].time + beta - start, self.value_after(k));
            }
        }
    }
}

/// One configuration of the lifted state space: a worldline per site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldlineConfig {
    beta: f64,
    sites: Vec<SiteWorldline>,
}

impl WorldlineConfig {
    /// No points anywhere, every `ρ_i = rho`.
    pub fn empty(n_sites: usize, beta: f64, rho: Spin) -> Self {
        Self { beta, sites: vec![SiteWorldline::empty(rho); n_sites] }
    }

    pub fn from_sites(beta: f64, sites: Vec<SiteWorldline>) -> Result<Self, WorldlineError> {
        for w in &sites {
            if let Some(e) = w.events.iter().find(|e| !(0.0..beta).contains(&e.time)) {
                return Err(WorldlineError::TimeOutOfRange { time: e.time, beta });
            }
        }
        Ok(Self { beta, sites })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn site(&self, i: usize) -> &SiteWorldline {
        &self.sites[i]
    }

    pub fn sites(&self) -> &[SiteWorldline] {
        &self.sites
    }

    pub fn total_points(&self) -> usize {
        self.sites.iter().map(|w| w.len()).sum()
    }

    pub fn empty_sites(&self) -> usize {
        self.sites.iter().filter(|w| w.is_empty()).count()
    }

    /// Full spin assignment `σ(t)`.
    pub fn sigma_at(&self, t: f64) -> Vec<Spin> {
        self.sites.iter().map(|w| w.value_at(t)).collect()
    }

    fn check_site(&self, site: usize) -> Result<(), WorldlineError> {
        if site >= self.sites.len() {
            Err(WorldlineError::SiteIndex { site, len: self.sites.len() })
        } else {
            Ok(())
        }
    }

    /// Apply a move in place; all other sites are untouched.
    pub fn apply(&mut self, m: &Move) -> Result<(), WorldlineError> {
        self.check_site(m.site())?;
        match *m {
            Move::Add { site, mark, time } => {
                if !(0.0..self.beta).contains(&time) {
                    return Err(WorldlineError::TimeOutOfRange { time, beta: self.beta });
                }
                let w = &mut self.sites[site];
                match w.position(time) {
                    Ok(_) => return Err(WorldlineError::PointExists { site, time }),
                    Err(k) => w.events.insert(k, Event { time, mark }),
                }
            }
            Move::Remove { site, mark, time } => {
                let w = &mut self.sites[site];
                match w.position(time) {
                    Ok(k) if w.events[k].mark == mark => {
                        w.events.remove(k);
                    }
                    _ => return Err(WorldlineError::PointMissing { site, mark, time }),
                }
            }
            Move::Flip { site } => {
                let w = &mut self.sites[site];
                w.rho = -w.rho;
            }
        }
        Ok(())
    }
}

/// A half-open arc `[start, start + length)` of the circle with a constant
/// spin; `start + length` may exceed `β`, in which case the arc wraps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColoredArc {
    pub start: f64,
    pub length: f64,
    pub spin: Spin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColoredTrajectory {
    pub arcs: Vec<ColoredArc>,
}

impl ColoredTrajectory {
    pub fn total_length(&self) -> f64 {
        self.arcs.iter().map(|a| a.length).sum()
    }
}

/// The coloring of one site.
pub fn color_site(w: &SiteWorldline, beta: f64) -> ColoredTrajectory {
    let ev = w.events();
    if ev.is_empty() {
        return ColoredTrajectory { arcs: vec![ColoredArc { start: 0.0, length: beta, spin: w.rho() }] };
    }
    let m = ev.len();
    let mut arcs = Vec::with_capacity(m);
    for k in 0..m {
        let next = &ev[(k + 1) % m];
        let length = if k + 1 < m { next.time - ev[k].time } else { beta - ev[k].time + ev[0].time };
        arcs.push(ColoredArc { start: ev[k].time, length, spin: next.mark.label() });
    }
    ColoredTrajectory { arcs }
}

/// `σ(t)` for the whole configuration.
pub fn sigma_at(config: &WorldlineConfig, t: f64) -> Vec<Spin> {
    config.sigma_at(t)
}

/// `Ĥ_β = ∫_0^β H(σ(t)) dt`, by sweeping the merged event times of all
/// sites and evaluating `H` on every constant piece.
pub fn path_energy(spec: &ModelSpec, config: &WorldlineConfig) -> f64 {
    let beta = config.beta();
    let mut changes: Vec<(f64, usize, Spin)> = Vec::with_capacity(config.total_points());
    for (i, w) in config.sites().iter().enumerate() {
        for (k, e) in w.events().iter().enumerate() {
            if e.time > 0.0 {
                changes.push((e.time, i, w.value_after(k)));
            }
        }
    }
    changes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut sigma = config.sigma_at(0.0);
    let mut total = 0.0;
    let mut prev = 0.0;
    for (t, i, v) in changes {
        if t > prev {
            total += spec.energy(&sigma) * (t - prev);
            prev = t;
        }
        sigma[i] = v;
    }
    total + spec.energy(&sigma) * (beta - prev)
}

/// The maps acting on configurations: add or remove a marked point, or flip
/// `ρ` of a site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Move {
    Add { site: usize, mark: Mark, time: f64 },
    Remove { site: usize, mark: Mark, time: f64 },
    Flip { site: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    AddXi,
    AddEta,
    RemoveXi,
    RemoveEta,
    Flip,
}

impl MoveKind {
    pub const ALL: [MoveKind; 5] = [MoveKind::AddXi, MoveKind::AddEta, MoveKind::RemoveXi, MoveKind::RemoveEta, MoveKind::Flip];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MoveKind::AddXi => "add_xi",
            MoveKind::AddEta => "add_eta",
            MoveKind::RemoveXi => "remove_xi",
            MoveKind::RemoveEta => "remove_eta",
            MoveKind::Flip => "flip",
        }
    }
}

/// Whether a move adds, removes or flips; used to classify pairs of moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoveClass {
    Addition,
    Removal,
    Flip,
}

impl Move {
    pub fn site(&self) -> usize {
        match *self {
            Move::Add { site, .. } | Move::Remove { site, .. } | Move::Flip { site } => site,
        }
    }

    pub fn time(&self) -> Option<f64> {
        match *self {
            Move::Add { time, .. } | Move::Remove { time, .. } => Some(time),
            Move::Flip { .. } => None,
        }
    }

    pub fn kind(&self) -> MoveKind {
        match *self {
            Move::Add { mark: Mark::Xi, .. } => MoveKind::AddXi,
            Move::Add { mark: Mark::Eta, .. } => MoveKind::AddEta,
            Move::Remove { mark: Mark::Xi, .. } => MoveKind::RemoveXi,
            Move::Remove { mark: Mark::Eta, .. } => MoveKind::RemoveEta,
            Move::Flip { .. } => MoveKind::Flip,
        }
    }

    pub fn class(&self) -> MoveClass {
        match self {
            Move::Add { .. } => MoveClass::Addition,
            Move::Remove { .. } => MoveClass::Removal,
            Move::Flip { .. } => MoveClass::Flip,
        }
    }

    /// The map undoing this one.
    pub fn inverse(&self) -> Move {
        match *self {
            Move::Add { site, mark, time } => Move::Remove { site, mark, time },
            Move::Remove { site, mark, time } => Move::Add { site, mark, time },
            Move::Flip { site } => Move::Flip { site },
        }
    }
}

/// New configuration with `m` applied.
pub fn apply_move(config: &WorldlineConfig, m: &Move) -> Result<WorldlineConfig, WorldlineError> {
    let mut out = config.clone();
    out.apply(m)?;
    Ok(out)
}

/// The single arc on which a move changes a site's coloring, and the spin it
/// had there before the move.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChangedArc {
    pub site: usize,
    pub start: f64,
    pub length: f64,
    pub old: Spin,
}

/// Locate the arc a move recolors. `Ok(None)` means the coloring is
/// unchanged.
pub fn changed_arc(config: &WorldlineConfig, m: &Move) -> Result<Option<ChangedArc>, WorldlineError> {
    config.check_site(m.site())?;
    let beta = config.beta();
    match *m {
        Move::Add { site, mark, time } => {
            if !(0.0..beta).contains(&time) {
                return Err(WorldlineError::TimeOutOfRange { time, beta });
            }
            let w = config.site(site);
            let k = match w.position(time) {
                Ok(_) => return Err(WorldlineError::PointExists { site, time }),
                Err(k) => k,
            };
            let new = mark.label();
            if w.is_empty() {
                let old = w.rho();
                return Ok((old != new).then_some(ChangedArc { site, start: 0.0, length: beta, old }));
            }
            let n = w.len();
            let pred = &w.events()[(k + n - 1) % n];
            let succ = &w.events()[k % n];
            let old = succ.mark.label();
            if old == new {
                return Ok(None);
            }
            let length = (time - pred.time).rem_euclid(beta);
            Ok(Some(ChangedArc { site, start: pred.time, length, old }))
        }
        Move::Remove { site, mark, time } => {
            let w = config.site(site);
            let k = match w.position(time) {
                Ok(k) if w.events()[k].mark == mark => k,
                _ => return Err(WorldlineError::PointMissing { site, mark, time }),
            };
            let n = w.len();
            let old = mark.label();
            if n == 1 {
                let new = w.rho();
                return Ok((old != new).then_some(ChangedArc { site, start: 0.0, length: beta, old }));
            }
            let pred = &w.events()[(k + n - 1) % n];
            let new = w.events()[(k + 1) % n].mark.label();
            if old == new {
                return Ok(None);
            }
            let length = (time - pred.time).rem_euclid(beta);
            Ok(Some(ChangedArc { site, start: pred.time, length, old }))
        }
        Move::Flip { site } => {
            let w = config.site(site);
            Ok(w.is_empty().then_some(ChangedArc { site, start: 0.0, length: beta, old: w.rho() }))
        }
    }
}

/// Scratch space for local increments of `Ĥ_β`; reuse one per chain.
#[derive(Clone, Debug, Default)]
pub struct LocalEnergy {
    spins: Vec<Spin>,
    changes: Vec<(f64, usize, Spin)>,
}

impl LocalEnergy {
    pub fn new(n_sites: usize) -> Self {
        Self { spins: vec![1; n_sites], changes: Vec::new() }
    }

    /// `∫_arc φ_site(σ(t)) dt`, where only the neighbours of `site` matter.
    pub fn field_integral(&mut self, spec: &ModelSpec, config: &WorldlineConfig, site: usize, start: f64, length: f64) -> f64 {
        if spec.site_terms(site).is_empty() {
            return 0.0;
        }
        if self.spins.len() < config.n_sites() {
            self.spins.resize(config.n_sites(), 1);
        }
        let beta = config.beta();
        self.changes.clear();
        for &j in spec.neighbours(site) {
            let w = config.site(j);
            self.spins[j] = w.value_at(start);
            let changes = &mut self.changes;
            w.window_events(start, length, beta, |offset, v| changes.push((offset, j, v)));
        }
        self.changes.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut phi = spec.local_field(site, &self.spins);
        let mut acc = 0.0;
        let mut prev = 0.0;
        for &(offset, j, v) in &self.changes {
            if self.spins[j] != v {
                acc += phi * (offset - prev);
                prev = offset;
                self.spins[j] = v;
                phi = spec.local_field(site, &self.spins);
            }
        }
        acc + phi * (length - prev)
    }

    /// `Ĥ_β(m(x)) - Ĥ_β(x)` from the recolored arc alone.
    pub fn move_delta(&mut self, spec: &ModelSpec, config: &WorldlineConfig, m: &Move) -> Result<f64, WorldlineError> {
        Ok(match changed_arc(config, m)? {
            None => 0.0,
            Some(arc) => -2.0 * arc.old as f64 * self.field_integral(spec, config, arc.site, arc.start, arc.length),
        })
    }
}

/// `Ĥ_β(m(x)) - Ĥ_β(x)`, evaluated locally.
pub fn move_delta(spec: &ModelSpec, config: &WorldlineConfig, m: &Move) -> Result<f64, WorldlineError> {
    LocalEnergy::new(config.n_sites()).move_delta(spec, config, m)
}

/// CSV dump of the coloring: `site_index,arc_start,arc_length,spin`.
pub fn write_trajectory_csv<W: Write>(config: &WorldlineConfig, mut out: W) -> io::Result<()> {
    writeln!(out, "site_index,arc_start,arc_length,spin")?;
    for (i, w) in config.sites().iter().enumerate() {
        for arc in color_site(w, config.beta()).arcs {
            writeln!(out, "{i},{},{},{}", arc.start, arc.length, arc.spin)?;
        }
    }
    Ok(())
}
