//! Lattices, classical Hamiltonians with a transverse field, and classical
//! observables.
//!
//! A classical Hamiltonian is stored as a multilinear form
//! `H(σ) = Σ_A c_A Π_{i∈A} σ_i`. Sites are addressed by their linear index in
//! lexicographic coordinate order (first axis most significant); the same
//! order fixes the bit layout of the exact-diagonalization basis.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// A classical spin value, always `+1` or `-1`.
pub type Spin = i8;

/// Neighbourhoods larger than this fall back to the closed-form upper bound
/// `2 Σ |c_A|` when computing `C`.
const MAX_EXACT_NEIGHBOURHOOD: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("negative transverse field {value} at site {site}")]
    NegativeField { site: usize, value: f64 },
    #[error("non-finite transverse field at site {site}")]
    NonFiniteField { site: usize },
    #[error("site {coords:?} lies outside the box {extents:?}")]
    SiteOutsideBox { coords: Vec<i64>, extents: Vec<usize> },
    #[error("interaction term {term} has an empty support")]
    EmptySupport { term: usize },
    #[error("interaction term {term} lists site {coords:?} more than once")]
    RepeatedSite { term: usize, coords: Vec<i64> },
    #[error("interaction term {term} has a non-finite coefficient")]
    NonFiniteCoefficient { term: usize },
    #[error("interaction term {term} has diameter {diameter}, above twice the declared range {range}")]
    RangeExceeded { term: usize, diameter: u64, range: u32 },
    #[error("inverse temperature must be positive and finite, got {0}")]
    NonPositiveBeta(f64),
    #[error("dimension is {dimension} but the box has {extents} extents")]
    DimensionMismatch { dimension: usize, extents: usize },
    #[error("box extents must all be positive")]
    EmptyBox,
    #[error("field array has {got} entries, expected one per site ({expected})")]
    FieldCount { got: usize, expected: usize },
    #[error("spin assignment covers {got} sites, the lattice has {expected}")]
    AssignmentLength { got: usize, expected: usize },
    #[error("spin values must be +1 or -1, got {0}")]
    InvalidSpin(i64),
    #[error("site index {site} is outside the lattice of {len} sites")]
    SiteIndex { site: usize, len: usize },
    #[error("observable support lists site {0:?} more than once")]
    RepeatedSupportSite(Vec<i64>),
    #[error("observable table has {got} entries, expected {expected}")]
    TableSize { got: usize, expected: usize },
    #[error("observable table entry has {got} spins for a support of {expected} sites")]
    TableEntryWidth { got: usize, expected: usize },
    #[error("observable table assigns spins {0:?} twice")]
    DuplicateTableEntry(Vec<Spin>),
    #[error("observable value is not finite")]
    NonFiniteValue,
}

/// Every problem found while validating a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationErrors(pub Vec<ModelError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, err) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{err}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Free,
    Periodic,
}

/// Sign of the path functional in the worldline weight.
///
/// `Boltzmann` weights a worldline by `exp(-∫H)`, which is the weight that
/// reproduces `Tr e^{-βℋ}`. `Positive` uses `exp(+∫H)` and therefore samples
/// the model with `H` replaced by `-H`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSign {
    #[default]
    #[serde(rename = "boltzmann")]
    Boltzmann,
    #[serde(rename = "paper", alias = "positive")]
    Positive,
}

impl WeightSign {
    /// `s` in `exp(s·∫H)`.
    pub fn factor(self) -> f64 {
        match self {
            WeightSign::Boltzmann => -1.0,
            WeightSign::Positive => 1.0,
        }
    }
}

/// How the marked point process prior is normalised.
///
/// `Trace` places Poisson points of intensity `λ_i` in each of the two marks
/// and gives an empty site twice the weight of a single spin value, so the
/// projected measure reproduces the quantum trace exactly. `HalfIntensity`
/// uses intensity `λ_i / 2` per mark with a uniform `ρ_i`; its projection
/// differs from the quantum state by the number of points, and it is kept for
/// studying that dynamics on its own terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifting {
    #[default]
    Trace,
    HalfIntensity,
}

impl Lifting {
    /// Poisson intensity of one mark at a site with transverse field `lambda`.
    pub fn mark_intensity(self, lambda: f64) -> f64 {
        match self {
            Lifting::Trace => lambda,
            Lifting::HalfIntensity => 0.5 * lambda,
        }
    }

    /// Extra density factor carried by a site with no points.
    pub fn empty_site_weight(self) -> f64 {
        match self {
            Lifting::Trace => 2.0,
            Lifting::HalfIntensity => 1.0,
        }
    }
}

/// A finite box of `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    extents: Vec<usize>,
    boundary: Boundary,
}

impl Lattice {
    pub fn new(extents: Vec<usize>, boundary: Boundary) -> Result<Self, ModelError> {
        if extents.is_empty() || extents.contains(&0) {
            return Err(ModelError::EmptyBox);
        }
        Ok(Self { extents, boundary })
    }

    pub fn chain(n: usize) -> Self {
        Self { extents: vec![n.max(1)], boundary: Boundary::Free }
    }

    pub fn dimension(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, coords: &[i64]) -> Option<usize> {
        if coords.len() != self.extents.len() {
            return None;
        }
        let mut index = 0usize;
        for (&c, &e) in coords.iter().zip(&self.extents) {
            if c < 0 || c as usize >= e {
                return None;
            }
            index = index * e + c as usize;
        }
        Some(index)
    }

    pub fn coords(&self, mut index: usize) -> Vec<i64> {
        let mut out = vec![0i64; self.extents.len()];
        for (slot, &e) in out.iter_mut().zip(&self.extents).rev() {
            *slot = (index % e) as i64;
            index /= e;
        }
        out
    }

    /// ℓ∞ distance; periodic boxes use the circular distance per axis.
    pub fn distance(&self, a: usize, b: usize) -> u64 {
        let ca = self.coords(a);
        let cb = self.coords(b);
        ca.iter()
            .zip(&cb)
            .zip(&self.extents)
            .map(|((&x, &y), &e)| {
                let d = (x - y).unsigned_abs();
                match self.boundary {
                    Boundary::Free => d,
                    Boundary::Periodic => d.min(e as u64 - d),
                }
            })
            .max()
            .unwrap_or(0)
    }

    /// Shift a site by a lattice vector. Free boxes return `None` when the
    /// image falls outside.
    pub fn translate(&self, index: usize, shift: &[i64]) -> Option<usize> {
        if shift.len() != self.extents.len() {
            return None;
        }
        let moved: Vec<i64> = self
            .coords(index)
            .iter()
            .zip(shift)
            .zip(&self.extents)
            .map(|((&c, &s), &e)| match self.boundary {
                Boundary::Free => c + s,
                Boundary::Periodic => (c + s).rem_euclid(e as i64),
            })
            .collect();
        self.index_of(&moved)
    }
}

/// One monomial `c_A Π_{i∈A} σ_i`; `sites` is sorted and duplicate free.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionTerm {
    pub sites: Vec<usize>,
    pub coeff: f64,
}

/// On-disk form of an interaction term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermConfig {
    pub sites: Vec<Vec<i64>>,
    pub coeff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldsConfig {
    Uniform(f64),
    PerSite(Vec<f64>),
}

impl Default for FieldsConfig {
    fn default() -> Self {
        FieldsConfig::Uniform(0.0)
    }
}

/// The model configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dimension: usize,
    #[serde(rename = "box")]
    pub extents: Vec<usize>,
    #[serde(default)]
    pub boundary: Boundary,
    pub beta: f64,
    #[serde(default)]
    pub terms: Vec<TermConfig>,
    #[serde(default)]
    pub fields: FieldsConfig,
    #[serde(default)]
    pub weight_sign: WeightSign,
    #[serde(default)]
    pub lifting: Lifting,
    /// Optional interaction range cap: every support must have diameter at
    /// most twice this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<u32>,
}

/// A validated model: lattice, classical Hamiltonian, transverse fields and
/// inverse temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    lattice: Lattice,
    beta: f64,
    terms: Vec<InteractionTerm>,
    fields: Vec<f64>,
    weight_sign: WeightSign,
    lifting: Lifting,
    range: Option<u32>,
    site_terms: Vec<Vec<usize>>,
    neighbours: Vec<Vec<usize>>,
}

impl ModelSpec {
    /// Validate and normalise a configuration. Terms on the same support are
    /// merged by summing coefficients; merged terms with a zero coefficient
    /// are dropped.
    pub fn from_config(raw: &ModelConfig) -> Result<Self, ValidationErrors> {
        let mut errors = Vec::new();
        if raw.dimension != raw.extents.len() {
            errors.push(ModelError::DimensionMismatch {
                dimension: raw.dimension,
                extents: raw.extents.len(),
            });
        }
        if !(raw.beta > 0.0 && raw.beta.is_finite()) {
            errors.push(ModelError::NonPositiveBeta(raw.beta));
        }
        let lattice = match Lattice::new(raw.extents.clone(), raw.boundary) {
            Ok(l) => l,
            Err(e) => {
                errors.push(e);
                return Err(ValidationErrors(errors));
            }
        };
        let n = lattice.len();

        let fields = match &raw.fields {
            FieldsConfig::Uniform(v) => vec![*v; n],
            FieldsConfig::PerSite(v) => {
                if v.len() != n {
                    errors.push(ModelError::FieldCount { got: v.len(), expected: n });
                }
                v.clone()
            }
        };
        for (site, &value) in fields.iter().enumerate() {
            if !value.is_finite() {
                errors.push(ModelError::NonFiniteField { site });
            } else if value < 0.0 {
                errors.push(ModelError::NegativeField { site, value });
            }
        }

        let mut merged: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for (t, term) in raw.terms.iter().enumerate() {
            if term.sites.is_empty() {
                errors.push(ModelError::EmptySupport { term: t });
                continue;
            }
            if !term.coeff.is_finite() {
                errors.push(ModelError::NonFiniteCoefficient { term: t });
                continue;
            }
            let mut support = Vec::with_capacity(term.sites.len());
            let mut ok = true;
            for coords in &term.sites {
                match lattice.index_of(coords) {
                    Some(i) if support.contains(&i) => {
                        errors.push(ModelError::RepeatedSite { term: t, coords: coords.clone() });
                        ok = false;
                    }
                    Some(i) => support.push(i),
                    None => {
                        errors.push(ModelError::SiteOutsideBox {
                            coords: coords.clone(),
                            extents: raw.extents.clone(),
                        });
                        ok = false;
                    }
                }
            }
            if !ok {
                continue;
            }
            if let Some(range) = raw.range {
                let diameter = support
                    .iter()
                    .flat_map(|&a| support.iter().map(move |&b| (a, b)))
                    .map(|(a, b)| lattice.distance(a, b))
                    .max()
                    .unwrap_or(0);
                if diameter > 2 * range as u64 {
                    errors.push(ModelError::RangeExceeded { term: t, diameter, range });
                }
            }
            support.sort_unstable();
            *merged.entry(support).or_insert(0.0) += term.coeff;
        }

        if !errors.is_empty() {
            return Err(ValidationErrors(errors));
        }
        let terms = merged
            .into_iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(sites, coeff)| InteractionTerm { sites, coeff })
            .collect();
        Ok(Self::assemble(lattice, raw.beta, terms, fields, raw.weight_sign, raw.lifting, raw.range))
    }

    fn assemble(
        lattice: Lattice,
        beta: f64,
        terms: Vec<InteractionTerm>,
        fields: Vec<f64>,
        weight_sign: WeightSign,
        lifting: Lifting,
        range: Option<u32>,
    ) -> Self {
        let n = lattice.len();
        let mut site_terms = vec![Vec::new(); n];
        let mut neighbours = vec![Vec::new(); n];
        for (t, term) in terms.iter().enumerate() {
            for &i in &term.sites {
                site_terms[i].push(t);
                for &j in &term.sites {
                    if j != i && !neighbours[i].contains(&j) {
                        neighbours[i].push(j);
                    }
                }
            }
        }
        for nb in &mut neighbours {
            nb.sort_unstable();
        }
        Self { lattice, beta, terms, fields, weight_sign, lifting, range, site_terms, neighbours }
    }

    /// Nearest-neighbour chain `H = -J Σ σ_i σ_{i+1} + h Σ σ_i` with uniform
    /// transverse field `lambda`.
    pub fn ising_chain(n: usize, coupling: f64, field: f64, lambda: f64, beta: f64, boundary: Boundary) -> Self {
        let mut terms = Vec::new();
        let bonds = match boundary {
            Boundary::Free => n.saturating_sub(1),
            Boundary::Periodic if n > 2 => n,
            Boundary::Periodic => n.saturating_sub(1),
        };
        for b in 0..bonds {
            terms.push(TermConfig { sites: vec![vec![b as i64], vec![((b + 1) % n) as i64]], coeff: -coupling });
        }
        if field != 0.0 {
            for i in 0..n {
                terms.push(TermConfig { sites: vec![vec![i as i64]], coeff: field });
            }
        }
        let raw = ModelConfig {
            dimension: 1,
            extents: vec![n],
            boundary,
            beta,
            terms,
            fields: FieldsConfig::Uniform(lambda),
            weight_sign: WeightSign::Boltzmann,
            lifting: Lifting::Trace,
            range: None,
        };
        Self::from_config(&raw).expect("ising chain parameters must be valid")
    }

    /// Normalised configuration, suitable for hashing and round-tripping.
    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            dimension: self.lattice.dimension(),
            extents: self.lattice.extents().to_vec(),
            boundary: self.lattice.boundary(),
            beta: self.beta,
            terms: self
                .terms
                .iter()
                .map(|t| TermConfig {
                    sites: t.sites.iter().map(|&i| self.lattice.coords(i)).collect(),
                    coeff: t.coeff,
                })
                .collect(),
            fields: FieldsConfig::PerSite(self.fields.clone()),
            weight_sign: self.weight_sign,
            lifting: self.lifting,
            range: self.range,
        }
    }

    /// SHA-256 of the normalised configuration's JSON encoding, hex encoded.
    pub fn spec_hash(&self) -> String {
        let json = serde_json::to_string(&self.to_config()).expect("model config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn n_sites(&self) -> usize {
        self.lattice.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn terms(&self) -> &[InteractionTerm] {
        &self.terms
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }

    pub fn weight_sign(&self) -> WeightSign {
        self.weight_sign
    }

    pub fn lifting(&self) -> Lifting {
        self.lifting
    }

    /// Indices of the terms whose support contains `site`.
    pub fn site_terms(&self, site: usize) -> &[usize] {
        &self.site_terms[site]
    }

    /// Sites sharing at least one term with `site`, excluding itself.
    pub fn neighbours(&self, site: usize) -> &[usize] {
        &self.neighbours[site]
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        assert!(beta > 0.0 && beta.is_finite(), "beta must be positive");
        Self { beta, ..self.clone() }
    }

    pub fn with_weight_sign(&self, weight_sign: WeightSign) -> Self {
        Self { weight_sign, ..self.clone() }
    }

    pub fn with_lifting(&self, lifting: Lifting) -> Self {
        Self { lifting, ..self.clone() }
    }

    /// Same lattice, fields and temperature with `H ≡ 0`.
    pub fn without_interactions(&self) -> Self {
        Self::assemble(
            self.lattice.clone(),
            self.beta,
            Vec::new(),
            self.fields.clone(),
            self.weight_sign,
            self.lifting,
            self.range,
        )
    }

    /// Same Hamiltonian with every coefficient multiplied by `factor`.
    pub fn with_scaled_terms(&self, factor: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.coeff * factor != 0.0)
            .map(|t| InteractionTerm { sites: t.sites.clone(), coeff: t.coeff * factor })
            .collect();
        Self::assemble(self.lattice.clone(), self.beta, terms, self.fields.clone(), self.weight_sign, self.lifting, self.range)
    }

    pub fn with_fields(&self, fields: Vec<f64>) -> Result<Self, ModelError> {
        if fields.len() != self.n_sites() {
            return Err(ModelError::FieldCount { got: fields.len(), expected: self.n_sites() });
        }
        if let Some((site, &value)) = fields.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(ModelError::NegativeField { site, value });
        }
        Ok(Self { fields, ..self.clone() })
    }

    fn check_assignment(&self, sigma: &[Spin]) -> Result<(), ModelError> {
        if sigma.len() != self.n_sites() {
            return Err(ModelError::AssignmentLength { got: sigma.len(), expected: self.n_sites() });
        }
        if let Some(&s) = sigma.iter().find(|&&s| s != 1 && s != -1) {
            return Err(ModelError::InvalidSpin(s as i64));
        }
        Ok(())
    }

    /// `H(σ)` without argument checks.
    pub fn energy(&self, sigma: &[Spin]) -> f64 {
        self.terms.iter().map(|t| t.coeff * monomial(&t.sites, sigma)).sum()
    }

    /// `φ_i(σ) = Σ_{A∋i} c_A Π_{j∈A, j≠i} σ_j`, so that `H = σ_i φ_i + (terms
    /// without i)`. The spin at `site` itself is ignored.
    pub fn local_field(&self, site: usize, sigma: &[Spin]) -> f64 {
        self.site_terms[site]
            .iter()
            .map(|&t| {
                let term = &self.terms[t];
                let mut p = 1i8;
                for &j in &term.sites {
                    if j != site {
                        p *= sigma[j];
                    }
                }
                term.coeff * p as f64
            })
            .sum()
    }
}

fn monomial(sites: &[usize], sigma: &[Spin]) -> f64 {
    let mut p = 1i8;
    for &i in sites {
        p *= sigma[i];
    }
    p as f64
}

/// `H(σ) = Σ_A c_A Π_{i∈A} σ_i`.
pub fn classical_energy(spec: &ModelSpec, sigma: &[Spin]) -> Result<f64, ModelError> {
    spec.check_assignment(sigma)?;
    Ok(spec.energy(sigma))
}

/// `∇_i H(σ) = H(σ^i) - H(σ) = -2 σ_i φ_i(σ)`.
pub fn energy_flip_delta(spec: &ModelSpec, sigma: &[Spin], site: usize) -> Result<f64, ModelError> {
    spec.check_assignment(sigma)?;
    if site >= spec.n_sites() {
        return Err(ModelError::SiteIndex { site, len: spec.n_sites() });
    }
    Ok(-2.0 * sigma[site] as f64 * spec.local_field(site, sigma))
}

/// Boundedness and locality constants of the classical part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    /// `sup_{i,σ} |∇_i H(σ)|`.
    pub c: f64,
    /// Interaction range in the lattice metric.
    pub r: u64,
    pub lambda_max: f64,
}

/// `C` is computed exactly by enumerating each site's neighbourhood (it equals
/// `2 max_i Σ_{A∋i} |c_A|` whenever the monomials at a site can be aligned,
/// e.g. for pair interactions plus longitudinal fields). Very large
/// neighbourhoods use that closed form as an upper bound.
pub fn model_constants(spec: &ModelSpec) -> ModelConstants {
    let n = spec.n_sites();
    let mut c: f64 = 0.0;
    let mut sigma = vec![1 as Spin; n];
    for i in 0..n {
        let nb = spec.neighbours(i);
        let site_c = if nb.len() <= MAX_EXACT_NEIGHBOURHOOD {
            let mut best: f64 = 0.0;
            for mask in 0u64..(1u64 << nb.len()) {
                for (b, &j) in nb.iter().enumerate() {
                    sigma[j] = if mask >> b & 1 == 1 { -1 } else { 1 };
                }
                best = best.max((2.0 * spec.local_field(i, &sigma)).abs());
            }
            for &j in nb {
                sigma[j] = 1;
            }
            best
        } else {
            2.0 * spec.site_terms(i).iter().map(|&t| spec.terms()[t].coeff.abs()).sum::<f64>()
        };
        c = c.max(site_c);
    }
    let lattice = spec.lattice();
    let r = spec
        .terms()
        .iter()
        .flat_map(|t| t.sites.iter().flat_map(move |&a| t.sites.iter().map(move |&b| (a, b))))
        .map(|(a, b)| lattice.distance(a, b))
        .max()
        .unwrap_or(0);
    let lambda_max = spec.fields().iter().copied().fold(0.0, f64::max);
    ModelConstants { c, r, lambda_max }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub spins: Vec<Spin>,
    pub value: f64,
}

/// On-disk form of an observable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableConfig {
    pub support: Vec<Vec<i64>>,
    pub table: Vec<TableEntry>,
}

/// A classical observable `f` given by its table on a finite support.
///
/// Entry `k` of the table is the value for the assignment in which bit `b`
/// of `k` is set exactly when the `b`-th support site (ascending index) has
/// spin `-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observable {
    sites: Vec<usize>,
    table: Vec<f64>,
}

impl Observable {
    pub fn new(sites: Vec<usize>, table: Vec<f64>) -> Result<Self, ModelError> {
        let expected = 1usize << sites.len();
        if table.len() != expected {
            return Err(ModelError::TableSize { got: table.len(), expected });
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteValue);
        }
        for (k, &s) in sites.iter().enumerate() {
            if sites[..k].contains(&s) {
                return Err(ModelError::RepeatedSupportSite(vec![s as i64]));
            }
        }
        let mut order: Vec<usize> = (0..sites.len()).collect();
        order.sort_by_key(|&k| sites[k]);
        let sorted_sites: Vec<usize> = order.iter().map(|&k| sites[k]).collect();
        let mut sorted_table = vec![0.0; expected];
        for (old_index, &v) in table.iter().enumerate() {
            let mut new_index = 0usize;
            for (new_bit, &old_bit) in order.iter().enumerate() {
                if old_index >> old_bit & 1 == 1 {
                    new_index |= 1 << new_bit;
                }
            }
            sorted_table[new_index] = v;
        }
        Ok(Self { sites: sorted_sites, table: sorted_table })
    }

    pub fn from_fn(sites: Vec<usize>, f: impl Fn(&[Spin]) -> f64) -> Result<Self, ModelError> {
        let m = sites.len();
        let table = (0..1usize << m)
            .map(|k| {
                let spins: Vec<Spin> = (0..m).map(|b| if k >> b & 1 == 1 { -1 } else { 1 }).collect();
                f(&spins)
            })
            .collect();
        Self::new(sites, table)
    }

    /// `f(σ) = σ_site`.
    pub fn spin(site: usize) -> Self {
        Self { sites: vec![site], table: vec![1.0, -1.0] }
    }

    /// `f(σ) = Π_{i∈sites} σ_i`.
    pub fn spin_product(sites: &[usize]) -> Result<Self, ModelError> {
        Self::from_fn(sites.to_vec(), |s| s.iter().map(|&x| x as f64).product())
    }

    pub fn constant(value: f64) -> Self {
        Self { sites: Vec::new(), table: vec![value] }
    }

    pub fn from_config(lattice: &Lattice, raw: &ObservableConfig) -> Result<Self, ModelError> {
        let m = raw.support.len();
        let mut sites = Vec::with_capacity(m);
        for coords in &raw.support {
            let i = lattice.index_of(coords).ok_or_else(|| ModelError::SiteOutsideBox {
                coords: coords.clone(),
                extents: lattice.extents().to_vec(),
            })?;
            if sites.contains(&i) {
                return Err(ModelError::RepeatedSupportSite(coords.clone()));
            }
            sites.push(i);
        }
        let expected = 1usize << m;
        if raw.table.len() != expected {
            return Err(ModelError::TableSize { got: raw.table.len(), expected });
        }
        let mut table = vec![f64::NAN; expected];
        for entry in &raw.table {
            if entry.spins.len() != m {
                return Err(ModelError::TableEntryWidth { got: entry.spins.len(), expected: m });
            }
            let mut k = 0usize;
            for (b, &s) in entry.spins.iter().enumerate() {
                match s {
                    1 => {}
                    -1 => k |= 1 << b,
                    other => return Err(ModelError::InvalidSpin(other as i64)),
                }
            }
            if !table[k].is_nan() {
                return Err(ModelError::DuplicateTableEntry(entry.spins.clone()));
            }
            if !entry.value.is_finite() {
                return Err(ModelError::NonFiniteValue);
            }
            table[k] = entry.value;
        }
        Self::new(sites, table)
    }

    pub fn to_config(&self, lattice: &Lattice) -> ObservableConfig {
        let m = self.sites.len();
        ObservableConfig {
            support: self.sites.iter().map(|&i| lattice.coords(i)).collect(),
            table: self
                .table
                .iter()
                .enumerate()
                .map(|(k, &value)| TableEntry {
                    spins: (0..m).map(|b| if k >> b & 1 == 1 { -1 } else { 1 }).collect(),
                    value,
                })
                .collect(),
        }
    }

    /// Declared support, ascending.
    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Evaluate on a full assignment.
    pub fn value(&self, sigma: &[Spin]) -> f64 {
        self.value_with(|i| sigma[i])
    }

    pub fn value_with(&self, mut spin: impl FnMut(usize) -> Spin) -> f64 {
        let mut k = 0usize;
        for (b, &i) in self.sites.iter().enumerate() {
            if spin(i) < 0 {
                k |= 1 << b;
            }
        }
        self.table[k]
    }

    /// `‖f‖ = sup |f|`.
    pub fn sup_norm(&self) -> f64 {
        self.table.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖∇_i f‖`, by enumeration of the support.
    pub fn grad_norm(&self, site: usize) -> f64 {
        match self.sites.iter().position(|&s| s == site) {
            None => 0.0,
            Some(b) => (0..self.table.len())
                .map(|k| (self.table[k ^ (1 << b)] - self.table[k]).abs())
                .fold(0.0, f64::max),
        }
    }

    /// `|||f||| = Σ_i ‖∇_i f‖`.
    pub fn triple_norm(&self) -> f64 {
        self.sites.iter().map(|&i| self.grad_norm(i)).sum()
    }

    /// Sites the observable actually depends on.
    pub fn effective_support(&self) -> Vec<usize> {
        self.sites.iter().copied().filter(|&i| self.grad_norm(i) > 0.0).collect()
    }

    /// `a·f + b`.
    pub fn affine(&self, a: f64, b: f64) -> Self {
        Self { sites: self.sites.clone(), table: self.table.iter().map(|v| a * v + b).collect() }
    }

    /// Pointwise product, on the union of supports.
    pub fn product(&self, other: &Observable) -> Self {
        let mut sites = self.sites.clone();
        for &s in &other.sites {
            if !sites.contains(&s) {
                sites.push(s);
            }
        }
        sites.sort_unstable();
        let sites_ref = sites.clone();
        Self::from_fn(sites, |spins| {
            let lookup = |i: usize| spins[sites_ref.iter().position(|&s| s == i).unwrap()];
            self.value_with(lookup) * other.value_with(lookup)
        })
        .expect("product of valid observables is valid")
    }

    /// Move the support by a lattice vector.
    pub fn translated(&self, lattice: &Lattice, shift: &[i64]) -> Option<Self> {
        let sites = self
            .sites
            .iter()
            .map(|&i| lattice.translate(i, shift))
            .collect::<Option<Vec<_>>>()?;
        Self::new(sites, self.table.clone()).ok()
    }

    pub fn check_lattice(&self, lattice: &Lattice) -> Result<(), ModelError> {
        match self.sites.iter().find(|&&i| i >= lattice.len()) {
            Some(&site) => Err(ModelError::SiteIndex { site, len: lattice.len() }),
            None => Ok(()),
        }
    }
}

/// `d(A, B) = min_{i∈A, j∈B} |i - j|`, or `None` if either set is empty.
pub fn support_distance(lattice: &Lattice, a: &[usize], b: &[usize]) -> Option<u64> {
    a.iter().flat_map(|&i| b.iter().map(move |&j| lattice.distance(i, j))).min()
}

/// Every spin assignment of `n` sites, in basis order.
pub fn assignment(n: usize, index: usize) -> Vec<Spin> {
    (0..n).map(|b| if index >> b & 1 == 1 { -1 } else { 1 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(terms: Vec<TermConfig>, n: usize) -> ModelConfig {
        ModelConfig {
            dimension: 1,
            extents: vec![n],
            boundary: Boundary::Free,
            beta: 0.5,
            terms,
            fields: FieldsConfig::Uniform(1.0),
            weight_sign: WeightSign::Boltzmann,
            lifting: Lifting::Trace,
            range: None,
        }
    }

    fn term(sites: &[i64], coeff: f64) -> TermConfig {
        TermConfig { sites: sites.iter().map(|&s| vec![s]).collect(), coeff }
    }

    #[test]
    fn negative_field_is_rejected() {
        let mut raw = config(vec![], 2);
        raw.fields = FieldsConfig::PerSite(vec![1.0, -0.5]);
        let err = ModelSpec::from_config(&raw).unwrap_err();
        assert!(err.to_string().contains("negative transverse field"));
    }

    #[test]
    fn identical_supports_are_merged() {
        let raw = config(vec![term(&[0, 1], 1.0), term(&[1, 0], -0.25)], 2);
        let spec = ModelSpec::from_config(&raw).unwrap();
        assert_eq!(spec.terms(), &[InteractionTerm { sites: vec![0, 1], coeff: 0.75 }]);
    }

    #[test]
    fn valid_chain_round_trips() {
        let spec = ModelSpec::ising_chain(4, 1.0, 0.0, 1.0, 0.5, Boundary::Free);
        let again = ModelSpec::from_config(&spec.to_config()).unwrap();
        assert_eq!(spec, again);
        assert_eq!(spec.terms().len(), 3);
        assert_eq!(spec.spec_hash(), again.spec_hash());
    }

    #[test]
    fn structural_errors_are_collected() {
        let mut raw = config(vec![term(&[], 1.0), term(&[0, 7], 1.0), term(&[1, 1], 1.0)], 2);
        raw.beta = 0.0;
        let err = ModelSpec::from_config(&raw).unwrap_err();
        assert_eq!(err.0.len(), 4, "{err}");
        assert!(err.0.contains(&ModelError::NonPositiveBeta(0.0)));
        assert!(err.0.contains(&ModelError::EmptySupport { term: 0 }));
    }

    #[test]
    fn range_cap_is_enforced() {
        let mut raw = config(vec![term(&[0, 3], 1.0)], 4);
        raw.range = Some(1);
        assert!(matches!(
            ModelSpec::from_config(&raw).unwrap_err().0[0],
            ModelError::RangeExceeded { diameter: 3, .. }
        ));
    }

    #[test]
    fn energy_examples() {
        let spec = ModelSpec::from_config(&config(vec![term(&[0, 1], -1.0)], 2)).unwrap();
        assert_eq!(classical_energy(&spec, &[1, 1]).unwrap(), -1.0);
        let empty = ModelSpec::from_config(&config(vec![], 3)).unwrap();
        assert_eq!(classical_energy(&empty, &[1, -1, 1]).unwrap(), 0.0);
        let mixed = ModelSpec::from_config(&config(vec![term(&[0, 1], -1.0), term(&[0], 0.3)], 2)).unwrap();
        assert!((classical_energy(&mixed, &[-1, 1]).unwrap() - 0.7).abs() < 1e-15);
        assert!(classical_energy(&mixed, &[1]).is_err());
    }

    #[test]
    fn flip_delta_examples() {
        let spec = ModelSpec::from_config(&config(vec![term(&[0, 1], -1.0)], 3)).unwrap();
        assert_eq!(energy_flip_delta(&spec, &[1, 1, 1], 0).unwrap(), 2.0);
        assert_eq!(energy_flip_delta(&spec, &[1, 1, 1], 2).unwrap(), 0.0);
        let field = ModelSpec::from_config(&config(vec![term(&[0], 0.3)], 1)).unwrap();
        assert!((energy_flip_delta(&field, &[-1], 0).unwrap() - 0.6).abs() < 1e-15);
        assert!(energy_flip_delta(&spec, &[1, 1, 1], 5).is_err());
    }

    #[test]
    fn constants_examples() {
        let chain = ModelSpec::ising_chain(4, 1.0, 0.0, 1.0, 0.5, Boundary::Free);
        let k = model_constants(&chain);
        assert_eq!((k.c, k.r), (4.0, 1));
        let free = ModelSpec::from_config(&config(vec![], 3)).unwrap();
        let k = model_constants(&free);
        assert_eq!((k.c, k.r), (0.0, 0));
        let mut raw = config(vec![], 2);
        raw.fields = FieldsConfig::PerSite(vec![0.5, 1.5]);
        assert_eq!(model_constants(&ModelSpec::from_config(&raw).unwrap()).lambda_max, 1.5);
    }

    #[test]
    fn constants_are_exact_for_unalignable_terms() {
        // σ0σ1 + σ0σ2 + σ0σ1σ2 - σ0 cannot align all four monomials.
        let raw = config(vec![term(&[0, 1], 1.0), term(&[0, 2], 1.0), term(&[0, 1, 2], 1.0), term(&[0], -1.0)], 3);
        let spec = ModelSpec::from_config(&raw).unwrap();
        let brute = (0..8)
            .flat_map(|k| (0..3).map(move |i| (k, i)))
            .map(|(k, i)| energy_flip_delta(&spec, &assignment(3, k), i).unwrap().abs())
            .fold(0.0, f64::max);
        assert_eq!(model_constants(&spec).c, brute);
        assert!(brute < 8.0);
    }

    #[test]
    fn periodic_distance_wraps() {
        let lattice = Lattice::new(vec![6, 6], Boundary::Periodic).unwrap();
        let a = lattice.index_of(&[0, 0]).unwrap();
        let b = lattice.index_of(&[5, 3]).unwrap();
        assert_eq!(lattice.distance(a, b), 3);
        assert_eq!(lattice.coords(b), vec![5, 3]);
        let free = Lattice::new(vec![6, 6], Boundary::Free).unwrap();
        assert_eq!(free.distance(a, b), 5);
    }

    #[test]
    fn observable_norm_examples() {
        let f = Observable::spin(0);
        assert_eq!((f.grad_norm(0), f.triple_norm()), (2.0, 2.0));
        assert_eq!(f.effective_support(), vec![0]);

        let c = Observable::from_fn(vec![0, 1], |_| 3.0).unwrap();
        assert_eq!(c.triple_norm(), 0.0);
        assert!(c.effective_support().is_empty());

        let p = Observable::spin_product(&[0, 1]).unwrap();
        assert_eq!((p.grad_norm(0), p.grad_norm(1), p.triple_norm()), (2.0, 2.0, 4.0));
    }

    #[test]
    fn observable_table_is_canonicalised() {
        let lattice = Lattice::chain(3);
        // f = σ2 with a dummy dependence-free site 0, support listed out of order.
        let raw = ObservableConfig {
            support: vec![vec![2], vec![0]],
            table: vec![
                TableEntry { spins: vec![1, 1], value: 1.0 },
                TableEntry { spins: vec![-1, 1], value: -1.0 },
                TableEntry { spins: vec![1, -1], value: 1.0 },
                TableEntry { spins: vec![-1, -1], value: -1.0 },
            ],
        };
        let f = Observable::from_config(&lattice, &raw).unwrap();
        assert_eq!(f.sites(), &[0, 2]);
        assert_eq!(f.value(&[1, 1, -1]), -1.0);
        assert_eq!(f.value(&[-1, 1, 1]), 1.0);
        assert_eq!(f.effective_support(), vec![2]);
        let back = Observable::from_config(&lattice, &f.to_config(&lattice)).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn observable_file_errors() {
        let lattice = Lattice::chain(2);
        let short = ObservableConfig { support: vec![vec![0]], table: vec![TableEntry { spins: vec![1], value: 1.0 }] };
        assert!(matches!(Observable::from_config(&lattice, &short), Err(ModelError::TableSize { .. })));
        let outside = ObservableConfig { support: vec![vec![4]], table: vec![] };
        assert!(matches!(Observable::from_config(&lattice, &outside), Err(ModelError::SiteOutsideBox { .. })));
    }
}
