//! Exact thermal averages by dense diagonalization of the full Hamiltonian
//! `ℋ = H_cl(σ^z) - Σ_i λ_i σ^x_i` on `2^n` basis states.
//!
//! Basis state `k` has spin `σ_i = -1` exactly when bit `i` of `k` is set;
//! sites are ordered by their lattice index.

use std::io::{self, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::model::{assignment, ModelSpec, Observable, WeightSign};

pub const DEFAULT_CAP: usize = 12;
const DUMP_MAGIC: &[u8; 4] = b"TFWL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{n_sites} sites exceed the exact-diagonalization cap of {cap}")]
    CapExceeded { n_sites: usize, cap: usize },
    #[error("observable refers to site {site} but the model has {n_sites} sites")]
    ObservableSite { site: usize, n_sites: usize },
}

/// The Hamiltonian in sparse form: classical energies on the diagonal and
/// the single-flip couplings.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHamiltonian {
    pub n_sites: usize,
    pub diagonal: Vec<f64>,
    /// `-λ_i`, the amplitude between `σ` and `σ^i`.
    pub offdiag: Vec<f64>,
}

impl DenseHamiltonian {
    pub fn dimension(&self) -> usize {
        self.diagonal.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let dim = self.dimension();
        let mut m = DMatrix::zeros(dim, dim);
        for k in 0..dim {
            m[(k, k)] = self.diagonal[k];
            for (i, &a) in self.offdiag.iter().enumerate() {
                m[(k, k ^ (1 << i))] = a;
            }
        }
        m
    }

    /// Header `TFWL`, `u32` site count, eight zero bytes; then the matrix as
    /// row-major little-endian `f64`.
    pub fn write_dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&(self.n_sites as u32).to_le_bytes())?;
        out.write_all(&[0u8; 8])?;
        let m = self.to_matrix();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.write_all(&m[(r, c)].to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Reads a dump written by [`DenseHamiltonian::write_dump`].
pub fn read_dump(bytes: &[u8]) -> Option<(usize, DMatrix<f64>)> {
    if bytes.len() < 16 || &bytes[..4] != DUMP_MAGIC {
        return None;
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
    let dim = 1usize.checked_shl(n as u32)?;
    let body = &bytes[16..];
    if body.len() != dim * dim * 8 {
        return None;
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Some((n, DMatrix::from_row_iterator(dim, dim, values)))
}

/// Classical energy in the oracle's sign convention: the chain with the
/// positive weight sign samples `e^{+Ĥ}`, i.e. the model with `H_cl`
/// negated, and the oracle follows it so the two stay comparable.
fn diagonal_energy(spec: &ModelSpec, sigma: &[i8]) -> f64 {
    match spec.weight_sign() {
        WeightSign::Boltzmann => spec.energy(sigma),
        WeightSign::Positive => -spec.energy(sigma),
    }
}

pub fn build_hamiltonian(spec: &ModelSpec) -> Result<DenseHamiltonian, OracleError> {
    build_hamiltonian_with_cap(spec, DEFAULT_CAP)
}

pub fn build_hamiltonian_with_cap(spec: &ModelSpec, cap: usize) -> Result<DenseHamiltonian, OracleError> {
    let n = spec.n_sites();
    if n > cap || n >= usize::BITS as usize {
        return Err(OracleError::CapExceeded { n_sites: n, cap });
    }
    let diagonal = (0..1usize << n).map(|k| diagonal_energy(spec, &assignment(n, k))).collect();
    let offdiag = spec.fields().iter().map(|&l| -l).collect();
    Ok(DenseHamiltonian { n_sites: n, diagonal, offdiag })
}

/// Eigendecomposition plus the Gibbs weights at the model's `β`.
#[derive(Clone, Debug)]
pub struct ThermalState {
    pub n_sites: usize,
    pub energies: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// Normalized `e^{-βE_k}/Z`.
    pub weights: Vec<f64>,
    /// `p(σ) = ⟨σ|e^{-βℋ}|σ⟩ / Z`.
    pub diagonal_probability: Vec<f64>,
}

impl ThermalState {
    pub fn new(spec: &ModelSpec) -> Result<Self, OracleError> {
        Self::with_cap(spec, DEFAULT_CAP)
    }

    pub fn with_cap(spec: &ModelSpec, cap: usize) -> Result<Self, OracleError> {
        let h = build_hamiltonian_with_cap(spec, cap)?;
        let eig = SymmetricEigen::new(h.to_matrix());
        let energies: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let e0 = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let beta = spec.beta();
        let mut weights: Vec<f64> = energies.iter().map(|e| (-beta * (e - e0)).exp()).collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        let dim = h.dimension();
        let vecs = &eig.eigenvectors;
        let diagonal_probability = (0..dim)
            .map(|s| (0..dim).map(|k| weights[k] * vecs[(s, k)] * vecs[(s, k)]).sum())
            .collect();
        Ok(Self { n_sites: h.n_sites, energies, eigenvectors: eig.eigenvectors, weights, diagonal_probability })
    }

    fn check(&self, f: &Observable) -> Result<(), OracleError> {
        match f.sites().iter().find(|&&s| s >= self.n_sites) {
            Some(&site) => Err(OracleError::ObservableSite { site, n_sites: self.n_sites }),
            None => Ok(()),
        }
    }

    /// `Tr(F e^{-βℋ}) / Tr(e^{-βℋ})` for the diagonal operator `F = f(σ^z)`.
    pub fn expectation(&self, f: &Observable) -> Result<f64, OracleError> {
        self.check(f)?;
        Ok(self
            .diagonal_probability
            .iter()
            .enumerate()
            .map(|(k, p)| p * f.value_with(|s| if k >> s & 1 == 1 { -1 } else { 1 }))
            .sum())
    }

    /// `⟨F G⟩ - ⟨F⟩⟨G⟩`.
    pub fn truncated_correlation(&self, f: &Observable, g: &Observable) -> Result<f64, OracleError> {
        self.check(f)?;
        self.check(g)?;
        let spin = |k: usize| move |s: usize| if k >> s & 1 == 1 { -1 } else { 1 };
        let (mut ef, mut eg, mut efg) = (0.0, 0.0, 0.0);
        for (k, p) in self.diagonal_probability.iter().enumerate() {
            let a = f.value_with(spin(k));
            let b = g.value_with(spin(k));
            ef += p * a;
            eg += p * b;
            efg += p * a * b;
        }
        Ok(efg - ef * eg)
    }

    /// `max_k ‖H v_k - E_k v_k‖ / ‖H‖_F`.
    pub fn eigen_residual(&self, h: &DenseHamiltonian) -> f64 {
        let m = h.to_matrix();
        let norm = m.norm().max(f64::MIN_POSITIVE);
        (0..self.energies.len())
            .map(|k| {
                let v = self.eigenvectors.column(k);
                (&m * v - v * self.energies[k]).norm() / norm
            })
            .fold(0.0, f64::max)
    }
}

pub fn thermal_expectation(spec: &ModelSpec, f: &Observable) -> Result<f64, OracleError> {
    ThermalState::new(spec)?.expectation(f)
}

pub fn thermal_truncated_correlation(spec: &ModelSpec, f: &Observable, g: &Observable) -> Result<f64, OracleError> {
    ThermalState::new(spec)?.truncated_correlation(f, g)
}
