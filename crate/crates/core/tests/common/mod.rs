//! Shared helpers for the integration tests.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use wlqmc::model::{assignment, ModelSpec, Observable};

/// Fixed-point reals with 256 fractional bits.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fx(BigInt);

const FRAC: u32 = 256;

impl Fx {
    pub fn from_f64(x: f64) -> Fx {
        assert!(x.is_finite());
        if x == 0.0 {
            return Fx(BigInt::zero());
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | 1 << 52, exp - 1075) };
        let shift = e + FRAC as i64;
        let m = BigInt::from(mant) * sign;
        Fx(if shift >= 0 { m << shift as usize } else { m >> (-shift) as usize })
    }

    pub fn int(n: i64) -> Fx {
        Fx(BigInt::from(n) << FRAC)
    }

    pub fn to_f64(&self) -> f64 {
        // Keep 80 significant bits before the float conversion.
        let bits = self.0.bits() as i64;
        let drop = (bits - 80).max(0);
        let top = (&self.0 >> drop as usize).to_f64().unwrap();
        top * 2f64.powi((drop - FRAC as i64) as i32)
    }

    pub fn add(&self, o: &Fx) -> Fx {
        Fx(&self.0 + &o.0)
    }

    pub fn sub(&self, o: &Fx) -> Fx {
        Fx(&self.0 - &o.0)
    }

    pub fn mul(&self, o: &Fx) -> Fx {
        Fx((&self.0 * &o.0) >> FRAC)
    }

    pub fn div(&self, o: &Fx) -> Fx {
        Fx((&self.0 << FRAC) / &o.0)
    }

    pub fn neg(&self) -> Fx {
        Fx(-&self.0)
    }

    pub fn powi(&self, n: u32) -> Fx {
        (0..n).fold(Fx::int(1), |acc, _| acc.mul(self))
    }

    pub fn max(self, o: Fx) -> Fx {
        if self >= o { self } else { o }
    }

    pub fn min(self, o: Fx) -> Fx {
        if self <= o { self } else { o }
    }

    /// Halve the argument until it is below 2^-10, sum the Taylor series,
    /// then square back.
    pub fn exp(&self) -> Fx {
        let mut halvings = 0usize;
        let limit = BigInt::one() << (FRAC - 10);
        let mut x = self.0.clone();
        while x.abs() > limit {
            x >>= 1;
            halvings += 1;
        }
        let x = Fx(x);
        let mut term = Fx::int(1);
        let mut sum = Fx::int(1);
        for k in 1..80 {
            term = term.mul(&x).div(&Fx::int(k));
            if term.0.is_zero() {
                break;
            }
            sum = sum.add(&term);
        }
        for _ in 0..halvings {
            sum = sum.mul(&sum);
        }
        sum
    }
}

pub fn rel_err(got: f64, exact: f64) -> f64 {
    if exact == 0.0 {
        got.abs()
    } else {
        ((got - exact) / exact).abs()
    }
}

/// Classical Gibbs average of `f` under `e^{-βH}` by enumeration.
pub fn classical_gibbs(spec: &ModelSpec, f: &Observable) -> f64 {
    let n = spec.n_sites();
    let energies: Vec<f64> = (0..1usize << n).map(|k| spec.energy(&assignment(n, k))).collect();
    let e0 = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut z, mut acc) = (0.0, 0.0);
    for (k, e) in energies.iter().enumerate() {
        let w = (-spec.beta() * (e - e0)).exp();
        z += w;
        acc += w * f.value(&assignment(n, k));
    }
    acc / z
}
