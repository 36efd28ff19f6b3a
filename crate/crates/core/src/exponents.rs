//! Exponent algebra for the anisotropy vector and its epsilon-regularization.
//!
//! Axes are stored with the unit exponents first. `ExponentVector::from_unordered`
//! accepts any ordering and records the permutation it applied.

use serde::{Deserialize, Serialize};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// The anisotropy data `(N, N1, p)` with the derived critical exponent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentVector {
    n: usize,
    n1: usize,
    p: Vec<f64>,
    p_star: f64,
    p_plus: f64,
    /// `axis_order[k]` is the caller's axis stored at position `k`.
    axis_order: Vec<usize>,
}

/// Builds an exponent vector from the dimension, the number of unit exponents
/// and the exponents of the remaining axes.
pub fn derive_exponents(n: usize, n1: usize, p_tail: &[f64]) -> Result<ExponentVector> {
    if n < 2 {
        return Err(Error::BadDimension(n));
    }
    if n1 > n {
        return Err(Error::BadUnitCount { n, n1 });
    }
    if p_tail.len() != n - n1 {
        return Err(Error::InvalidExponents(format!(
            "expected {} tail exponents, got {}",
            n - n1,
            p_tail.len()
        )));
    }
    for (i, &p) in p_tail.iter().enumerate() {
        if !p.is_finite() || p <= 1.0 {
            return Err(Error::BadTail { index: n1 + i, value: p });
        }
    }
    let denom = p_tail
        .iter()
        .fold(int(n1 as i64 - 1), |acc, &p| acc + exact(p).recip());
    if !denom.is_positive() {
        return Err(Error::DenominatorNonpositive(round(&denom)));
    }
    let p_star = round(&(int(n as i64) / denom));
    let p_plus = p_tail
        .iter()
        .copied()
        .fold(if n1 > 0 { 1.0 } else { f64::NEG_INFINITY }, f64::max);
    if p_plus >= p_star {
        return Err(Error::SupercriticalExponent { p_plus, p_star });
    }
    let mut p = vec![1.0; n1];
    p.extend_from_slice(p_tail);
    Ok(ExponentVector {
        n,
        n1,
        p,
        p_star,
        p_plus,
        axis_order: (0..n).collect(),
    })
}

impl ExponentVector {
    /// Accepts exponents in any axis order; unit exponents are moved to the front
    /// (stable within each group) and the permutation is kept in `axis_order`.
    pub fn from_unordered(p: &[f64]) -> Result<Self> {
        let mut order: Vec<usize> = (0..p.len()).filter(|&i| p[i] == 1.0).collect();
        let n1 = order.len();
        order.extend((0..p.len()).filter(|&i| p[i] != 1.0));
        let tail: Vec<f64> = order[n1..].iter().map(|&i| p[i]).collect();
        let mut x = derive_exponents(p.len(), n1, &tail)?;
        x.axis_order = order;
        Ok(x)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn p_tail(&self) -> &[f64] {
        &self.p[self.n1..]
    }

    pub fn p_star(&self) -> f64 {
        self.p_star
    }

    pub fn p_plus(&self) -> f64 {
        self.p_plus
    }

    pub fn axis_order(&self) -> &[usize] {
        &self.axis_order
    }

    /// `N/p* - eps N/(1 + eps)` evaluated exactly from the inputs.
    pub fn p_star_shift(&self, eps: f64) -> f64 {
        let inv = self.p_tail().iter().fold(int(self.n1 as i64 - 1), |acc, &p| acc + exact(p).recip());
        let e = exact(eps);
        round(&(inv - int(self.n as i64) * &e / (BigRational::one() + e)))
    }

    /// Exponents of the limit functional: weight 1 on the gradient block.
    pub fn level(&self) -> LevelExponents {
        LevelExponents {
            n: self.n,
            n1: self.n1,
            grad1: 1.0,
            axis: self.p_tail().to_vec(),
            critical: self.p_star,
        }
    }
}

// Exponent formulas are rational in the inputs, so they are evaluated exactly
// and rounded once.
fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite exponent data")
}

fn int(v: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

fn round(v: &BigRational) -> f64 {
    if v.is_zero() {
        0.0
    } else {
        v.to_f64().unwrap_or(f64::NAN)
    }
}

/// All exponents of the epsilon-regularized problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonExponents {
    pub eps: f64,
    pub n: usize,
    pub n1: usize,
    /// `a_i` for the tail axes.
    pub a: Vec<f64>,
    pub eps_i: Vec<f64>,
    pub p_eps: Vec<f64>,
    /// Exponent `1 + eps` carried by the unit axes.
    pub one_dir_exponent: f64,
    pub p_star_eps: f64,
    pub lambda_eps: f64,
    pub p_plus_eps: f64,
}

pub fn epsilon_exponents(x: &ExponentVector, eps: f64) -> Result<EpsilonExponents> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::EpsilonTooLarge {
            eps,
            reason: "eps must be a positive finite number".into(),
        });
    }
    let e = exact(eps);
    let one = BigRational::one() + &e;
    let mut a = Vec::with_capacity(x.n - x.n1);
    let mut eps_i = Vec::with_capacity(x.n - x.n1);
    let mut p_eps = Vec::with_capacity(x.n - x.n1);
    let mut inv = int(x.n1 as i64) / &one - BigRational::one();
    for &p in x.p_tail() {
        let pr = exact(p);
        let pm1 = &pr - BigRational::one();
        let denom = BigRational::one() - &e * &pm1;
        if !denom.is_positive() {
            return Err(Error::EpsilonTooLarge {
                eps,
                reason: format!("1 - eps(p - 1) = {} for p = {p}", round(&denom)),
            });
        }
        let ai = &pm1 * &pr * &e * &e / denom;
        let ei = &pr * &e + &ai;
        let pe = (BigRational::one() + &ei) * &pr;
        inv += pe.recip();
        a.push(round(&ai));
        eps_i.push(round(&ei));
        p_eps.push(round(&pe));
    }
    if !inv.is_positive() {
        return Err(Error::EpsilonTooLarge {
            eps,
            reason: format!("N/p*_eps = {} is not positive", round(&inv)),
        });
    }
    let pse = int(x.n as i64) / inv;
    let lambda_eps = round(&(&pse * &e / &one + BigRational::one()));
    let p_star_eps = round(&pse);
    let one = round(&one);
    let p_plus_eps = p_eps
        .iter()
        .copied()
        .fold(if x.n1 > 0 { one } else { f64::NEG_INFINITY }, f64::max);
    if p_plus_eps >= p_star_eps {
        return Err(Error::EpsilonTooLarge {
            eps,
            reason: format!("p+_eps = {p_plus_eps} is not below p*_eps = {p_star_eps}"),
        });
    }
    Ok(EpsilonExponents {
        eps,
        n: x.n,
        n1: x.n1,
        a,
        eps_i,
        p_eps,
        one_dir_exponent: one,
        p_star_eps,
        lambda_eps,
        p_plus_eps,
    })
}

impl EpsilonExponents {
    pub fn level(&self) -> LevelExponents {
        LevelExponents {
            n: self.n,
            n1: self.n1,
            grad1: self.one_dir_exponent,
            axis: self.p_eps.clone(),
            critical: self.p_star_eps,
        }
    }
}

/// Geometric schedule `eps0, eps0 * factor, ...` down to `eps_min`, keeping only
/// the values admissible for `x`.
pub fn epsilon_schedule(
    x: &ExponentVector,
    eps0: f64,
    factor: f64,
    eps_min: f64,
) -> Result<Vec<f64>> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::InvalidExponents(format!(
            "schedule factor {factor} must lie in (0, 1)"
        )));
    }
    if !(eps_min > 0.0) || eps0 < eps_min {
        return Err(Error::EmptySchedule);
    }
    let floor = eps_min * (1.0 - 1e-12);
    let mut out = Vec::new();
    let mut eps = eps0;
    while eps >= floor {
        if epsilon_exponents(x, eps).is_ok() {
            out.push(eps);
        }
        eps *= factor;
    }
    if out.is_empty() {
        return Err(Error::EmptySchedule);
    }
    Ok(out)
}

/// Exponents of one concrete functional
/// `(1/g) ∫|∇₁u|^g + Σ (1/p_i) ∫|∂_i u|^{p_i}` on the sphere `|u|_q = 1`.
///
/// Built from an `ExponentVector` (limit problem), from `EpsilonExponents`
/// (regularized problem), or directly for linear test problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelExponents {
    pub n: usize,
    pub n1: usize,
    pub grad1: f64,
    pub axis: Vec<f64>,
    pub critical: f64,
}

impl LevelExponents {
    pub fn custom(n: usize, n1: usize, grad1: f64, axis: Vec<f64>, critical: f64) -> Result<Self> {
        if n1 > n || axis.len() != n - n1 {
            return Err(Error::InvalidExponents(format!(
                "n = {n}, n1 = {n1} but {} axis exponents",
                axis.len()
            )));
        }
        if grad1 < 1.0 || axis.iter().any(|&p| p < 1.0) || critical < 1.0 {
            return Err(Error::InvalidExponents("all exponents must be >= 1".into()));
        }
        Ok(Self {
            n,
            n1,
            grad1,
            axis,
            critical,
        })
    }

    /// Exponent attached to storage axis `i`.
    pub fn axis_exponent(&self, i: usize) -> f64 {
        if i < self.n1 {
            self.grad1
        } else {
            self.axis[i - self.n1]
        }
    }

    pub fn p_plus(&self) -> f64 {
        (0..self.n).map(|i| self.axis_exponent(i)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `alpha_i = q / p_i - 1`: the anisotropic dilation that preserves every
    /// term of the functional and the constraint.
    pub fn scaling_exponents(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.critical / self.axis_exponent(i) - 1.0)
            .collect()
    }
}
