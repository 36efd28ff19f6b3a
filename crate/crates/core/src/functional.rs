//! The regularized anisotropic energy, its gradient and the embedding ratios.
//!
//! Each term is `(1/p) ∫ φ_p(Du)` with
//! `φ_p(s) = (s² + δ²)^{p/2} - δ^p` for the gradient block and for axes with
//! `p < 2`, and `φ_p(s) = |s|^p` for axes with `p >= 2`. The flux of a
//! smoothed term is `(s² + δ²)^{(p-2)/2} Du`, so the gradient below is the
//! exact derivative of the energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::{ExponentVector, LevelExponents};
use crate::grid::{diff_into, diff_t_add, lp_norm, Field, Grid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub grad1_term: f64,
    pub axis_terms: Vec<f64>,
    pub total: f64,
}

/// Reusable buffers for energy and gradient evaluation on one grid.
pub struct Evaluator {
    grid: Grid,
    exps: LevelExponents,
    delta: f64,
    diffs: Vec<Vec<f64>>,
    flux: Vec<f64>,
    curv: Vec<f64>,
}

impl Evaluator {
    pub fn new(grid: &Grid, exps: &LevelExponents, delta: f64) -> Result<Self> {
        if grid.dim() != exps.n {
            return Err(Error::InvalidExponents(format!(
                "exponents for N = {} on a {}-dimensional grid",
                exps.n,
                grid.dim()
            )));
        }
        if !(delta >= 0.0) {
            return Err(Error::InvalidOptions(format!("delta = {delta} must be >= 0")));
        }
        let len = grid.len();
        Ok(Evaluator {
            grid: grid.clone(),
            exps: exps.clone(),
            delta,
            diffs: vec![vec![0.0; len]; exps.n1.max(1)],
            flux: vec![0.0; len],
            curv: vec![0.0; len],
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn exponents(&self) -> &LevelExponents {
        &self.exps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Energy breakdown; when `grad` is given it receives the energy gradient
    /// (the L²-gradient under node quadrature).
    pub fn evaluate(&mut self, u: &[f64], grad: Option<&mut [f64]>) -> EnergyBreakdown {
        self.evaluate_full(u, grad, None)
    }

    /// Diagonal of the Hessian of the energy, floored at a small fraction of its
    /// largest entry. Used as a Jacobi preconditioner.
    pub fn hessian_diagonal(&mut self, u: &[f64], out: &mut [f64]) {
        self.evaluate_full(u, None, Some(out));
    }

    /// Energy, and optionally its gradient and floored Hessian diagonal, in one pass.
    pub fn evaluate_full(
        &mut self,
        u: &[f64],
        mut grad: Option<&mut [f64]>,
        mut hdiag: Option<&mut [f64]>,
    ) -> EnergyBreakdown {
        let vol = self.grid.cell_volume();
        let n1 = self.exps.n1;
        let d2 = self.delta * self.delta;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(h) = hdiag.as_deref_mut() {
            h.iter_mut().for_each(|v| *v = 0.0);
        }

        let mut grad1_term = 0.0;
        if n1 > 0 {
            let q = self.exps.grad1;
            let shift = if self.delta > 0.0 { self.delta.powf(q) } else { 0.0 };
            for axis in 0..n1 {
                diff_into(&self.grid, u, axis, &mut self.diffs[axis]);
            }
            let mut acc = 0.0;
            for k in 0..u.len() {
                let s2: f64 = (0..n1).map(|a| self.diffs[a][k] * self.diffs[a][k]).sum::<f64>() + d2;
                let (w, dens) = block_weight(s2, q, shift);
                acc += dens;
                self.flux[k] = w;
            }
            grad1_term = acc * vol / q;
            if let Some(h) = hdiag.as_deref_mut() {
                for axis in 0..n1 {
                    for k in 0..u.len() {
                        let w = self.flux[k];
                        let s2 = (0..n1).map(|a| self.diffs[a][k] * self.diffs[a][k]).sum::<f64>() + d2;
                        let dk = self.diffs[axis][k];
                        self.curv[k] = if s2 > 0.0 {
                            (w * (1.0 + (q - 2.0) * dk * dk / s2)).max(0.0)
                        } else {
                            0.0
                        };
                    }
                    add_curvature(&self.grid, &self.curv, axis, h);
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for axis in 0..n1 {
                    let d = &mut self.diffs[axis];
                    for (dk, &w) in d.iter_mut().zip(&self.flux) {
                        *dk *= w;
                    }
                    diff_t_add(&self.grid, d, axis, g);
                }
            }
        }

        let mut axis_terms = Vec::with_capacity(self.exps.n - n1);
        for (j, &p) in self.exps.axis.iter().enumerate() {
            let axis = n1 + j;
            let d = &mut self.diffs[0];
            diff_into(&self.grid, u, axis, d);
            let mut acc = 0.0;
            if p >= 2.0 {
                if p == 2.0 {
                    for ((fk, ck), &dk) in self.flux.iter_mut().zip(self.curv.iter_mut()).zip(d.iter()) {
                        acc += dk * dk;
                        *fk = dk;
                        *ck = 1.0;
                    }
                } else {
                    for ((fk, ck), &dk) in self.flux.iter_mut().zip(self.curv.iter_mut()).zip(d.iter()) {
                        let a = dk.abs();
                        let w = if a > 0.0 { a.powf(p - 2.0) } else { 0.0 };
                        acc += a * a * w;
                        *fk = w * dk;
                        *ck = (p - 1.0) * w;
                    }
                }
            } else {
                let shift = if self.delta > 0.0 { self.delta.powf(p) } else { 0.0 };
                for ((fk, ck), &dk) in self.flux.iter_mut().zip(self.curv.iter_mut()).zip(d.iter()) {
                    let s2 = dk * dk + d2;
                    let (w, dens) = block_weight(s2, p, shift);
                    acc += dens;
                    *fk = w * dk;
                    *ck = if s2 > 0.0 { w * (1.0 + (p - 2.0) * dk * dk / s2) } else { 0.0 };
                }
            }
            axis_terms.push(acc * vol / p);
            if let Some(g) = grad.as_deref_mut() {
                diff_t_add(&self.grid, &self.flux, axis, g);
            }
            if let Some(h) = hdiag.as_deref_mut() {
                add_curvature(&self.grid, &self.curv, axis, h);
            }
        }
        if let Some(h) = hdiag {
            let top = h.iter().copied().fold(0.0, f64::max);
            let floor = if top > 0.0 { top * 1e-10 } else { 1.0 };
            for v in h.iter_mut() {
                if !(*v > floor) {
                    *v = floor;
                }
            }
        }
        let total = grad1_term + axis_terms.iter().sum::<f64>();
        EnergyBreakdown {
            grad1_term,
            axis_terms,
            total,
        }
    }
}

/// `out += D^T diag(curv) D` restricted to the diagonal, along one axis.
fn add_curvature(grid: &Grid, curv: &[f64], axis: usize, out: &mut [f64]) {
    let s = grid.strides()[axis];
    let n = grid.counts()[axis];
    let ih2 = 1.0 / (grid.spacings()[axis] * grid.spacings()[axis]);
    let block = n * s;
    for base in (0..out.len()).step_by(block) {
        for k in base..base + s {
            out[k] += curv[k] * ih2;
        }
        for k in base + s..base + block {
            out[k] += (curv[k] + curv[k - s]) * ih2;
        }
    }
}

/// Returns `((s2)^{(q-2)/2}, (s2)^{q/2} - shift)`, with the weight set to zero
/// when `s2 == 0`.
#[inline]
fn block_weight(s2: f64, q: f64, shift: f64) -> (f64, f64) {
    if s2 <= 0.0 {
        return (0.0, 0.0);
    }
    if q == 2.0 {
        return (1.0, s2 - shift);
    }
    let w = if q == 1.0 { 1.0 / s2.sqrt() } else { s2.powf(0.5 * q - 1.0) };
    (w, s2 * w - shift)
}

/// Node-wise energy density; its integral is `energy(u).total`.
pub fn energy_density(u: &Field, exps: &LevelExponents, delta: f64) -> Result<Field> {
    let g = u.grid();
    Evaluator::new(g, exps, delta)?;
    let d2 = delta * delta;
    let mut out = vec![0.0; g.len()];
    let mut diffs = vec![vec![0.0; g.len()]; exps.n];
    for (axis, d) in diffs.iter_mut().enumerate() {
        diff_into(g, u.values(), axis, d);
    }
    for k in 0..g.len() {
        let mut acc = 0.0;
        if exps.n1 > 0 {
            let q = exps.grad1;
            let s2: f64 = (0..exps.n1).map(|a| diffs[a][k] * diffs[a][k]).sum::<f64>() + d2;
            let shift = if delta > 0.0 { delta.powf(q) } else { 0.0 };
            acc += block_weight(s2, q, shift).1 / q;
        }
        for (j, &p) in exps.axis.iter().enumerate() {
            let dk = diffs[exps.n1 + j][k];
            acc += if p >= 2.0 {
                dk.abs().powf(p)
            } else {
                let shift = if delta > 0.0 { delta.powf(p) } else { 0.0 };
                block_weight(dk * dk + d2, p, shift).1
            } / p;
        }
        out[k] = acc;
    }
    Field::from_values(g, out)
}

pub fn energy(u: &Field, exps: &LevelExponents, delta: f64) -> Result<EnergyBreakdown> {
    Ok(Evaluator::new(u.grid(), exps, delta)?.evaluate(u.values(), None))
}

/// Energy of the limit functional (gradient block with exponent 1).
pub fn limit_energy(u: &Field, x: &ExponentVector, delta: f64) -> Result<EnergyBreakdown> {
    energy(u, &x.level(), delta)
}

pub fn energy_gradient(u: &Field, exps: &LevelExponents, delta: f64) -> Result<Field> {
    let mut ev = Evaluator::new(u.grid(), exps, delta)?;
    let mut g = vec![0.0; u.grid().len()];
    ev.evaluate(u.values(), Some(&mut g));
    Field::from_values(u.grid(), g)
}

pub fn constraint_norm(u: &Field, q: f64) -> f64 {
    lp_norm(u, q)
}

/// Empirical lower bounds for the embedding constant:
/// `Π|∂_i u|_{p_i}^{1/N} / |u|_{p*}` and
/// `(√N1 |∇₁u|₁ + Σ_{i>N1} |∂_i u|_{p_i}) / (N |u|_{p*})`.
pub fn troisi_ratios(u: &Field, x: &ExponentVector) -> Result<(f64, f64)> {
    let g = u.grid();
    if g.dim() != x.n() {
        return Err(Error::InvalidExponents("dimension mismatch".into()));
    }
    let norm = lp_norm(u, x.p_star());
    if !(norm > 0.0) {
        return Err(Error::ZeroField);
    }
    let vol = g.cell_volume();
    let n = x.n();
    let n1 = x.n1();
    let mut d = vec![0.0; g.len()];
    let mut sq = vec![0.0; g.len()];
    let mut log_prod = 0.0;
    for axis in 0..n {
        diff_into(g, u.values(), axis, &mut d);
        let p = x.p()[axis];
        let norm_i = if p == 1.0 {
            d.iter().map(|v| v.abs()).sum::<f64>() * vol
        } else {
            (d.iter().map(|v| v.abs().powf(p)).sum::<f64>() * vol).powf(1.0 / p)
        };
        log_prod += norm_i.ln() / n as f64;
        if axis < n1 {
            for (s, v) in sq.iter_mut().zip(&d) {
                *s += v * v;
            }
        }
    }
    let grad1_l1 = sq.iter().map(|s| s.sqrt()).sum::<f64>() * vol;
    let mut tail = 0.0;
    for axis in n1..n {
        diff_into(g, u.values(), axis, &mut d);
        let p = x.p()[axis];
        tail += (d.iter().map(|v| v.abs().powf(p)).sum::<f64>() * vol).powf(1.0 / p);
    }
    let product_ratio = log_prod.exp() / norm;
    let sum_ratio = ((n1 as f64).sqrt() * grad1_l1 + tail) / (n as f64 * norm);
    Ok((product_ratio, sum_ratio))
}
