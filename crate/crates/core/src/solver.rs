//! Minimization of the energy on the unit sphere of `L^q`.
//!
//! The iteration is a projected descent method on the tangent gradient
//! `G - l u^{q-1}`. Directions come from limited-memory BFGS seeded with the
//! inverse Hessian diagonal, or from the diagonal alone with Barzilai–Borwein
//! lengths. Armijo backtracking runs on the energy of the projected point.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::LevelExponents;
use crate::functional::{EnergyBreakdown, Evaluator};
use crate::grid::{lp_norm_values, Field, Grid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub step0: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub tol_energy: f64,
    pub tol_residual: f64,
    pub delta: f64,
    pub enforce_nonneg: bool,
    /// Number of curvature pairs kept for quasi-Newton directions; 0 gives
    /// preconditioned gradient steps with Barzilai–Borwein lengths.
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 5000,
            step0: 1.0,
            armijo_c: 1e-4,
            shrink: 0.5,
            tol_energy: 1e-9,
            tol_residual: 1e-6,
            delta: 1e-4,
            enforce_nonneg: true,
            memory: 8,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidOptions(what.to_string()));
        if !(self.step0 > 0.0) {
            return bad("step0 must be > 0");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return bad("armijo_c must lie in (0, 1)");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink must lie in (0, 1)");
        }
        if !(self.tol_energy > 0.0 && self.tol_residual > 0.0) {
            return bad("tolerances must be > 0");
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExtremalResult {
    pub u: Field,
    pub k_eps: f64,
    pub l_eps: f64,
    pub residual: f64,
    pub breakdown: EnergyBreakdown,
    pub iters: usize,
    pub converged: bool,
    /// Accepted energies, starting with the projected initial field.
    pub energies: Vec<f64>,
    /// Energy evaluations, line-search trials included.
    pub evaluations: usize,
}

/// The scalar part of an `ExtremalResult`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremalSummary {
    pub k_eps: f64,
    pub l_eps: f64,
    pub residual: f64,
    pub breakdown: EnergyBreakdown,
    pub iters: usize,
    pub converged: bool,
    pub constraint_norm: f64,
    pub sup_norm: f64,
}

impl ExtremalResult {
    pub fn summary(&self, q: f64) -> ExtremalSummary {
        ExtremalSummary {
            k_eps: self.k_eps,
            l_eps: self.l_eps,
            residual: self.residual,
            breakdown: self.breakdown.clone(),
            iters: self.iters,
            converged: self.converged,
            constraint_norm: crate::grid::lp_norm(&self.u, q),
            sup_norm: self.u.max(),
        }
    }
}

/// Clamp (optionally), zero the boundary and rescale to `|u|_q = 1`.
fn project(grid: &Grid, u: &mut [f64], q: f64, nonneg: bool) -> Result<()> {
    let mut upow = vec![0.0; u.len()];
    project_masked(grid, &grid.inside_mask(1), u, q, nonneg, &mut upow)
}

/// As `project`, also leaving `u^{q-1}` of the result in `upow`.
fn project_masked(
    grid: &Grid,
    interior: &[bool],
    u: &mut [f64],
    q: f64,
    nonneg: bool,
    upow: &mut [f64],
) -> Result<()> {
    let mut sum = 0.0;
    for ((v, p), &inside) in u.iter_mut().zip(upow.iter_mut()).zip(interior) {
        if !inside || (nonneg && *v < 0.0) {
            *v = 0.0;
        }
        *p = pow_q1(*v, q);
        sum += *v * *p;
    }
    let norm = (sum * grid.cell_volume()).powf(1.0 / q);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroInit);
    }
    let inv = 1.0 / norm;
    let inv_p = inv.powf(q - 1.0);
    u.iter_mut().for_each(|v| *v *= inv);
    upow.iter_mut().for_each(|v| *v *= inv_p);
    Ok(())
}

#[inline]
fn pow_q1(v: f64, q: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum() * v.abs().powf(q - 1.0)
    }
}

/// Normalized L² norm of `G - l u^{q-1}` over the masked nodes.
fn residual_from(mask: &[bool], upow: &[f64], g: &[f64], l: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..g.len() {
        if !mask[k] {
            continue;
        }
        let rhs = l * upow[k];
        num += (g[k] - rhs) * (g[k] - rhs);
        den += rhs * rhs;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

fn pow_all(u: &[f64], q: f64, out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(u) {
        *o = pow_q1(v, q);
    }
}

const ROUNDOFF: f64 = 1e-14;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes the energy over `{|u|_q = 1}` starting from `init`.
///
/// A run that hits `max_iters` or stalls in the line search is returned with
/// `converged = false`.
pub fn minimize(init: &Field, exps: &LevelExponents, opts: &SolverOptions) -> Result<ExtremalResult> {
    opts.validate()?;
    if !init.is_finite() {
        return Err(Error::NonFinite);
    }
    let grid = init.grid().clone();
    let q = exps.critical;
    let vol = grid.cell_volume();
    let n = grid.len();
    let mut ev = Evaluator::new(&grid, exps, opts.delta)?;
    let interior = grid.inside_mask(1);

    let mut u = init.values().to_vec();
    let mut upow = vec![0.0; n];
    project_masked(&grid, &interior, &mut u, q, opts.enforce_nonneg, &mut upow)?;

    let mut g = vec![0.0; n];
    let mut hd = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut upow_trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut hd_trial = vec![0.0; n];
    let mut r_prev = vec![0.0; n];
    let mut s_last = vec![0.0; n];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut coef = Vec::with_capacity(opts.memory);

    let mut e = ev.evaluate_full(&u, Some(&mut g), Some(&mut hd));
    let mut evaluations = 1;
    let mut energies = vec![e.total];
    let mut alpha = opts.step0;
    let mut have_prev = false;
    let mut iters = 0;
    let mut converged = false;
    let mut l;
    let mut residual;

    loop {
        l = dot(&g, &u) * vol;
        for k in 0..n {
            r[k] = if interior[k] { g[k] - l * upow[k] } else { 0.0 };
        }
        residual = residual_from(&interior, &upow, &g, l);
        let window = iters.min(10);
        let flat = if window == 0 {
            true
        } else {
            let old = energies[energies.len() - 1 - window];
            (old - e.total) <= opts.tol_energy * e.total.abs().max(f64::MIN_POSITIVE)
        };
        if residual < opts.tol_residual && flat {
            converged = true;
            break;
        }
        if iters >= opts.max_iters {
            break;
        }

        let mut bb = None;
        if have_prev {
            let y: Vec<f64> = r.iter().zip(&r_prev).map(|(a, b)| a - b).collect();
            let sy = dot(&s_last, &y);
            let sms: f64 = s_last.iter().zip(&hd).map(|(a, d)| a * a * d).sum();
            if sy > 0.0 && sms > 0.0 {
                bb = Some((sms / sy).clamp(1e-6, 1e6));
            }
            if opts.memory > 0 {
                if sy > 1e-12 * dot(&s_last, &s_last).sqrt() * dot(&y, &y).sqrt() {
                    if pairs.len() == opts.memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((s_last.clone(), y, 1.0 / sy));
                } else {
                    pairs.clear();
                }
            }
        }

        let mut use_lbfgs = false;
        if opts.memory > 0 && !pairs.is_empty() {
            dir.copy_from_slice(&r);
            coef.clear();
            for (s, y, rho) in pairs.iter().rev() {
                let a = rho * dot(s, &dir);
                for (d, yk) in dir.iter_mut().zip(y) {
                    *d -= a * yk;
                }
                coef.push(a);
            }
            let (s, y, _) = pairs.back().unwrap();
            let yhy: f64 = y.iter().zip(&hd).map(|(a, d)| a * a / d).sum();
            let gamma = if yhy > 0.0 { dot(s, y) / yhy } else { 1.0 };
            for (d, h) in dir.iter_mut().zip(&hd) {
                *d *= gamma / h;
            }
            for ((s, y, rho), a) in pairs.iter().zip(coef.iter().rev()) {
                let b = rho * dot(y, &dir);
                for (d, sk) in dir.iter_mut().zip(s) {
                    *d += (a - b) * sk;
                }
            }
            dir.iter_mut().for_each(|d| *d = -*d);
            if dot(&dir, &r) < 0.0 {
                use_lbfgs = true;
                alpha = 1.0;
            } else {
                pairs.clear();
            }
        }
        if !use_lbfgs {
            for k in 0..n {
                dir[k] = -r[k] / hd[k];
            }
            alpha = match bb {
                Some(a) => a,
                None if have_prev => (alpha * 2.0).min(1e6),
                None => opts.step0,
            };
        }

        let mut accepted = false;
        for _ in 0..60 {
            for k in 0..n {
                trial[k] = u[k] + alpha * dir[k];
            }
            if project_masked(&grid, &interior, &mut trial, q, opts.enforce_nonneg, &mut upow_trial).is_err() {
                alpha *= opts.shrink;
                continue;
            }
            let e_new = ev.evaluate_full(&trial, Some(&mut g_trial), Some(&mut hd_trial));
            evaluations += 1;
            let decrease: f64 = r
                .iter()
                .zip(u.iter().zip(&trial))
                .map(|(rk, (a, b))| rk * (a - b))
                .sum::<f64>()
                * vol;
            // below this the energy difference is rounding noise
            let noise = ROUNDOFF * e.total.abs();
            let armijo = e_new.total <= e.total && e_new.total <= e.total - opts.armijo_c * decrease.max(0.0);
            let in_noise = decrease.abs() <= noise && e_new.total <= e.total + noise;
            if e_new.total.is_finite() && (armijo || in_noise) {
                for k in 0..n {
                    s_last[k] = trial[k] - u[k];
                }
                std::mem::swap(&mut u, &mut trial);
                std::mem::swap(&mut upow, &mut upow_trial);
                std::mem::swap(&mut g, &mut g_trial);
                std::mem::swap(&mut hd, &mut hd_trial);
                r_prev.copy_from_slice(&r);
                e = e_new;
                accepted = true;
                break;
            }
            alpha *= opts.shrink;
        }
        if !accepted {
            if !pairs.is_empty() {
                // retry once from a plain preconditioned gradient step
                pairs.clear();
                have_prev = false;
                continue;
            }
            break;
        }
        have_prev = true;
        iters += 1;
        energies.push(e.total);
    }

    Ok(ExtremalResult {
        u: Field::from_values(&grid, u)?,
        k_eps: e.total,
        l_eps: l,
        residual,
        breakdown: e,
        iters,
        converged,
        energies,
        evaluations,
    })
}

/// `∫ flux · Du`, the multiplier of a normalized critical point.
pub fn multiplier(u: &Field, exps: &LevelExponents, delta: f64) -> Result<f64> {
    let norm = lp_norm_values(u.values(), exps.critical, u.grid().cell_volume());
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::NotNormalized(norm));
    }
    let mut ev = Evaluator::new(u.grid(), exps, delta)?;
    let mut g = vec![0.0; u.grid().len()];
    ev.evaluate(u.values(), Some(&mut g));
    Ok(dot(&g, u.values()) * u.grid().cell_volume())
}

/// Relative L² residual of the Euler–Lagrange equation over nodes one step
/// away from the boundary.
pub fn el_residual(u: &Field, l: f64, exps: &LevelExponents, delta: f64) -> Result<f64> {
    el_residual_with_margin(u, l, exps, delta, 1)
}

/// As `el_residual`, over nodes at least `margin` nodes from every face.
pub fn el_residual_with_margin(
    u: &Field,
    l: f64,
    exps: &LevelExponents,
    delta: f64,
    margin: usize,
) -> Result<f64> {
    let mut ev = Evaluator::new(u.grid(), exps, delta)?;
    let mut g = vec![0.0; u.grid().len()];
    ev.evaluate(u.values(), Some(&mut g));
    let mut upow = vec![0.0; g.len()];
    pow_all(u.values(), exps.critical, &mut upow);
    Ok(residual_from(&u.grid().inside_mask(margin), &upow, &g, l))
}

/// Anisotropic Gaussian with widths a quarter of the half-lengths, normalized
/// to `|u|_q = 1`.
pub fn default_init(grid: &Grid, q: f64) -> Result<Field> {
    let w: Vec<f64> = grid.half_lengths().iter().map(|l| 0.25 * l).collect();
    let mut u = Field::from_fn(grid, |x| {
        (-x.iter().zip(&w).map(|(xi, wi)| (xi / wi).powi(2)).sum::<f64>()).exp()
    });
    project(grid, u.values_mut(), q, true)?;
    Ok(u)
}
