//! The `eps -> 0` driver: warm-started solves along a schedule, Levy
//! normalization of each extremal and concentration diagnostics.
//!
//! Rescaling uses `v(x) = t u(y + t^α x)` with `α_i = q/p_i - 1`, which maps
//! the ellipse `E(y, t^α)` onto the unit ball and preserves the constraint
//! and every term of the energy.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::{epsilon_exponents, epsilon_schedule, ExponentVector, LevelExponents};
use crate::functional::{energy, energy_density, limit_energy};
use crate::grid::{grad1_mag, interpolate, lp_norm, lp_norm_values, make_grid, Field, Grid};
use crate::solver::{default_init, minimize, SolverOptions};

/// Tolerance on the unit-ball mass after normalization.
pub const LEVY_TOL: f64 = 1e-2;

fn mass_density(u: &Field, q: f64) -> Vec<f64> {
    let vol = u.grid().cell_volume();
    u.values().iter().map(|v| v.abs().powf(q) * vol).collect()
}

/// Rows of an axis-aligned ellipse with the given semi-axes: offsets along
/// the leading axes and the half-width in nodes along the last axis.
fn ellipse_rows(grid: &Grid, semi: &[f64]) -> Vec<(Vec<isize>, usize)> {
    let n = grid.dim();
    let h = grid.spacings();
    let reach: Vec<isize> = (0..n)
        .map(|d| ((semi[d] / h[d]) * (1.0 + 1e-12)).floor().min(grid.counts()[d] as f64) as isize)
        .collect();
    let mut rows = Vec::new();
    let lead = n - 1;
    let mut off: Vec<isize> = reach[..lead].iter().map(|r| -r).collect();
    loop {
        let used: f64 = (0..lead).map(|d| (off[d] as f64 * h[d] / semi[d]).powi(2)).sum();
        if used <= 1.0 + 1e-12 {
            let rem = (1.0 - used).max(0.0);
            let w = (semi[lead] * rem.sqrt() / h[lead] * (1.0 + 1e-12)).floor();
            rows.push((off.clone(), w.min(grid.counts()[lead] as f64) as usize));
        }
        let mut d = lead;
        loop {
            if d == 0 {
                return rows;
            }
            d -= 1;
            if off[d] < reach[d] {
                off[d] += 1;
                break;
            }
            off[d] = -reach[d];
        }
    }
}

/// Prefix sums along the last axis, one extra slot per row.
fn row_prefix(grid: &Grid, m: &[f64]) -> Vec<f64> {
    let nl = *grid.counts().last().unwrap();
    let rows = m.len() / nl;
    let mut p = vec![0.0; rows * (nl + 1)];
    for r in 0..rows {
        let mut acc = 0.0;
        for j in 0..nl {
            acc += m[r * nl + j];
            p[r * (nl + 1) + j + 1] = acc;
        }
    }
    p
}

struct EllipseSearch<'a> {
    grid: &'a Grid,
    prefix: Vec<f64>,
}

impl<'a> EllipseSearch<'a> {
    fn new(grid: &'a Grid, m: &[f64]) -> Self {
        EllipseSearch {
            grid,
            prefix: row_prefix(grid, m),
        }
    }

    fn mass_at(&self, rows: &[(Vec<isize>, usize)], center: &[usize]) -> f64 {
        let g = self.grid;
        let n = g.dim();
        let lead = n - 1;
        let nl = g.counts()[lead];
        let c = center[lead];
        let mut acc = 0.0;
        'rows: for (off, w) in rows {
            let mut row = 0usize;
            for d in 0..lead {
                let i = center[d] as isize + off[d];
                if i < 0 || i >= g.counts()[d] as isize {
                    continue 'rows;
                }
                row = row * g.counts()[d] + i as usize;
            }
            let lo = c.saturating_sub(*w);
            let hi = (c + w + 1).min(nl);
            let base = row * (nl + 1);
            acc += self.prefix[base + hi] - self.prefix[base + lo];
        }
        acc
    }

    /// Largest ellipse mass over node centers; first maximizer in row-major order.
    fn best(&self, semi: &[f64]) -> (f64, usize) {
        let rows = ellipse_rows(self.grid, semi);
        let mut best = (f64::NEG_INFINITY, 0);
        let mut idx = vec![0usize; self.grid.dim()];
        for k in 0..self.grid.len() {
            let m = self.mass_at(&rows, &idx);
            if m > best.0 {
                best = (m, k);
            }
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < self.grid.counts()[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        best
    }
}

/// Result of the Levy concentration search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevyPoint {
    pub t: f64,
    pub center_index: Vec<usize>,
    pub center: Vec<f64>,
    /// Largest mass over node-centered ellipses at this `t`.
    pub mass: f64,
}

/// Smallest `t` at which some node-centered ellipse `E(y, t^α)` holds mass
/// `1/2 - LEVY_TOL`, with its first maximizing center.
///
/// Because the discrete concentration function is a step function, the mass
/// at the returned `t` can overshoot `1/2` when a single node carries a large
/// share; `levy_normalize` corrects this on the resampled field.
pub fn levy_t_and_center(u: &Field, exps: &LevelExponents) -> Result<LevyPoint> {
    let g = u.grid();
    let q = exps.critical;
    let norm = lp_norm(u, q);
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized(norm));
    }
    let alpha = exps.scaling_exponents();
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidExponents("scaling exponents must be positive".into()));
    }
    let search = EllipseSearch::new(g, &mass_density(u, q));
    let semi = |t: f64| -> Vec<f64> { alpha.iter().map(|a| t.powf(*a)).collect() };
    let target = 0.5 - LEVY_TOL;

    let mut lo = (0..g.dim())
        .map(|d| (0.5 * g.spacings()[d]).powf(1.0 / alpha[d]))
        .fold(f64::INFINITY, f64::min);
    let diam = 2.0 * g.half_lengths().iter().map(|l| l * l).sum::<f64>().sqrt();
    let mut hi = (0..g.dim())
        .map(|d| diam.powf(1.0 / alpha[d]))
        .fold(0.0, f64::max)
        * 2.0;
    let m_lo = search.best(&semi(lo)).0;
    if m_lo >= target {
        return Err(Error::BisectionFailed(format!(
            "a single node carries mass {m_lo:.4}, the target is not bracketed"
        )));
    }
    let m_hi = search.best(&semi(hi)).0;
    if m_hi < target {
        return Err(Error::BisectionFailed(format!(
            "total mass {m_hi:.4} is below the target"
        )));
    }
    for _ in 0..200 {
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
        let mid = (lo * hi).sqrt();
        if search.best(&semi(mid)).0 >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (mass, k) = search.best(&semi(hi));
    Ok(LevyPoint {
        t: hi,
        center_index: g.index_of(k),
        center: g.position(k),
        mass,
    })
}

/// `v(x) = t u(y + t^α x)` sampled by multilinear interpolation on the same
/// grid, boundary zeroed and renormalized to `|v|_q = 1`.
pub fn rescale(u: &Field, t: f64, y: &[f64], exps: &LevelExponents) -> Result<Field> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidOptions(format!("rescale factor t = {t} must be > 0")));
    }
    let g = u.grid();
    if y.len() != g.dim() {
        return Err(Error::GridMismatch);
    }
    let scale: Vec<f64> = exps.scaling_exponents().iter().map(|a| t.powf(*a)).collect();
    let mut z = vec![0.0; g.dim()];
    let mut v = Field::from_fn(g, |x| {
        for d in 0..x.len() {
            z[d] = y[d] + scale[d] * x[d];
        }
        t * interpolate(u, &z)
    });
    v.zero_boundary();
    let norm = lp_norm(&v, exps.critical);
    if !(norm > 0.0) {
        return Err(Error::ZeroField);
    }
    Ok(v.scaled(1.0 / norm))
}

/// Node-wise `u^λ`.
pub fn power_transform(u: &Field, lambda: f64) -> Result<Field> {
    if !(lambda >= 1.0) {
        return Err(Error::InvalidOptions(format!("lambda = {lambda} must be >= 1")));
    }
    if u.values().iter().any(|&v| v < 0.0) {
        return Err(Error::NegativeValues);
    }
    Ok(u.map(|v| if lambda == 1.0 { v } else { v.powf(lambda) }))
}

/// Mass `∫|u|^q` over grid nodes in the closed ball `|x - c| <= r`.
pub fn ball_mass(u: &Field, q: f64, center: &[f64], r: f64) -> f64 {
    let g = u.grid();
    let vol = g.cell_volume();
    let r2 = r * r * (1.0 + 1e-12);
    (0..g.len())
        .filter(|&k| {
            g.position(k)
                .iter()
                .zip(center)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>()
                <= r2
        })
        .map(|k| u.values()[k].abs().powf(q) * vol)
        .sum()
}

/// Largest `ball_mass` over node centers, with the first maximizing node.
pub fn peak_ball_mass(u: &Field, q: f64, r: f64) -> (f64, usize) {
    let g = u.grid();
    let search = EllipseSearch::new(g, &mass_density(u, q));
    search.best(&vec![r; g.dim()])
}

/// `∫_{|x| > R} |u|^q`.
pub fn tail_mass(u: &Field, q: f64, radius: f64) -> f64 {
    outside(u.grid(), radius)
        .map(|k| u.values()[k].abs().powf(q) * u.grid().cell_volume())
        .sum()
}

/// Energy of `u` restricted to `|x| > R`.
pub fn tail_energy(u: &Field, exps: &LevelExponents, delta: f64, radius: f64) -> Result<f64> {
    let dens = energy_density(u, exps, delta)?;
    Ok(outside(u.grid(), radius).map(|k| dens.values()[k]).sum::<f64>() * u.grid().cell_volume())
}

fn outside(g: &Grid, radius: f64) -> impl Iterator<Item = usize> + '_ {
    let r2 = radius * radius;
    (0..g.len()).filter(move |&k| g.position(k).iter().map(|x| x * x).sum::<f64>() > r2)
}

fn argmax(u: &Field) -> usize {
    let mut best = 0;
    for (k, v) in u.values().iter().enumerate() {
        if *v > u.values()[best] {
            best = k;
        }
    }
    best
}

fn peak_node_mass(u: &Field, q: f64) -> f64 {
    u.values().iter().map(|v| v.abs().powf(q)).fold(0.0, f64::max) * u.grid().cell_volume()
}

/// Levy normalization: after the discrete search, `t` is refined with the
/// center fixed until the resampled unit-ball mass is `1/2`. When another
/// center of the result still holds more than `1/2 + LEVY_TOL`, the search is
/// repeated on the result, where unit balls span several nodes, and the two
/// maps are composed into one resampling of `u`.
pub fn levy_normalize(u: &Field, exps: &LevelExponents) -> Result<(Field, LevyPoint, f64)> {
    let q = exps.critical;
    let alpha = exps.scaling_exponents();
    let (mut v, mut point, mut m) = refine_t(u, exps, coarse_point(u, exps)?)?;
    for _ in 0..3 {
        if peak_ball_mass(&v, q, 1.0).0 <= 0.5 + LEVY_TOL {
            break;
        }
        let inner = coarse_point(&v, exps)?;
        let center: Vec<f64> = (0..alpha.len())
            .map(|d| point.center[d] + point.t.powf(alpha[d]) * inner.center[d])
            .collect();
        let composed = LevyPoint {
            t: point.t * inner.t,
            center_index: nearest_node(u.grid(), &center),
            center,
            mass: inner.mass,
        };
        (v, point, m) = refine_t(u, exps, composed)?;
    }
    Ok((v, point, m))
}

fn nearest_node(g: &Grid, x: &[f64]) -> Vec<usize> {
    (0..g.dim())
        .map(|d| {
            let i = ((x[d] + g.half_lengths()[d]) / g.spacings()[d]).round();
            i.clamp(0.0, (g.counts()[d] - 1) as f64) as usize
        })
        .collect()
}

fn coarse_point(u: &Field, exps: &LevelExponents) -> Result<LevyPoint> {
    let q = exps.critical;
    match levy_t_and_center(u, exps) {
        Ok(p) => Ok(p),
        // too concentrated for node-centered ellipses: zoom in on the peak node
        Err(Error::BisectionFailed(_)) if peak_node_mass(u, q) >= 0.5 - LEVY_TOL => {
            let k = argmax(u);
            let g = u.grid();
            let alpha = exps.scaling_exponents();
            let t = (0..g.dim())
                .map(|d| (0.5 * g.spacings()[d]).powf(1.0 / alpha[d]))
                .fold(f64::INFINITY, f64::min);
            Ok(LevyPoint {
                t,
                center_index: g.index_of(k),
                center: g.position(k),
                mass: peak_node_mass(u, q),
            })
        }
        Err(e) => Err(e),
    }
}

/// Adjusts `point.t` with the center fixed until the unit ball of the
/// resampled field holds `1/2`.
fn refine_t(u: &Field, exps: &LevelExponents, mut point: LevyPoint) -> Result<(Field, LevyPoint, f64)> {
    let q = exps.critical;
    let origin = vec![0.0; u.grid().dim()];
    let mass_for = |t: f64| -> Result<(Field, f64)> {
        let v = rescale(u, t, &point.center, exps)?;
        let m = ball_mass(&v, q, &origin, 1.0);
        Ok((v, m))
    };
    let (mut v, mut m) = mass_for(point.t)?;
    if (m - 0.5).abs() > 0.25 * LEVY_TOL {
        // mass is nondecreasing in t
        let (mut lo, mut hi) = (point.t, point.t);
        let (mut m_lo, mut m_hi) = (m, m);
        let mut guard = 0;
        while m_lo > 0.5 && guard < 60 {
            lo /= 1.5;
            m_lo = mass_for(lo)?.1;
            guard += 1;
        }
        while m_hi < 0.5 && guard < 120 {
            hi *= 1.5;
            m_hi = mass_for(hi)?.1;
            guard += 1;
        }
        if m_lo > 0.5 || m_hi < 0.5 {
            return Err(Error::BisectionFailed(format!(
                "resampled ball mass not bracketed ({m_lo:.4}, {m_hi:.4})"
            )));
        }
        for _ in 0..100 {
            let mid = (lo * hi).sqrt();
            let (vm, mm) = mass_for(mid)?;
            v = vm;
            m = mm;
            point.t = mid;
            if (m - 0.5).abs() <= 0.25 * LEVY_TOL || hi / lo < 1.0 + 1e-13 {
                break;
            }
            if mm < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    Ok((v, point, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationConfig {
    pub p: Vec<f64>,
    pub half_lengths: Vec<f64>,
    pub counts: Vec<usize>,
    pub eps0: f64,
    pub factor: f64,
    pub eps_min: f64,
    pub solver: SolverOptions,
    pub tail_radii: Vec<f64>,
    pub ball_radii: Vec<f64>,
    pub rescale_every: usize,
}

impl ContinuationConfig {
    pub fn exponents(&self) -> Result<ExponentVector> {
        ExponentVector::from_unordered(&self.p)
    }

    /// The box in stored axis order (unit-exponent axes first).
    pub fn grid(&self) -> Result<Grid> {
        if self.half_lengths.len() != self.p.len() || self.counts.len() != self.p.len() {
            return Err(Error::Config(format!(
                "{} exponents but {} half-lengths and {} counts",
                self.p.len(),
                self.half_lengths.len(),
                self.counts.len()
            )));
        }
        let order = self.exponents()?.axis_order().to_vec();
        let lens: Vec<f64> = order.iter().map(|&i| self.half_lengths[i]).collect();
        let counts: Vec<usize> = order.iter().map(|&i| self.counts[i]).collect();
        make_grid(&lens, &counts)
    }

    pub fn schedule(&self) -> Result<Vec<f64>> {
        epsilon_schedule(&self.exponents()?, self.eps0, self.factor, self.eps_min)
    }

    pub fn validate(&self) -> Result<()> {
        self.exponents()?;
        self.grid()?;
        self.schedule()?;
        self.solver.validate()?;
        if self.rescale_every == 0 {
            return Err(Error::Config("rescale_every must be >= 1".into()));
        }
        if self.tail_radii.iter().chain(&self.ball_radii).any(|r| !(*r > 0.0)) {
            return Err(Error::Config("radii must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub eps: f64,
    pub failed: bool,
    pub converged: bool,
    pub error: Option<String>,
    pub iters: usize,
    pub k_eps: f64,
    pub l_eps: f64,
    pub residual: f64,
    pub p_plus_eps: f64,
    pub lambda_eps: f64,
    pub grad1_norm: f64,
    pub axis_norms: Vec<f64>,
    /// `|∇₁w|₁` followed by `|∂_i w|_{p_i}` for `w = v^λ`.
    pub lambda_power_norms: Vec<f64>,
    pub rescaled: bool,
    pub levy_t: f64,
    pub levy_center: Vec<f64>,
    pub unit_ball_mass: f64,
    pub unit_ball_peak: f64,
    pub tail_mass: Vec<f64>,
    pub tail_energy: Vec<f64>,
    pub peak_ball_mass: Vec<f64>,
    pub sup_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuationTrace {
    pub p: Vec<f64>,
    pub p_star: f64,
    pub p_plus: f64,
    pub tail_radii: Vec<f64>,
    pub ball_radii: Vec<f64>,
    pub records: Vec<StepRecord>,
    /// Limit energy of the final normalized field and of its power transform.
    pub final_limit_energy: Option<f64>,
    pub final_limit_energy_power: Option<f64>,
    /// Last converged extremal (before normalization) with its eps and multiplier.
    #[serde(skip)]
    pub final_extremal: Option<(Field, f64, f64)>,
    /// Last normalized field.
    #[serde(skip)]
    pub final_field: Option<Field>,
}

impl ContinuationTrace {
    pub fn any_failed(&self) -> bool {
        self.records.iter().any(|r| r.failed)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "step", "eps", "failed", "converged", "iters", "k_eps", "l_eps", "residual", "p_plus_eps",
            "lambda_eps", "grad1_norm",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let n_axis = self.p.iter().filter(|&&p| p != 1.0).count();
        for i in 0..n_axis {
            h.push(format!("axis_norm_{i}"));
        }
        h.push("power_grad1_norm".into());
        for i in 0..n_axis {
            h.push(format!("power_axis_norm_{i}"));
        }
        h.push("rescaled".into());
        h.push("levy_t".into());
        for i in 0..self.p.len() {
            h.push(format!("levy_center_{i}"));
        }
        h.push("unit_ball_mass".into());
        h.push("unit_ball_peak".into());
        for r in &self.tail_radii {
            h.push(format!("tail_mass@{r}"));
        }
        for r in &self.tail_radii {
            h.push(format!("tail_energy@{r}"));
        }
        for r in &self.ball_radii {
            h.push(format!("peak_ball_mass@{r}"));
        }
        h.push("sup_norm".into());
        h
    }

    /// One row per step; floats in `{:.16e}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        let f = |x: f64| format!("{x:.16e}");
        for r in &self.records {
            let mut row = vec![
                r.step.to_string(),
                f(r.eps),
                (r.failed as u8).to_string(),
                (r.converged as u8).to_string(),
                r.iters.to_string(),
                f(r.k_eps),
                f(r.l_eps),
                f(r.residual),
                f(r.p_plus_eps),
                f(r.lambda_eps),
                f(r.grad1_norm),
            ];
            row.extend(r.axis_norms.iter().map(|&x| f(x)));
            row.extend(r.lambda_power_norms.iter().map(|&x| f(x)));
            row.push((r.rescaled as u8).to_string());
            row.push(f(r.levy_t));
            row.extend(r.levy_center.iter().map(|&x| f(x)));
            row.push(f(r.unit_ball_mass));
            row.push(f(r.unit_ball_peak));
            row.extend(r.tail_mass.iter().map(|&x| f(x)));
            row.extend(r.tail_energy.iter().map(|&x| f(x)));
            row.extend(r.peak_ball_mass.iter().map(|&x| f(x)));
            row.push(f(r.sup_norm));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn failed_record(step: usize, eps: f64, err: String, n_axis: usize, dim: usize, cfg: &ContinuationConfig) -> StepRecord {
    StepRecord {
        step,
        eps,
        failed: true,
        converged: false,
        error: Some(err),
        iters: 0,
        k_eps: f64::NAN,
        l_eps: f64::NAN,
        residual: f64::NAN,
        p_plus_eps: f64::NAN,
        lambda_eps: f64::NAN,
        grad1_norm: f64::NAN,
        axis_norms: vec![f64::NAN; n_axis],
        lambda_power_norms: vec![f64::NAN; n_axis + 1],
        rescaled: false,
        levy_t: f64::NAN,
        levy_center: vec![f64::NAN; dim],
        unit_ball_mass: f64::NAN,
        unit_ball_peak: f64::NAN,
        tail_mass: vec![f64::NAN; cfg.tail_radii.len()],
        tail_energy: vec![f64::NAN; cfg.tail_radii.len()],
        peak_ball_mass: vec![f64::NAN; cfg.ball_radii.len()],
        sup_norm: f64::NAN,
    }
}

/// `|∇₁w|₁` and `|∂_i w|_{p_i}` for the limit exponents.
fn bv_norms(w: &Field, x: &ExponentVector) -> Result<Vec<f64>> {
    let g = w.grid();
    let vol = g.cell_volume();
    let mut out = vec![grad1_mag(w, x.n1(), 0.0).values().iter().sum::<f64>() * vol];
    for (j, &p) in x.p_tail().iter().enumerate() {
        let d = crate::grid::forward_diff(w, x.n1() + j)?;
        out.push(lp_norm_values(d.values(), p, vol));
    }
    Ok(out)
}

pub fn run(cfg: &ContinuationConfig) -> Result<ContinuationTrace> {
    run_with(cfg, None, |_| {})
}

/// As `run`, from an optional initial field, calling `observe` after each step.
pub fn run_with(
    cfg: &ContinuationConfig,
    init: Option<&Field>,
    mut observe: impl FnMut(&StepRecord),
) -> Result<ContinuationTrace> {
    cfg.validate()?;
    let x = cfg.exponents()?;
    let grid = cfg.grid()?;
    let schedule = cfg.schedule()?;
    let n_axis = x.n() - x.n1();
    let delta = cfg.solver.delta;
    let mut current = match init {
        Some(f) => {
            if f.grid() != &grid {
                return Err(Error::GridMismatch);
            }
            f.clone()
        }
        None => default_init(&grid, epsilon_exponents(&x, schedule[0])?.p_star_eps)?,
    };

    let mut trace = ContinuationTrace {
        p: x.p().to_vec(),
        p_star: x.p_star(),
        p_plus: x.p_plus(),
        tail_radii: cfg.tail_radii.clone(),
        ball_radii: cfg.ball_radii.clone(),
        records: Vec::new(),
        final_limit_energy: None,
        final_limit_energy_power: None,
        final_extremal: None,
        final_field: None,
    };
    let mut last_lambda = 1.0;

    for (step, &eps) in schedule.iter().enumerate() {
        let outcome = (|| -> Result<(StepRecord, Field)> {
            let ee = epsilon_exponents(&x, eps)?;
            let lv = ee.level();
            let q = ee.p_star_eps;
            let res = minimize(&current, &lv, &cfg.solver)?;
            if res.converged {
                trace.final_extremal = Some((res.u.clone(), eps, res.l_eps));
            }
            let (v, levy, rescaled) = if step % cfg.rescale_every == 0 {
                let (v, point, _) = levy_normalize(&res.u, &lv)?;
                (v, Some(point), true)
            } else {
                (res.u.clone(), None, false)
            };
            let origin = vec![0.0; grid.dim()];
            let e = energy(&v, &lv, delta)?;
            let w = power_transform(&v, ee.lambda_eps)?;
            let rec = StepRecord {
                step,
                eps,
                failed: !res.converged,
                converged: res.converged,
                error: None,
                iters: res.iters,
                k_eps: res.k_eps,
                l_eps: res.l_eps,
                residual: res.residual,
                p_plus_eps: ee.p_plus_eps,
                lambda_eps: ee.lambda_eps,
                grad1_norm: e.grad1_term * lv.grad1,
                axis_norms: e.axis_terms.iter().zip(&lv.axis).map(|(t, p)| t * p).collect(),
                lambda_power_norms: bv_norms(&w, &x)?,
                rescaled,
                levy_t: levy.as_ref().map_or(1.0, |p| p.t),
                levy_center: levy.as_ref().map_or(origin.clone(), |p| p.center.clone()),
                unit_ball_mass: ball_mass(&v, q, &origin, 1.0),
                unit_ball_peak: peak_ball_mass(&v, q, 1.0).0,
                tail_mass: cfg.tail_radii.iter().map(|&r| tail_mass(&v, q, r)).collect(),
                tail_energy: cfg
                    .tail_radii
                    .iter()
                    .map(|&r| tail_energy(&v, &lv, delta, r))
                    .collect::<Result<_>>()?,
                peak_ball_mass: cfg.ball_radii.iter().map(|&r| peak_ball_mass(&v, q, r).0).collect(),
                sup_norm: v.max(),
            };
            last_lambda = ee.lambda_eps;
            Ok((rec, v))
        })();
        let rec = match outcome {
            Ok((rec, v)) => {
                current = v;
                rec
            }
            Err(e) => failed_record(step, eps, e.to_string(), n_axis, grid.dim(), cfg),
        };
        observe(&rec);
        trace.records.push(rec);
    }

    if trace.records.iter().any(|r| r.error.is_none()) {
        trace.final_limit_energy = Some(limit_energy(&current, &x, 0.0)?.total);
        let w = power_transform(&current, last_lambda)?;
        trace.final_limit_energy_power = Some(limit_energy(&w, &x, 0.0)?.total);
        trace.final_field = Some(current);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponents::derive_exponents;
    use approx::assert_relative_eq;

    fn lv() -> LevelExponents {
        epsilon_exponents(&derive_exponents(3, 1, &[2.0, 2.0]).unwrap(), 0.1)
            .unwrap()
            .level()
    }

    #[test]
    fn ellipse_rows_match_brute_force() {
        let g = make_grid(&[2.0, 2.0, 2.0], &[17, 13, 11]).unwrap();
        let semi = [0.9, 1.3, 0.55];
        let rows = ellipse_rows(&g, &semi);
        let count: usize = rows.iter().map(|(_, w)| 2 * w + 1).sum();
        let h = g.spacings();
        let mut brute = 0;
        for a in -20i32..=20 {
            for b in -20i32..=20 {
                for c in -20i32..=20 {
                    let r = (a as f64 * h[0] / semi[0]).powi(2)
                        + (b as f64 * h[1] / semi[1]).powi(2)
                        + (c as f64 * h[2] / semi[2]).powi(2);
                    if r <= 1.0 {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(count, brute);
    }

    #[test]
    fn peak_ball_matches_direct_sum() {
        let g = make_grid(&[2.0, 2.0, 2.0], &[9, 9, 9]).unwrap();
        let u = Field::from_fn(&g, |x| (-(x[0] - 0.5).powi(2) - x[1] * x[1] - 2.0 * x[2] * x[2]).exp());
        let (m, k) = peak_ball_mass(&u, 2.5, 1.1);
        let direct = ball_mass(&u, 2.5, &g.position(k), 1.1);
        assert_relative_eq!(m, direct, max_relative = 1e-12);
        for j in 0..g.len() {
            assert!(ball_mass(&u, 2.5, &g.position(j), 1.1) <= m * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rescale_identity() {
        let g = make_grid(&[2.0, 2.0, 2.0], &[9, 9, 9]).unwrap();
        let mut u = Field::from_fn(&g, |x| (-(x.iter().map(|v| v * v).sum::<f64>())).exp());
        u.zero_boundary();
        let u = u.scaled(1.0 / lp_norm(&u, lv().critical));
        let v = rescale(&u, 1.0, &[0.0; 3], &lv()).unwrap();
        for (a, b) in u.values().iter().zip(v.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn power_transform_checks() {
        let g = make_grid(&[1.0, 1.0], &[5, 5]).unwrap();
        let u = Field::from_fn(&g, |x| 1.0 + x[0]);
        assert_eq!(power_transform(&u, 1.0).unwrap(), u);
        assert!(matches!(power_transform(&u.scaled(-1.0), 1.2), Err(Error::NegativeValues)));
        let ones = Field::from_fn(&g, |_| 1.0);
        assert_eq!(power_transform(&ones, 1.7).unwrap(), ones);
    }
}
