//! Flux fields and the checks built on them: pairing saturation, the
//! limiting Euler–Lagrange residual, truncation identities and the explicit
//! extremals of the isotropic problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::{derive_exponents, epsilon_exponents, ExponentVector, LevelExponents};
use crate::functional::{energy, energy_gradient, troisi_ratios};
use crate::grid::{backward_div, forward_diff, grad1_mag, lp_norm, make_grid, Field, Grid};
use crate::solver::{default_init, el_residual, el_residual_with_margin, minimize, SolverOptions};

/// Node-wise flux of a field: the gradient block and the remaining axes.
#[derive(Clone, Debug)]
pub struct SigmaFields {
    pub sigma1: Vec<Field>,
    pub sigma_tail: Vec<Field>,
    pub sup_sigma1: f64,
}

impl SigmaFields {
    /// All components in axis order.
    pub fn components(&self) -> Vec<Field> {
        self.sigma1.iter().chain(&self.sigma_tail).cloned().collect()
    }
}

/// `σ¹ = (|∇₁u|² + δ²)^{(g-1)/2} ∇₁u` and `σ_i = |∂_i u|^{p_i-2} ∂_i u`, with
/// the same smoothing as the energy so that `-div σ` is its gradient.
pub fn sigma_fields(u: &Field, exps: &LevelExponents, delta: f64) -> Result<SigmaFields> {
    let g = u.grid();
    if g.dim() != exps.n {
        return Err(Error::InvalidExponents("dimension mismatch".into()));
    }
    let d2 = delta * delta;
    let n1 = exps.n1;
    let diffs: Vec<Field> = (0..exps.n).map(|a| forward_diff(u, a)).collect::<Result<_>>()?;
    let mut sigma1: Vec<Field> = diffs[..n1].to_vec();
    let mut sup: f64 = 0.0;
    for k in 0..g.len() {
        let s2: f64 = diffs[..n1].iter().map(|d| d.values()[k].powi(2)).sum::<f64>() + d2;
        let w = if s2 > 0.0 { s2.powf(0.5 * (exps.grad1 - 2.0)) } else { 0.0 };
        let mut mag = 0.0;
        for s in sigma1.iter_mut() {
            let v = &mut s.values_mut()[k];
            *v *= w;
            mag += *v * *v;
        }
        sup = sup.max(mag.sqrt());
    }
    let sigma_tail = exps
        .axis
        .iter()
        .zip(&diffs[n1..])
        .map(|(&p, d)| {
            d.map(|v| {
                if p >= 2.0 {
                    if v == 0.0 { 0.0 } else { v.abs().powf(p - 2.0) * v }
                } else {
                    let s2 = v * v + d2;
                    if s2 > 0.0 { s2.powf(0.5 * (p - 2.0)) * v } else { 0.0 }
                }
            })
        })
        .collect();
    Ok(SigmaFields {
        sigma1,
        sigma_tail,
        sup_sigma1: sup,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    /// `∫ (|∇₁u| - σ¹·∇₁u)` with the unsmoothed magnitude.
    pub defect: f64,
    pub relative_defect: f64,
    /// `|∫ σ·Du + ∫ (div σ) u|`.
    pub green_residual: f64,
    /// `∫ |σ·Du| + ∫ |(div σ) u|`, the natural size of the two integrals.
    pub green_scale: f64,
}

pub fn pairing_check(s: &SigmaFields, u: &Field, n1: usize) -> Result<PairingReport> {
    let g = u.grid();
    if s.sigma1.len() != n1 {
        return Err(Error::InvalidExponents("sigma1 has the wrong number of components".into()));
    }
    let comps = s.components();
    if comps.len() != g.dim() {
        return Err(Error::GridMismatch);
    }
    for c in &comps {
        c.same_grid(u)?;
    }
    let vol = g.cell_volume();
    let diffs: Vec<Field> = (0..g.dim()).map(|a| forward_diff(u, a)).collect::<Result<_>>()?;
    let mag = grad1_mag(u, n1, 0.0);
    let mut pair1 = 0.0;
    let mut total_mag = 0.0;
    let mut pair_all = 0.0;
    let mut pair_abs = 0.0;
    for k in 0..g.len() {
        let mut p1 = 0.0;
        for a in 0..g.dim() {
            let t = comps[a].values()[k] * diffs[a].values()[k];
            if a < n1 {
                p1 += t;
            }
            pair_all += t;
            pair_abs += t.abs();
        }
        pair1 += p1;
        total_mag += mag.values()[k];
    }
    let div = backward_div(&comps)?;
    let mut div_u = 0.0;
    let mut div_abs = 0.0;
    for (d, v) in div.values().iter().zip(u.values()) {
        div_u += d * v;
        div_abs += (d * v).abs();
    }
    let defect = (total_mag - pair1) * vol;
    Ok(PairingReport {
        defect,
        relative_defect: if total_mag > 0.0 { defect / (total_mag * vol) } else { 0.0 },
        green_residual: ((pair_all + div_u) * vol).abs(),
        green_scale: (pair_abs + div_abs) * vol,
    })
}

/// Normalized residual of `-div σ = l u^{q-1}` over nodes one step inside.
pub fn limit_el_residual(u: &Field, s: &SigmaFields, l: f64, q: f64) -> Result<f64> {
    let div = backward_div(&s.components())?;
    div.same_grid(u)?;
    let mask = u.grid().inside_mask(1);
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..mask.len() {
        if !mask[k] {
            continue;
        }
        let v = u.values()[k];
        let rhs = if v == 0.0 { 0.0 } else { l * v.signum() * v.abs().powf(q - 1.0) };
        let r = -div.values()[k] - rhs;
        num += r * r;
        den += rhs * rhs;
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { f64::INFINITY })
}

/// Truncations `g` used in the identity `∫|∇₁g(u)| + Σ∫g'(u)|∂_i u|^{p_i} = l∫g(u)u^{q-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GKind {
    /// `g(u) = (u - k)⁺`.
    Shift { k: f64 },
    /// `g(u) = u min(u^a, L)`.
    Power { a: f64, cap: f64 },
}

impl GKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GKind::Shift { k } if !(k >= 0.0) => Err(Error::InvalidOptions(format!("shift k = {k} must be >= 0"))),
            GKind::Power { a, cap } if !(a > 0.0 && cap > 0.0) => {
                Err(Error::InvalidOptions(format!("power truncation needs a, L > 0 (got {a}, {cap})")))
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, u: f64) -> f64 {
        match *self {
            GKind::Shift { k } => (u - k).max(0.0),
            GKind::Power { a, cap } => u * u.powf(a).min(cap),
        }
    }

    pub fn slope(&self, u: f64) -> f64 {
        match *self {
            GKind::Shift { k } => {
                if u > k {
                    1.0
                } else {
                    0.0
                }
            }
            GKind::Power { a, cap } => {
                let ua = u.powf(a);
                if ua < cap {
                    (1.0 + a) * ua
                } else {
                    cap
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub lhs: f64,
    pub rhs: f64,
    pub defect: f64,
}

/// Relative defect `|LHS - l RHS| / (l RHS)` of the truncation identity with
/// the exponents in `exps`. The gradient block enters through `|∇₁ g(u)|` and
/// each remaining axis through `σ_i · D_i g(u)`, the discrete form of
/// `g'(u)|∂_i u|^{p_i}`.
pub fn truncation_identity(
    u: &Field,
    kind: GKind,
    l: f64,
    exps: &LevelExponents,
    delta: f64,
) -> Result<TruncationReport> {
    kind.validate()?;
    if u.values().iter().any(|&v| v < 0.0) {
        return Err(Error::NegativeValues);
    }
    let gu = u.map(|v| kind.value(v));
    if gu.is_zero() {
        return Err(Error::DegenerateG);
    }
    let g = u.grid();
    let vol = g.cell_volume();
    let q = exps.critical;
    let mut lhs = grad1_mag(&gu, exps.n1, 0.0).values().iter().sum::<f64>() * vol;
    let s = sigma_fields(u, exps, delta)?;
    for (j, sig) in s.sigma_tail.iter().enumerate() {
        let dg = forward_diff(&gu, exps.n1 + j)?;
        lhs += sig.values().iter().zip(dg.values()).map(|(a, b)| a * b).sum::<f64>() * vol;
    }
    let rhs: f64 = u
        .values()
        .iter()
        .zip(gu.values())
        .map(|(&v, &w)| if v > 0.0 { w * v.powf(q - 1.0) } else { 0.0 })
        .sum::<f64>()
        * vol;
    let scaled = l * rhs;
    Ok(TruncationReport {
        lhs,
        rhs,
        defect: (lhs - scaled).abs() / scaled.abs(),
    })
}

/// Removes the multiplier from `-div σ = l u^{q-1}`: `w(x) = u(l^{-1/p_i} x_i)`
/// solves the same equation with `l = 1`. On a grid this is exact as a
/// relabeling, so the nodal values are kept and half-length `i` is stretched
/// by `l^{1/p_i}`. Only meaningful with `delta = 0` or `delta` rescaled alike.
pub fn absorb_multiplier(u: &Field, l: f64, exps: &LevelExponents) -> Result<Field> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::InvalidOptions(format!("multiplier l = {l} must be > 0")));
    }
    let g = u.grid();
    if g.dim() != exps.n {
        return Err(Error::InvalidExponents("dimension mismatch".into()));
    }
    let lens: Vec<f64> = (0..g.dim())
        .map(|i| g.half_lengths()[i] * l.powf(1.0 / exps.axis_exponent(i)))
        .collect();
    Field::from_values(&make_grid(&lens, g.counts())?, u.values().to_vec())
}

/// Node samples of `(a + b Σ|x_i|^{p/(p-1)})^{(p-N)/p}` with the boundary
/// zeroed and normalized to unit `L^{p*}` norm, plus the normalization factor.
pub fn aftl_sample(grid: &Grid, a: f64, b: f64, p: f64) -> Result<(Field, f64)> {
    let n = grid.dim() as f64;
    if !(p > 1.0 && p < n) {
        return Err(Error::ExponentOutOfRange(format!("p = {p} must lie in (1, {n})")));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::ExponentOutOfRange(format!("a = {a}, b = {b} must be > 0")));
    }
    let pp = p / (p - 1.0);
    let expo = (p - n) / p;
    let mut u = Field::from_fn(grid, |x| (a + b * x.iter().map(|v| v.abs().powf(pp)).sum::<f64>()).powf(expo));
    u.zero_boundary();
    let p_star = n * p / (n - p);
    let c = 1.0 / lp_norm(&u, p_star);
    Ok((u.scaled(c), c))
}

pub fn aftl_field(grid: &Grid, a: f64, b: f64, p: f64) -> Result<Field> {
    Ok(aftl_sample(grid, a, b, p)?.0)
}

/// Multiplier of `c (a + b Σ|x_i|^{p'})^{(p-N)/p}` for
/// `-Σ ∂_i(|∂_i u|^{p-2} ∂_i u) = l u^{p*-1}` on all of space.
pub fn aftl_multiplier(n: usize, a: f64, b: f64, p: f64, c: f64) -> f64 {
    let nf = n as f64;
    let m = (nf - p) / p;
    let pp = p / (p - 1.0);
    let p_star = nf * p / (nf - p);
    nf * a * (m * b * pp).powf(p - 1.0) * c.powf(p - p_star)
}

/// Positive smooth field vanishing on the boundary: a few anisotropic
/// Gaussians times `Π(1 - (x_i/L_i)²)`.
pub fn random_smooth_field<R: Rng + ?Sized>(grid: &Grid, rng: &mut R) -> Field {
    let n = grid.dim();
    let l = grid.half_lengths().to_vec();
    let bumps: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let amp = rng.random_range(0.2..1.0);
            let center = (0..n).map(|d| rng.random_range(-0.4..0.4) * l[d]).collect();
            let width = (0..n).map(|d| rng.random_range(0.2..0.6) * l[d]).collect();
            (amp, center, width)
        })
        .collect();
    let mut u = Field::from_fn(grid, |x| {
        let window: f64 = x.iter().zip(&l).map(|(xi, li)| 1.0 - (xi / li).powi(2)).product();
        let s: f64 = bumps
            .iter()
            .map(|(amp, c, w)| {
                amp * (-x.iter().zip(c).zip(w).map(|((xi, ci), wi)| ((xi - ci) / wi).powi(2)).sum::<f64>()).exp()
            })
            .sum();
        window.max(0.0) * s
    });
    u.zero_boundary();
    u
}

/// Unstructured values in `[-1, 1]`, boundary zeroed when asked.
pub fn random_rough_field<R: Rng + ?Sized>(grid: &Grid, rng: &mut R, zero_boundary: bool) -> Field {
    let mut u = Field::from_fn(grid, |_| rng.random_range(-1.0..1.0));
    if zero_boundary {
        u.zero_boundary();
    }
    u
}

/// One entry of a verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> Check {
        Check {
            name: name.to_string(),
            passed: value <= threshold,
            value,
            threshold,
            detail,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: &str, value: f64, threshold: f64, detail: String) -> Check {
        Check {
            name: name.to_string(),
            passed: value >= threshold,
            value,
            threshold,
            detail,
        }
    }

    pub fn failed(name: &str, detail: String) -> Check {
        Check {
            name: name.to_string(),
            passed: false,
            value: f64::NAN,
            threshold: f64::NAN,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn new(checks: Vec<Check>) -> Self {
        VerifyReport {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// Largest relative violation of the exponent identities at `(x, eps)`.
pub fn exponent_identity_error(x: &ExponentVector, eps: f64) -> Result<f64> {
    let ee = epsilon_exponents(x, eps)?;
    let n = x.n() as f64;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
    let mut worst = rel(ee.lambda_eps * x.p_star(), ee.p_star_eps);
    // reference side straight from the inputs: it cancels when p*_eps is large
    worst = worst.max(rel(n / ee.p_star_eps, x.p_star_shift(eps)));
    for (i, &p) in x.p_tail().iter().enumerate() {
        worst = worst.max(rel(p * (1.0 + ee.eps_i[i]) / ee.eps_i[i], (1.0 + eps) / eps));
        worst = worst.max(rel(ee.p_eps[i], p * (1.0 + ee.eps_i[i])));
    }
    Ok(worst)
}

/// Random admissible exponent vector in dimension 2..=4.
pub fn random_exponents<R: Rng + ?Sized>(rng: &mut R) -> ExponentVector {
    loop {
        let n = rng.random_range(2..=4usize);
        let n1 = rng.random_range(0..=n);
        let tail: Vec<f64> = (0..n - n1).map(|_| rng.random_range(1.05..3.0)).collect();
        if let Ok(x) = derive_exponents(n, n1, &tail) {
            return x;
        }
    }
}

/// Relative mismatch between `⟨∇E(u), v⟩` and the central difference of the
/// energy along `v` with step `t`.
pub fn gradient_check(u: &Field, v: &Field, exps: &LevelExponents, delta: f64, t: f64) -> Result<f64> {
    u.same_grid(v)?;
    let grad = energy_gradient(u, exps, delta)?;
    let vol = u.grid().cell_volume();
    let analytic: f64 = grad.values().iter().zip(v.values()).map(|(a, b)| a * b).sum::<f64>() * vol;
    let plus = Field::from_values(u.grid(), u.values().iter().zip(v.values()).map(|(a, b)| a + t * b).collect())?;
    let minus = Field::from_values(u.grid(), u.values().iter().zip(v.values()).map(|(a, b)| a - t * b).collect())?;
    let fd = (energy(&plus, exps, delta)?.total - energy(&minus, exps, delta)?.total) / (2.0 * t);
    Ok((fd - analytic).abs() / analytic.abs().max(f64::MIN_POSITIVE))
}

/// Smallest eigenvalue of the Dirichlet difference Laplacian `D^T D` on the
/// interior nodes, in closed form.
pub fn dirichlet_ground_eigenvalue(grid: &Grid) -> f64 {
    grid.counts()
        .iter()
        .zip(grid.spacings())
        .map(|(&n, &h)| {
            let s = (std::f64::consts::PI / (2.0 * (n as f64 - 1.0))).sin();
            4.0 * s * s / (h * h)
        })
        .sum()
}

/// Settings of the verification suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    /// Taken from the run configuration.
    #[serde(skip)]
    pub seed: u64,
    pub exponent_samples: usize,
    pub green_samples: usize,
    pub gradient_samples: usize,
    pub troisi_samples: usize,
    pub linear_counts: Vec<usize>,
    pub aftl_a: f64,
    pub aftl_b: f64,
    pub aftl_half_length: f64,
    pub aftl_counts: Vec<usize>,
    pub min_order: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            exponent_samples: 1000,
            green_samples: 20,
            gradient_samples: 9,
            troisi_samples: 50,
            linear_counts: vec![7, 7, 7],
            aftl_a: 1.0,
            aftl_b: 1.0,
            aftl_half_length: 2.0,
            aftl_counts: vec![17, 33, 65],
            min_order: 0.8,
        }
    }
}

/// A field to check against the exponents it was computed for.
pub struct FieldUnderTest<'a> {
    pub field: &'a Field,
    pub exps: &'a LevelExponents,
    pub delta: f64,
}

/// Runs every invariant check; a field, when given, is checked as well.
pub fn run_suite(opts: &SuiteOptions, field: Option<FieldUnderTest<'_>>) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();
    let guard = |name: &str, r: Result<Check>| r.unwrap_or_else(|e| Check::failed(name, e.to_string()));

    checks.push(guard("exponent_identities", (|| {
        let mut worst: f64 = 0.0;
        for _ in 0..opts.exponent_samples {
            let x = random_exponents(&mut rng);
            let err = loop {
                if let Ok(err) = exponent_identity_error(&x, rng.random_range(1e-4..0.5)) {
                    break err;
                }
            };
            worst = worst.max(err);
        }
        Ok(Check::at_most("exponent_identities", worst, 1e-12, format!("{} random (p, eps)", opts.exponent_samples)))
    })()));

    checks.push(guard("green_identity", (|| {
        let mut worst: f64 = 0.0;
        for _ in 0..opts.green_samples {
            let n = rng.random_range(1..=3usize);
            let counts: Vec<usize> = (0..n).map(|_| rng.random_range(3..=9usize)).collect();
            let lens: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
            let g = make_grid(&lens, &counts)?;
            let u = random_rough_field(&g, &mut rng, true);
            let sigma: Vec<Field> = (0..n).map(|_| random_rough_field(&g, &mut rng, false)).collect();
            let div = backward_div(&sigma)?;
            let vol = g.cell_volume();
            let mut lhs = 0.0;
            let mut scale = 0.0;
            for (a, s) in sigma.iter().enumerate() {
                let d = forward_diff(&u, a)?;
                for (x, y) in s.values().iter().zip(d.values()) {
                    lhs += x * y;
                    scale += (x * y).abs();
                }
            }
            let mut rhs = 0.0;
            for (x, y) in div.values().iter().zip(u.values()) {
                rhs += x * y;
                scale += (x * y).abs();
            }
            worst = worst.max(((lhs + rhs) * vol).abs() / (scale * vol));
        }
        Ok(Check::at_most("green_identity", worst, 1e-13, format!("{} random pairs, relative to the integral scale", opts.green_samples)))
    })()));

    checks.push(guard("energy_gradient", (|| {
        let x = derive_exponents(3, 1, &[2.0, 2.0])?;
        let g = make_grid(&[1.0, 1.0, 1.0], &[9, 9, 9])?;
        let mut worst: f64 = 0.0;
        for i in 0..opts.gradient_samples {
            let eps = [0.4, 0.1, 0.025][i % 3];
            let lv = epsilon_exponents(&x, eps)?.level();
            let u = random_smooth_field(&g, &mut rng);
            let v = random_smooth_field(&g, &mut rng);
            worst = worst.max(gradient_check(&u, &v, &lv, 1e-4, 1e-6)?);
        }
        Ok(Check::at_most("energy_gradient", worst, 1e-5, format!("{} random directions, delta = 1e-4, t = 1e-6", opts.gradient_samples)))
    })()));

    checks.push(guard("troisi_ratios", (|| {
        let mut min_prod = f64::INFINITY;
        let mut worst_gap = f64::INFINITY;
        for _ in 0..opts.troisi_samples {
            let x = random_exponents(&mut rng);
            let counts = vec![if x.n() > 3 { 9 } else { 13 }; x.n()];
            let g = make_grid(&vec![1.0; x.n()], &counts)?;
            let u = random_smooth_field(&g, &mut rng);
            let (prod, sum) = troisi_ratios(&u, &x)?;
            min_prod = min_prod.min(prod);
            worst_gap = worst_gap.min(sum - prod);
        }
        let mut c = Check::at_least("troisi_ratios", min_prod, f64::MIN_POSITIVE, format!("smallest sum - product gap {worst_gap:.3e}"));
        c.passed &= worst_gap >= -1e-12;
        Ok(c)
    })()));

    checks.push(guard("linear_oracle", (|| {
        let n = opts.linear_counts.len();
        let g = make_grid(&vec![1.0; n], &opts.linear_counts)?;
        let lv = LevelExponents::custom(n, 0, 2.0, vec![2.0; n], 2.0)?;
        let sopts = SolverOptions {
            tol_residual: 1e-10,
            tol_energy: 1e-13,
            delta: 0.0,
            ..Default::default()
        };
        let res = minimize(&default_init(&g, 2.0)?, &lv, &sopts)?;
        let exact = 0.5 * dirichlet_ground_eigenvalue(&g);
        let rel = (res.k_eps - exact).abs() / exact;
        let resid = el_residual(&res.u, res.l_eps, &lv, 0.0)?;
        let mut c = Check::at_most("linear_oracle", rel, 1e-6, format!("K = {:.12}, exact {exact:.12}, residual {resid:.3e}", res.k_eps));
        c.passed &= resid <= 1e-8;
        Ok(c)
    })()));

    checks.push(guard("aftl_refinement", (|| {
        let lv = derive_exponents(3, 0, &[2.0, 2.0, 2.0])?.level();
        let mut res = Vec::new();
        for &n in &opts.aftl_counts {
            let g = make_grid(&[opts.aftl_half_length; 3], &[n; 3])?;
            let (u, c) = aftl_sample(&g, opts.aftl_a, opts.aftl_b, 2.0)?;
            let l = aftl_multiplier(3, opts.aftl_a, opts.aftl_b, 2.0, c);
            res.push(el_residual_with_margin(&u, l, &lv, 0.0, 2)?);
        }
        let order = res.windows(2).map(|w| (w[0] / w[1]).log2()).fold(f64::INFINITY, f64::min);
        Ok(Check::at_least("aftl_refinement", order, opts.min_order, format!("residuals {}", res.iter().map(|r| format!("{r:.3e}")).collect::<Vec<_>>().join(", "))))
    })()));

    if let Some(f) = field {
        checks.extend(field_checks(&f));
    }
    VerifyReport::new(checks)
}

fn field_checks(f: &FieldUnderTest<'_>) -> Vec<Check> {
    let u = f.field;
    let mut out = Vec::new();
    if !u.is_finite() {
        let bad = u.values().iter().filter(|v| !v.is_finite()).count();
        out.push(Check::failed("field_finite", format!("{bad} non-finite values")));
        return out;
    }
    out.push(Check::at_most("field_finite", 0.0, 0.0, "all values finite".into()));
    let boundary = (0..u.grid().len())
        .filter(|&k| u.grid().is_boundary(k))
        .map(|k| u.values()[k].abs())
        .fold(0.0, f64::max);
    out.push(Check::at_most("field_zero_boundary", boundary, 0.0, "largest boundary value".into()));
    out.push(Check::at_least("field_nonnegative", u.min(), 0.0, "smallest value".into()));
    let norm = lp_norm(u, f.exps.critical);
    out.push(Check::at_most("field_normalized", (norm - 1.0).abs(), 1e-8, format!("|u|_q = {norm}")));
    match energy(u, f.exps, f.delta) {
        Ok(e) => {
            let mut c = Check::at_least("field_energy", e.total, 0.0, "energy of the field".into());
            c.value = e.total;
            out.push(c);
        }
        Err(e) => out.push(Check::failed("field_energy", e.to_string())),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigma_of_zero_is_zero() {
        let g = make_grid(&[1.0, 1.0, 1.0], &[5, 5, 5]).unwrap();
        let lv = epsilon_exponents(&derive_exponents(3, 1, &[2.0, 2.0]).unwrap(), 0.2).unwrap().level();
        let s = sigma_fields(&Field::zeros(&g), &lv, 1e-3).unwrap();
        assert_eq!(s.sup_sigma1, 0.0);
        assert!(s.components().iter().all(|c| c.is_zero()));
    }

    #[test]
    fn sigma_power_algebra() {
        // one difference of size 5 along the unit axis
        let g = make_grid(&[1.0, 1.0], &[3, 3]).unwrap();
        let mut u = Field::zeros(&g);
        u.values_mut()[g.flat_index(&[1, 1])] = -5.0;
        let lv = LevelExponents::custom(2, 1, 1.5, vec![2.0], 3.0).unwrap();
        let s = sigma_fields(&u, &lv, 0.0).unwrap();
        let k = g.flat_index(&[1, 1]);
        assert_relative_eq!(s.sigma1[0].values()[k], 5f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(s.sup_sigma1, 5f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn truncation_rejects_degenerate_g() {
        let g = make_grid(&[1.0, 1.0], &[5, 5]).unwrap();
        let u = Field::from_fn(&g, |x| (1.0 - x[0] * x[0]) * (1.0 - x[1] * x[1]));
        let lv = LevelExponents::custom(2, 0, 2.0, vec![2.0, 2.0], 2.0).unwrap();
        let top = u.max();
        assert!(matches!(
            truncation_identity(&u, GKind::Shift { k: top }, 1.0, &lv, 0.0),
            Err(Error::DegenerateG)
        ));
    }

    #[test]
    fn aftl_is_even_and_normalized() {
        let g = make_grid(&[2.0, 2.0, 2.0], &[9, 9, 9]).unwrap();
        let u = aftl_field(&g, 1.0, 1.0, 2.0).unwrap();
        assert_relative_eq!(lp_norm(&u, 6.0), 1.0, max_relative = 1e-12);
        for k in 0..g.len() {
            let idx = g.index_of(k);
            let flipped: Vec<usize> = idx.iter().enumerate().map(|(d, &i)| if d == 1 { 8 - i } else { i }).collect();
            assert_eq!(u.values()[k], u.values()[g.flat_index(&flipped)]);
        }
        assert!(matches!(aftl_field(&g, 1.0, 1.0, 3.0), Err(Error::ExponentOutOfRange(_))));
    }

    #[test]
    fn aftl_multiplier_talenti_case() {
        assert_relative_eq!(aftl_multiplier(3, 2.0, 0.5, 2.0, 1.0), 3.0, max_relative = 1e-14);
        assert_relative_eq!(aftl_multiplier(3, 1.0, 1.0, 2.0, 2.0), 3.0 / 16.0, max_relative = 1e-14);
    }

    #[test]
    fn default_suite_passes() {
        let report = run_suite(&SuiteOptions::default(), None);
        assert!(report.passed, "{:#?}", report.checks);
        assert_eq!(report.checks.len(), 6);
    }

    #[test]
    fn absorbed_multiplier_solves_the_unit_equation() {
        let g = make_grid(&[1.5, 1.5], &[15, 15]).unwrap();
        let exps = LevelExponents::custom(2, 1, 1.5, vec![3.0], 4.0).unwrap();
        let opts = SolverOptions {
            delta: 0.0,
            max_iters: 20000,
            tol_residual: 1e-9,
            tol_energy: 1e-13,
            ..SolverOptions::default()
        };
        let r = minimize(&default_init(&g, 4.0).unwrap(), &exps, &opts).unwrap();
        let before = el_residual(&r.u, r.l_eps, &exps, 0.0).unwrap();
        let w = absorb_multiplier(&r.u, r.l_eps, &exps).unwrap();
        let after = el_residual(&w, 1.0, &exps, 0.0).unwrap();
        assert!((after - before).abs() <= 1e-12, "{before} vs {after}");
        // any field and multiplier: the relabeling divides the operator by l
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_smooth_field(&g, &mut rng);
        let wv = absorb_multiplier(&v, 3.7, &exps).unwrap();
        let a = el_residual(&v, 2.1, &exps, 0.0).unwrap();
        let b = el_residual(&wv, 2.1 / 3.7, &exps, 0.0).unwrap();
        assert!(a > 1e-2 && (a - b).abs() <= 1e-12 * a, "{a} vs {b}");
        let stretch = r.l_eps.powf(1.0 / 1.5);
        assert!((w.grid().half_lengths()[0] - 1.5 * stretch).abs() < 1e-12);
        assert!(absorb_multiplier(&r.u, 0.0, &exps).is_err());
    }

    #[test]
    fn nan_field_fails() {
        let g = make_grid(&[1.0, 1.0], &[5, 5]).unwrap();
        let mut u = Field::zeros(&g);
        u.values_mut()[12] = f64::NAN;
        let lv = LevelExponents::custom(2, 0, 2.0, vec![2.0, 2.0], 2.0).unwrap();
        let opts = SuiteOptions { exponent_samples: 1, green_samples: 1, gradient_samples: 1, troisi_samples: 1, ..Default::default() };
        let report = run_suite(&opts, Some(FieldUnderTest { field: &u, exps: &lv, delta: 0.0 }));
        assert!(!report.passed);
        assert_eq!(report.failing(), vec!["field_finite"]);
    }

    #[test]
    fn ground_eigenvalue_matches_dense_1d() {
        let g = make_grid(&[1.0], &[6]).unwrap();
        let h = g.spacings()[0];
        // interior tridiagonal (2, -1)/h^2 of size 4; smallest eigenvalue 2 - 2cos(pi/5)
        let exact = (2.0 - 2.0 * (std::f64::consts::PI / 5.0).cos()) / (h * h);
        assert!((dirichlet_ground_eigenvalue(&g) - exact).abs() < 1e-12 * exact);
    }
}
