//! TOML run configuration shared by every command.
//!
//! ```toml
//! seed = 0
//!
//! [exponents]
//! p = [1.0, 2.0, 2.0]
//!
//! [grid]
//! half_lengths = [3.0, 3.0, 3.0]
//! counts = [33, 33, 33]
//!
//! [solve]
//! eps = 0.1
//!
//! [schedule]
//! eps0 = 0.4
//! factor = 0.5
//! eps_min = 0.0125
//!
//! [solver]
//! tol_residual = 1e-6
//!
//! [diagnostics]
//! tail_radii = [2.4]
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Exponents may be listed in any axis order; grid data follows the same
//! order. Fields are written in stored order, unit-exponent axes first, and the
//! permutation is reported alongside.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continuation::ContinuationConfig;
use crate::error::{Error, Result};
use crate::exponents::{epsilon_exponents, ExponentVector, LevelExponents};
use crate::grid::Grid;
use crate::solver::SolverOptions;
use crate::verify::SuiteOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub exponents: ExponentsSection,
    pub grid: GridSection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub verify: SuiteOptions,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentsSection {
    pub p: Vec<f64>,
    /// Replace the problem by its linear model: every derivative with
    /// exponent 2 and the constraint in `L^2`.
    #[serde(default)]
    pub linear: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub half_lengths: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub eps: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection { eps: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub eps0: f64,
    pub factor: f64,
    pub eps_min: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            eps0: 0.4,
            factor: 0.5,
            eps_min: 0.0125,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Defaults to `0.8` times the smallest half-length.
    pub tail_radii: Option<Vec<f64>>,
    /// Defaults to the largest grid spacing.
    pub ball_radii: Option<Vec<f64>>,
    pub rescale_every: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            tail_radii: None,
            ball_radii: None,
            rescale_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Also write the extremal relabeled so that its multiplier is 1.
    pub absorb_multiplier: bool,
}

/// What a single solve works with.
#[derive(Clone, Debug)]
pub struct SolveSetup {
    pub grid: Grid,
    pub level: LevelExponents,
    pub axis_order: Vec<usize>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn continuation(&self) -> Result<ContinuationConfig> {
        if self.exponents.linear {
            return Err(Error::Config("continuation needs the nonlinear problem (linear = true)".into()));
        }
        let lmin = self.grid.half_lengths.iter().copied().fold(f64::INFINITY, f64::min);
        let hmax = self
            .grid
            .half_lengths
            .iter()
            .zip(&self.grid.counts)
            .map(|(&l, &n)| if n > 1 { 2.0 * l / (n as f64 - 1.0) } else { 0.0 })
            .fold(0.0, f64::max);
        let cfg = ContinuationConfig {
            p: self.exponents.p.clone(),
            half_lengths: self.grid.half_lengths.clone(),
            counts: self.grid.counts.clone(),
            eps0: self.schedule.eps0,
            factor: self.schedule.factor,
            eps_min: self.schedule.eps_min,
            solver: self.solver.clone(),
            tail_radii: self.diagnostics.tail_radii.clone().unwrap_or_else(|| vec![0.8 * lmin]),
            ball_radii: self.diagnostics.ball_radii.clone().unwrap_or_else(|| vec![hmax]),
            rescale_every: self.diagnostics.rescale_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Grid and exponents of the single problem at `solve.eps`.
    pub fn solve_setup(&self) -> Result<SolveSetup> {
        self.solver.validate()?;
        if self.exponents.linear {
            let n = self.exponents.p.len();
            let grid = self.grid_in_order(&(0..n).collect::<Vec<_>>())?;
            let level = LevelExponents::custom(n, 0, 2.0, vec![2.0; n], 2.0)?;
            return Ok(SolveSetup {
                grid,
                level,
                axis_order: (0..n).collect(),
            });
        }
        let x = ExponentVector::from_unordered(&self.exponents.p)?;
        let level = epsilon_exponents(&x, self.solve.eps)?.level();
        let grid = self.grid_in_order(x.axis_order())?;
        Ok(SolveSetup {
            grid,
            level,
            axis_order: x.axis_order().to_vec(),
        })
    }

    fn grid_in_order(&self, order: &[usize]) -> Result<Grid> {
        let n = self.exponents.p.len();
        if self.grid.half_lengths.len() != n || self.grid.counts.len() != n {
            return Err(Error::Config(format!(
                "{n} exponents but {} half-lengths and {} counts",
                self.grid.half_lengths.len(),
                self.grid.counts.len()
            )));
        }
        let lens: Vec<f64> = order.iter().map(|&i| self.grid.half_lengths[i]).collect();
        let counts: Vec<usize> = order.iter().map(|&i| self.grid.counts[i]).collect();
        crate::grid::make_grid(&lens, &counts)
    }

    /// Suite options with the run seed applied.
    pub fn suite(&self) -> SuiteOptions {
        let mut s = self.verify.clone();
        s.seed = self.seed;
        s
    }
}
