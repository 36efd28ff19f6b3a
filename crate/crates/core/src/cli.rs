//! Command-line driver: `solve`, `continue`, `verify` and `report`.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 a solve that did
//! not converge (or a continuation with a failed step), and for `verify`
//! 1 when any check fails.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::continuation::run_with;
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::solver::{default_init, minimize, ExtremalSummary};
use crate::verify::{absorb_multiplier, run_suite, FieldUnderTest, VerifyReport};
use crate::exponents::epsilon_exponents;

pub const OUT_ENV: &str = "ANISO_EXTREMAL_OUT";
pub const THREADS_ENV: &str = "ANISO_EXTREMAL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "aniso-extremal", version, about = "Extremals of anisotropic Sobolev embeddings with unit exponents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Minimize the regularized quotient at `solve.eps`.
    Solve(CommonArgs),
    /// Run the epsilon continuation and write the trace.
    Continue(CommonArgs),
    /// Run the invariant checks, and check a field dump when given.
    Verify(CommonArgs),
    /// Summarize a continuation trace.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: `output.dir` from the config, else `out`).
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Field dump used as the initial guess, or as the field to verify.
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Worker threads; the numerics currently run on one.
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Config whose output directory holds `trace.csv`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trace to read; overrides the one found through `--config`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

/// `result.json` written by `solve`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub eps: Option<f64>,
    pub linear: bool,
    /// Caller's axis stored at each position of the field dump.
    pub axis_order: Vec<usize>,
    pub grad1_exponent: f64,
    pub axis_exponents: Vec<f64>,
    pub critical_exponent: f64,
    pub delta: f64,
    pub evaluations: usize,
    pub summary: ExtremalSummary,
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Solve(a) => solve(&a),
        Command::Continue(a) => continue_cmd(&a),
        Command::Verify(a) => verify(&a),
        Command::Report(a) => report(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load(args: &CommonArgs) -> Result<(RunConfig, PathBuf)> {
    check_threads(args.threads)?;
    let cfg = RunConfig::from_path(&args.config)?;
    let out = out_dir(args.out.as_deref(), &cfg);
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn check_threads(threads: Option<usize>) -> Result<()> {
    match threads {
        Some(0) => Err(Error::Config("threads must be >= 1".into())),
        _ => Ok(()),
    }
}

fn out_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn read_field(path: &Path) -> Result<Field> {
    let f = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    Field::read_csv(BufReader::new(f))
}

fn write_field(path: &Path, u: &Field) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    u.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline. Floats use the shortest text that
/// parses back to the same value; non-finite values become `null`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn solve(args: &CommonArgs) -> Result<i32> {
    let (cfg, out) = load(args)?;
    let setup = cfg.solve_setup()?;
    let init = match &args.field {
        Some(p) => {
            let f = read_field(p)?;
            if f.grid() != &setup.grid {
                return Err(Error::GridMismatch);
            }
            f
        }
        None => default_init(&setup.grid, setup.level.critical)?,
    };
    let res = minimize(&init, &setup.level, &cfg.solver)?;
    write_field(&out.join("field.csv"), &res.u)?;
    if cfg.output.absorb_multiplier {
        write_field(&out.join("field_unit_multiplier.csv"), &absorb_multiplier(&res.u, res.l_eps, &setup.level)?)?;
    }
    let report = SolveReport {
        eps: (!cfg.exponents.linear).then_some(cfg.solve.eps),
        linear: cfg.exponents.linear,
        axis_order: setup.axis_order.clone(),
        grad1_exponent: setup.level.grad1,
        axis_exponents: setup.level.axis.clone(),
        critical_exponent: setup.level.critical,
        delta: cfg.solver.delta,
        evaluations: res.evaluations,
        summary: res.summary(setup.level.critical),
    };
    write_json(&out.join("result.json"), &report)?;
    println!(
        "K_eps = {:.10}  l_eps = {:.10}  residual = {:.3e}  iters = {}  converged = {}",
        res.k_eps, res.l_eps, res.residual, res.iters, res.converged
    );
    Ok(if res.converged { 0 } else { 2 })
}

fn continue_cmd(args: &CommonArgs) -> Result<i32> {
    let (cfg, out) = load(args)?;
    let cc = cfg.continuation()?;
    let init = args.field.as_deref().map(read_field).transpose()?;
    let trace = run_with(&cc, init.as_ref(), |r| {
        eprintln!(
            "step {:>2}  eps = {:<8}  K = {:.8}  l/K = {:.4}  iters = {:>5}  {}",
            r.step,
            r.eps,
            r.k_eps,
            r.l_eps / r.k_eps,
            r.iters,
            match (&r.error, r.converged) {
                (Some(e), _) => format!("error: {e}"),
                (None, true) => "converged".to_string(),
                (None, false) => "not converged".to_string(),
            }
        );
    })?;
    let mut w = BufWriter::new(File::create(out.join("trace.csv"))?);
    trace.write_csv(&mut w)?;
    w.flush()?;
    write_json(&out.join("summary.json"), &trace)?;
    if let Some(f) = &trace.final_field {
        write_field(&out.join("final_field.csv"), f)?;
    }
    if let Some((u, eps, l)) = &trace.final_extremal {
        write_field(&out.join("final_extremal.csv"), u)?;
        if cfg.output.absorb_multiplier {
            let level = epsilon_exponents(&cc.exponents()?, *eps)?.level();
            write_field(&out.join("final_extremal_unit_multiplier.csv"), &absorb_multiplier(u, *l, &level)?)?;
        }
    }
    Ok(if trace.any_failed() { 2 } else { 0 })
}

fn verify(args: &CommonArgs) -> Result<i32> {
    let (cfg, out) = load(args)?;
    let field = args.field.as_deref().map(read_field).transpose()?;
    let setup = if field.is_some() { Some(cfg.solve_setup()?) } else { None };
    let report: VerifyReport = run_suite(
        &cfg.suite(),
        field.as_ref().zip(setup.as_ref()).map(|(f, s)| FieldUnderTest {
            field: f,
            exps: &s.level,
            delta: cfg.solver.delta,
        }),
    );
    write_json(&out.join("verify.json"), &report)?;
    for c in &report.checks {
        println!(
            "{} {:<20} value = {:<12.4e} threshold = {:<10.3e} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold,
            c.detail
        );
    }
    Ok(if report.passed { 0 } else { 1 })
}

/// Rows of a trace CSV keyed by column name.
pub struct TraceTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TraceTable {
    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
        let mut r = csv::Reader::from_reader(BufReader::new(f));
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(TraceTable { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let c = self
            .column(name)
            .ok_or_else(|| Error::Parse(format!("trace has no column {name}")))?;
        self.rows
            .iter()
            .map(|r| r[c].parse::<f64>().map_err(|e| Error::Parse(format!("{name}: {e}"))))
            .collect()
    }
}

fn report(args: &ReportArgs) -> Result<i32> {
    check_threads(args.threads)?;
    let cfg = args.config.as_deref().map(RunConfig::from_path).transpose()?;
    let trace_path = match (&args.trace, &cfg) {
        (Some(t), _) => t.clone(),
        (None, Some(c)) => out_dir(args.out.as_deref(), c).join("trace.csv"),
        (None, None) => return Err(Error::Config("report needs --trace or --config".into())),
    };
    let table = TraceTable::read(&trace_path)?;
    let out = match (&args.out, &cfg) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => out_dir(None, c),
        (None, None) => trace_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&out)?;

    let group = |prefix: &str| -> Vec<String> {
        table.header.iter().filter(|h| h.starts_with(prefix)).cloned().collect()
    };
    let series: [(&str, Vec<String>); 4] = [
        ("series_k.csv", vec!["k_eps".into(), "l_eps".into(), "residual".into(), "iters".into()]),
        ("series_mass.csv", [group("tail_mass@"), group("peak_ball_mass@"), vec!["unit_ball_mass".into()]].concat()),
        ("series_norms.csv", [vec!["grad1_norm".into()], group("axis_norm_"), group("power_")].concat()),
        ("series_sup.csv", vec!["sup_norm".into(), "levy_t".into()]),
    ];
    for (file, cols) in &series {
        let mut w = csv::Writer::from_path(out.join(file))?;
        let idx: Vec<usize> = std::iter::once("eps")
            .chain(cols.iter().map(String::as_str))
            .map(|c| table.column(c).ok_or_else(|| Error::Parse(format!("trace has no column {c}"))))
            .collect::<Result<_>>()?;
        w.write_record(idx.iter().map(|&i| table.header[i].as_str()))?;
        for row in &table.rows {
            w.write_record(idx.iter().map(|&i| row[i].as_str()))?;
        }
        w.flush()?;
    }

    let text = summary_text(&table)?;
    std::fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(0)
}

fn summary_text(t: &TraceTable) -> Result<String> {
    let eps = t.floats("eps")?;
    let k = t.floats("k_eps")?;
    let l = t.floats("l_eps")?;
    let conv = t.floats("converged")?;
    let mut s = String::new();
    s.push_str(&format!("steps: {}  converged: {}\n", eps.len(), conv.iter().filter(|&&c| c == 1.0).count()));
    s.push_str(&format!("{:>10} {:>14} {:>10} {:>12}\n", "eps", "K_eps", "l/K", "increment"));
    for i in 0..eps.len() {
        let inc = if i > 0 { format!("{:.3e}", (k[i] - k[i - 1]).abs()) } else { "-".into() };
        s.push_str(&format!("{:>10} {:>14.8} {:>10.4} {:>12}\n", eps[i], k[i], l[i] / k[i], inc));
    }
    if let (Some(&e), Some(&kk)) = (eps.last(), k.last()) {
        s.push_str(&format!("final: eps = {e}  K_eps = {kk:.10}\n"));
    }
    Ok(s)
}
