//! `vbound`: solve single instances, run synthetic sweeps, certify models and
//! run the built-in property suites.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vertex_bounds::attention::{target_hybrid_certify, BoundMode, CertifyOptions};
use vertex_bounds::certified::certified_directional_min;
use vertex_bounds::exec::Exec;
use vertex_bounds::harness::{
    aggregate, attack_min_margin, run_sweep, write_aggregate_csv, write_trials_csv, SweepConfig,
};
use vertex_bounds::model::{load_model, random_image, InputBox};
use vertex_bounds::selfcheck::{run_selfcheck, SelfCheckOptions};
use vertex_bounds::solver::{directional_min, ScoreBox};
use vertex_bounds::Error as CoreError;

const REPORT_SCHEMA: &str = "vbound.certify/1";

mod exit {
    pub const USAGE: u8 = 2;
    pub const VALIDATION: u8 = 3;
    pub const SATURATED: u8 = 4;
    pub const INVARIANT: u8 = 5;
}

#[derive(Parser, Debug)]
#[command(name = "vbound", version, about = "Sound bounds for softmax attention over score boxes")]
struct Cli {
    /// Worker threads for the data-parallel paths (0 = all cores, 1 = sequential).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Minimize c^T softmax(s) over one box read from a JSON file with `c`, `ell`, `u`.
    Solve(SolveArgs),
    /// Synthetic comparison of vertex, baseline and certified bounds.
    Sweep(SweepArgs),
    /// Certify a model on an L-infinity pixel box.
    Certify(CertifyArgs),
    /// Run the property suites and report per-suite counts.
    Selfcheck(SelfCheckArgs),
}

#[derive(Args, Debug)]
struct SolveArgs {
    file: PathBuf,
    /// Also compute the outward-rounded lower bound.
    #[arg(long)]
    certified: bool,
    /// Print the result as JSON instead of key=value lines.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated dimensions.
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32, 64, 128])]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random samples per attack.
    #[arg(long, default_value_t = 200)]
    budget: usize,
    #[arg(long, default_value_t = 0.5)]
    width_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    coeff_scale: f64,
    /// Per-trial CSV. The aggregate goes to stdout unless --aggregate is given.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    aggregate: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    model: PathBuf,
    /// JSON input: a pixel array, or an object with `x` and optional `label`.
    #[arg(long, conflicts_with = "seed")]
    input: Option<PathBuf>,
    /// Draw a uniform random image instead of reading one.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Class to certify; defaults to the input's label, then to the prediction.
    #[arg(long)]
    label: Option<usize>,
    /// Random samples per target for the margin attack.
    #[arg(long, default_value_t = 200)]
    budget: usize,
    /// Use outward-rounded arithmetic throughout.
    #[arg(long)]
    certified: bool,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelfCheckArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Instance {
    c: Vec<f64>,
    ell: Vec<f64>,
    u: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InputFile {
    Pixels(Vec<f64>),
    Labeled { x: Vec<f64>, label: Option<usize> },
}

#[derive(Serialize)]
struct TargetReport {
    target: usize,
    l_vertex: f64,
    l_baseline: f64,
    l_hybrid: f64,
    attack: f64,
}

#[derive(Serialize)]
struct Report {
    schema: &'static str,
    model: String,
    epsilon: f64,
    mode: BoundMode,
    true_class: usize,
    predicted: usize,
    certified: bool,
    min_hybrid: f64,
    min_attack: f64,
    targets: Vec<TargetReport>,
    time_ms: u128,
}

/// An error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<CoreError>() {
            Some(CoreError::Saturated) => exit::SATURATED,
            _ => exit::VALIDATION,
        };
        Failure { code, err }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let exec = match configure_threads(cli.threads) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit::USAGE);
        }
    };
    let res = match cli.command {
        Command::Solve(a) => cmd_solve(&a),
        Command::Sweep(a) => cmd_sweep(&a, exec),
        Command::Certify(a) => cmd_certify(&a, exec),
        Command::Selfcheck(a) => cmd_selfcheck(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads(threads: usize) -> anyhow::Result<Exec> {
    if threads == 1 {
        return Ok(Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(Exec::Parallel)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn cmd_solve(a: &SolveArgs) -> CmdResult {
    let inst: Instance = read_json(&a.file)?;
    let bx = ScoreBox::new(inst.ell, inst.u)?;
    let res = directional_min(&inst.c, &bx)?;
    let cert = if a.certified {
        Some(certified_directional_min(&inst.c, &bx)?.certificate()?)
    } else {
        None
    };
    if a.json {
        let mut v = serde_json::to_value(&res).map_err(anyhow::Error::from)?;
        if let Some(l) = cert {
            v["certified_lower"] = serde_json::json!(l);
        }
        println!("{v}");
    } else {
        println!("value={:.6}", res.value);
        println!("m={}", res.m);
        println!("vertex={}", fmt_vec(&res.vertex));
        if let Some(l) = cert {
            println!("certified_lower={l:e}");
        }
    }
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_sweep(a: &SweepArgs, exec: Exec) -> CmdResult {
    let cfg = SweepConfig {
        ks: a.ks.clone(),
        trials: a.trials,
        seed: a.seed,
        width_scale: a.width_scale,
        coeff_scale: a.coeff_scale,
        budget: a.budget,
    };
    cfg.validate()?;
    let records = run_sweep(&cfg, exec)?;
    if let Some(p) = &a.out {
        write_trials_csv(&records, create(p)?)?;
    }
    let rows = aggregate(&records);
    match &a.aggregate {
        Some(p) => write_aggregate_csv(&rows, create(p)?)?,
        None => write_aggregate_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_certify(a: &CertifyArgs, exec: Exec) -> CmdResult {
    let model = load_model(&a.model)?;
    let (x, file_label) = match (&a.input, a.seed) {
        (Some(p), _) => match read_json::<InputFile>(p)? {
            InputFile::Pixels(x) => (x, None),
            InputFile::Labeled { x, label } => (x, label),
        },
        (None, Some(seed)) => (random_image(model.input_dim(), seed), None),
        (None, None) => {
            return Err(Failure {
                code: exit::USAGE,
                err: anyhow::anyhow!("certify needs --input or --seed"),
            })
        }
    };
    if x.len() != model.input_dim() {
        return Err(anyhow::anyhow!(
            "input has {} pixels, model expects {}",
            x.len(),
            model.input_dim()
        )
        .into());
    }
    let predicted = model.predict(&x)?;
    let y = a.label.or(file_label).unwrap_or(predicted);
    let ib = InputBox::linf_clipped(&x, a.epsilon)?;
    let mode = if a.certified { BoundMode::Certified } else { BoundMode::Fast };

    let start = Instant::now();
    let rep = target_hybrid_certify(&model, &ib, y, CertifyOptions { mode, exec })?;
    let time_ms = start.elapsed().as_millis();

    let mut targets = Vec::with_capacity(rep.bounds.len());
    let mut violations = Vec::new();
    for b in &rep.bounds {
        let attack = attack_min_margin(&model, &ib, y, b.target, a.budget, b.target as u64)?;
        // a sound lower bound can never exceed a margin actually attained in the box
        if b.l_hybrid > attack + 1e-9 * (1.0 + attack.abs()) {
            violations.push(b.target);
        }
        targets.push(TargetReport {
            target: b.target,
            l_vertex: b.l_vertex,
            l_baseline: b.l_baseline,
            l_hybrid: b.l_hybrid,
            attack,
        });
    }
    let report = Report {
        schema: REPORT_SCHEMA,
        model: a.model.display().to_string(),
        epsilon: a.epsilon,
        mode,
        true_class: y,
        predicted,
        certified: rep.certified,
        min_hybrid: rep.min_hybrid,
        min_attack: targets.iter().map(|t| t.attack).fold(f64::INFINITY, f64::min),
        targets,
        time_ms,
    };
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &report).map_err(anyhow::Error::from)?;
        writeln!(w).and_then(|_| w.flush()).map_err(anyhow::Error::from)?;
    }
    println!(
        "certified={} min_hybrid={} targets={} time_ms={}",
        report.certified,
        report.min_hybrid,
        report.targets.len(),
        report.time_ms
    );
    if !violations.is_empty() {
        return Err(Failure {
            code: exit::INVARIANT,
            err: anyhow::anyhow!("lower bound above attacked margin for targets {violations:?}"),
        });
    }
    Ok(())
}

fn cmd_selfcheck(a: &SelfCheckArgs) -> CmdResult {
    let reports = run_selfcheck(&SelfCheckOptions {
        trials: a.trials,
        seed: a.seed,
        inject_fault: a.inject_fault,
    })?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        match r.first_failure {
            Some((k, trial)) => println!(
                "{:<20} {status} checked={} failures={} first_failure=K{k}/trial{trial} seed={}",
                r.name, r.checked, r.failures, a.seed
            ),
            None => println!("{:<20} {status} checked={} failures=0", r.name, r.checked),
        }
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        println!("selfcheck: all {} suites passed", reports.len());
        Ok(())
    } else {
        Err(Failure {
            code: exit::INVARIANT,
            err: anyhow::anyhow!("failing suites: {}", failed.join(", ")),
        })
    }
}
