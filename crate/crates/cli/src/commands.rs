use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use dualhjb_core::config::{ModelConfig, UtilityRegistry};
use dualhjb_core::io::{
    dual_csv, primal_csv, read_dual, read_primal, read_text, to_json, trace_csv, write_atomic,
    ArtifactError, RunManifest,
};
use dualhjb_core::pipeline::Problem;
use dualhjb_core::simulate::SimReport;
use serde::Serialize;

use crate::error::CliError;

pub const DUAL_FILE: &str = "dual.csv";
pub const PRIMAL_FILE: &str = "primal.csv";
pub const SIM_FILE: &str = "sim_report.json";
pub const TRACE_FILE: &str = "paths.csv";
pub const VERIFY_FILE: &str = "verify_report.json";
pub const APP_FILE: &str = "app_report.json";

/// Flags shared by every subcommand.
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub dump_paths: bool,
    pub input: Option<PathBuf>,
}

/// Default number of traced paths when `--dump-paths` is given and the
/// config does not set one.
const DEFAULT_TRACES: usize = 20;

struct Run {
    problem: Problem,
    manifest: RunManifest,
    out: PathBuf,
    clock: Instant,
}

impl Run {
    fn start(command: &str, opts: &RunOptions) -> Result<Self, CliError> {
        let (config, text) = ModelConfig::load(&opts.config)?;
        let market = config.market()?;
        let utility = config.utility(&UtilityRegistry::with_builtins())?;
        let hash = dualhjb_core::config::config_hash(&text);
        let problem = Problem::assemble(config, hash.clone(), market, utility)?;
        fs::create_dir_all(&opts.out).map_err(|e| ArtifactError::Io {
            path: opts.out.display().to_string(),
            message: e.to_string(),
        })?;
        let mut manifest = RunManifest::new(command, &hash);
        manifest
            .versions
            .insert("dualhjb-cli".into(), env!("CARGO_PKG_VERSION").into());
        manifest.grid = Some(problem.config.log_grid()?);
        manifest.oracle = problem.has_oracle();
        Ok(Self {
            problem,
            manifest,
            out: opts.out.clone(),
            clock: Instant::now(),
        })
    }

    fn lap(&mut self, stage: &str) {
        self.manifest
            .timings
            .insert(stage.into(), self.clock.elapsed().as_secs_f64());
        self.clock = Instant::now();
    }

    fn emit(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        write_atomic(&self.out.join(name), content.as_bytes())?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        let name = format!("manifest_{}.json", self.manifest.command);
        write_atomic(&self.out.join(name), to_json(&self.manifest).as_bytes())?;
        Ok(())
    }
}

fn upstream(opts: &RunOptions, default: &str) -> Result<String, CliError> {
    let path = opts.input.clone().unwrap_or_else(|| opts.out.join(default));
    if !path.is_file() {
        return Err(CliError::UpstreamMissing(path));
    }
    Ok(read_text(&path)?)
}

pub fn solve(opts: &RunOptions) -> Result<(), CliError> {
    let mut run = Run::start("solve", opts)?;
    let dual = run.problem.solve()?;
    run.lap("solve");
    let csv = dual_csv(&dual, &run.problem.hash);
    run.emit(DUAL_FILE, &csv)?;
    run.finish()
}

pub fn recover(opts: &RunOptions) -> Result<(), CliError> {
    let text = upstream(opts, DUAL_FILE)?;
    let mut run = Run::start("recover", opts)?;
    let dual = read_dual(&text, &run.problem.market)?;
    let primal = run.problem.recover(&dual)?;
    run.lap("recover");
    let csv = primal_csv(&primal, &run.problem.hash);
    run.emit(PRIMAL_FILE, &csv)?;
    run.finish()
}

/// Flat summary of a closed-loop simulation.
#[derive(Debug, Serialize)]
struct SimSummary<'a> {
    config_hash: &'a str,
    seed: u64,
    x0: f64,
    estimate: f64,
    std_error: f64,
    n_paths: usize,
    n_absorbed: usize,
    mean_terminal_wealth: f64,
    min_state: f64,
}

pub fn simulate(opts: &RunOptions) -> Result<(), CliError> {
    let text = upstream(opts, PRIMAL_FILE)?;
    let mut run = Run::start("simulate", opts)?;
    let primal = read_primal(&text)?;
    let mut cfg = run.problem.sim_config(opts.seed);
    if opts.dump_paths && cfg.trace_paths == 0 {
        cfg.trace_paths = DEFAULT_TRACES;
    }
    if !opts.dump_paths {
        cfg.trace_paths = 0;
    }
    let report: SimReport = run.problem.simulate(&primal, &cfg)?;
    run.lap("simulate");
    run.manifest.seeds.push(cfg.seed);
    let summary = SimSummary {
        config_hash: &run.problem.hash,
        seed: cfg.seed,
        x0: run.problem.config.sim.x0,
        estimate: report.estimate,
        std_error: report.std_error,
        n_paths: report.n_paths,
        n_absorbed: report.n_absorbed,
        mean_terminal_wealth: report.mean_terminal_wealth,
        min_state: report.min_state,
    };
    let json = to_json(&summary);
    run.emit(SIM_FILE, &json)?;
    if opts.dump_paths {
        let csv = trace_csv(&report.traces, cfg.seed);
        run.emit(TRACE_FILE, &csv)?;
    }
    run.finish()
}

pub fn verify(opts: &RunOptions) -> Result<(), CliError> {
    let mut run = Run::start("verify", opts)?;
    let seed = run.problem.sim_config(opts.seed).seed;
    run.manifest.seeds.push(seed);
    let report = run.problem.verify(opts.seed)?;
    run.lap("verify");
    for c in &report.checks {
        eprintln!(
            "{} {} value={:.3e} tol={:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
    run.emit(VERIFY_FILE, &to_json(&report))?;
    run.finish()?;
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}

pub fn app(opts: &RunOptions) -> Result<(), CliError> {
    let mut run = Run::start("app", opts)?;
    let cfg = &run.problem.config;
    if cfg.random_horizon.is_none() && cfg.illiquid.is_none() {
        return Err(dualhjb_core::config::ConfigError::MissingSection(
            "random_horizon or illiquid",
        )
        .into());
    }
    let seed = run.problem.sim_config(opts.seed).seed;
    let output = run.problem.run_app(opts.seed)?;
    run.lap("app");
    if output.random_horizon.is_some() {
        run.manifest.seeds.push(seed);
    }
    if let Some((dual, primal)) = &output.horizon_solution {
        let hash = run.problem.hash.clone();
        run.emit(&format!("horizon_{DUAL_FILE}"), &dual_csv(dual, &hash))?;
        run.emit(
            &format!("horizon_{PRIMAL_FILE}"),
            &primal_csv(primal, &hash),
        )?;
    }
    run.emit(APP_FILE, &to_json(&output))?;
    run.finish()?;
    match &output.random_horizon {
        Some(r) if !r.passed => Err(CliError::ChecksFailed(1)),
        _ => Ok(()),
    }
}
