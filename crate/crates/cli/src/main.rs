//! `sepeff` command line: validate trial data, work with causal graphs, fit
//! nuisance models, estimate risks and separable effects, simulate.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use sepeff::data::write_csv;
use sepeff::estimators::{estimate_many, sha256_hex, spec_fingerprint};
use sepeff::graph::{build_swig, check_dcc, check_dcc_treatment_centered, check_partial_isolation, convert_to_strategy_centered, d_separated, open_path, AsGraph, Component, Dag, DccPartition};
use sepeff::inference::{analyze_with_bootstrap, bootstrap_ci, curves_csv, summary_csv};
use sepeff::models::fit_nuisance_set;
use sepeff::sim::{exact_truth, run_coverage_experiment, sample_trial, Dgp, SampleMode};
use sepeff::{Block, BootstrapConfig, EffectKind, Error, EstimateReport, EstimatorKind, EstimatorOptions, Result};

use config::{parse_effect, Encoding, RunConfig, Source};
use output::{error_json, Output};

#[derive(Parser, Debug)]
#[command(name = "sepeff", version, about = "Separable effects for trials with competing events and adherence")]
struct Cli {
    /// Seed for every random stream (sampling, bootstrap, coverage).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for bootstrap and coverage loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, or a file path for the main artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a long-format dataset against its schema.
    Validate(Common),
    /// Graph utilities.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Fit the nuisance models an estimator set needs.
    Fit(Common),
    /// Risk curves for each arm and estimator.
    Estimate(Common),
    /// Separable effect with bootstrap intervals.
    Contrast(Common),
    /// Draw a trial from a data-generating process.
    Simulate(Common),
    /// Exact counterfactual risks of a data-generating process.
    Truth(Common),
    /// Interval coverage over repeated simulated trials.
    Coverage(Common),
    /// Tidy risk-by-time CSV from saved estimate reports.
    EmitCurves {
        /// JSON with estimate reports (`estimate` or `contrast` output).
        #[arg(long)]
        reports: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum GraphCommand {
    /// Treatment-centered graph to strategy-centered.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// d-separation query, optionally in a single-world intervention graph.
    Dsep {
        #[arg(long = "in")]
        input: PathBuf,
        /// Node names, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        given: Vec<String>,
        /// Interventions as NAME=VALUE, comma separated. Fixed halves are
        /// named in lower case, e.g. `r_1=1`.
        #[arg(long, value_delimiter = ',')]
        intervene: Vec<String>,
    },
    /// Dismissible component conditions and partial isolation.
    CheckDcc {
        #[arg(long = "in")]
        input: PathBuf,
        /// Block for covariates not labelled L_D or L_Y.
        #[arg(long, value_enum, default_value = "d")]
        fallback: BlockArg,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
enum BlockArg {
    D,
    Y,
}

/// Flags shared by the data and simulation commands. Each overrides the
/// config field of the same name.
#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Encoding>,
    /// Schema JSON file (a `dgp.json` works too).
    #[arg(long)]
    schema: Option<String>,
    /// Model specs: `saturated`, `misspecified`, `long_follow_up` or a JSON file.
    #[arg(long)]
    specs: Option<String>,
    /// `all` or pairs such as `1,0`; repeatable.
    #[arg(long)]
    arms: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    /// `zy:<z_d>` or `zd:<z_y>`.
    #[arg(long)]
    effect: Option<String>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// Data-generating process: `two_period`, `long_follow_up` or a JSON file.
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Randomize Z_Y and Z_D separately (four arms).
    #[arg(long)]
    four_arm: bool,
    #[arg(long)]
    replications: Option<usize>,
    /// Scenario JSON for `coverage`.
    #[arg(long)]
    scenario: Option<String>,
}

const BUILTINS: &[&str] = &["two_period", "long_follow_up", "saturated", "misspecified"];

/// Flag paths are relative to the working directory; config paths to the
/// config file. Builtin names pass through.
fn flag_source<T>(s: String) -> Result<Source<T>> {
    if BUILTINS.contains(&s.as_str()) {
        return Ok(Source::Named(s));
    }
    Ok(Source::Named(std::path::absolute(&s)?.to_string_lossy().into_owned()))
}

impl Common {
    fn apply(self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(d) = self.data {
            cfg.data = Some(d);
        }
        if let Some(f) = self.format {
            cfg.format = f;
        }
        if let Some(s) = self.schema {
            cfg.schema = Some(flag_source(s)?);
        }
        if let Some(s) = self.specs {
            cfg.specs = Some(flag_source(s)?);
        }
        if !self.arms.is_empty() {
            cfg.arms = Some(self.arms);
        }
        if !self.estimators.is_empty() {
            cfg.estimators = Some(self.estimators.iter().map(|s| EstimatorKind::parse(s)).collect::<Result<_>>()?);
        }
        if let Some(e) = self.effect {
            cfg.effect = Some(parse_effect(&e)?);
        }
        if self.draws.is_some() {
            cfg.draws = self.draws;
        }
        if self.level.is_some() {
            cfg.level = self.level;
        }
        if let Some(s) = self.dgp {
            cfg.dgp = Some(flag_source(s)?);
        }
        if self.n.is_some() {
            cfg.n = self.n;
        }
        cfg.four_arm |= self.four_arm;
        if self.replications.is_some() {
            cfg.replications = self.replications;
        }
        if let Some(s) = self.scenario {
            cfg.scenario = Some(flag_source(s)?);
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let out_flag = cli.out.clone();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, dir)) => {
            let body = serde_json::to_string_pretty(&error_json(&e)).expect("error serializes");
            eprintln!("{}", body);
            let dir = dir.or_else(|| out_flag.map(|o| if o.extension().is_some() { o.parent().map(Path::to_path_buf).unwrap_or_default() } else { o }));
            if let Some(dir) = dir {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.json"), body + "\n");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Errors carry the output directory once it is known.
fn run(cli: Cli) -> std::result::Result<(), (Error, Option<PathBuf>)> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| (Error::Config(e.to_string()), None))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(|e| (e, None))?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    let fallback_dir = cfg.out.clone().or_else(|| Some(PathBuf::from("out")));
    let res = match cli.command {
        Command::Graph(g) => graph(g, &cfg),
        Command::EmitCurves { reports } => emit_curves(&reports, &cfg),
        Command::Validate(c) => with(c, &mut cfg, "validate", validate),
        Command::Fit(c) => with(c, &mut cfg, "fit", fit),
        Command::Estimate(c) => with(c, &mut cfg, "estimate", estimate),
        Command::Contrast(c) => with(c, &mut cfg, "contrast", contrast),
        Command::Simulate(c) => with(c, &mut cfg, "simulate", simulate),
        Command::Truth(c) => with(c, &mut cfg, "truth", truth),
        Command::Coverage(c) => with(c, &mut cfg, "coverage", coverage),
    };
    res.map_err(|e| {
        let dir = cfg.out.clone().map(|o| if o.extension().is_some() { o.parent().map(Path::to_path_buf).unwrap_or_default() } else { o });
        (e, dir.or(fallback_dir))
    })
}

fn with(c: Common, cfg: &mut RunConfig, command: &str, f: fn(&RunConfig, &Output) -> Result<()>) -> Result<()> {
    c.apply(cfg)?;
    let out = Output::new(cfg.out.as_deref(), command, cfg.fingerprint(command), cfg.seed());
    f(cfg, &out)
}

// ---------------------------------------------------------------- data

fn validate(cfg: &RunConfig, out: &Output) -> Result<()> {
    let ds = cfg.data()?;
    let body = json!({
        "valid": true,
        "individuals": ds.len(),
        "horizon": ds.horizon,
        "total_weight": ds.total_weight(),
        "format": cfg.format,
    });
    out.json("validation.json", true, "validation", &body)?;
    Ok(())
}

fn fit(cfg: &RunConfig, out: &Output) -> Result<()> {
    let data = cfg.data()?;
    let specs = cfg.specs()?;
    let kinds = cfg.estimators(&EstimatorKind::all());
    let nuis = fit_nuisance_set(&data, &specs, &kinds)?;
    let converged = nuis.all_converged();
    out.json("nuisance.json", true, "nuisance", &json!({ "converged": converged, "spec_fingerprint": spec_fingerprint(&specs), "nuisance": nuis }))?;
    if !converged {
        return Err(Error::Fit("at least one nuisance model did not converge; see nuisance.json".into()));
    }
    Ok(())
}

fn estimate(cfg: &RunConfig, out: &Output) -> Result<()> {
    let data = cfg.data()?;
    let specs = cfg.specs()?;
    let arms = cfg.arms()?;
    let kinds = cfg.estimators(&EstimatorKind::all());
    let opts = EstimatorOptions::default();
    let mut reports = estimate_many(&data, &specs, &arms, &kinds, &opts)?;
    let mut failures = None;
    if let Some(draws) = cfg.draws {
        let boot = BootstrapConfig { draws, level: cfg.level.unwrap_or(0.95), seed: cfg.seed() };
        let stat = |ds: &sepeff::TrialDataset| -> Result<Vec<f64>> { Ok(estimate_many(ds, &specs, &arms, &kinds, &opts)?.into_iter().flat_map(|r| r.curve).collect()) };
        let ci = bootstrap_ci(&data, &stat, &boot)?;
        let h = data.horizon;
        for (i, r) in reports.iter_mut().enumerate() {
            r.lower = Some(ci.lower[i * h..(i + 1) * h].to_vec());
            r.upper = Some(ci.upper[i * h..(i + 1) * h].to_vec());
        }
        failures = Some(ci.failures);
    }
    out.json("estimates.json", true, "reports", &json!({ "reports": reports, "bootstrap_failures": failures }))?;
    out.csv("curves.csv", false, &curves_csv(&reports)?)?;
    Ok(())
}

fn contrast(cfg: &RunConfig, out: &Output) -> Result<()> {
    let data = cfg.data()?;
    let specs = cfg.specs()?;
    let kinds = cfg.estimators(&[EstimatorKind::OneStep]);
    let [kind] = kinds.as_slice() else {
        return Err(Error::Config("contrast takes exactly one estimator".into()));
    };
    let effect = cfg.effect.unwrap_or(EffectKind::ZY { z_d: 1 });
    let boot = BootstrapConfig { draws: cfg.draws.unwrap_or(200), level: cfg.level.unwrap_or(0.95), seed: cfg.seed() };
    let joint = analyze_with_bootstrap(&data, &specs, *kind, effect, &boot)?;
    out.json("contrast.json", true, "contrast", &joint)?;
    out.csv("summary.csv", false, &summary_csv(&joint.reports, &joint.contrast)?)?;
    out.csv("curves.csv", false, &curves_csv(&joint.reports)?)?;
    Ok(())
}

// ---------------------------------------------------------------- simulation

fn simulate(cfg: &RunConfig, out: &Output) -> Result<()> {
    let spec = cfg.dgp()?;
    let dgp = Dgp::new(spec.clone())?;
    let mode = if cfg.four_arm { SampleMode::FourArm } else { SampleMode::TwoArm };
    let ds = sample_trial(&dgp, cfg.n.unwrap_or(1000), cfg.seed(), mode)?;
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf)?;
    out.csv("data.csv", true, std::str::from_utf8(&buf).expect("csv is utf-8"))?;
    out.json("schema.json", false, "schema", &json!({ "schema": ds.schema }))?;
    out.json("dgp.json", false, "dgp", &json!({ "dgp": spec }))?;
    Ok(())
}

fn truth(cfg: &RunConfig, out: &Output) -> Result<()> {
    let dgp = Dgp::new(cfg.dgp()?)?;
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["arm", "k", "risk"])?;
    let mut curves = Vec::new();
    for arm in cfg.arms()? {
        let t = exact_truth(&dgp, arm)?;
        for (i, v) in t.values.iter().enumerate() {
            w.write_record([arm.to_string(), (i + 1).to_string(), format!("{:.10}", v)])?;
        }
        curves.push(json!({ "arm": arm, "curve": t.values, "terminal": t.terminal() }));
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8");
    out.csv("truth.csv", true, &body)?;
    out.json("truth.json", false, "truths", &json!({ "truths": curves }))?;
    Ok(())
}

fn coverage(cfg: &RunConfig, out: &Output) -> Result<()> {
    let sc = cfg.scenario()?;
    let table = run_coverage_experiment(&sc)?;
    out.csv("coverage.csv", true, &table.to_csv()?)?;
    out.json("coverage.json", false, "coverage", &json!({ "scenario": sc, "coverage": table }))?;
    Ok(())
}

// ---------------------------------------------------------------- reports

/// Reports from a bare array, an `estimate` artifact or a `contrast` artifact.
fn load_reports(path: &Path) -> Result<Vec<EstimateReport>> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    let v = v.get("reports").cloned().unwrap_or(v);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: no estimate reports ({})", path.display(), e)))
}

fn emit_curves(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = std::fs::read(path)?;
    let fp = sha256_hex(&text)[..16].to_string();
    let out = Output::new(cfg.out.as_deref(), "emit-curves", fp, cfg.seed());
    out.csv("curves.csv", true, &curves_csv(&load_reports(path)?)?)?;
    Ok(())
}

// ---------------------------------------------------------------- graphs

fn graph(cmd: GraphCommand, cfg: &RunConfig) -> Result<()> {
    let input = match &cmd {
        GraphCommand::Convert { input } | GraphCommand::Dsep { input, .. } | GraphCommand::CheckDcc { input, .. } => input.clone(),
    };
    let text = std::fs::read_to_string(&input)?;
    let g = Dag::from_json(&text)?;
    let fp = sha256_hex(format!("{:?}{}", cmd, text).as_bytes())[..16].to_string();
    match cmd {
        GraphCommand::Convert { .. } => {
            let out = Output::new(cfg.out.as_deref(), "graph convert", fp, cfg.seed());
            let sc = convert_to_strategy_centered(&g)?;
            out.json("graph.json", true, "graph", &sc)?;
        }
        GraphCommand::Dsep { x, y, given, intervene, .. } => {
            let out = Output::new(cfg.out.as_deref(), "graph dsep", fp, cfg.seed());
            let mut fixed = Vec::new();
            for iv in &intervene {
                let (name, val) = iv.split_once('=').ok_or_else(|| Error::Config(format!("intervention `{}` is not NAME=VALUE", iv)))?;
                let val: u8 = val.trim().parse().map_err(|_| Error::Config(format!("intervention value in `{}`", iv)))?;
                fixed.push((g.find_name(name.trim())?, val));
            }
            let swig = build_swig(&g, &fixed)?;
            let adj = swig.adj();
            let lookup = |names: &[String]| -> Result<Vec<usize>> {
                names
                    .iter()
                    .map(|n| adj.names.iter().position(|m| m == n.trim()).ok_or_else(|| Error::Graph(format!("unknown node `{}`", n))))
                    .collect()
            };
            let (xi, yi, zi) = (lookup(&x)?, lookup(&y)?, lookup(&given)?);
            let separated = d_separated(&adj, &xi, &yi, &zi)?;
            let path = open_path(&adj, &xi, &yi, &zi)?.map(|p| p.iter().map(|&i| adj.names[i].clone()).collect::<Vec<_>>());
            out.json("dsep.json", true, "dsep", &json!({ "x": x, "y": y, "given": given, "intervene": intervene, "separated": separated, "open_path": path }))?;
        }
        GraphCommand::CheckDcc { fallback, .. } => {
            let out = Output::new(cfg.out.as_deref(), "graph check-dcc", fp, cfg.seed());
            let block = match fallback {
                BlockArg::D => Block::D,
                BlockArg::Y => Block::Y,
            };
            let partition = DccPartition::from_roles(&g, block);
            let report = if g.is_strategy_centered() { check_dcc(&g, &partition)? } else { check_dcc_treatment_centered(&g, &partition)? };
            let iso = if g.is_strategy_centered() {
                json!({
                    "Z_Y": check_partial_isolation(&g, Component::ZY)?,
                    "Z_D": check_partial_isolation(&g, Component::ZD)?,
                })
            } else {
                serde_json::Value::Null
            };
            out.json("dcc.json", true, "dcc", &json!({ "all_hold": report.all_hold(), "checks": report.checks, "partial_isolation": iso }))?;
        }
    }
    Ok(())
}
