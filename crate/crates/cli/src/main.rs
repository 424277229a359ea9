//! `agesched` command-line front-end.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use agesched_core::analytics::{analyze, stability_report, DEFAULT_STABILITY_MARGIN};
use agesched_core::config::ConfigFile;
use agesched_core::experiments::{
    policy_schedule, run_sweep, simulate_policy, write_sweep_csv, Policy, SweepAxis, SweepSettings,
};
use agesched_core::model::{sample_class_sizes, JobClass, ParetoSpec};
use agesched_core::online::{
    ingest_trace, offline_reference, online_driver, read_class_map, synthetic_trace,
    write_trace_csv, ClassMap, OnlineSettings, TraceRecord,
};
use agesched_core::optimizer::{optimize_pps, read_schedule_csv, write_schedule_csv, OptimizerSettings, PcaMode};
use agesched_core::scenarios::{desk_compute_sizes, desk_config_file, desk_output_sizes, run_two_policy_example};
use agesched_core::simulator::{write_event_log, ServiceMode, SimConfig};
use agesched_core::{MomentMode, NetworkDiscipline, SystemConfig};

use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "agesched", version, about = "Age-of-information and completion-time scheduling experiments")]
struct Cli {
    /// Seed for size draws, optimizer restarts and simulation streams.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the config's second-moment formula.
    #[arg(long, global = true, value_enum)]
    moment_mode: Option<MomentArg>,
    /// Stability margin: every traffic intensity is kept at or below 1 - margin.
    #[arg(long, global = true, default_value_t = DEFAULT_STABILITY_MARGIN)]
    margin: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum MomentArg {
    Exact,
    PaperLiteral,
}

impl From<MomentArg> for MomentMode {
    fn from(m: MomentArg) -> Self {
        match m {
            MomentArg::Exact => MomentMode::Exact,
            MomentArg::PaperLiteral => MomentMode::PaperLiteral,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum PcaArg {
    PaperLiteral,
    InverseTime,
}

impl From<PcaArg> for PcaMode {
    fn from(m: PcaArg) -> Self {
        match m {
            PcaArg::PaperLiteral => PcaMode::PaperLiteral,
            PcaArg::InverseTime => PcaMode::InverseTime,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize the schedule and write the convergence trace.
    Optimize {
        #[command(flatten)]
        input: ConfigArgs,
        #[command(flatten)]
        opt: OptArgs,
    },
    /// Simulate a policy or a schedule file.
    Simulate {
        #[command(flatten)]
        input: ConfigArgs,
        #[command(flatten)]
        opt: OptArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Policy whose schedule and networking order are simulated.
        #[arg(long, value_parser = parse_policy, conflicts_with = "schedule")]
        policy: Option<Policy>,
        /// Schedule CSV (`class,vm_1,...`), simulated with WSEPT networking.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "paper-literal")]
        pca_mode: PcaArg,
        /// Also write the per-job event log of the first replication.
        #[arg(long)]
        events: bool,
    },
    /// Evaluate all four policies across a parameter axis.
    Sweep {
        #[command(flatten)]
        input: ConfigArgs,
        #[command(flatten)]
        opt: OptArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        /// Explicit comma-separated points; overrides --from/--to/--step.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        /// Simulate every policy at every point as well.
        #[arg(long)]
        simulate: bool,
        #[arg(long, value_enum, default_value = "paper-literal")]
        pca_mode: PcaArg,
    },
    /// Replay a trace with per-window re-optimization.
    Online {
        #[command(flatten)]
        input: ConfigArgs,
        #[command(flatten)]
        opt: OptArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Trace CSV with header `timestamp_ms,key`.
        #[arg(long, conflicts_with = "synthetic")]
        trace: Option<PathBuf>,
        /// Generate a Poisson trace of this many ms from the config's rates.
        #[arg(long)]
        synthetic: Option<f64>,
        /// `key,class` mapping file; rank bucketing is used without it.
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Window length in ms.
        #[arg(long)]
        window: Option<f64>,
        /// Number of classes for rank bucketing; defaults to the config's.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Replay the deterministic two-policy example.
    ExampleFig3,
}

#[derive(Debug, Args, Serialize)]
struct ConfigArgs {
    /// TOML experiment file; the built-in desk-scale experiment when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's tradeoff factor.
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct OptArgs {
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    rel_tol: f64,
    #[arg(long, default_value_t = 0.1)]
    initial_step: f64,
    /// Seeded random starting schedules in addition to the fixed ones.
    #[arg(long, default_value_t = 2)]
    restarts: usize,
    /// Use central finite differences for the gradient.
    #[arg(long)]
    fd_gradient: bool,
}

#[derive(Debug, Args, Serialize)]
struct SimArgs {
    /// Simulated time per replication in ms.
    #[arg(long, default_value_t = 1e6)]
    horizon: f64,
    #[arg(long, default_value_t = 0.2)]
    warmup: f64,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Use each service time's shift only.
    #[arg(long)]
    deterministic: bool,
    /// Simulate per-class update processes for the staleness term.
    #[arg(long)]
    updates: bool,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: agesched_core::Error| e.to_string())
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: agesched_core::Error| e.to_string())
}

/// Error caused by the invocation rather than by the program.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UserError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<agesched_core::Error>() {
            return if e.is_user_error() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    manifest: RunManifest,
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cli.out_dir.join(name)
    }

    fn create(&self, name: &str) -> anyhow::Result<fs::File> {
        let path = self.out(name);
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))
    }

    fn write_report(mut self, name: &str, body: serde_json::Value) -> anyhow::Result<()> {
        self.manifest.finish();
        let mut doc = json!({ "manifest": self.manifest });
        if let (Some(doc), serde_json::Value::Object(body)) = (doc.as_object_mut(), body) {
            doc.extend(body);
        }
        let path = self.out(name);
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&cli.margin) {
        return Err(user(format!("--margin {} must lie in [0, 1)", cli.margin)));
    }
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match &cli.command {
        Command::Optimize { input, opt } => cmd_optimize(cli, input, opt),
        Command::Simulate {
            input,
            opt,
            sim,
            policy,
            schedule,
            pca_mode,
            events,
        } => cmd_simulate(cli, input, opt, sim, *policy, schedule.as_deref(), *pca_mode, *events),
        Command::Sweep {
            input,
            opt,
            sim,
            axis,
            values,
            from,
            to,
            step,
            simulate,
            pca_mode,
        } => {
            let points = sweep_values(values, *from, *to, *step)?;
            cmd_sweep(cli, input, opt, sim, *axis, &points, *simulate, *pca_mode)
        }
        Command::Online {
            input,
            opt,
            sim,
            trace,
            synthetic,
            mapping,
            window,
            classes,
        } => cmd_online(cli, input, opt, sim, trace.as_deref(), *synthetic, mapping.as_deref(), *window, *classes),
        Command::ExampleFig3 => cmd_two_policy(cli),
    }
}

/// Loads the experiment file (or the desk default) and applies overrides.
fn load_config(cli: &Cli, input: &ConfigArgs) -> anyhow::Result<(ConfigFile, SystemConfig)> {
    let mut file = match &input.config {
        Some(path) => {
            if !path.is_file() {
                return Err(user(format!("config file {} not found", path.display())));
            }
            ConfigFile::load(path)?
        }
        None => desk_config_file(cli.seed),
    };
    if let Some(theta) = input.theta {
        file.theta = theta;
    }
    if let Some(mode) = cli.moment_mode {
        file.moment_mode = mode.into();
    }
    let cfg = file.resolve()?;
    Ok((file, cfg))
}

fn optimizer_settings(cli: &Cli, opt: &OptArgs) -> anyhow::Result<OptimizerSettings> {
    let settings = OptimizerSettings {
        max_iters: opt.max_iters,
        rel_tol: opt.rel_tol,
        initial_step: opt.initial_step,
        stability_margin: cli.margin,
        seed: cli.seed,
        finite_difference_gradient: opt.fd_gradient,
        random_restarts: opt.restarts,
        ..OptimizerSettings::default()
    };
    settings.validate()?;
    Ok(settings)
}

fn sim_config(cli: &Cli, sim: &SimArgs) -> anyhow::Result<SimConfig> {
    let cfg = SimConfig {
        horizon: sim.horizon,
        warmup_fraction: sim.warmup,
        replications: sim.reps,
        seed: cli.seed,
        service_mode: if sim.deterministic {
            ServiceMode::Deterministic
        } else {
            ServiceMode::ShiftedExponential
        },
        simulate_updates: sim.updates,
        ..SimConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn sweep_values(values: &[f64], from: Option<f64>, to: Option<f64>, step: Option<f64>) -> anyhow::Result<Vec<f64>> {
    if !values.is_empty() {
        return Ok(values.to_vec());
    }
    let (Some(from), Some(to), Some(step)) = (from, to, step) else {
        return Err(user("give --values or all of --from, --to, --step"));
    };
    if !(step > 0.0) || to < from {
        return Err(user("need --step > 0 and --to >= --from"));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| from + k as f64 * step).collect())
}

fn cmd_optimize(cli: &Cli, input: &ConfigArgs, opt: &OptArgs) -> anyhow::Result<()> {
    let (file, cfg) = load_config(cli, input)?;
    let settings = optimizer_settings(cli, opt)?;
    let ctx = Ctx {
        cli,
        manifest: RunManifest::new("optimize", cli.seed, Some(&file), json!({ "config": input, "optimizer": settings })),
    };
    let trace = optimize_pps(&cfg, &settings)?;
    trace.write_csv(ctx.create("convergence.csv")?)?;
    write_schedule_csv(&trace.schedule, ctx.create("schedule.csv")?)?;
    let report = analyze(&trace.schedule, &cfg, NetworkDiscipline::PriorityWsept)?;
    report.write_csv(ctx.create("analytic.csv")?)?;
    println!(
        "objective {:.6} after {} iterations (converged: {})",
        trace.final_objective(),
        trace.iterations,
        trace.converged
    );
    ctx.write_report(
        "optimize.json",
        json!({
            "iterations": trace.iterations,
            "converged": trace.converged,
            "final_objective": trace.final_objective(),
            "stability": stability_report(&trace.schedule, &cfg, cli.margin),
            "report": report,
        }),
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    cli: &Cli,
    input: &ConfigArgs,
    opt: &OptArgs,
    sim: &SimArgs,
    policy: Option<Policy>,
    schedule: Option<&Path>,
    pca_mode: PcaArg,
    events: bool,
) -> anyhow::Result<()> {
    let (file, cfg) = load_config(cli, input)?;
    let settings = optimizer_settings(cli, opt)?;
    let mut sim_cfg = sim_config(cli, sim)?;
    sim_cfg.record_events = events;
    let ctx = Ctx {
        cli,
        manifest: RunManifest::new(
            "simulate",
            cli.seed,
            Some(&file),
            json!({
                "config": input,
                "optimizer": settings,
                "sim": sim_cfg,
                "policy": policy.map(Policy::name),
                "schedule": schedule,
                "pca_mode": pca_mode,
            }),
        ),
    };
    let (policy, p) = match (policy, schedule) {
        (_, Some(path)) => {
            let f = fs::File::open(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
            (Policy::Pps, read_schedule_csv(f)?)
        }
        (Some(policy), None) => (policy, policy_schedule(&cfg, policy, &settings, pca_mode.into())?),
        (None, None) => return Err(user("give --policy or --schedule")),
    };
    if p.rows() != cfg.num_classes() || p.cols() != cfg.num_vms() {
        return Err(user(format!(
            "schedule is {}x{}, config has {} classes and {} VMs",
            p.rows(),
            p.cols(),
            cfg.num_classes(),
            cfg.num_vms()
        )));
    }
    let result = simulate_policy(&cfg, policy, &p, &sim_cfg)?;
    result.write_csv(ctx.create("sim.csv")?)?;
    write_schedule_csv(&p, ctx.create("schedule.csv")?)?;
    if let Some(records) = &result.records {
        write_event_log(records, ctx.create("events.csv")?)?;
    }
    let analytic = analyze(&p, &cfg, policy.discipline()).ok();
    let label = if schedule.is_some() { "schedule" } else { policy.name() };
    println!(
        "{}: empirical objective {:.6} +/- {:.6}{}",
        label,
        result.objective.mean,
        result.objective.hw(),
        if result.unstable { " (backlog growing)" } else { "" }
    );
    ctx.write_report(
        "simulate.json",
        json!({ "policy": label, "result": result, "analytic": analytic }),
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    cli: &Cli,
    input: &ConfigArgs,
    opt: &OptArgs,
    sim: &SimArgs,
    axis: SweepAxis,
    points: &[f64],
    simulate: bool,
    pca_mode: PcaArg,
) -> anyhow::Result<()> {
    let (file, cfg) = load_config(cli, input)?;
    let settings = SweepSettings {
        optimizer: optimizer_settings(cli, opt)?,
        pca_mode: pca_mode.into(),
        sim: if simulate { Some(sim_config(cli, sim)?) } else { None },
    };
    let ctx = Ctx {
        cli,
        manifest: RunManifest::new(
            "sweep",
            cli.seed,
            Some(&file),
            json!({ "config": input, "axis": axis.name(), "points": points, "sweep": settings }),
        ),
    };
    let rows = run_sweep(&cfg, axis, points, &settings)?;
    write_sweep_csv(&rows, ctx.create("sweep.csv")?)?;
    let flagged: Vec<_> = rows.iter().filter(|r| !r.feasible).map(|r| (r.value, r.note.clone())).collect();
    for (value, note) in &flagged {
        println!("point {value} skipped: {note}");
    }
    println!("{} rows over {} points", rows.len(), points.len());
    ctx.write_report("sweep.json", json!({ "rows": rows.len(), "infeasible_points": flagged }))
}

/// Template for trace replay. A trace bucketed into a different number of
/// classes than the config gets fresh classes whose sizes are drawn in rank
/// order from the config's size distributions.
fn online_template(file: &ConfigFile, cfg: &SystemConfig, classes: usize, seed: u64) -> anyhow::Result<SystemConfig> {
    if classes == cfg.num_classes() {
        return Ok(cfg.clone());
    }
    let d_spec: ParetoSpec = file.pareto.unwrap_or_else(desk_compute_sizes);
    let e_spec: ParetoSpec = file.pareto_output.or(file.pareto).unwrap_or_else(desk_output_sizes);
    let d = sample_class_sizes(&d_spec, classes, seed)?;
    let e = sample_class_sizes(&e_spec, classes, seed ^ agesched_core::config::OUTPUT_SIZE_SEED_SALT)?;
    let mut template = cfg.clone();
    template.classes = (0..classes).map(|j| JobClass::new(j + 1, 1.0, d[j], e[j])).collect();
    Ok(template)
}

#[allow(clippy::too_many_arguments)]
fn cmd_online(
    cli: &Cli,
    input: &ConfigArgs,
    opt: &OptArgs,
    sim: &SimArgs,
    trace: Option<&Path>,
    synthetic: Option<f64>,
    mapping: Option<&Path>,
    window: Option<f64>,
    classes: Option<usize>,
) -> anyhow::Result<()> {
    let (file, cfg) = load_config(cli, input)?;
    let settings = OnlineSettings {
        window_length: window,
        optimizer: optimizer_settings(cli, opt)?,
        sim: sim_config(cli, sim)?,
    };
    let j_count = classes.unwrap_or(cfg.num_classes());
    if j_count == 0 {
        return Err(user("--classes must be positive"));
    }

    let (records, template, truth, class_mapping): (Vec<TraceRecord>, SystemConfig, Option<SystemConfig>, &str) =
        match (trace, synthetic) {
            (Some(path), _) => {
                if !path.is_file() {
                    return Err(user(format!("trace file {} not found", path.display())));
                }
                let (map, how) = match mapping {
                    Some(m) => {
                        if !m.is_file() {
                            return Err(user(format!("mapping file {} not found", m.display())));
                        }
                        (ClassMap::Explicit(read_class_map(m)?), "explicit mapping file")
                    }
                    None => (ClassMap::RankBucketing { classes: j_count }, "frequency-rank bucketing"),
                };
                let records = ingest_trace(path, &map)?;
                let template = online_template(&file, &cfg, j_count, cli.seed)?;
                (records, template, None, how)
            }
            (None, Some(duration)) => {
                if !(duration > 0.0) {
                    return Err(user("--synthetic duration must be positive"));
                }
                let records = synthetic_trace(&cfg, duration, cli.seed);
                (records, cfg.clone(), Some(cfg.clone()), "synthetic keys")
            }
            (None, None) => return Err(user("give --trace or --synthetic")),
        };

    let ctx = Ctx {
        cli,
        manifest: RunManifest::new(
            "online",
            cli.seed,
            Some(&file),
            json!({
                "config": input,
                "trace": trace,
                "synthetic_ms": synthetic,
                "mapping": mapping,
                "class_mapping": class_mapping,
                "classes": template.num_classes(),
                "online": settings,
            }),
        ),
    };
    if synthetic.is_some() {
        write_trace_csv(&records, ctx.create("trace.csv")?)?;
    }
    let online = online_driver(&records, &template, &settings)?;
    online.write_windows_csv(ctx.create("windows.csv")?)?;
    let sched_dir = ctx.out("schedules");
    fs::create_dir_all(&sched_dir)?;
    for w in &online.windows {
        let path = sched_dir.join(format!("window_{}.csv", w.index));
        write_schedule_csv(&w.schedule, fs::File::create(&path)?)?;
    }
    let fallbacks = online.windows.iter().filter(|w| w.fallback).count();

    let offline = match &truth {
        Some(truth) => {
            let (schedule, result) = offline_reference(&records, truth, &settings, online.window_length)?;
            write_schedule_csv(&schedule, ctx.create("offline_schedule.csv")?)?;
            Some(result)
        }
        None => None,
    };
    let gap = offline
        .as_ref()
        .map(|off| (online.sim.objective.mean - off.objective.mean) / off.objective.mean);
    println!(
        "{} windows of {} ms, online objective {:.6}{}",
        online.windows.len(),
        online.window_length,
        online.sim.objective.mean,
        gap.map(|g| format!(", relative gap to offline {:+.4}", g)).unwrap_or_default()
    );
    ctx.write_report(
        "online.json",
        json!({
            "window_length": online.window_length,
            "windows": online.windows.len(),
            "fallback_windows": fallbacks,
            "online": online.sim,
            "offline": offline,
            "relative_gap": gap,
        }),
    )
}

fn cmd_two_policy(cli: &Cli) -> anyhow::Result<()> {
    let outcomes = run_two_policy_example()?;
    let ctx = Ctx {
        cli,
        manifest: RunManifest::new("example-fig3", cli.seed, None, json!({ "discipline": "fcfs" })),
    };
    let mut w = csv::Writer::from_writer(ctx.create("two_policy.csv")?);
    w.write_record(["policy", "job", "completion", "age"])?;
    for o in &outcomes {
        for j in 0..3 {
            w.write_record(&[
                o.policy.to_string(),
                (j + 1).to_string(),
                o.completions[j].to_string(),
                o.ages[j].to_string(),
            ])?;
        }
        println!(
            "policy {}: weighted age {:.3}, weighted completion {:.3}",
            o.policy, o.weighted_age, o.weighted_completion
        );
    }
    w.flush()?;
    if outcomes.len() != 2 {
        bail!("expected two policies");
    }
    ctx.write_report("two_policy.json", json!({ "policies": outcomes }))
}
