use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gpumux::analytic_model::{knee_from_curve, knee_metric, AnalyticDnn, MemoryTerm};
use gpumux::batch_optimizer::{
    feasibility_region, optimize, write_region, OptimizationProblem, Optimum, DEFAULT_MARGIN_PCT,
};
use gpumux::profiles::{
    builtin_catalog, catalog_lookup, catalog_profiles, knee_curve, knee_from_profile, load_model_configs,
    write_model_configs, ModelConfig, ModelProfile, ProfileSet,
};
use gpumux::schedulers::{
    closed_loop, dstack_schedule, ideal_compare, session_len, static_spatial, temporal_schedule, wmax_min,
    DstackOptions, FillCandidate, IdealInstance, SessionSchedule, DEFAULT_SCOREBOARD_WINDOW, DEFAULT_SLOT_US,
};
use gpumux::simulator::{run_many, Scenario, SimMetrics};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{context}{source}")]
    Core { context: String, source: gpumux::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 4,
            CliError::Core { source, .. } => match source {
                gpumux::Error::Oversubscribed(_) => 2,
                gpumux::Error::GuardExceeded { .. } => 3,
                gpumux::Error::Io(_) => 4,
                _ => 1,
            },
        }
    }
}

impl From<gpumux::Error> for CliError {
    fn from(source: gpumux::Error) -> Self {
        CliError::Core {
            context: String::new(),
            source,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn in_file(path: &Path) -> impl FnOnce(gpumux::Error) -> CliError + '_ {
    move |source| CliError::Core {
        context: format!("{}: ", path.display()),
        source,
    }
}

#[derive(Parser)]
#[command(
    name = "gpumux",
    version,
    about = "Spatio-temporal GPU multiplexing: knees, optimization, schedules and simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Knee analysis from the analytic model or a profile CSV.
    Knee(KneeArgs),
    /// Efficacy-maximizing (GPU%, batch) for one model.
    Optimize(OptimizeArgs),
    /// Build one session schedule.
    Schedule(ScheduleArgs),
    /// Run scenario files through the simulator.
    Simulate(SimulateArgs),
    /// Compare schedulers against the exhaustive kernel-level oracle.
    IdealCompare(IdealArgs),
    /// Export the built-in model catalog.
    Catalog(CatalogArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MemMode {
    Verbatim,
    Bandwidth,
    Off,
}

#[derive(Args)]
struct KneeArgs {
    /// Profile CSV (`model,gpu_pct,batch,latency_ms`); omit for the analytic model.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Restrict a profile to one model.
    #[arg(long)]
    model: Option<String>,
    /// First-kernel parallelism values for the analytic model.
    #[arg(long, value_delimiter = ',', default_values_t = [20u64, 40, 60])]
    n1: Vec<u64>,
    #[arg(long, default_value_t = 50)]
    k_max: usize,
    #[arg(long, default_value_t = 40.0)]
    t_p: f64,
    #[arg(long, default_value_t = 10.0)]
    t_np: f64,
    /// Largest SM count scanned.
    #[arg(long, default_value_t = 100)]
    max_sms: u64,
    /// Batches to analyse; all profile batches (or 1) when omitted.
    #[arg(long, value_delimiter = ',')]
    batch: Vec<u32>,
    #[arg(long, value_enum, default_value_t = MemMode::Off)]
    mem_mode: MemMode,
    /// Bytes fetched by every kernel when the memory term is on.
    #[arg(long, default_value_t = 0.0)]
    data_bytes: f64,
    #[arg(long, default_value_t = 1.0)]
    bw_per_sm: f64,
    /// Output directory; the report goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    slo_ms: f64,
    /// Requests per second.
    #[arg(long)]
    rate: f64,
    /// Over-provisioning added to the optimal GPU%.
    #[arg(long, default_value_t = DEFAULT_MARGIN_PCT)]
    margin: u32,
    /// Also writes the feasibility region here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SchedulerArg {
    Dstack,
    Temporal,
    StaticSpatial,
    WmaxMin,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Model CSV (`name,knee_pct,slo_ms,batch,runtime_ms`).
    #[arg(long, conflicts_with = "catalog")]
    models: Option<PathBuf>,
    /// Catalog model names.
    #[arg(long, value_delimiter = ',')]
    catalog: Vec<String>,
    #[arg(long, value_enum, default_value_t = SchedulerArg::Dstack)]
    scheduler: SchedulerArg,
    #[arg(long, default_value_t = DEFAULT_SLOT_US)]
    slot_us: u32,
    /// Profiles for below-knee retries.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Repeat the plan with dynamic fill for this many sessions.
    #[arg(long)]
    fill_sessions: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON files.
    #[arg(long, required = true, num_args = 1..)]
    scenario: Vec<PathBuf>,
    /// Seed applied to every scenario.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    slot_us: Option<u32>,
    /// Worker threads for several scenarios.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IdealArgs {
    /// Instance JSON (`models`, `horizon_ms`, optional `slot_us` and `kernels`).
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    slot_us: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CatalogArgs {
    /// Export synthetic latency profiles instead of the model table.
    #[arg(long)]
    profiles: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Knee(a) => knee(a),
        Command::Optimize(a) => optimize_cmd(a),
        Command::Schedule(a) => schedule(a),
        Command::Simulate(a) => simulate(a),
        Command::IdealCompare(a) => ideal(a),
        Command::Catalog(a) => catalog(a),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Sink for one named output: a file under `out`, or stdout.
fn sink(out: &Option<PathBuf>, name: &str) -> Result<Box<dyn Write>> {
    match out {
        None => Ok(Box::new(io::stdout().lock())),
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| CliError::Io {
                path: dir.clone(),
                source,
            })?;
            let path = dir.join(name);
            let f = File::create(&path).map_err(|source| CliError::Io { path, source })?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

fn load_profiles(path: &Path) -> Result<ProfileSet> {
    ProfileSet::load(open(path)?).map_err(in_file(path))
}

fn pick_profile(set: ProfileSet, model: Option<&str>, path: &Path) -> Result<ModelProfile> {
    match model {
        Some(m) => set
            .get(m)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("{}: no model `{m}`", path.display()))),
        None if set.len() == 1 => Ok(set.iter().next().expect("one profile").clone()),
        None => Err(CliError::Usage(format!(
            "{} holds {} models; pick one with --model",
            path.display(),
            set.len()
        ))),
    }
}

fn csv_writer(w: Box<dyn Write>) -> csv::Writer<Box<dyn Write>> {
    csv::Writer::from_writer(w)
}

fn csv_err(e: csv::Error) -> CliError {
    gpumux::Error::from(e).into()
}

fn knee(a: KneeArgs) -> Result<()> {
    let profiles: Option<Vec<ModelProfile>> = match &a.profile {
        Some(path) => {
            let set = load_profiles(path)?;
            Some(match &a.model {
                Some(_) => vec![pick_profile(set, a.model.as_deref(), path)?],
                None => set.iter().cloned().collect(),
            })
        }
        None => None,
    };
    let mut w = csv_writer(sink(&a.out, "knee.csv")?);
    w.write_record(["source", "batch", "alloc", "latency", "metric", "is_knee"])
        .map_err(csv_err)?;
    match profiles {
        Some(profiles) => {
            for p in &profiles {
                let batches = if a.batch.is_empty() {
                    p.batches().to_vec()
                } else {
                    a.batch.clone()
                };
                for b in batches {
                    let k = knee_from_profile(p, b)?;
                    for (g, metric) in knee_curve(p, b)? {
                        let l = p.latency(g as f64, b)?;
                        w.write_record([
                            p.name().to_string(),
                            b.to_string(),
                            g.to_string(),
                            l.to_string(),
                            metric.to_string(),
                            (g == k).to_string(),
                        ])
                        .map_err(csv_err)?;
                    }
                }
            }
        }
        None => {
            let memory = match a.mem_mode {
                MemMode::Off => MemoryTerm::Off,
                MemMode::Verbatim => MemoryTerm::Verbatim { bw_per_sm: a.bw_per_sm },
                MemMode::Bandwidth => MemoryTerm::BandwidthScaling { bw_per_sm: a.bw_per_sm },
            };
            let batches = if a.batch.is_empty() { vec![1] } else { a.batch.clone() };
            for &n1 in &a.n1 {
                let dnn = AnalyticDnn::new(
                    a.k_max,
                    n1,
                    a.t_p,
                    a.t_np,
                    vec![1; a.k_max],
                    vec![a.data_bytes; a.k_max],
                    memory,
                )?;
                for &b in &batches {
                    let curve = dnn.latency_curve(b as u64, a.max_sms)?;
                    let k = knee_from_curve(&curve)?;
                    for (i, &l) in curve.iter().enumerate() {
                        let s = i + 1;
                        w.write_record([
                            format!("n1={n1}"),
                            b.to_string(),
                            s.to_string(),
                            l.to_string(),
                            knee_metric(l, s as f64).to_string(),
                            (s == k).to_string(),
                        ])
                        .map_err(csv_err)?;
                    }
                    if a.out.is_some() {
                        println!("n1={n1} batch={b} knee={k} SMs");
                    }
                }
            }
        }
    }
    w.flush().map_err(|source| CliError::Io {
        path: a.out.clone().unwrap_or_default(),
        source,
    })?;
    Ok(())
}

fn optimize_cmd(a: OptimizeArgs) -> Result<()> {
    let profile = pick_profile(load_profiles(&a.profile)?, a.model.as_deref(), &a.profile)?;
    let name = profile.name().to_string();
    let problem = OptimizationProblem::new(profile, a.slo_ms, a.rate)?;
    if let Some(dir) = &a.out {
        write_region(sink(&Some(dir.clone()), "region.csv")?, &feasibility_region(&problem))?;
    }
    let mut w = csv_writer(sink(&a.out, "optimum.csv")?);
    w.write_record([
        "model",
        "feasible",
        "gpu_pct",
        "batch",
        "latency_ms",
        "throughput",
        "efficacy",
        "provisioned_pct",
    ])
    .map_err(csv_err)?;
    match optimize(&problem, a.margin) {
        Optimum::Found { point, provisioned_pct } => w.write_record([
            name,
            "true".into(),
            point.gpu_pct.to_string(),
            point.batch.to_string(),
            point.latency_ms.to_string(),
            point.throughput.to_string(),
            point.efficacy.to_string(),
            provisioned_pct.to_string(),
        ]),
        Optimum::Infeasible { .. } => w.write_record([name.as_str(), "false", "", "", "", "", "", ""]),
    }
    .map_err(csv_err)?;
    w.flush().map_err(|source| CliError::Io {
        path: a.out.clone().unwrap_or_default(),
        source,
    })?;
    Ok(())
}

fn schedule_models(a: &ScheduleArgs) -> Result<Vec<ModelConfig>> {
    if let Some(path) = &a.models {
        return load_model_configs(open(path)?).map_err(in_file(path));
    }
    if a.catalog.is_empty() {
        return Err(CliError::Usage("give --models <csv> or --catalog <names>".into()));
    }
    a.catalog
        .iter()
        .map(|n| catalog_lookup(n).ok_or_else(|| gpumux::Error::UnknownModel(n.clone()).into()))
        .collect()
}

fn write_schedule(out: &Option<PathBuf>, s: &SessionSchedule) -> Result<()> {
    s.write_runs_csv(sink(out, "runs.csv")?)?;
    if out.is_some() {
        s.timeline.write_csv(sink(out, "timeline.csv")?)?;
    }
    Ok(())
}

fn schedule(a: ScheduleArgs) -> Result<()> {
    let models = schedule_models(&a)?;
    let profiles = a.profile.as_deref().map(load_profiles).transpose()?;
    let mut w = csv_writer(sink(&a.out, "summary.csv")?);
    match a.scheduler {
        SchedulerArg::StaticSpatial | SchedulerArg::WmaxMin => {
            let knees: Vec<f64> = models.iter().map(|m| m.knee_pct).collect();
            let alloc = if a.scheduler == SchedulerArg::WmaxMin {
                wmax_min(&knees, 100.0)?
            } else {
                static_spatial(&knees)
            };
            w.write_record(["model", "gpu_pct"]).map_err(csv_err)?;
            for (m, p) in models.iter().zip(alloc) {
                w.write_record([m.name.clone(), p.to_string()]).map_err(csv_err)?;
            }
        }
        SchedulerArg::Temporal | SchedulerArg::Dstack => {
            let plan = if a.scheduler == SchedulerArg::Temporal {
                temporal_schedule(&models, session_len(&models), a.slot_us)
            } else {
                let opts = DstackOptions {
                    slot_us: a.slot_us,
                    profiles: profiles.as_ref(),
                    ..DstackOptions::default()
                };
                dstack_schedule(&models, &opts)?.into_result()?
            };
            w.write_record(["metric", "value"]).map_err(csv_err)?;
            w.write_record(["session_ms", &plan.session_len_ms.to_string()])
                .map_err(csv_err)?;
            w.write_record(["utilization", &plan.utilization().to_string()])
                .map_err(csv_err)?;
            if let Some(k) = a.fill_sessions.filter(|_| a.scheduler == SchedulerArg::Dstack) {
                let cands: Vec<FillCandidate> = models.iter().map(FillCandidate::from_config).collect();
                let cl = closed_loop(&plan, &cands, k, DEFAULT_SCOREBOARD_WINDOW);
                w.write_record(["fill_utilization", &cl.utilization().to_string()])
                    .map_err(csv_err)?;
                w.write_record(["fill_throughput", &cl.throughput().to_string()])
                    .map_err(csv_err)?;
            }
            w.flush().map_err(|source| CliError::Io {
                path: a.out.clone().unwrap_or_default(),
                source,
            })?;
            drop(w);
            if a.out.is_some() {
                write_schedule(&a.out, &plan)?;
            }
            return Ok(());
        }
    }
    w.flush().map_err(|source| CliError::Io {
        path: a.out.clone().unwrap_or_default(),
        source,
    })?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into())
}

fn write_metrics(out: &Option<PathBuf>, name: &str, m: &SimMetrics) -> Result<()> {
    m.write_csv(sink(out, &format!("{name}_metrics.csv"))?)?;
    if out.is_some() {
        m.write_utilization_csv(sink(out, &format!("{name}_utilization.csv"))?)?;
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut scenarios = Vec::with_capacity(a.scenario.len());
    for path in &a.scenario {
        if !path.exists() {
            return Err(CliError::Io {
                path: path.clone(),
                source: io::Error::new(io::ErrorKind::NotFound, "no such file"),
            });
        }
        let mut sc = Scenario::load(path).map_err(in_file(path))?;
        sc.seed = a.seed;
        if let Some(s) = a.slot_us {
            sc.slot_us = s;
        }
        scenarios.push(sc);
    }
    let results = run_many(&scenarios, a.jobs);
    let mut first_err = None;
    for (path, r) in a.scenario.iter().zip(results) {
        match r {
            Ok(m) => {
                write_metrics(&a.out, &stem(path), &m)?;
                if a.out.is_some() {
                    println!(
                        "{}: throughput {:.1} req/s, miss fraction {:.4}, utilization {:.1}%",
                        stem(path),
                        m.total_throughput(),
                        m.miss_fraction(),
                        m.mean_utilization()
                    );
                }
            }
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                first_err.get_or_insert(in_file(path)(e));
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn ideal(a: IdealArgs) -> Result<()> {
    let text = fs::read_to_string(&a.scenario).map_err(|source| CliError::Io {
        path: a.scenario.clone(),
        source,
    })?;
    let mut inst: IdealInstance = serde_json::from_str(&text).map_err(|e| in_file(&a.scenario)(e.into()))?;
    if let Some(s) = a.slot_us {
        inst.slot_us = s;
    }
    let rows = ideal_compare(&inst)?;
    let ideal_thr = rows
        .iter()
        .find(|r| r.scheduler == "ideal")
        .map_or(0.0, |r| r.throughput);
    let mut w = csv_writer(sink(&a.out, "ideal_compare.csv")?);
    w.write_record(["scheduler", "utilization", "throughput", "throughput_vs_ideal"])
        .map_err(csv_err)?;
    for r in &rows {
        let ratio = if ideal_thr > 0.0 { r.throughput / ideal_thr } else { 0.0 };
        w.write_record([
            r.scheduler.clone(),
            r.utilization.to_string(),
            r.throughput.to_string(),
            ratio.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: a.out.clone().unwrap_or_default(),
        source,
    })?;
    Ok(())
}

fn catalog(a: CatalogArgs) -> Result<()> {
    if a.profiles {
        catalog_profiles().write(sink(&a.out, "profiles.csv")?)?;
    } else {
        write_model_configs(sink(&a.out, "catalog.csv")?, &builtin_catalog())?;
    }
    Ok(())
}
