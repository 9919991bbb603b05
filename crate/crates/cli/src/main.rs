use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use geepress::criteria::{self, select, Criterion, SelectOptions};
use geepress::engine::{corrected_residual, one_step_deletion};
use geepress::harness::format_significant;
use geepress::harness::{replicate_report, HarnessOptions, ReportConfig};
use geepress::inference::{wald_test, LinearHypothesis};
use geepress::longcsv::{read_long_csv_path, write_long_csv};
use geepress::simgen::{all_scenarios, cohort_fixture, generate_dataset, LatentSolver, ScenarioSpec};
use geepress::{fit, CorrStructure, Execution, Family, FitOptions, GeeError, GeeFit, LongitudinalDataset, PhiMode, WorkingCorrelation};

const AFTER_HELP: &str = "\
Input CSV: header `id,time,y,<covariates...>`, one row per observation, rows grouped
by id with time strictly increasing. An intercept column is added unless --no-intercept.

Replicate config file: `key = value` lines, `#` starts a comment.
  tables      = 1,5,9                      comma-separated table numbers (1-9, default all)
  scenarios   = binary:balanced:ar1:0.2:50 extra cells, family:balance:truth:alpha:n
  replicates  = 1000
  seed        = 1
  out_dir     = report
  precision   = 6
  jobs        = 0                          worker threads, 0 = all cores

Exit codes: 0 success, 1 input error, 2 numerical failure or non-convergence.";

#[derive(Parser)]
#[command(name = "geepress", version, about = "GEE fitting and working-correlation selection for longitudinal data", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a marginal model and print coefficients with model-based and empirical SEs
    Fit(FitArgs),
    /// Fit several working structures and tabulate all selection criteria
    Select(SelectArgs),
    /// Per-cluster leverage, deletion influence and criterion contributions
    Diagnose(FitArgs),
    /// Write simulated datasets for a scenario cell
    Simulate(SimulateArgs),
    /// Run Monte Carlo scenario cells and write a report bundle
    Replicate(ReplicateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PhiArg {
    Fixed1,
    Estimate,
}

#[derive(Args)]
struct ModelArgs {
    /// Long-format CSV input
    data: PathBuf,
    #[arg(long, default_value = "binary")]
    family: String,
    #[arg(long, value_enum, default_value = "estimate")]
    phi: PhiArg,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Do not add an intercept column
    #[arg(long)]
    no_intercept: bool,
    /// Write output here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Significant digits in printed numbers
    #[arg(long, default_value_t = 6)]
    precision: usize,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "indep")]
    corr: String,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "indep,ar1,exch,un")]
    candidates: String,
    /// Comma-separated criteria or `all`
    #[arg(long, default_value = "all")]
    criteria: String,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// Cell descriptor family:balance:truth:alpha:n
    #[arg(long, required_unless_present_any = ["list_scenarios", "cohort"])]
    scenario: Option<String>,
    /// Write the synthetic cohort with this many subjects instead
    #[arg(long, conflicts_with = "scenario")]
    cohort: Option<usize>,
    /// Number of datasets to write
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, env = "GEEPRESS_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "sim")]
    out_dir: PathBuf,
    /// Print the 48 simulation cells and exit
    #[arg(long)]
    list_scenarios: bool,
}

#[derive(Args)]
struct ReplicateArgs {
    /// Single cell descriptor; overrides the table list
    #[arg(long, conflicts_with = "config")]
    scenario: Option<String>,
    /// Flat key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replicates per cell; 0 validates the configuration and stops
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, env = "GEEPRESS_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    precision: Option<usize>,
    /// Print the 48 simulation cells and exit
    #[arg(long)]
    list_scenarios: bool,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Numerical(String),
}

impl From<GeeError> for Failure {
    fn from(e: GeeError) -> Self {
        match e {
            GeeError::InvalidData(_)
            | GeeError::Config(_)
            | GeeError::Io(_)
            | GeeError::Csv(_)
            | GeeError::InvalidHypothesis(_)
            | GeeError::RangeViolation { .. }
            | GeeError::InvalidMargin(_)
            | GeeError::Parameter { .. }
            | GeeError::IndexOutOfRange { .. } => Failure::Input(e.to_string()),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Select(a) => cmd_select(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Replicate(a) => cmd_replicate(&a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn parse_family(s: &str) -> Result<Family, Failure> {
    Ok(s.parse::<Family>()?)
}

fn parse_list<T: std::str::FromStr<Err = GeeError>>(s: &str) -> Result<Vec<T>, Failure> {
    Ok(s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(T::from_str).collect::<Result<_, _>>()?)
}

impl ModelArgs {
    fn options(&self) -> FitOptions {
        let phi_mode = match self.phi {
            PhiArg::Fixed1 => PhiMode::FixedOne,
            PhiArg::Estimate => PhiMode::Estimate,
        };
        FitOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            phi_mode,
        }
    }

    fn load(&self) -> Result<(LongitudinalDataset, Family), Failure> {
        let family = parse_family(&self.family)?;
        let ds = read_long_csv_path(&self.data, family, !self.no_intercept)?;
        Ok((ds, family))
    }

    fn fmt(&self, x: f64) -> String {
        format_significant(x, self.precision)
    }

    fn writer(&self) -> Result<Box<dyn Write>, Failure> {
        Ok(match &self.out {
            Some(path) => Box::new(io::BufWriter::new(fs::File::create(path)?)),
            None => Box::new(io::stdout().lock()),
        })
    }
}

fn alpha_rows(fit: &GeeFit, fmt: impl Fn(f64) -> String) -> Vec<(String, String)> {
    match &fit.correlation {
        WorkingCorrelation::Independence => Vec::new(),
        WorkingCorrelation::Ar1 { alpha } | WorkingCorrelation::Exchangeable { alpha } => {
            vec![("alpha".into(), fmt(*alpha))]
        }
        WorkingCorrelation::Unstructured { grid, alpha } => {
            let t = grid.times();
            let mut rows = Vec::new();
            for a in 0..t.len() {
                for b in a + 1..t.len() {
                    rows.push((format!("alpha_{}_{}", t[a], t[b]), fmt(alpha[(a, b)])));
                }
            }
            rows
        }
    }
}

fn cmd_fit(args: &FitArgs) -> CmdResult {
    let m = &args.model;
    let (ds, family) = m.load()?;
    let structure: CorrStructure = args.corr.parse()?;
    let f = fit(&ds, family, structure, &m.options())?;
    let model_se = f.model_se();
    let robust_se = f.robust_se();
    let names = ds.covariate_names();

    let mut out = csv::Writer::from_writer(m.writer()?);
    out.write_record(["term", "estimate", "model_se", "empirical_se", "wald_p"])?;
    for j in 0..f.p() {
        let p_value = if f.converged {
            let h = LinearHypothesis::coefficients(&[j], f.p())?;
            m.fmt(wald_test(&f, &h)?.p_value)
        } else {
            String::new()
        };
        out.write_record([names[j].clone(), m.fmt(f.beta[j]), m.fmt(model_se[j]), m.fmt(robust_se[j]), p_value])?;
    }
    let mut raw = out.into_inner().map_err(|e| Failure::Input(e.to_string()))?;
    raw.write_all(b"\n")?;
    let mut out = csv::Writer::from_writer(raw);
    out.write_record(["parameter", "value"])?;
    let mut info = vec![
        ("family".to_string(), family.name().to_string()),
        ("correlation".to_string(), structure.token().to_string()),
    ];
    info.extend(alpha_rows(&f, |x| m.fmt(x)));
    info.extend([
        ("phi".to_string(), m.fmt(f.phi)),
        ("clusters".to_string(), f.n_clusters().to_string()),
        ("observations".to_string(), f.total_obs.to_string()),
        ("converged".to_string(), f.converged.to_string()),
        ("iterations".to_string(), f.iterations.to_string()),
        ("last_step".to_string(), m.fmt(f.last_step)),
    ]);
    for (k, v) in info {
        out.write_record([k, v])?;
    }
    out.flush()?;
    if !f.converged {
        eprintln!("error: fit did not converge after {} iterations", f.iterations);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_select(args: &SelectArgs) -> CmdResult {
    let m = &args.model;
    let (ds, family) = m.load()?;
    let candidates: Vec<CorrStructure> = parse_list(&args.candidates)?;
    let wanted: Vec<Criterion> = if args.criteria.trim().eq_ignore_ascii_case("all") {
        Criterion::ALL.to_vec()
    } else {
        parse_list(&args.criteria)?
    };
    let opts = SelectOptions {
        fit: m.options(),
        allow_unconverged: false,
        execution: Execution::default(),
    };
    let report = geepress::par::with_threads(args.jobs, || select(&ds, family, &candidates, &opts))?;

    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(m.writer()?);
    let mut header = vec!["criterion".to_string()];
    header.extend(candidates.iter().map(|s| s.name().to_string()));
    header.push("winner".to_string());
    out.write_record(&header)?;
    for &c in &wanted {
        let winner = report.winner(c);
        let mut row = vec![c.name().to_string()];
        for &s in &candidates {
            let cell = report
                .outcome(s)
                .and_then(|o| if o.excluded.is_none() { o.values.as_ref() } else { None })
                .map(|v| {
                    let mark = if winner == Some(s) { "*" } else { "" };
                    format!("{}{mark}", m.fmt(c.value(v)))
                })
                .unwrap_or_else(|| "NA".to_string());
            row.push(cell);
        }
        row.push(winner.map(|s| s.name().to_string()).unwrap_or_default());
        out.write_record(&row)?;
    }
    out.flush()?;
    for o in &report.candidates {
        if let Some(reason) = &o.excluded {
            eprintln!("note: {} excluded: {reason}", o.structure);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_diagnose(args: &FitArgs) -> CmdResult {
    let m = &args.model;
    let (ds, family) = m.load()?;
    let structure: CorrStructure = args.corr.parse()?;
    let f = fit(&ds, family, structure, &m.options())?;
    if !f.converged {
        return Err(Failure::Numerical(format!("fit did not converge after {} iterations", f.iterations)));
    }
    let sc = criteria::sc_contributions(&f);
    let gpc = criteria::gpc_contributions(&f)?;

    let mut out = csv::Writer::from_writer(m.writer()?);
    out.write_record(["id", "n", "trace_h", "dbeta_norm", "corrected_resid_norm", "gpc", "sc"])?;
    let (mut tr_sum, mut gpc_sum, mut sc_sum) = (0.0, 0.0, 0.0);
    for (i, c) in f.clusters.iter().enumerate() {
        let tr = c.leverage.trace();
        let dbeta = one_step_deletion(&f, i)?.norm();
        let corrected = corrected_residual(&f, i)?.norm();
        tr_sum += tr;
        gpc_sum += gpc[i];
        sc_sum += sc[i];
        out.write_record([
            c.id.clone(),
            c.y.len().to_string(),
            m.fmt(tr),
            m.fmt(dbeta),
            m.fmt(corrected),
            m.fmt(gpc[i]),
            m.fmt(sc[i]),
        ])?;
    }
    out.write_record([
        "total".to_string(),
        f.total_obs.to_string(),
        m.fmt(tr_sum),
        String::new(),
        String::new(),
        m.fmt(gpc_sum),
        m.fmt(sc_sum),
    ])?;
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn list_scenarios() -> CmdResult {
    let mut out = io::stdout().lock();
    for spec in all_scenarios() {
        writeln!(out, "{}", spec.descriptor())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn file_stem(descriptor: &str) -> String {
    descriptor.replace(':', "_")
}

fn write_dataset(path: &Path, ds: &LongitudinalDataset) -> Result<(), Failure> {
    write_long_csv(ds, io::BufWriter::new(fs::File::create(path)?))?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    if args.list_scenarios {
        return list_scenarios();
    }
    fs::create_dir_all(&args.out_dir)?;
    if let Some(n) = args.cohort {
        let ds = cohort_fixture(n, args.seed)?;
        let path = args.out_dir.join("cohort.csv");
        write_dataset(&path, &ds)?;
        println!("{}", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    let descriptor = args.scenario.as_deref().unwrap_or_default();
    let spec: ScenarioSpec = descriptor.parse()?;
    let spec = spec.with_seed(args.seed).with_replicates(args.reps.max(1));
    spec.validate()?;
    spec.check_feasibility()?;
    let solver = LatentSolver::new();
    for r in 0..args.reps {
        let ds = generate_dataset(&spec, r, &solver)?;
        let path = args.out_dir.join(format!("{}_rep{r}.csv", file_stem(&spec.descriptor())));
        write_dataset(&path, &ds)?;
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_replicate(args: &ReplicateArgs) -> CmdResult {
    if args.list_scenarios {
        return list_scenarios();
    }
    let mut config = match &args.config {
        Some(path) => ReportConfig::from_file(path)?,
        None => ReportConfig::default(),
    };
    if let Some(desc) = &args.scenario {
        let spec: ScenarioSpec = desc.parse()?;
        spec.validate()?;
        spec.check_feasibility()?;
        config.tables.clear();
        config.scenarios = vec![spec];
    }
    if let Some(r) = args.reps {
        config.replicates = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(d) = &args.out_dir {
        config.out_dir = d.clone();
    }
    if let Some(j) = args.jobs {
        config.jobs = j;
    }
    if let Some(p) = args.precision {
        config.precision = p;
    }
    config.validate()?;
    if config.replicates == 0 {
        eprintln!("configuration valid: {} cells; nothing run", config.cells().len());
        return Ok(ExitCode::SUCCESS);
    }
    let bundle = geepress::par::with_threads(config.jobs, || replicate_report(&config, &HarnessOptions::default()))?;
    for f in &bundle.files {
        println!("{}", f.display());
    }
    eprintln!(
        "{} cells, {} of {} reference comparisons outside tolerance",
        bundle.results.len(),
        bundle.deviations,
        bundle.comparisons
    );
    Ok(ExitCode::SUCCESS)
}
