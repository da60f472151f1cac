mod grid;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qi_core::illumination_sim::{run_protocol, write_simulation_csv, Cutoffs, ErrorReport, FitMethod, ProtocolConfig};
use qi_core::qfi_engine::{gain_curves, qfi_for_spec, write_qfi_csv, CutoffPolicy, QfiReport};
use qi_core::state_models::StateSpec;
use qi_core::validation::{run_suite, Suite};
use qi_core::Error;

use grid::Grid;

/// Quantum illumination by reflectivity estimation: QFI, gain curves and
/// Monte Carlo error exponents.
#[derive(Parser, Debug)]
#[command(name = "qi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// QFI of one transmitter with its bounds and gain over the coherent state.
    Qfi(QfiArgs),
    /// Gain H/H_C over a photon-number grid for several families.
    Curves(CurvesArgs),
    /// Monte Carlo simulation of the threshold test.
    Simulate(SimulateArgs),
    /// Run the validation suite.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct CutoffArgs {
    /// Fixed signal cutoff.
    #[arg(long, conflicts_with = "rel_tol")]
    cutoff: Option<usize>,
    /// Relative tolerance for automatic cutoff doubling.
    #[arg(long)]
    rel_tol: Option<f64>,
}

impl CutoffArgs {
    fn policy(&self) -> Result<CutoffPolicy, Error> {
        match (self.cutoff, self.rel_tol) {
            (Some(cutoff), _) => Ok(CutoffPolicy::Fixed { cutoff }),
            (None, Some(rel_tol)) if !(rel_tol > 0.0) => {
                Err(Error::InvalidParameter(format!("--rel-tol must be > 0, got {rel_tol}")))
            }
            (None, Some(rel_tol)) => Ok(CutoffPolicy::Auto { start: 16, rel_tol, max_cutoff: 1024 }),
            (None, None) => Ok(CutoffPolicy::default()),
        }
    }
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

impl OutputArgs {
    fn writer(&self) -> io::Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }
}

#[derive(Args, Debug)]
struct QfiArgs {
    /// tmsv | coherent[:phi] | cat:d | cat:inf | maxfock:d
    #[arg(long)]
    family: StateSpec,
    /// Mean signal photon number (ignored by maxfock, which fixes it).
    #[arg(long, default_value_t = 1.0)]
    ns: f64,
    #[arg(long)]
    nb: f64,
    #[command(flatten)]
    cutoff: CutoffArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    #[arg(long, default_value_t = 50.0)]
    nb: f64,
    /// Photon-number grid: list, start:stop:step, or log:lo:hi:n.
    #[arg(long, default_value = "log:1e-4:10:41")]
    ns: Grid,
    /// Comma-separated families.
    #[arg(long, value_delimiter = ',', default_value = "tmsv,cat:2,cat:3,cat:inf,coherent")]
    family: Vec<StateSpec>,
    #[command(flatten)]
    cutoff: CutoffArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON protocol configuration; flags below override its fields.
    config: Option<PathBuf>,
    #[arg(long)]
    family: Option<StateSpec>,
    #[arg(long)]
    ns: Option<f64>,
    #[arg(long)]
    nb: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Copies per trial, comma-separated.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    /// Threshold fractions: list, start:stop:step, or log:lo:hi:n.
    #[arg(long)]
    xi: Option<Grid>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    max_trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Signal cutoff.
    #[arg(long)]
    cutoff: Option<usize>,
    /// Returned-mode cutoff.
    #[arg(long)]
    bath_cutoff: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long, default_value = "fast")]
    suite: Suite,
    /// Write the machine-readable summary here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the summary as JSON instead of text lines.
    #[arg(long)]
    json: bool,
}

enum Failure {
    Core(Error),
    Io(io::Error),
    Unresolved(String),
    ValidationFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(Error::NotConverged { .. }) => 3,
            Failure::Core(Error::Unresolved(_)) | Failure::Unresolved(_) => 4,
            Failure::Core(
                Error::InvalidParameter(_)
                | Error::InvalidDimension(_)
                | Error::InvalidFactors(_)
                | Error::DimensionOverflow { .. }
                | Error::Truncation { .. }
                | Error::ZeroInformation
                | Error::Format(_),
            ) => 2,
            Failure::ValidationFailed => 1,
            Failure::Core(_) | Failure::Io(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Io(e) => format!("i/o error: {e}"),
            Failure::Unresolved(m) => m.clone(),
            Failure::ValidationFailed => "validation failed".into(),
        }
    }
}

fn emit_qfi(reports: &[QfiReport], output: &OutputArgs) -> Result<(), Failure> {
    let mut w = output.writer()?;
    match output.format {
        Format::Csv => write_qfi_csv(&mut w, reports)?,
        Format::Json if reports.len() == 1 => writeln!(w, "{}", serde_json::to_string_pretty(&reports[0]).map_err(Error::from)?)?,
        Format::Json => writeln!(w, "{}", serde_json::to_string_pretty(reports).map_err(Error::from)?)?,
    }
    w.flush()?;
    Ok(())
}

fn cmd_qfi(args: &QfiArgs) -> Result<(), Failure> {
    let report = qfi_for_spec(args.family, args.ns, args.nb, args.cutoff.policy()?)?;
    if report.deficit_warning > 1e-6 {
        eprintln!("warning: transmitter truncation deficit {:.2e}", report.deficit_warning);
    }
    emit_qfi(&[report], &args.output)
}

fn cmd_curves(args: &CurvesArgs) -> Result<(), Failure> {
    let reports = gain_curves(&args.family, &args.ns.0, args.nb, args.cutoff.policy()?)?;
    emit_qfi(&reports, &args.output)
}

fn simulate_config(args: &SimulateArgs) -> Result<ProtocolConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_reader(File::open(path)?).map_err(Error::from)?,
        None => ProtocolConfig {
            family: StateSpec::Tmsv,
            n_s: 0.5,
            n_b: 1.0,
            eta: 0.1,
            m: vec![200, 500, 1000, 1500, 2000],
            xi: vec![0.5],
            pi0: 0.5,
            pi1: 0.5,
            trials: 100_000,
            max_trials: None,
            min_events: 50,
            seed: 1,
            cutoffs: Cutoffs::default(),
            fit: FitMethod::GaussianTail,
        },
    };
    if let Some(v) = args.family {
        cfg.family = v;
    }
    if let Some(v) = args.ns {
        cfg.n_s = v;
    }
    if let Some(v) = args.nb {
        cfg.n_b = v;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = &args.m {
        cfg.m = v.clone();
    }
    if let Some(v) = &args.xi {
        cfg.xi = v.0.clone();
    }
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(v) = args.max_trials {
        cfg.max_trials = Some(v);
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.cutoff {
        cfg.cutoffs.signal = Some(v);
    }
    if let Some(v) = args.bath_cutoff {
        cfg.cutoffs.bath = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn unresolved(rep: &ErrorReport) -> Option<String> {
    let zero = rep
        .points
        .iter()
        .filter(|p| p.xi == rep.fit_xi)
        .find(|p| p.p_i.events == 0 || p.p_ii.events == 0)?;
    Some(format!(
        "no error events at M = {}, xi = {} after {} trials; exponent unresolved",
        zero.m, zero.xi, rep.trials
    ))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let cfg = simulate_config(args)?;
    if cfg.n_b > 3.0 {
        eprintln!(
            "warning: N_B = {} is above the desk-scale range (<= 3); state construction may be slow or exceed cutoffs",
            cfg.n_b
        );
    }
    let report = run_protocol(&cfg)?;
    let mut w = args.output.writer()?;
    match args.output.format {
        Format::Csv => write_simulation_csv(&mut w, std::slice::from_ref(&report))?,
        Format::Json => writeln!(w, "{}", serde_json::to_string_pretty(&report).map_err(Error::from)?)?,
    }
    w.flush()?;
    match unresolved(&report) {
        Some(msg) => Err(Failure::Unresolved(msg)),
        None => Ok(()),
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), Failure> {
    let summary = run_suite(args.suite);
    let json = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    if args.json {
        println!("{json}");
    } else {
        for r in &summary.results {
            println!("{r}");
        }
        let failed = summary.results.iter().filter(|r| !r.passed).count();
        println!("{} of {} criteria passed", summary.results.len() - failed, summary.results.len());
    }
    if let Some(path) = &args.out {
        std::fs::write(path, json + "\n")?;
    }
    if summary.passed() {
        Ok(())
    } else {
        Err(Failure::ValidationFailed)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Qfi(a) => cmd_qfi(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !matches!(f, Failure::ValidationFailed) {
                eprintln!("error: {}", f.message());
            }
            ExitCode::from(f.code())
        }
    }
}
