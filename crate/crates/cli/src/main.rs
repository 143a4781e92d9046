//! `plap`: band structures, level sets, outgoing solutions, acceptance checks
//! and damped-convergence studies from a JSON configuration.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use periodic_lap::bands::{check_regularity, sample_grid};
use periodic_lap::cell::CellModel;
use periodic_lap::fermi::complex_extension;
use periodic_lap::io;
use periodic_lap::lap::{damped_solve, lap_solve, scan_branch};
use periodic_lap::lattice::build_frame;
use periodic_lap::verify::{run_criterion, CRITERIA};
use periodic_lap::LapError;
use serde_json::{json, Map, Value};

use config::{ConfigError, Format, Loaded};

#[derive(Parser)]
#[command(name = "plap", version, about = "Directional limiting-absorption solver for periodic media")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output format; overrides the configuration.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Accepted for compatibility; runs are deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample bands on a uniform grid (bands.csv).
    Bands,
    /// Level set, classification and complex branches (fermi.csv, fermi_complex.csv).
    Fermi,
    /// Outgoing solution at the evaluation points (solution.csv, diagnostics.json).
    Solve,
    /// Run acceptance criteria (verify.json).
    Verify,
    /// Damped solutions along the epsilon ladder (convergence.csv).
    Converge,
}

enum Failure {
    Config(String),
    Numerical(LapError),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<LapError> for Failure {
    fn from(e: LapError) -> Self {
        match e {
            LapError::InvalidInput(m) | LapError::InvalidDirection(m) | LapError::InvalidMedium(m) => Failure::Config(m),
            other => Failure::Numerical(other),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) | Failure::Io(_) => 3,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Failure::Config(m) => json!({"error": "config", "message": m}),
            Failure::Numerical(e) => json!({"error": "numerical", "kind": kind(e), "message": e.to_string()}),
            Failure::Io(m) => json!({"error": "io", "message": m}),
        }
    }
}

fn kind(e: &LapError) -> &'static str {
    match e {
        LapError::InvalidDirection(_) => "invalid_direction",
        LapError::NotOnBoundary { .. } => "not_on_boundary",
        LapError::InvalidInput(_) => "invalid_input",
        LapError::InvalidMedium(_) => "invalid_medium",
        LapError::Unsupported(_) => "unsupported",
        LapError::DegenerateBand { .. } => "degenerate_band",
        LapError::PoleProximity { .. } => "pole_proximity",
        LapError::CrossingAmbiguity { .. } => "crossing_ambiguity",
        LapError::IrregularLambda(_) => "irregular_lambda",
        LapError::HigherOrderDegeneracy { .. } => "higher_order_degeneracy",
        LapError::BranchContinuation(_) => "branch_continuation",
        LapError::ContourConstruction { .. } => "contour_construction",
        LapError::Quadrature(_) => "quadrature",
        LapError::Domain(_) => "domain",
    }
}

struct Output {
    dir: PathBuf,
    format: Format,
}

impl Output {
    /// Writes a CSV table, or the same rows as JSON objects.
    fn table(&self, stem: &str, csv: &str) -> Result<PathBuf, Failure> {
        match self.format {
            Format::Csv => self.raw(&format!("{stem}.csv"), csv),
            Format::Json => {
                let text = io::to_json(&csv_to_json(csv))?;
                self.raw(&format!("{stem}.json"), &text)
            }
        }
    }

    fn raw(&self, name: &str, text: &str) -> Result<PathBuf, Failure> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn csv_to_json(csv: &str) -> Value {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let rows: Vec<Value> = lines
        .map(|l| {
            let mut obj = Map::new();
            for (k, v) in header.iter().zip(l.split(',')) {
                let value = if v.is_empty() {
                    Value::Null
                } else if let Ok(x) = v.parse::<f64>() {
                    json!(x)
                } else {
                    json!(v)
                };
                obj.insert((*k).to_string(), value);
            }
            Value::Object(obj)
        })
        .collect();
    Value::Array(rows)
}

fn cmd_bands(cfg: &Loaded, out: &Output) -> Result<(), Failure> {
    let model = CellModel::new(&cfg.medium, cfg.config.j_max)?;
    let bands = if cfg.config.num_bands == 0 { 4 } else { cfg.config.num_bands };
    let grid = sample_grid(&model, cfg.config.grid_n, bands, false)?;
    let path = out.table("bands", &io::bands_csv(&grid))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_fermi(cfg: &Loaded, out: &Output) -> Result<(), Failure> {
    let lambda = cfg.lambda()?;
    let frame = build_frame(&cfg.direction()?)?;
    if frame.dim != cfg.config.dimension {
        return Err(Failure::Config("direction dimension differs from the config".into()));
    }
    let lap_cfg = cfg.lap_config();
    let model = CellModel::new(&cfg.medium, cfg.config.j_max)?;
    let bands = if cfg.config.num_bands == 0 { 4 } else { cfg.config.num_bands };
    let grid = sample_grid(&model, cfg.config.grid_n, bands, false)?;
    let report = check_regularity(&model, &grid, lambda, &frame)?;
    let dim = cfg.config.dimension;
    let empty = periodic_lap::fermi::LevelSetData {
        dim,
        lambda,
        n_hat: frame.n_hat.clone(),
        segments: Vec::new(),
        dropped: Vec::new(),
        multiple_points: 0,
    };
    let level = report.level_set.as_ref().unwrap_or(&empty);
    let p = out.table("fermi", &io::fermi_csv(level))?;
    println!("wrote {}", p.display());
    let mut branches = Vec::new();
    let mut scans = Vec::new();
    if report.regular {
        for (band, point) in level.degenerate_points() {
            let br = complex_extension(&model, &point.alpha, &frame, band, lambda, 0.0, 0)?;
            let (scan, _) = scan_branch(&model, &frame, &br, lap_cfg.sigma1.max(lap_cfg.sigma2))?;
            branches.push(br);
            scans.push(scan);
        }
    }
    let pairs: Vec<_> = branches.iter().zip(&scans).map(|(b, s)| (b, s.as_slice())).collect();
    let p = out.table("fermi_complex", &io::fermi_complex_csv(dim, &pairs))?;
    println!("wrote {}", p.display());
    let p = out.raw("regularity.json", &io::to_json(&report)?)?;
    println!("wrote {}", p.display());
    if !report.regular {
        eprintln!("warning: lambda is irregular: {}", report.reasons.join("; "));
    }
    Ok(())
}

fn cmd_solve(cfg: &Loaded, out: &Output) -> Result<(), Failure> {
    let frame = build_frame(&cfg.direction()?)?;
    let sol = lap_solve(&cfg.medium, &cfg.source, cfg.lambda()?, &frame, cfg.eval_points()?, &cfg.lap_config())?;
    let p = out.table("solution", &io::solution_csv(cfg.config.dimension, &sol.results))?;
    println!("wrote {}", p.display());
    let p = out.raw("diagnostics.json", &io::to_json(&sol.diagnostics)?)?;
    println!("wrote {}", p.display());
    for w in &sol.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_verify(cfg: &Loaded, out: &Output) -> Result<bool, Failure> {
    let ids: Vec<String> = match &cfg.config.criteria {
        Some(list) => list.clone(),
        None => CRITERIA.iter().map(|(k, _)| k.to_string()).collect(),
    };
    let mut reports = Vec::new();
    for id in &ids {
        let r = run_criterion(id)?;
        println!("{r}");
        reports.push(r);
    }
    let p = out.raw("verify.json", &io::to_json(&reports)?)?;
    println!("wrote {}", p.display());
    Ok(reports.iter().all(|r| r.passed))
}

fn cmd_converge(cfg: &Loaded, out: &Output) -> Result<(), Failure> {
    let ladder = &cfg.config.epsilon_ladder;
    if ladder.is_empty() {
        return Err(Failure::Config("epsilon_ladder must not be empty".into()));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Failure::Config("epsilon_ladder must be strictly decreasing".into()));
    }
    let lambda = cfg.lambda()?;
    let xs = cfg.eval_points()?;
    let frame = build_frame(&cfg.direction()?)?;
    let sol = lap_solve(&cfg.medium, &cfg.source, lambda, &frame, xs, &cfg.lap_config())?;
    let mut rows = Vec::new();
    for eps in ladder {
        let ue = damped_solve(&cfg.medium, &cfg.source, lambda, *eps, xs, cfg.config.n_alpha, cfg.config.j_max)?;
        let err = ue
            .iter()
            .zip(&sol.results)
            .map(|(a, r)| (a - r.total).norm())
            .fold(0.0, f64::max);
        rows.push((*eps, err));
    }
    let p = out.table("convergence", &io::convergence_csv(&rows))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let cfg = config::load(path)?;
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::Config(format!("cannot configure threads: {e}")))?;
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.config.output_dir.clone())
        .unwrap_or_else(|| Path::new("out").to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    let out = Output {
        dir,
        format: cli.format.or(cfg.config.format).unwrap_or(Format::Csv),
    };
    match cli.command {
        Command::Bands => cmd_bands(&cfg, &out).map(|_| true),
        Command::Fermi => cmd_fermi(&cfg, &out).map(|_| true),
        Command::Solve => cmd_solve(&cfg, &out).map(|_| true),
        Command::Verify => cmd_verify(&cfg, &out),
        Command::Converge => cmd_converge(&cfg, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string()}));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", json!({"error": "verification", "message": "one or more criteria failed"}));
            ExitCode::from(3)
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.code())
        }
    }
}
