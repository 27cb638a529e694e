mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsvcmm::covariance::CovarianceFamily;
use lsvcmm::inference::{bootstrap, BandMethod};
use lsvcmm::io::{self, ClrOptions};
use lsvcmm::model::TimeGrid;
use lsvcmm::selection::{default_h_grid, fit_path};
use lsvcmm::simulation::{self, Axis, ExperimentSpec, Method, Scenario, ScenarioParams, COVARIATE_NAMES};
use lsvcmm::transform::DEFAULT_PSEUDOCOUNT;
use lsvcmm::{Error, Result};
use serde::Serialize;

use config::{read_json, write_json, ModelFile, RunConfig, RunRecord};

#[derive(Parser)]
#[command(name = "lsvcmm", version, about = "Locally sparse varying-coefficient mixed models")]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the regularization path and write the EBIC-selected model.
    Fit(FitArgs),
    /// Cluster bootstrap bands for a fitted model.
    Bootstrap(BootArgs),
    /// Draw one simulated dataset.
    Simulate(SimArgs),
    /// Run a simulation experiment over one axis.
    Bench(BenchArgs),
}

#[derive(Args)]
struct FitArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    time: Option<String>,
    #[arg(long)]
    response: Option<String>,
    /// Comma separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Do not add an intercept column.
    #[arg(long)]
    no_intercept: bool,
    /// Comma separated design columns excluded from the penalty.
    #[arg(long, value_delimiter = ',')]
    unpenalized: Option<Vec<String>>,
    /// CLR-transform these count columns before fitting.
    #[arg(long, value_delimiter = ',')]
    clr: Option<Vec<String>>,
    #[arg(long)]
    pseudocount: Option<f64>,
    #[arg(long)]
    family: Option<String>,
    /// Comma separated bandwidths.
    #[arg(long = "h", value_delimiter = ',')]
    h_grid: Option<Vec<f64>>,
    #[arg(long)]
    n_h: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    ebic_gamma: Option<f64>,
    #[arg(long)]
    n_lambda: Option<usize>,
    #[arg(long)]
    lambda_min_ratio: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BootArgs {
    /// model.json written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// JSON run configuration for the bootstrap controls.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_boot: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// sup-t or bonferroni.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to the seed recorded in model.json.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value = "regular-missing")]
    scenario: String,
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    observed_points: Option<usize>,
    #[arg(long)]
    flip_indicator: bool,
    #[arg(long)]
    null_signal: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    axis: Option<String>,
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    n_reps: Option<usize>,
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

const DEFAULT_BENCH_REPS: usize = 20;

fn fresh_seed() -> u64 {
    rand::random()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", dir.display())))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn fit_config(args: FitArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if args.input.is_some() {
        cfg.input = args.input;
    }
    set(&mut cfg.columns.subject, args.subject);
    set(&mut cfg.columns.time, args.time);
    set(&mut cfg.columns.response, args.response);
    set(&mut cfg.columns.covariates, args.covariates);
    if args.no_intercept {
        cfg.columns.add_intercept = false;
    }
    if args.unpenalized.is_some() {
        cfg.unpenalized = args.unpenalized;
    }
    if let Some(columns) = args.clr {
        cfg.clr = Some(ClrOptions { columns, pseudocount: DEFAULT_PSEUDOCOUNT });
    }
    if let Some(pc) = args.pseudocount {
        match cfg.clr.as_mut() {
            Some(c) => c.pseudocount = pc,
            None => return Err(Error::InvalidInput("--pseudocount needs --clr".into())),
        }
    }
    if let Some(f) = args.family {
        cfg.family = f.parse::<CovarianceFamily>()?;
    }
    if args.h_grid.is_some() {
        cfg.h_grid = args.h_grid;
    }
    set(&mut cfg.n_h, args.n_h);
    set(&mut cfg.alpha, args.alpha);
    set(&mut cfg.gamma, args.gamma);
    set(&mut cfg.ebic_gamma, args.ebic_gamma);
    set(&mut cfg.n_lambda, args.n_lambda);
    set(&mut cfg.lambda_min_ratio, args.lambda_min_ratio);
    set(&mut cfg.max_iter, args.max_iter);
    set(&mut cfg.tol, args.tol);
    set(&mut cfg.output_dir, args.out);
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<(lsvcmm::LongitudinalDataset, TimeGrid)> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no input file given (--input or \"input\" in the config)".into()))?;
    let dataset = io::read_long_csv(input, &cfg.columns, cfg.clr.as_ref())?;
    let grid = match &cfg.grid {
        Some(points) => TimeGrid::new(points.clone())?,
        None => TimeGrid::from_dataset(&dataset),
    };
    Ok((dataset, grid))
}

fn run_fit(args: FitArgs) -> Result<()> {
    let mut cfg = fit_config(args)?;
    let seed = *cfg.seed.get_or_insert_with(fresh_seed);
    let path_cfg = cfg.path_config()?;
    let (dataset, grid) = load_data(&cfg)?;
    let h_grid = match &cfg.h_grid {
        Some(h) => h.clone(),
        None => default_h_grid(&grid, cfg.n_h)?,
    };
    let path = fit_path(&dataset, &grid, &h_grid, &path_cfg)?;
    let model = path.selected_model(dataset.covariate_names())?;

    create_dir(&cfg.output_dir)?;
    let out = cfg.output_dir.clone();
    io::write_coefficients(out.join("coefficients.csv"), &model.fit.coefficients, &model.covariate_names)?;
    io::write_path(out.join("path.csv"), &path)?;
    let file = ModelFile { seed, config: cfg, lambda_max: path.lambda_max.clone(), model };
    write_json(&out.join("model.json"), &file)?;
    eprintln!(
        "selected h = {:.6}, lambda = {:.6e}, df = {}; wrote {}",
        file.model.h,
        file.model.lambda,
        file.model.df,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BootSummary {
    method: BandMethod,
    level: f64,
    n_boot: usize,
    failures: usize,
    retries: usize,
    not_converged: usize,
}

fn run_bootstrap(args: BootArgs) -> Result<()> {
    let file: ModelFile = read_json(&args.model)?;
    let mut cfg = file.config.clone();
    if let Some(p) = &args.config {
        let other: RunConfig = read_json(p)?;
        cfg.n_boot = other.n_boot;
        cfg.level = other.level;
        cfg.band_method = other.band_method;
        cfg.output_dir = other.output_dir;
    }
    set(&mut cfg.n_boot, args.n_boot);
    set(&mut cfg.level, args.level);
    set(&mut cfg.output_dir, args.out);
    if let Some(m) = args.method {
        cfg.band_method = match m.as_str() {
            "sup-t" | "supt" => BandMethod::SupT,
            "bonferroni" => BandMethod::Bonferroni,
            other => return Err(Error::InvalidInput(format!("unknown band method '{other}'"))),
        };
    }
    let seed = args.seed.unwrap_or(file.seed);

    let (dataset, _) = load_data(&cfg)?;
    let fit = &file.model.fit;
    let grid = fit.coefficients.grid();
    if dataset.covariate_names() != file.model.covariate_names.as_slice() {
        return Err(Error::InvalidInput("data columns differ from the fitted model".into()));
    }
    let draws = bootstrap(&dataset, grid, &file.model.config, fit.coefficients.values(), cfg.n_boot, seed)?;
    let bands = match cfg.band_method {
        BandMethod::SupT => draws.bands(cfg.level)?,
        BandMethod::Bonferroni => draws.bonferroni_bands(cfg.level)?,
    };

    create_dir(&cfg.output_dir)?;
    let out = &cfg.output_dir;
    let names = &file.model.covariate_names;
    io::write_bands(out.join("bands.csv"), &bands, grid, names)?;
    io::write_pvalues(out.join("pvalues.csv"), &bands, names)?;
    let summary = BootSummary {
        method: cfg.band_method,
        level: cfg.level,
        n_boot: cfg.n_boot,
        failures: draws.failures,
        retries: draws.retries,
        not_converged: draws.not_converged,
    };
    write_json(&out.join("bootstrap.json"), &RunRecord { seed, details: summary })?;
    eprintln!("{} bootstrap draws, {} failed; wrote {}", cfg.n_boot, draws.failures, out.display());
    Ok(())
}

fn run_simulate(args: SimArgs) -> Result<()> {
    let scenario: Scenario = args.scenario.parse()?;
    let mut params = ScenarioParams::new(scenario);
    set(&mut params.n_subjects, args.n_subjects);
    set(&mut params.sigma2, args.sigma2);
    set(&mut params.ratio, args.ratio);
    set(&mut params.observed_points, args.observed_points);
    params.flip_indicator = args.flip_indicator;
    params.null_signal = args.null_signal;
    let seed = args.seed.unwrap_or_else(fresh_seed);

    let data = simulation::generate(&params, seed)?;
    create_dir(&args.out)?;
    let names: Vec<String> = COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    io::write_dataset(args.out.join("dataset.csv"), &data.dataset)?;
    io::write_truth(args.out.join("truth.csv"), &data.grid, &data.truth, &names)?;
    write_json(&args.out.join("simulation.json"), &RunRecord { seed, details: params })?;
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => read_json(p)?,
        None => {
            let scenario: Scenario = args.scenario.as_deref().unwrap_or("regular-missing").parse()?;
            let axis: Axis = args.axis.as_deref().unwrap_or("sigma2").parse()?;
            ExperimentSpec::new(scenario, axis, DEFAULT_BENCH_REPS, 0)
        }
    };
    if args.spec.is_some() {
        if let Some(s) = &args.scenario {
            spec.base.scenario = s.parse()?;
        }
        if let Some(a) = &args.axis {
            spec.axis = a.parse()?;
            spec.values = spec.axis.default_values(spec.base.scenario);
        }
    }
    if let Some(v) = args.values {
        spec.values = v;
    }
    if let Some(m) = args.methods {
        spec.methods = m.iter().map(|s| s.parse::<Method>()).collect::<Result<_>>()?;
    }
    set(&mut spec.n_reps, args.n_reps);
    set(&mut spec.base.n_subjects, args.n_subjects);
    spec.seed = match (args.seed, args.spec.is_some()) {
        (Some(s), _) => s,
        (None, true) => spec.seed,
        (None, false) => fresh_seed(),
    };

    let rows = simulation::run_experiment(&spec)?;
    create_dir(&args.out)?;
    io::write_experiment(args.out.join("results.csv"), &rows)?;
    write_json(&args.out.join("bench.json"), &spec)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    eprintln!("{} rows ({} failed fits); wrote {}", rows.len(), failed, args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Bootstrap(a) => run_bootstrap(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Bench(a) => run_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(0) => Err(Error::InvalidInput("--threads must be at least 1".into())),
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(Error::InvalidInput(format!("cannot start thread pool: {e}"))),
        },
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
