use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::Rng;
use serde::Serialize;

use threshflex::evaluation::k_fold_cv;
use threshflex::graph::{FeatureKind, NegativePolicy, Strategy};
use threshflex::ingest::{ingest, DatasetManifest};
use threshflex::io::{self, Provenance};
use threshflex::models::{standardized_weight, Dataset, Method, MethodConfig, SubjectRecord};
use threshflex::plasmode::{hardin_contaminate, run_scenario, ContaminationSpec, ScenarioConfig};
use threshflex::{seed, Error, Result};

/// Threshold-flexible regression on network feature curves.
#[derive(Parser, Debug)]
#[command(name = "threshflex", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Global {
    /// Master seed (default 1; `simulate` falls back to the scenario's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    #[serde(skip)]
    threads: Option<usize>,
    /// Threshold grid step (default 0.01, or the manifest's value).
    #[arg(long, global = true)]
    grid_step: Option<f64>,
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    #[arg(long, global = true)]
    negative_policy: Option<NegativePolicy>,
    #[arg(long, global = true)]
    feature: Option<FeatureKind>,
    /// On failure, print the error as JSON on stderr.
    #[arg(long, global = true)]
    #[serde(skip)]
    error_json: bool,
}

impl Global {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest a manifest and write one feature-curve CSV per subject.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write each subject's edge list at this threshold.
        #[arg(long)]
        edges_at: Option<f64>,
    },
    /// Fit one method and write the fit and its weight function.
    Fit {
        #[command(flatten)]
        input: DataInput,
        #[command(flatten)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated k-fold cross-validation of one or more methods.
    Cv {
        #[command(flatten)]
        input: DataInput,
        /// Methods to evaluate (repeatable).
        #[arg(long = "method", default_values_t = vec![Method::Flex, Method::Opt, Method::Avg, Method::Null])]
        methods: Vec<Method>,
        /// Method settings JSON (a single object or an array), overriding --method.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation scenario.
    Simulate {
        /// Scenario JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's replicate count.
        #[arg(long)]
        n_sim: Option<usize>,
    },
    /// Perturb a correlation matrix.
    Contaminate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        alpha: f64,
        /// Perturbation scale in [0, 1]; drawn uniformly when absent.
        #[arg(long)]
        delta: Option<f64>,
        /// Length of the random unit vectors (default: p).
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct DataInput {
    /// Dataset manifest JSON (files are ingested).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Dataset JSON written by `features`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MethodArg {
    #[arg(long, default_value_t = Method::Flex)]
    method: Method,
    /// Method settings JSON; required for oracle.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Global {
    fn apply(&self, m: &mut DatasetManifest) {
        if let Some(s) = self.grid_step {
            m.grid_step = s;
        }
        if let Some(s) = self.strategy {
            m.strategy = s;
        }
        if let Some(p) = self.negative_policy {
            m.negative_policy = p;
        }
        if let Some(f) = self.feature {
            m.feature = f;
        }
    }
}

fn load_manifest(path: &Path, global: &Global) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::load(path)?;
    global.apply(&mut m);
    Ok(m)
}

#[derive(Serialize, serde::Deserialize)]
struct DatasetFile {
    records: Vec<SubjectRecord>,
}

/// Dataset plus the config text that identifies it.
fn load_dataset(input: &DataInput, global: &Global) -> Result<(Dataset, serde_json::Value)> {
    if let Some(path) = &input.manifest {
        let m = load_manifest(path, global)?;
        let ds = ingest(&m)?;
        return Ok((ds, serde_json::to_value(&m)?));
    }
    let path = input.dataset.as_ref().expect("clap enforces one input");
    let text = io::read_text(path)?;
    let file: DatasetFile =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let value = serde_json::to_value(&file)?;
    Ok((Dataset::new(file.records)?, value))
}

fn load_method(method: Method, config: Option<&Path>) -> Result<MethodConfig> {
    match config {
        Some(path) => Ok(serde_json::from_str(&io::read_text(path)?)?),
        None => MethodConfig::default_for(method).ok_or_else(|| {
            Error::InvalidInput(format!("{method} needs --config with its weights"))
        }),
    }
}

fn features(global: &Global, manifest: &Path, out: &Path, edges_at: Option<f64>) -> Result<()> {
    let m = load_manifest(manifest, global)?;
    let ds = ingest(&m)?;
    let prov = Provenance::of(None, &m)?;
    for r in ds.records() {
        io::write_text(&out.join(format!("{}.csv", r.id)), &io::curve_to_csv(&r.curve, &prov))?;
    }
    if let Some(t) = edges_at {
        for s in &m.subjects {
            let adj = threshflex::ingest::load_adjacency(&m, s)?;
            let g = match m.strategy {
                Strategy::Weight => threshflex::graph::threshold_weight(&adj, t)?,
                Strategy::Density => threshflex::graph::threshold_density(&adj, t)?,
            };
            io::write_edge_list(&out.join(format!("{}_edges.csv", s.id)), &g, &adj, &prov)?;
        }
    }
    let file = DatasetFile {
        records: ds.records().to_vec(),
    };
    io::write_json(&out.join("dataset.json"), &file, &prov)?;
    info!("wrote {} curves to {}", ds.len(), out.display());
    Ok(())
}

fn fit(global: &Global, input: &DataInput, arg: &MethodArg, out: &Path) -> Result<()> {
    let (ds, data_cfg) = load_dataset(input, global)?;
    let cfg = load_method(arg.method, arg.config.as_deref())?;
    let prov = Provenance::of(Some(global.seed()), &(&data_cfg, &cfg))?;
    let fit = cfg.fit(&ds, global.seed())?;
    io::write_json(&out.join("fit.json"), &fit, &prov)?;
    io::write_text(&out.join("weight_function.csv"), &io::weight_function_csv(&fit, &prov))?;
    if fit.weight_function.is_some() {
        let sw = standardized_weight(&fit, &ds)?;
        io::write_text(&out.join("standardized.csv"), &io::standardized_csv(&sw, &prov))?;
    }
    Ok(())
}

fn cv(
    global: &Global,
    input: &DataInput,
    methods: &[Method],
    config: Option<&Path>,
    folds: usize,
    repeats: usize,
    out: &Path,
) -> Result<()> {
    let (ds, data_cfg) = load_dataset(input, global)?;
    let configs: Vec<MethodConfig> = match config {
        Some(path) => {
            let v: serde_json::Value = serde_json::from_str(&io::read_text(path)?)?;
            match v {
                serde_json::Value::Array(_) => serde_json::from_value(v)?,
                _ => vec![serde_json::from_value(v)?],
            }
        }
        None => methods
            .iter()
            .map(|&m| load_method(m, None))
            .collect::<Result<_>>()?,
    };
    let prov = Provenance::of(Some(global.seed()), &(&data_cfg, &configs, folds, repeats))?;
    let reports = configs
        .iter()
        .map(|c| k_fold_cv(&ds, c, folds, repeats, seed::derive(global.seed(), &[seed::stream::CV])))
        .collect::<Result<Vec<_>>>()?;
    io::write_text(out, &io::performance_csv(&reports, &prov))
}

fn simulate(global: &Global, config: &Path, out: &Path, n_sim: Option<usize>) -> Result<()> {
    let text = io::read_text(config)?;
    let mut cfg: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", config.display())))?;
    // Relative pool paths resolve against the config file.
    if let threshflex::plasmode::MatrixSource::Pool { files } = &mut cfg.source {
        let base = config.parent().unwrap_or(Path::new(""));
        for f in files.iter_mut().filter(|f| f.is_relative()) {
            *f = base.join(&*f);
        }
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(s) = global.grid_step {
        cfg.grid_step = s;
    }
    if let Some(s) = global.strategy {
        cfg.strategy = s;
    }
    if let Some(p) = global.negative_policy {
        cfg.negative_policy = p;
    }
    if let Some(f) = global.feature {
        cfg.feature = f;
    }
    if let Some(n) = n_sim {
        cfg.n_sim = n;
    }
    let prov = Provenance::of(Some(cfg.seed), &cfg)?;
    let result = run_scenario(&cfg)?;
    io::write_text(&out.join("results.csv"), &io::results_csv(&result, &prov))?;
    io::write_text(&out.join("summary.csv"), &io::summary_csv(&result, &prov))?;
    io::write_text(&out.join("weights.csv"), &io::mean_weights_csv(&result, &prov))?;
    #[derive(Serialize)]
    struct Ledger<'a> {
        config: &'a ScenarioConfig,
        replicates: &'a [threshflex::plasmode::ReplicateRecord],
    }
    io::write_json(
        &out.join("ledger.json"),
        &Ledger {
            config: &cfg,
            replicates: &result.replicates,
        },
        &prov,
    )?;
    info!(
        "{} replicates ({} failed) written to {}",
        result.replicates.len(),
        result.failed_replicates,
        out.display()
    );
    Ok(())
}

fn contaminate(
    global: &Global,
    input: &Path,
    alpha: f64,
    delta: Option<f64>,
    m: Option<usize>,
    out: &Path,
) -> Result<()> {
    let sigma = io::read_matrix_csv(input)?;
    let spec = ContaminationSpec {
        alpha,
        m,
        seed: Some(global.seed()),
    };
    let mut rng = seed::rng(global.seed(), &[seed::stream::CONTAMINATION]);
    let delta = delta.unwrap_or_else(|| rng.random());
    let result = hardin_contaminate(&sigma, &spec, delta, &mut rng)?;
    let prov = Provenance::of(Some(global.seed()), &(&spec, delta))?;
    io::write_matrix_csv(out, &result.matrix, &prov)
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Features {
            manifest,
            out,
            edges_at,
        } => features(g, manifest, out, *edges_at),
        Command::Fit { input, method, out } => fit(g, input, method, out),
        Command::Cv {
            input,
            methods,
            config,
            folds,
            repeats,
            out,
        } => cv(g, input, methods, config.as_deref(), *folds, *repeats, out),
        Command::Simulate { config, out, n_sim } => simulate(g, config, out, *n_sim),
        Command::Contaminate {
            input,
            alpha,
            delta,
            m,
            out,
        } => contaminate(g, input, *alpha, *delta, *m, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.global.error_json {
                let v = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
                eprintln!("{v}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(1)
        }
    }
}
