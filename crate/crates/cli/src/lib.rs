//! Command-line front end: `train`, `split-stats`, `evt-fit`, `gradcheck`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use oodmix::evt::{weibull_fit_high, weibull_log_likelihood};
use oodmix::graph::{
    biased_split, parse_tu_dataset, threshold_for_count, Comparator, Criterion, Dataset, Graph,
    PartitionStats, Split, SplitManifest, SplitSpec,
};
use oodmix::train::{gradient_check, train, TrainConfig};
use oodmix::Error;

/// Environment variable holding the default dataset root.
pub const DATA_ROOT_ENV: &str = "OODGMIX_DATA_ROOT";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "oodmix", version, about = "OOD graph classification with calibrated manifold mixup")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write config, split manifest and report.
    Train(TrainArgs),
    /// Print partition statistics of a biased split.
    SplitStats(SplitStatsArgs),
    /// Fit a tail model to one number per line.
    EvtFit(EvtFitArgs),
    /// Finite-difference check of the full training loss.
    Gradcheck(GradcheckArgs),
}

/// Every setting that may come from a flag or from a `--config` file.
/// Flags win.
#[derive(Debug, Clone, Default, Args, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// TU dataset directory; relative paths that do not exist are looked up
    /// under $OODGMIX_DATA_ROOT.
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    /// Bias criterion: nodes, edges or density.
    #[arg(long)]
    pub bias: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// Derive the threshold so that exactly this many graphs qualify.
    #[arg(long, conflicts_with = "threshold")]
    pub qualifying: Option<usize>,
    /// Comparator: lt or gt.
    #[arg(long)]
    pub cmp: Option<String>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub val_count: Option<usize>,
    /// erm or oodgmixup.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub mask_dim: Option<usize>,
    /// mean or max.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tail: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub virtual_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! prefer {
    ($flags:expr, $file:expr, $($field:ident),+) => {
        Settings { $($field: $flags.$field.or($file.$field),)+ }
    };
}

impl Settings {
    fn merged_with(self, file: Settings) -> Settings {
        prefer!(
            self, file, dataset_dir, bias, threshold, qualifying, cmp, train_count, val_count, method,
            epochs, lr, batch, hidden, layers, embed_dim, mask_dim, pooling, alpha, beta, tail,
            patience, virtual_count, seed, out
        )
    }

    fn load(path: &Path) -> CliResult<Settings> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))
    }

    fn train_config(&self) -> CliResult<TrainConfig> {
        let d = TrainConfig::default();
        let config = TrainConfig {
            method: parse_flag("--method", &self.method)?.unwrap_or(d.method),
            epochs: self.epochs.unwrap_or(d.epochs),
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch.unwrap_or(d.batch_size),
            hidden_dim: self.hidden.unwrap_or(d.hidden_dim),
            layers: self.layers.unwrap_or(d.layers),
            embed_dim: self.embed_dim.unwrap_or(d.embed_dim),
            mask_dim: self.mask_dim.unwrap_or(d.mask_dim),
            pooling: parse_flag("--pooling", &self.pooling)?.unwrap_or(d.pooling),
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            tail_size: self.tail.unwrap_or(d.tail_size),
            patience: self.patience.unwrap_or(d.patience),
            seed: self.seed.unwrap_or(d.seed),
            virtual_count: self.virtual_count.or(d.virtual_count),
        };
        config.validate()?;
        Ok(config)
    }

    fn dataset_path(&self) -> CliResult<PathBuf> {
        let dir = self
            .dataset_dir
            .clone()
            .ok_or_else(|| CliError::Config("missing --dataset-dir".into()))?;
        Ok(resolve_dataset_dir(&dir, std::env::var_os(DATA_ROOT_ENV)))
    }

    fn split_spec(&self, graphs: &[Graph]) -> CliResult<SplitSpec> {
        let criterion: Criterion = parse_flag("--bias", &self.bias)?.unwrap_or(Criterion::NodeCount);
        let comparator: Comparator = parse_flag("--cmp", &self.cmp)?.unwrap_or(Comparator::LessThan);
        let need = |v: Option<usize>, flag: &str| v.ok_or_else(|| CliError::Config(format!("missing {flag}")));
        let train_count = need(self.train_count, "--train-count")?;
        let val_count = need(self.val_count, "--val-count")?;
        let threshold = match (self.threshold, self.qualifying) {
            (Some(t), _) => t,
            (None, Some(q)) => threshold_for_count(graphs, criterion, comparator, q)
                .map_err(|e| CliError::Config(format!("--qualifying {q}: {e}")))?,
            (None, None) => return Err(CliError::Config("missing --threshold (or --qualifying)".into())),
        };
        Ok(SplitSpec {
            criterion,
            comparator,
            threshold,
            train_count,
            val_count,
        })
    }
}

fn parse_flag<T>(flag: &str, value: &Option<String>) -> CliResult<Option<T>>
where
    T: FromStr<Err = Error>,
{
    value
        .as_deref()
        .map(|v| v.parse().map_err(|e: Error| CliError::Config(format!("{flag}: {e}"))))
        .transpose()
}

/// `dir` as given when it exists or is absolute, otherwise under `root`.
pub fn resolve_dataset_dir(dir: &Path, root: Option<OsString>) -> PathBuf {
    match root {
        Some(root) if !dir.exists() && dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    settings: Settings,
    /// TOML file with any of the flag settings (underscored names).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitStatsArgs {
    #[command(flatten)]
    settings: Settings,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvtFitArgs {
    /// File with one number per line.
    #[arg(long)]
    input: PathBuf,
    /// Fit only the largest N values (default: all).
    #[arg(long)]
    tail: Option<usize>,
    /// Write the fit here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Dataset to take graphs from; the built-in toy set when omitted.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    graphs: usize,
    #[arg(long, default_value_t = 60)]
    probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parse `argv` (including the program name), run, and return the exit
/// code. Errors go to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train(args) => run_train(args),
        Command::SplitStats(args) => run_split_stats(args),
        Command::EvtFit(args) => run_evt_fit(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn resolve(settings: Settings, config: Option<PathBuf>) -> CliResult<Settings> {
    match config {
        Some(path) => Ok(settings.merged_with(Settings::load(&path)?)),
        None => Ok(settings),
    }
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.is_dir() {
        return Err(CliError::Runtime(format!(
            "--dataset-dir {}: not a directory (set {DATA_ROOT_ENV} to resolve relative names)",
            path.display()
        )));
    }
    let mut ds = parse_tu_dataset(path)?;
    ds.ensure_features();
    Ok(ds)
}

fn make_split(settings: &Settings, ds: &Dataset) -> CliResult<(SplitSpec, Split, u64)> {
    let spec = settings.split_spec(&ds.graphs)?;
    let seed = settings.seed.unwrap_or(0);
    let split = biased_split(&ds.graphs, &spec, seed)
        .map_err(|e| CliError::Config(format!("--train-count/--val-count: {e}")))?;
    Ok((spec, split, seed))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    dataset_dir: String,
    split: &'a SplitSpec,
    split_seed: u64,
    train: &'a TrainConfig,
}

fn run_train(args: TrainArgs) -> CliResult<()> {
    let settings = resolve(args.settings, args.config)?;
    let config = settings.train_config()?;
    let dataset_dir = settings.dataset_path()?;
    let out = settings
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", config.method, config.seed)));

    let ds = load_dataset(&dataset_dir)?;
    let (spec, split, split_seed) = make_split(&settings, &ds)?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let echo = ConfigEcho {
        dataset_dir: dataset_dir.display().to_string(),
        split: &spec,
        split_seed,
        train: &config,
    };
    let echo = serde_json::to_string_pretty(&echo).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join("config.json"), &echo)?;
    let manifest = SplitManifest::new(&ds, &spec, split_seed, &split);
    let manifest_path = out.join("split.json");
    write_file(&manifest_path, &manifest.to_json()?)?;

    let mut report = train(&ds, &split, &config)?;
    report.split.manifest = Some(manifest_path.display().to_string());
    let report_path = out.join("report.json");
    write_file(&report_path, &report.to_json()?)?;
    println!(
        "{} on {}: best epoch {}, val {:.4}, train {:.4}, test {:.4} ({:.1}s) -> {}",
        config.method,
        ds.name,
        report.best_epoch,
        report.best_val_accuracy,
        report.train_accuracy,
        report.test_accuracy,
        report.wall_clock_secs,
        report_path.display()
    );
    Ok(())
}

/// Plain-text partition table.
pub fn format_stats_table(spec: &SplitSpec, seed: u64, split: &Split) -> String {
    let mut s = format!(
        "criterion {} {} {} seed {}\n{:<6} {:>7} {:>10} {:>10} {:>10}\n",
        spec.criterion,
        spec.comparator,
        spec.threshold,
        seed,
        "part",
        "graphs",
        "avg_nodes",
        "avg_edges",
        "avg_dens"
    );
    let rows: [(&str, &PartitionStats); 3] = [
        ("train", &split.stats.train),
        ("val", &split.stats.val),
        ("test", &split.stats.test),
    ];
    for (name, p) in rows {
        s.push_str(&format!(
            "{:<6} {:>7} {:>10.2} {:>10.2} {:>10.2}{}\n",
            name,
            p.graphs,
            p.avg_nodes,
            p.avg_edges,
            p.avg_density,
            if p.density_consistent { "" } else { "  (avg density differs from edges/nodes by >5%)" }
        ));
    }
    s
}

fn run_split_stats(args: SplitStatsArgs) -> CliResult<()> {
    let settings = resolve(args.settings, args.config)?;
    let ds = load_dataset(&settings.dataset_path()?)?;
    let (spec, split, seed) = make_split(&settings, &ds)?;
    print!("{}", format_stats_table(&spec, seed, &split));
    if let Some(out) = &settings.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let manifest = SplitManifest::new(&ds, &spec, seed, &split);
        write_file(&out.join("split.json"), &manifest.to_json()?)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EvtFitOutput {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
    pub tail_size: usize,
    pub log_likelihood: f64,
}

fn read_values(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("--input {}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| {
            CliError::Runtime(format!("{} line {}: not a number: {t:?}", path.display(), i + 1))
        })?;
        values.push(v);
    }
    Ok(values)
}

fn run_evt_fit(args: EvtFitArgs) -> CliResult<()> {
    let values = read_values(&args.input)?;
    let tau = args.tail.unwrap_or(values.len());
    if tau == 0 {
        return Err(CliError::Config("--tail must be positive".into()));
    }
    let model = weibull_fit_high(&values, tau, 0);
    if !model.valid {
        return Err(CliError::Runtime(format!(
            "{}: need at least three distinct finite values in the tail",
            args.input.display()
        )));
    }
    let mut tail: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    tail.sort_by(|a, b| b.total_cmp(a));
    tail.truncate(tau);
    let shifted: Vec<f64> = tail.iter().map(|v| v - model.mu).collect();
    let fit = EvtFitOutput {
        mu: model.mu,
        sigma: model.sigma,
        xi: model.xi,
        tail_size: model.tail_size,
        log_likelihood: weibull_log_likelihood(&shifted, model.xi, model.sigma),
    };
    let text = serde_json::to_string_pretty(&fit).map_err(|e| CliError::Runtime(e.to_string()))?;
    match &args.out {
        Some(path) => write_file(path, &text),
        None => {
            let mut stdout = std::io::stdout();
            writeln!(stdout, "{text}").map_err(|e| CliError::Runtime(e.to_string()))
        }
    }
}

fn run_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let ds = match &args.dataset_dir {
        Some(dir) => load_dataset(&resolve_dataset_dir(dir, std::env::var_os(DATA_ROOT_ENV)))?,
        None => oodmix::fixtures::paths_and_cliques(),
    };
    if args.graphs == 0 || args.graphs > ds.graphs.len() {
        return Err(CliError::Config(format!(
            "--graphs must be between 1 and {}",
            ds.graphs.len()
        )));
    }
    let graphs: Vec<&Graph> = ds.graphs.iter().take(args.graphs).collect();
    let config = TrainConfig {
        hidden_dim: args.hidden,
        layers: args.layers,
        embed_dim: args.embed_dim,
        mask_dim: 3,
        tail_size: 5,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let err = gradient_check(&graphs, ds.num_classes(), &config, args.probes, args.step)?;
    let pass = err < GRADCHECK_TOLERANCE;
    println!(
        "max relative error {err:.3e} over {} probes (tolerance {GRADCHECK_TOLERANCE:e}): {}",
        args.probes,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed with error {err:.3e}")))
    }
}
