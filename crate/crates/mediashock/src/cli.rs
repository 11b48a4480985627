//! Command-line pipeline. Each subcommand reads its inputs, writes its
//! outputs into one directory and finishes with `manifest.json`.
//!
//! Exit status: 0 on success, 1 for input problems, 2 for usage errors.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use mediashock_core::analysis::AnalysisTable;
use mediashock_core::bootstrap::{self, BootstrapPlan, Scheme};
use mediashock_core::catalog::{Catalog, DisasterType};
use mediashock_core::counterfactual::{
    self, all_pairs, average_over_types, equivalent_deaths, normalize_view, DeathGrid, Equivalence, Pair, ScenarioGrid,
    ScenarioSpec, View,
};
use mediashock_core::estimator::{pool_by_type, EventEstimate, SeKind, ShrinkRule};
use mediashock_core::features::{Feature, FeatureTable};
use mediashock_core::forest::{self, Dataset, ForestConfig, FeatureSet};
use mediashock_core::heterogeneity::{self, classify_robust, HeteroOptions, RegressionMode};
use mediashock_core::panel::{Channel, PanelStore, Transform};
use mediashock_core::CountryCode;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::exec::{with_threads, Rayon};
use crate::io::{self, fmt_f64, fmt_opt, CsvOut, InputError};
use crate::pipeline::{self, EstimateParams};
use crate::synth::{self, Noise, WorldConfig};
use crate::{binfmt, service};

/// Environment variable that overrides the output directory of the config file.
pub const OUT_DIR_ENV: &str = "MEDIASHOCK_OUT_DIR";
pub const MANIFEST: &str = "manifest.json";

fn parse_with<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "mediashock", version, about = "Event-study pipeline for cross-border disaster coverage")]
#[command(args_override_self = true)]
pub struct Cli {
    /// `key = value` file with defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory (default `out`).
    #[arg(long, global = true, env = OUT_DIR_ENV, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic world with planted effects.
    Simulate(SimulateArgs),
    /// Validate a counts file and store it as a binary panel.
    Ingest(IngestArgs),
    /// Per-event coverage estimates.
    Estimate(EstimateArgs),
    /// Binned death curve and per-country death gradients.
    Gradient(GradientArgs),
    /// Connectedness regressions under the six control sets.
    Interact(InteractArgs),
    /// Train a forest and report out-of-bag fit and importance.
    Forest(ForestArgs),
    /// Forest fit for every subset of the dyadic features.
    SubsetPath(SubsetPathArgs),
    /// Resampling inference over event estimates.
    Bootstrap(BootstrapArgs),
    /// Scenario grids, normalized views and equivalent tolls.
    Counterfactual(CounterfactualArgs),
    /// Serve the JSON API.
    Serve(ServeArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Ingest(_) => "ingest",
            Command::Estimate(_) => "estimate",
            Command::Gradient(_) => "gradient",
            Command::Interact(_) => "interact",
            Command::Forest(_) => "forest",
            Command::SubsetPath(_) => "subset-path",
            Command::Bootstrap(_) => "bootstrap",
            Command::Counterfactual(_) => "counterfactual",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    /// reference, null, interaction or small.
    #[arg(long, default_value = "reference")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// poisson or negbin.
    #[arg(long)]
    pub noise: Option<String>,
    /// Shape of the negative binomial noise.
    #[arg(long, default_value_t = 5.0)]
    pub negbin_r: f64,
    #[arg(long)]
    pub sources: Option<usize>,
    #[arg(long)]
    pub countries: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub events: Option<usize>,
    #[arg(long)]
    pub interaction: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    #[serde(skip)]
    pub counts: PathBuf,
    /// Source registry; without it sources are registered from the counts file.
    #[arg(long)]
    #[serde(skip)]
    pub registry: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EstimateArgs {
    #[arg(long, required_unless_present = "panel", conflicts_with = "panel")]
    #[serde(skip)]
    pub counts: Option<PathBuf>,
    /// Binary panel written by `ingest`.
    #[arg(long)]
    #[serde(skip)]
    pub panel: Option<PathBuf>,
    #[arg(long, requires = "counts")]
    #[serde(skip)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub events: PathBuf,
    /// Days on each side of the event (default 7, or 14 with --flexible).
    #[arg(long)]
    pub pad: Option<u32>,
    #[arg(long, default_value_t = 3)]
    pub tau: u32,
    /// level, log1p or ihs.
    #[arg(long, default_value = "log1p", value_parser = parse_with::<Transform>)]
    pub transform: Transform,
    /// total or disaster.
    #[arg(long, default_value = "total", value_parser = parse_with::<Channel>)]
    pub channel: Channel,
    #[arg(long, default_value_t = 1.65)]
    pub shrink_t: f64,
    /// Compare |t| with the threshold.
    #[arg(long)]
    pub shrink_two_sided: bool,
    /// two_way, classical or dyad.
    #[arg(long, default_value = "two_way", value_parser = parse_with::<SeKind>)]
    pub se: SeKind,
    /// One estimate per event instead of one per reporting country.
    #[arg(long)]
    pub pooled: bool,
    /// Also write day-by-day profiles.
    #[arg(long)]
    pub flexible: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TableInputs {
    #[arg(long)]
    #[serde(skip)]
    pub estimates: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub events: PathBuf,
    /// Use shrunk instead of raw estimates.
    #[arg(long)]
    pub shrunk: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct GradientArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: TableInputs,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Remove disaster-type means before binning.
    #[arg(long)]
    pub residualize: bool,
    #[arg(long, default_value_t = heterogeneity::DEFAULT_MIN_EVENTS)]
    pub min_events: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct InteractArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: TableInputs,
    #[arg(long)]
    #[serde(skip)]
    pub features: PathBuf,
    /// univariate or interaction.
    #[arg(long, default_value = "interaction", value_parser = parse_with::<RegressionMode>)]
    pub mode: RegressionMode,
    /// Features to test (comma separated); default every feature in the file.
    #[arg(long = "feature", value_delimiter = ',')]
    pub feature: Vec<String>,
    /// Weight rows by inverse squared standard errors.
    #[arg(long)]
    pub weighted: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct ForestParams {
    #[arg(long, default_value_t = 1000)]
    pub trees: usize,
    #[arg(long, default_value_t = 30)]
    pub min_node: usize,
    #[arg(long, default_value_t = 10)]
    pub min_terminal: usize,
    #[arg(long)]
    pub mtry: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct ForestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: TableInputs,
    #[arg(long)]
    #[serde(skip)]
    pub features: PathBuf,
    /// combined, dyadic_only or disaster_only.
    #[arg(long, default_value = "combined", value_parser = parse_with::<FeatureSet>)]
    pub set: FeatureSet,
    #[command(flatten)]
    #[serde(flatten)]
    pub forest: ForestParams,
    /// Permutation repeats per feature.
    #[arg(long, default_value_t = forest::DEFAULT_REPEATS)]
    pub repeats: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct SubsetPathArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: TableInputs,
    #[arg(long)]
    #[serde(skip)]
    pub features: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub forest: ForestParams,
    /// Trees per subset fit.
    #[arg(long, default_value_t = 100)]
    pub path_trees: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct BootstrapArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: TableInputs,
    /// Needed for the spec statistic.
    #[arg(long)]
    #[serde(skip)]
    pub features: Option<PathBuf>,
    /// event_half, disaster_country_drop or reporting_country_drop.
    #[arg(long, default_value = "event_half", value_parser = parse_with::<Scheme>)]
    pub scheme: Scheme,
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    #[arg(long, default_value_t = 50)]
    pub drop_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// type_means or spec.
    #[arg(long, default_value = "type_means")]
    pub statistic: String,
    /// Feature for the spec statistic.
    #[arg(long)]
    pub feature: Option<String>,
    #[arg(long, default_value_t = 6)]
    pub spec_id: u8,
    #[arg(long, default_value = "interaction", value_parser = parse_with::<RegressionMode>)]
    pub mode: RegressionMode,
    /// Disaster types, most covered first; the share of draws keeping this
    /// order is reported.
    #[arg(long, value_delimiter = ',')]
    pub order: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct CounterfactualArgs {
    /// Model written by `forest`.
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub features: PathBuf,
    /// Reporting countries (default: all in the feature table).
    #[arg(long, value_delimiter = ',')]
    pub reporting: Vec<String>,
    /// Affected countries (default: all in the feature table).
    #[arg(long, value_delimiter = ',')]
    pub affected: Vec<String>,
    /// Disaster types (default: all).
    #[arg(long, value_delimiter = ',')]
    pub dtype: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub grid_min: u32,
    #[arg(long, default_value_t = 300)]
    pub grid_max: u32,
    #[arg(long, default_value_t = 5)]
    pub grid_step: u32,
    #[arg(long, default_value_t = 1)]
    pub duration: u32,
    /// Average the curves over disaster types.
    #[arg(long)]
    pub average_types: bool,
    /// Also write a normalized view: reporting or disaster.
    #[arg(long, value_parser = parse_with::<View>)]
    pub view: Option<View>,
    /// Also write equivalent tolls for this reference toll.
    #[arg(long)]
    pub reference_deaths: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub features: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

/// Usage problems found before clap runs (config keys).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

/// Parsed config file: keys for every subcommand, then per-section keys.
#[derive(Debug, Default)]
struct ConfigFile {
    global: Vec<(String, String)>,
    sections: BTreeMap<String, Vec<(String, String)>>,
}

fn read_config(path: &Path) -> anyhow::Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|source| InputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = ConfigFile::default();
    let mut section: Option<String> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(UsageError(format!("{}:{}: expected key = value", path.display(), n + 1)));
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        match &section {
            Some(s) => cfg.sections.entry(s.clone()).or_default().push((key, value)),
            None => cfg.global.push((key, value)),
        }
    }
    Ok(cfg)
}

/// Index of the subcommand token in `argv`, skipping global options.
fn subcommand_position(argv: &[OsString]) -> Option<usize> {
    let cmd = Cli::command();
    let names: BTreeSet<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let valued: BTreeSet<&str> = ["--config", "--out", "--threads"].into();
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if names.contains(a.as_ref()) {
            return Some(i);
        }
        if valued.contains(a.as_ref()) {
            i += 1;
        }
        i += 1;
    }
    None
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Expand config keys into flags placed right after the subcommand, so the
/// flags typed on the command line (which come later) win. `out` is handled
/// separately so the environment can override it. Returns the new argv and
/// the config's output directory.
fn splice_config(argv: Vec<OsString>) -> anyhow::Result<(Vec<OsString>, Option<PathBuf>)> {
    let Some(path) = config_path(&argv) else {
        return Ok((argv, None));
    };
    let cfg = read_config(&path)?;
    let Some(pos) = subcommand_position(&argv) else {
        return Ok((argv, None));
    };
    let name = argv[pos].to_string_lossy().to_string();
    let root = Cli::command();
    let sub = root.find_subcommand(&name).expect("known subcommand");
    let flags: BTreeMap<String, bool> = sub
        .get_arguments()
        .chain(root.get_arguments())
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .collect();
    let all_longs: BTreeSet<String> = root
        .get_subcommands()
        .flat_map(|s| s.get_arguments().filter_map(|a| a.get_long().map(String::from)).collect::<Vec<_>>())
        .chain(root.get_arguments().filter_map(|a| a.get_long().map(String::from)))
        .collect();

    let mut out_dir = None;
    let mut extra: Vec<OsString> = Vec::new();
    let mut push = |key: &str, value: &str, strict: bool| -> anyhow::Result<()> {
        if key == "out" {
            out_dir = Some(PathBuf::from(value));
            return Ok(());
        }
        if key == "config" {
            bail!(UsageError("config files cannot include other config files".into()));
        }
        match flags.get(key) {
            Some(true) => {
                extra.push(format!("--{key}").into());
                extra.push(value.into());
            }
            Some(false) => match value {
                "true" | "yes" | "1" => extra.push(format!("--{key}").into()),
                "false" | "no" | "0" => {}
                other => bail!(UsageError(format!("config key {key}: expected true or false, got {other:?}"))),
            },
            None if strict || !all_longs.contains(key) => {
                bail!(UsageError(format!("{}: unknown key {key:?} for {name}", path.display())))
            }
            None => {}
        }
        Ok(())
    };
    for (k, v) in &cfg.global {
        push(k, v, false)?;
    }
    for (section, keys) in &cfg.sections {
        if root.find_subcommand(section).is_none() {
            bail!(UsageError(format!("{}: unknown section [{section}]", path.display())));
        }
        if *section == name {
            for (k, v) in keys {
                push(k, v, true)?;
            }
        }
    }
    let mut argv = argv;
    let tail = argv.split_off(pos + 1);
    argv.extend(extra);
    argv.extend(tail);
    Ok((argv, out_dir))
}

/// Parse `argv`, run the subcommand and return the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (argv, config_out) = match splice_config(argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return if e.downcast_ref::<UsageError>().is_some() { 2 } else { 1 };
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let out = cli.out.clone().or(config_out).unwrap_or_else(|| PathBuf::from("out"));
    match execute(cli.command, &out, cli.threads) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[derive(Debug, Serialize)]
struct FileHash {
    name: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: Option<u64>,
    params: serde_json::Value,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = io::read_bytes(path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn basename(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().to_string())
}

/// Output directory plus the bookkeeping for its manifest.
struct Stage {
    dir: PathBuf,
    inputs: Vec<FileHash>,
    outputs: Vec<PathBuf>,
}

impl Stage {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Stage {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<PathBuf> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileHash {
            name: basename(path),
            sha256,
        });
        Ok(path.to_path_buf())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn wrote(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn finish(self, command: &'static str, seed: Option<u64>, params: &impl Serialize) -> anyhow::Result<()> {
        let mut outputs = self
            .outputs
            .iter()
            .map(|p| {
                Ok(FileHash {
                    name: basename(p),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        outputs.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = Manifest {
            tool: "mediashock",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            params: serde_json::to_value(params)?,
            inputs: self.inputs,
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        io::write_bytes(&self.dir.join(MANIFEST), text.as_bytes())?;
        Ok(())
    }
}

fn execute(command: Command, out: &Path, threads: usize) -> anyhow::Result<()> {
    let name = command.name();
    if let Command::Serve(args) = command {
        return serve(args);
    }
    let mut stage = Stage::new(out)?;
    with_threads(threads, || match &command {
        Command::Simulate(a) => simulate(a, &mut stage).and_then(|_| stage.finish(name, Some(a.seed), a)),
        Command::Ingest(a) => ingest(a, &mut stage).and_then(|_| stage.finish(name, None, a)),
        Command::Estimate(a) => estimate(a, &mut stage).and_then(|_| stage.finish(name, None, a)),
        Command::Gradient(a) => gradient(a, &mut stage).and_then(|_| stage.finish(name, None, a)),
        Command::Interact(a) => interact(a, &mut stage).and_then(|_| stage.finish(name, None, a)),
        Command::Forest(a) => forest_cmd(a, &mut stage).and_then(|_| stage.finish(name, Some(a.forest.seed), a)),
        Command::SubsetPath(a) => subset_path(a, &mut stage).and_then(|_| stage.finish(name, Some(a.forest.seed), a)),
        Command::Bootstrap(a) => bootstrap_cmd(a, &mut stage).and_then(|_| stage.finish(name, Some(a.seed), a)),
        Command::Counterfactual(a) => counterfactual_cmd(a, &mut stage).and_then(|_| stage.finish(name, None, a)),
        Command::Serve(_) => unreachable!(),
    })
}

fn simulate(a: &SimulateArgs, stage: &mut Stage) -> anyhow::Result<()> {
    let mut cfg = WorldConfig::preset(&a.preset, a.seed)?;
    match a.noise.as_deref() {
        None | Some("poisson") => {}
        Some("negbin") => cfg.noise = Noise::NegBin { r: a.negbin_r },
        Some(other) => bail!("unknown noise family {other:?} (poisson, negbin)"),
    }
    if let Some(v) = a.sources {
        cfg.n_sources = v;
    }
    if let Some(v) = a.countries {
        cfg.n_countries = v;
    }
    if let Some(v) = a.days {
        cfg.n_days = v;
    }
    if let Some(v) = a.events {
        cfg.n_events = v;
    }
    if let Some(v) = a.interaction {
        cfg.interaction = v;
    }
    let world = synth::generate_world(&cfg)?;
    for p in world.write(&stage.dir)? {
        stage.wrote(p);
    }
    let mut text = serde_json::to_string_pretty(&cfg)?;
    text.push('\n');
    stage.wrote(io::write_bytes(&stage.path("world.json"), text.as_bytes())?);
    Ok(())
}

#[derive(Serialize)]
struct PanelSummary {
    cells: usize,
    sources: usize,
    countries: Vec<String>,
    first_day: Option<String>,
    last_day: Option<String>,
}

fn panel_summary(store: &PanelStore) -> PanelSummary {
    let span = store.span();
    PanelSummary {
        cells: store.len(),
        sources: store.registry().len(),
        countries: store.countries().iter().map(|c| c.to_string()).collect(),
        first_day: span.as_ref().map(|s| io::format_day(s.first_day)),
        last_day: span.as_ref().map(|s| io::format_day(s.last_day)),
    }
}

fn load_store(counts: &Path, registry: Option<&Path>, stage: &mut Stage) -> anyhow::Result<PanelStore> {
    let reg = match registry {
        Some(r) => Some(io::read_registry(&stage.input(r)?)?),
        None => None,
    };
    Ok(io::read_counts(&stage.input(counts)?, reg)?)
}

fn ingest(a: &IngestArgs, stage: &mut Stage) -> anyhow::Result<()> {
    let store = load_store(&a.counts, a.registry.as_deref(), stage)?;
    stage.wrote(io::write_bytes(&stage.path("panel.bin"), &binfmt::encode_panel(&store)?)?);
    let mut text = serde_json::to_string_pretty(&panel_summary(&store))?;
    text.push('\n');
    stage.wrote(io::write_bytes(&stage.path("panel.json"), text.as_bytes())?);
    Ok(())
}

fn estimate(a: &EstimateArgs, stage: &mut Stage) -> anyhow::Result<()> {
    let store = match (&a.counts, &a.panel) {
        (Some(c), _) => load_store(c, a.registry.as_deref(), stage)?,
        (None, Some(p)) => binfmt::load_panel(&stage.input(p)?)?,
        (None, None) => bail!("either --counts or --panel is required"),
    };
    let catalog = io::read_events(&stage.input(&a.events)?)?;
    let mut params = EstimateParams {
        pad: a.pad.unwrap_or(if a.flexible { 14 } else { 7 }),
        tau: a.tau,
        transform: a.transform,
        channel: a.channel,
        ..EstimateParams::default()
    };
    params.options.by_report_country = !a.pooled;
    params.options.se_kind = a.se;
    params.options.shrink = ShrinkRule {
        threshold: a.shrink_t,
        two_sided: a.shrink_two_sided,
    };
    let run = pipeline::estimate_events(&store, &catalog, &params, &Rayon);
    stage.wrote(io::write_estimates(&stage.path("estimates.csv"), &run.estimates)?);

    let mut skipped = CsvOut::create(&stage.path("skipped.csv"), &["event_id", "reason"])?;
    for s in &run.skipped {
        skipped.row([&s.event_id, &s.reason])?;
    }
    stage.wrote(skipped.finish()?);
    if !a.pooled {
        write_type_means(stage, &run.estimates, &catalog)?;
    }

    if a.flexible {
        let (profiles, skipped) = pipeline::flexible_profiles(&store, &catalog, &params, a.se, &Rayon);
        let mut out = CsvOut::create(&stage.path("profiles.csv"), &["event_id", "kappa", "beta", "se", "flags"])?;
        for p in &profiles {
            for e in &p.entries {
                out.row([p.event_id.clone(), e.kappa.to_string(), fmt_f64(e.beta), fmt_f64(e.se), e.flags.label()])?;
            }
        }
        stage.wrote(out.finish()?);
        for s in skipped {
            log::warn!("profile for {} skipped: {}", s.event_id, s.reason);
        }
    }
    Ok(())
}

fn write_type_means(stage: &mut Stage, estimates: &[EventEstimate], catalog: &Catalog) -> anyhow::Result<()> {
    let mut out = CsvOut::create(&stage.path("type_means.csv"), &["report_country", "dtype", "mean", "mean_shrunk", "n"])?;
    let raw = pool_by_type(estimates, catalog, false);
    let shrunk = pool_by_type(estimates, catalog, true);
    for (r, s) in raw.overall.iter().zip(&shrunk.overall) {
        out.row([String::new(), r.dtype.name().into(), fmt_f64(r.mean), fmt_f64(s.mean), r.n.to_string()])?;
    }
    for ((c, rows), (_, srows)) in raw.by_country.iter().zip(&shrunk.by_country) {
        for (r, s) in rows.iter().zip(srows) {
            out.row([c.to_string(), r.dtype.name().into(), fmt_f64(r.mean), fmt_f64(s.mean), r.n.to_string()])?;
        }
    }
    stage.wrote(out.finish()?);

    let mut out = CsvOut::create(&stage.path("type_slopes.csv"), &["dtype", "slope", "slope_shrunk"])?;
    for ((d, r), (_, s)) in raw.relative_to_earthquake.iter().zip(&shrunk.relative_to_earthquake) {
        out.row([d.name().to_string(), fmt_f64(*r), fmt_f64(*s)])?;
    }
    stage.wrote(out.finish()?);
    Ok(())
}

fn load_table(input: &TableInputs, features: Option<&Path>, stage: &mut Stage) -> anyhow::Result<(AnalysisTable, Catalog)> {
    let estimates = io::read_estimates(&stage.input(&input.estimates)?)?;
    let catalog = io::read_events(&stage.input(&input.events)?)?;
    let features = match features {
        Some(p) => Some(pipeline::zscored(&io::read_features(&stage.input(p)?)?)?),
        None => None,
    };
    let table = AnalysisTable::join(&estimates, &catalog, features.as_ref());
    if table.is_empty() {
        bail!("{}: no usable per-country estimates", input.estimates.display());
    }
    Ok((table, catalog))
}

fn gradient(a: &GradientArgs, stage: &mut Stage) -> anyhow::Result<()> {
    let (table, _) = load_table(&a.input, None, stage)?;
    let opts = HeteroOptions {
        shrunk: a.input.shrunk,
        precision_weighted: false,
    };
    let curve = heterogeneity::binned_death_curve(&table, a.bins, a.residualize, opts)?;
    let mut out = CsvOut::create(
        &stage.path("bins.csv"),
        &["bin", "n_events", "n_estimates", "mean_beta", "mean_deaths", "mean_log_deaths"],
    )?;
    for b in &curve.bins {
        out.row([
            b.bin.to_string(),
            b.n_events.to_string(),
            b.n_estimates.to_string(),
            fmt_f64(b.mean_beta),
            fmt_f64(b.mean_deaths),
            fmt_f64(b.mean_log_deaths),
        ])?;
    }
    stage.wrote(out.finish()?);

    let mut out = CsvOut::create(
        &stage.path("gradient.csv"),
        &["report_country", "n", "xi", "xi_se", "intercept", "nu", "nu_se", "ratio"],
    )?;
    for g in heterogeneity::death_gradient_by_country(&table, a.min_events, opts) {
        out.row([
            g.report_country.to_string(),
            g.n.to_string(),
            fmt_f64(g.xi),
            fmt_f64(g.xi_se),
            fmt_opt(g.intercept),
            fmt_opt(g.nu),
            fmt_opt(g.nu_se),
            fmt_opt(g.ratio),
        ])?;
    }
    stage.wrote(out.finish()?);
    Ok(())
}

fn parse_features(names: &[String], table: &AnalysisTable) -> anyhow::Result<Vec<Feature>> {
    if names.is_empty() {
        return Ok(Feature::ALL
            .into_iter()
            .filter(|f| table.rows.iter().any(|r| r.feature(*f).is_some()))
            .collect());
    }
    names
        .iter()
        .map(|n| Feature::parse(n).with_context(|| format!("unknown feature {n:?}")))
        .collect()
}

fn interact(a: &InteractArgs, stage: &mut Stage) -> anyhow::Result<()> {
    let (table, _) = load_table(&a.input, Some(&a.features), stage)?;
    let features = parse_features(&a.feature, &table)?;
    let opts = HeteroOptions {
        shrunk: a.input.shrunk,
        precision_weighted: a.weighted,
    };
    let results = heterogeneity::connectedness_grid(&table, &features, a.mode, opts)?;
    let mut out = CsvOut::create(&stage.path("results.csv"), &["feature", "spec_id", "mode", "coef", "se", "t", "n"])?;
    for r in &results {
        out.row([
            r.feature.name().to_string(),
            r.spec_id.to_string(),
            r.mode.name().to_string(),
            fmt_f64(r.coef),
            fmt_f64(r.se),
            fmt_f64(r.t),
            r.n.to_string(),
        ])?;
    }
    stage.wrote(out.finish()?);

    let mut out = CsvOut::create(&stage.path("robustness.csv"), &["feature", "mode", "sign"])?;
    for f in &features {
        let rows: Vec<_> = results.iter().filter(|r| r.feature == *f).cloned().collect();
        if rows.is_empty() {
            continue;
        }
        let class = serde_json::to_value(classify_robust(&rows))?;
        out.row([f.name(), a.mode.name(), class.as_str().unwrap_or("")])?;
    }
    stage.wrote(out.finish()?);
    Ok(())
}

fn forest_config(p: &ForestParams, set: FeatureSet) -> anyhow::Result<ForestConfig> {
    let cfg = ForestConfig {
        n_trees: p.trees,
        min_node_size: p.min_node,
        min_terminal: p.min_terminal,
        mtry: p.mtry,
        seed: p.seed,
        feature_set: set,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn forest_cmd(a: &ForestArgs, stage: &mut Stage) -> anyhow::Result<()> {
    let (table, _) = load_table(&a.input, Some(&a.features), stage)?;
    let cfg = forest_config(&a.forest, a.set)?;
    let (data, dropped) = Dataset::from_table(&table, a.set, a.input.shrunk)?;
    let (trained, report) = forest::train_with_report(&data, dropped, &cfg, a.repeats, &Rayon)?;
    stage.wrote(io::write_bytes(&stage.path("model.bin"), &binfmt::encode_model(&trained.model)?)?);
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    stage.wrote(io::write_bytes(&stage.path("report.json"), text.as_bytes())?);
    let mut out = CsvOut::create(&stage.path("importance.csv"), &["feature", "raw", "scaled"])?;
    for i in &report.importance {
        out.row([i.feature.clone(), fmt_f64(i.raw), fmt_f64(i.scaled)])?;
    }
    stage.wrote(out.finish()?);
    Ok(())
}

fn subset_path(a: &SubsetPathArgs, stage: &mut Stage) -> anyhow::Result<()> {
    let (table, _) = load_table(&a.input, Some(&a.features), stage)?;
    let cfg = forest_config(&a.forest, FeatureSet::Combined)?;
    let (data, _) = Dataset::from_table(&table, FeatureSet::Combined, a.input.shrunk)?;
    let path = forest::best_subset_path(&data, &cfg, a.path_trees, &Rayon)?;
    let names = |mask: u16| -> String {
        path.dyadic
            .iter()
            .enumerate()
            .filter(|(b, _)| mask & (1 << b) != 0)
            .map(|(_, n)| n.as_str())
            .collect::<Vec<_>>()
            .join("+")
    };
    for (file, rows) in [("path.csv", path.rows.iter().collect::<Vec<_>>()), ("envelope.csv", path.upper_envelope())] {
        let mut out = CsvOut::create(&stage.path(file), &["mask", "n_dyadic", "features", "r2_oob"])?;
        for r in rows {
            out.row([r.mask.to_string(), r.n_dyadic.to_string(), names(r.mask), fmt_f64(r.r2_oob)])?;
        }
        stage.wrote(out.finish()?);
    }
    Ok(())
}

fn parse_types(names: &[String]) -> anyhow::Result<Vec<DisasterType>> {
    names
        .iter()
        .map(|n| DisasterType::parse(n).with_context(|| format!("unknown disaster type {n:?}")))
        .collect()
}

fn bootstrap_cmd(a: &BootstrapArgs, stage: &mut Stage) -> anyhow::Result<()> {
    let (table, catalog) = load_table(&a.input, a.features.as_deref(), stage)?;
    let plan = BootstrapPlan {
        scheme: a.scheme,
        n_draws: a.draws,
        drop_count: a.drop_count,
        seed: a.seed,
    };
    let population: Option<Vec<CountryCode>> = match a.scheme {
        Scheme::DisasterCountryDrop => {
            let set: BTreeSet<CountryCode> = catalog.events().iter().map(|e| e.country).collect();
            Some(set.into_iter().collect())
        }
        _ => None,
    };
    let shrunk = a.input.shrunk;
    let order = parse_types(&a.order)?;

    // Statistic: a named vector of numbers per draw.
    let (names, point, draws): (Vec<String>, Vec<f64>, Vec<Option<Vec<f64>>>) = match a.statistic.as_str() {
        "type_means" => {
            let types: Vec<DisasterType> = bootstrap::type_means(&table, shrunk).into_keys().collect();
            let stat = |t: &AnalysisTable| -> Option<Vec<f64>> {
                let m = bootstrap::type_means(t, shrunk);
                types.iter().map(|d| m.get(d).copied()).collect()
            };
            let point = stat(&table).context("type means undefined on the full table")?;
            let draws = bootstrap::bootstrap(&table, &plan, population.as_deref(), stat, &Rayon)?;
            let names = types.iter().map(|d| format!("mean_{}", d.name())).collect();
            (names, point, draws.values)
        }
        "spec" => {
            let name = a.feature.as_deref().context("--feature is required for the spec statistic")?;
            let feature = Feature::parse(name).with_context(|| format!("unknown feature {name:?}"))?;
            if a.features.is_none() {
                bail!("--features is required for the spec statistic");
            }
            let opts = HeteroOptions {
                shrunk,
                precision_weighted: false,
            };
            let (spec, mode) = (a.spec_id, a.mode);
            let stat = move |t: &AnalysisTable| -> Option<Vec<f64>> {
                let r = heterogeneity::connectedness_regression(t, feature, mode, spec, opts).ok()??;
                r.defined.then_some(vec![r.coef])
            };
            let point = stat(&table).context("coefficient undefined on the full table")?;
            let draws = bootstrap::bootstrap(&table, &plan, population.as_deref(), stat, &Rayon)?;
            (vec![format!("coef_{}_spec{}", feature.name(), spec)], point, draws.values)
        }
        other => bail!("unknown statistic {other:?} (type_means, spec)"),
    };

    let mut out = CsvOut::create(&stage.path("draws.csv"), &["scheme", "statistic", "draw_id", "value"])?;
    for (d, v) in draws.iter().enumerate() {
        for (k, name) in names.iter().enumerate() {
            let value = v.as_ref().map_or_else(|| "NaN".to_string(), |v| fmt_f64(v[k]));
            out.row([a.scheme.name().to_string(), name.clone(), d.to_string(), value])?;
        }
    }
    stage.wrote(out.finish()?);

    let mut out = CsvOut::create(
        &stage.path("summary.csv"),
        &["scheme", "statistic", "point", "ci_lo", "ci_hi", "p_value", "n_draws", "n_missing"],
    )?;
    for (k, name) in names.iter().enumerate() {
        let col: Vec<Option<f64>> = draws.iter().map(|v| v.as_ref().map(|v| v[k])).collect();
        let s = bootstrap::summarize_bootstrap(&col, point[k])?;
        let mut row = vec![a.scheme.name().to_string(), name.clone()];
        row.extend(io::summary_fields(&s));
        out.row(row)?;
    }
    stage.wrote(out.finish()?);

    if !order.is_empty() {
        let kept = bootstrap::bootstrap(
            &table,
            &plan,
            population.as_deref(),
            |t| bootstrap::ordering_holds(&bootstrap::type_means(t, shrunk), &order),
            &Rayon,
        )?;
        let held = kept.values.iter().filter(|v| **v == Some(true)).count();
        let report = serde_json::json!({
            "order": order.iter().map(|d| d.name()).collect::<Vec<_>>(),
            "holds_on_full_table": bootstrap::ordering_holds(&bootstrap::type_means(&table, shrunk), &order),
            "draws_holding": held,
            "n_draws": kept.values.len(),
            "n_missing": kept.n_missing(),
        });
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        stage.wrote(io::write_bytes(&stage.path("ordering.json"), text.as_bytes())?);
    }
    Ok(())
}

fn parse_countries(names: &[String], known: &[CountryCode]) -> anyhow::Result<Vec<CountryCode>> {
    if names.is_empty() {
        return Ok(known.to_vec());
    }
    names
        .iter()
        .map(|n| {
            let c: CountryCode = n.parse().map_err(|e| anyhow::anyhow!("{n:?}: {e}"))?;
            if !known.contains(&c) {
                bail!("country {c} is not in the feature table");
            }
            Ok(c)
        })
        .collect()
}

fn dtype_label(d: Option<DisasterType>) -> &'static str {
    d.map_or("all", |d| d.name())
}

fn counterfactual_cmd(a: &CounterfactualArgs, stage: &mut Stage) -> anyhow::Result<()> {
    let model = binfmt::load_model(&stage.input(&a.model)?)?;
    let features: FeatureTable = pipeline::zscored(&io::read_features(&stage.input(&a.features)?)?)?;
    let known = features.countries();
    let reporting = parse_countries(&a.reporting, &known)?;
    let affected = parse_countries(&a.affected, &known)?;
    let dtypes = if a.dtype.is_empty() {
        DisasterType::ALL.to_vec()
    } else {
        parse_types(&a.dtype)?
    };
    let spec = ScenarioSpec {
        dtypes,
        grid: DeathGrid::range(a.grid_min, a.grid_max, a.grid_step)?,
        duration_days: a.duration,
    };
    let pairs: Vec<Pair> = all_pairs(&known)
        .into_iter()
        .filter(|p| reporting.contains(&p.report_country) && affected.contains(&p.affected_country))
        .collect();
    let sim = counterfactual::simulate_grid(&model, &features, &pairs, &spec, &Rayon);
    let grids = if a.average_types {
        average_over_types(&sim.grids)?
    } else {
        sim.grids
    };

    let mut out = CsvOut::create(
        &stage.path("grid.csv"),
        &["report_country", "affected_country", "dtype", "deaths", "beta_hat"],
    )?;
    for g in &grids {
        for (d, b) in g.grid.values().iter().zip(&g.beta) {
            out.row([
                g.report_country.to_string(),
                g.affected_country.to_string(),
                dtype_label(g.dtype).to_string(),
                d.to_string(),
                fmt_f64(*b),
            ])?;
        }
    }
    stage.wrote(out.finish()?);

    let mut out = CsvOut::create(&stage.path("skipped.csv"), &["report_country", "affected_country", "missing"])?;
    for s in &sim.skipped {
        out.row([s.pair.report_country.to_string(), s.pair.affected_country.to_string(), s.missing.clone()])?;
    }
    stage.wrote(out.finish()?);

    let mut by_type: BTreeMap<&'static str, Vec<&ScenarioGrid>> = BTreeMap::new();
    for g in &grids {
        by_type.entry(dtype_label(g.dtype)).or_default().push(g);
    }

    if let Some(view) = a.view {
        let mut out = CsvOut::create(
            &stage.path("normalized.csv"),
            &["report_country", "affected_country", "dtype", "deaths", "beta_hat", "view", "norm_value"],
        )?;
        for (label, gs) in &by_type {
            let triples: Vec<(CountryCode, CountryCode, f64)> = gs
                .iter()
                .flat_map(|g| g.beta.iter().map(move |&b| (g.report_country, g.affected_country, b)))
                .collect();
            let nv = normalize_view(&triples, view)?;
            let deaths: Vec<u32> = gs.iter().flat_map(|g| g.grid.values().iter().copied()).collect();
            for (v, d) in nv.values.iter().zip(deaths) {
                out.row([
                    v.report_country.to_string(),
                    v.affected_country.to_string(),
                    label.to_string(),
                    d.to_string(),
                    fmt_f64(v.raw),
                    view.name().to_string(),
                    fmt_opt(v.norm),
                ])?;
            }
        }
        stage.wrote(out.finish()?);
    }

    if let Some(deaths_ref) = a.reference_deaths {
        let mut out = CsvOut::create(
            &stage.path("equivalents.csv"),
            &["report_country", "target_country", "query_country", "dtype", "deaths_ref", "kind", "deaths_star", "nearest"],
        )?;
        for (label, gs) in &by_type {
            for t in gs {
                for q in gs.iter().filter(|q| q.report_country == t.report_country && q.affected_country != t.affected_country) {
                    let eq = equivalent_deaths(t, q, deaths_ref)?;
                    let (kind, star, nearest) = match eq {
                        Equivalence::Deaths { deaths } => ("deaths", fmt_f64(deaths), String::new()),
                        Equivalence::OutOfRange { nearest, above } => {
                            (if above { "above_range" } else { "below_range" }, String::new(), nearest.to_string())
                        }
                        Equivalence::Undefined => ("undefined", String::new(), String::new()),
                    };
                    out.row([
                        t.report_country.to_string(),
                        t.affected_country.to_string(),
                        q.affected_country.to_string(),
                        label.to_string(),
                        fmt_f64(deaths_ref),
                        kind.to_string(),
                        star,
                        nearest,
                    ])?;
                }
            }
        }
        stage.wrote(out.finish()?);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let snapshot = service::Snapshot::load(&a.model, &a.features)?;
    log::info!("model {} loaded", snapshot.model_hash());
    let state = service::AppState::new(Some(snapshot));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        #[cfg(unix)]
        {
            let state = state.clone();
            let (model, features) = (a.model.clone(), a.features.clone());
            let mut hup = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::hangup())?;
            tokio::spawn(async move {
                while hup.recv().await.is_some() {
                    match service::Snapshot::load(&model, &features) {
                        Ok(s) => {
                            log::info!("reloaded model {}", s.model_hash());
                            state.swap(Some(s));
                        }
                        Err(e) => log::error!("reload failed, keeping the current model: {e:#}"),
                    }
                }
            });
        }
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &[&str]) -> Vec<OsString> {
        s.iter().map(OsString::from).collect()
    }

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn subcommand_is_found_after_globals() {
        assert_eq!(subcommand_position(&argv(&["ms", "--threads", "2", "estimate", "--tau", "3"])), Some(3));
        assert_eq!(subcommand_position(&argv(&["ms", "--out", "estimate", "ingest"])), Some(3));
        assert_eq!(subcommand_position(&argv(&["ms", "--help"])), None);
    }

    #[test]
    fn config_values_are_spliced_before_cli_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        std::fs::write(&cfg, "# defaults\ntau = 5\nout = cfg_out\nbins = 20\n[estimate]\nshrink_two_sided = true\n").unwrap();
        let (v, out) = splice_config(argv(&["ms", "--config", cfg.to_str().unwrap(), "estimate", "--tau", "2", "--events", "e.csv", "--counts", "c.csv"])).unwrap();
        let v: Vec<String> = v.iter().map(|s| s.to_string_lossy().into()).collect();
        assert_eq!(out, Some(PathBuf::from("cfg_out")));
        assert_eq!(&v[3..8], ["estimate", "--tau", "5", "--shrink-two-sided", "--tau"]);
        let cli = Cli::try_parse_from(&v).unwrap();
        let Command::Estimate(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.tau, 2);
        assert!(a.shrink_two_sided);
    }

    #[test]
    fn unknown_section_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.conf");
        std::fs::write(&cfg, "[estimate]\nbins = 3\n").unwrap();
        let err = splice_config(argv(&["ms", "--config", cfg.to_str().unwrap(), "estimate"])).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}
