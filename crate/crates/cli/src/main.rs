//! `driftforge` command-line driver.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use driftforge::dataset::{self, LabeledPool, MonthlyStream, SynthConfig};
use driftforge::harness::{self, ALConfig, Summary};
use driftforge::{hcc, selectors, Error};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "driftforge",
    version,
    about = "Drift-aware active learning runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "DRIFTFORGE_OUT")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, env = "DRIFTFORGE_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = one per core). Does not change results.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic drift stream.
    Synth(Common),
    /// Run the monthly active-learning loop.
    Run(Common),
    /// Two-round hyperparameter search.
    Tune(Common),
    /// Export encoder embeddings of a stream as CSV.
    ExportEmbeddings(ExportArgs),
    /// Print a summary.json as text.
    Report {
        /// summary.json, or a directory holding one.
        path: PathBuf,
    },
    /// Re-execute the command recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory (defaults to the one in the manifest).
        #[arg(long, env = "DRIFTFORGE_OUT")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct ExportArgs {
    /// hcc checkpoint written by `run`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Months to export, e.g. `3..7` or `5` (default: all).
    #[arg(long)]
    months: Option<String>,
    /// Unit-normalize embeddings.
    #[arg(long)]
    normalized: bool,
    #[arg(long, env = "DRIFTFORGE_OUT")]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    jobs: usize,
}

/// CLI failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Usage(_) | Error::Diverged(_) => 2,
            Error::Invariant(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 3,
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum DataSource {
    /// Stream file; relative paths resolve against the config file.
    Path(PathBuf),
    Synth(SynthConfig),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: DataSource,
    initial_months: Range<u32>,
    #[serde(default)]
    al: ALConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TuneConfig {
    data: DataSource,
    initial_months: Range<u32>,
    validation_months: Range<u32>,
    #[serde(default = "default_splits")]
    n_splits: usize,
    #[serde(default = "default_round2_budget")]
    round2_budget: usize,
    #[serde(default)]
    base: Value,
    /// Partial overrides merged onto `base`, one per candidate.
    grid: Vec<Value>,
    #[serde(default)]
    seed: u64,
}

fn default_splits() -> usize {
    5
}

fn default_round2_budget() -> usize {
    50
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    command: String,
    config_path: Option<PathBuf>,
    resolved_config: Value,
    seed: Option<u64>,
    out_dir: PathBuf,
    version: String,
}

fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Failure::config(format!("{what}: at `{path}`: {}", e.inner()))
    })
}

fn from_value<T: DeserializeOwned>(v: Value, what: &str) -> CliResult<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        Failure::config(format!("{what}: at `{path}`: {}", e.inner()))
    })
}

fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_json(&text, &path.display().to_string())
}

fn resolve_data(data: DataSource, config_path: Option<&Path>) -> DataSource {
    match data {
        DataSource::Path(p) if p.is_relative() => {
            let base = config_path
                .and_then(Path::parent)
                .map(Path::to_path_buf)
                .unwrap_or_default();
            DataSource::Path(std::path::absolute(base.join(&p)).unwrap_or(p))
        }
        other => other,
    }
}

fn load_data(data: &DataSource) -> CliResult<MonthlyStream> {
    match data {
        DataSource::Path(p) => dataset::load_stream(p).map_err(|e| Failure {
            code: 3,
            msg: format!("{}: {e}", p.display()),
        }),
        DataSource::Synth(s) => Ok(dataset::synthesize_stream(s)?),
    }
}

/// Recursive object merge; `patch` wins.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

/// Writes through a temp file in the same directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| Failure {
        code: 3,
        msg: format!("cannot create {}: {e}", out.display()),
    })
}

fn write_manifest(
    out: &Path,
    command: &str,
    config_path: Option<&Path>,
    resolved: Value,
    seed: Option<u64>,
) -> CliResult<()> {
    let m = Manifest {
        command: command.into(),
        config_path: config_path.map(Path::to_path_buf),
        resolved_config: resolved,
        seed,
        out_dir: out.to_path_buf(),
        version: VERSION.into(),
    };
    write_atomic(&out.join("manifest.json"), &json_bytes(&m))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_synth(cfg: SynthConfig, out: &Path, config_path: Option<&Path>) -> CliResult<()> {
    cfg.validate()?;
    let stream = dataset::synthesize_stream(&cfg)?;
    prepare_out(out)?;
    let mut buf = Vec::new();
    dataset::write_stream(&mut buf, &stream)?;
    write_atomic(&out.join("stream.tsv"), &buf)?;
    let seed = cfg.seed;
    write_manifest(
        out,
        "synth",
        config_path,
        serde_json::to_value(&cfg).unwrap(),
        Some(seed),
    )?;
    log::info!(
        "wrote {} samples over {} months",
        stream.len(),
        stream.months.len()
    );
    Ok(())
}

fn cmd_run(cfg: RunConfig, out: &Path, config_path: Option<&Path>) -> CliResult<()> {
    cfg.al.validate()?;
    let stream = load_data(&cfg.data)?;
    let (report, log, model) =
        harness::run_active_learning_with_model(&stream, cfg.initial_months.clone(), &cfg.al)?;
    harness::check_no_leakage(&log)?;
    prepare_out(out)?;
    let mut metrics = Vec::new();
    harness::write_metrics_csv(&mut metrics, &report)?;
    write_atomic(&out.join("metrics.csv"), &metrics)?;
    let mut sel = Vec::new();
    harness::write_selections_csv(&mut sel, &log)?;
    write_atomic(&out.join("selections.csv"), &sel)?;
    let summary = harness::summarize(&cfg.al, &report, &log, &stream);
    write_atomic(&out.join("summary.json"), &json_bytes(&summary))?;
    if let Some(model) = model {
        save_model_atomic(&model, out, &cfg.al.hcc.config_hash())?;
    }
    let seed = cfg.al.seed;
    write_manifest(
        out,
        "run",
        config_path,
        serde_json::to_value(&cfg).unwrap(),
        Some(seed),
    )?;
    log::info!(
        "mean FNR {}% FPR {}% F1 {}%",
        summary.mean_fnr_pct,
        summary.mean_fpr_pct,
        summary.mean_f1_pct
    );
    Ok(())
}

fn save_model_atomic(model: &hcc::EncoderClassifier, out: &Path, hash: &str) -> CliResult<()> {
    let staging = tempfile::tempdir_in(out)?;
    let path = staging.path().join("model.ckpt");
    hcc::save_model(model, &path, hash)?;
    for entry in fs::read_dir(staging.path())? {
        let entry = entry?;
        fs::rename(entry.path(), out.join(entry.file_name()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BestConfig<'a> {
    data: &'a DataSource,
    initial_months: Range<u32>,
    al: &'a ALConfig,
}

fn cmd_tune(cfg: TuneConfig, out: &Path, config_path: Option<&Path>) -> CliResult<()> {
    if cfg.grid.is_empty() {
        return Err(Failure::config("grid: candidate grid is empty"));
    }
    let mut candidates = Vec::with_capacity(cfg.grid.len());
    for (i, patch) in cfg.grid.iter().enumerate() {
        let mut v = if cfg.base.is_null() {
            Value::Object(Default::default())
        } else {
            cfg.base.clone()
        };
        merge(&mut v, patch);
        let c: ALConfig = from_value(v, &format!("grid[{i}]"))?;
        candidates.push(c);
    }
    let stream = load_data(&cfg.data)?;
    let pool = LabeledPool::from_initial(
        cfg.initial_months
            .clone()
            .flat_map(|m| stream.month(m).iter().cloned())
            .collect(),
    )?;
    let exec = candidates[0].exec;
    let r1 = harness::tune_round1(&pool, stream.dim, &candidates, cfg.n_splits, cfg.seed, exec)?;
    let shortlist: Vec<usize> = r1
        .iter()
        .take(harness::ROUND2_KEEP)
        .map(|e| e.candidate)
        .collect();
    let (best, r2) = harness::tune_round2(
        &stream,
        &candidates,
        &shortlist,
        cfg.initial_months.clone(),
        cfg.validation_months.clone(),
        cfg.round2_budget,
        exec,
    )?;
    prepare_out(out)?;
    let mut csv = String::from("rank,candidate,round1_mean_F1,round2_mean_F1\n");
    for (rank, row) in harness::leaderboard(&r1, &r2).iter().enumerate() {
        csv += &format!(
            "{},{},{},{}\n",
            rank + 1,
            row.candidate,
            harness::pct(row.round1_mean_f1),
            row.round2_mean_f1.map(harness::pct).unwrap_or_default()
        );
    }
    write_atomic(&out.join("leaderboard.csv"), csv.as_bytes())?;
    let best_cfg = BestConfig {
        data: &cfg.data,
        initial_months: cfg.initial_months.clone(),
        al: &candidates[best],
    };
    write_atomic(&out.join("best_config.json"), &json_bytes(&best_cfg))?;
    let seed = cfg.seed;
    write_manifest(
        out,
        "tune",
        config_path,
        serde_json::to_value(&cfg).unwrap(),
        Some(seed),
    )?;
    log::info!("best candidate: {best}");
    Ok(())
}

fn parse_months(text: &str, stream: &MonthlyStream) -> CliResult<Range<u32>> {
    let bad = || Failure::config(format!("months: cannot parse {text:?} (use `a..b` or `m`)"));
    let r = match text.split_once("..") {
        Some((a, b)) => {
            a.trim().parse().map_err(|_| bad())?..b.trim().parse().map_err(|_| bad())?
        }
        None => {
            let m: u32 = text.trim().parse().map_err(|_| bad())?;
            m..m + 1
        }
    };
    if r.start < stream.first_month || r.end > stream.end_month() || r.is_empty() {
        return Err(Failure::config(format!(
            "months: {r:?} is outside the stream's {}..{}",
            stream.first_month,
            stream.end_month()
        )));
    }
    Ok(r)
}

fn cmd_export(args: &ExportArgs) -> CliResult<()> {
    let model = hcc::load_model(&args.model)?;
    let stream = dataset::load_stream(&args.stream)?;
    if model.input_dim() != stream.dim {
        return Err(Failure {
            code: 3,
            msg: format!(
                "model expects {} input features but the stream has {}",
                model.input_dim(),
                stream.dim
            ),
        });
    }
    let range = match &args.months {
        Some(s) => parse_months(s, &stream)?,
        None => stream.first_month..stream.end_month(),
    };
    let samples: Vec<_> = range
        .flat_map(|m| stream.month(m).iter().cloned())
        .collect();
    let mut emb = model.embed_samples(&samples, driftforge::Exec::default())?;
    if args.normalized {
        emb = selectors::normalize_rows(emb);
    }
    prepare_out(&args.out)?;
    let mut buf = Vec::new();
    selectors::write_embeddings_csv(&mut buf, &samples, emb.view())?;
    write_atomic(&args.out.join("embeddings.csv"), &buf)?;
    write_manifest(
        &args.out,
        "export-embeddings",
        None,
        serde_json::to_value(args).unwrap(),
        None,
    )?;
    Ok(())
}

fn render_report(s: &Summary) -> String {
    let mut t = String::new();
    let baseline = if s.fixed_classifier_baseline {
        " (fixed-classifier baseline)"
    } else {
        ""
    };
    t += &format!(
        "method {}  budget {}/month{baseline}  start {:?}  seed {}\n",
        s.method.name(),
        s.budget_per_month,
        s.start_mode,
        s.seed
    );
    t += &format!(
        "{} test months  mean FNR {}%  FPR {}%  F1 {}%\n",
        s.months, s.mean_fnr_pct, s.mean_fpr_pct, s.mean_f1_pct
    );
    t += &format!("labels charged {}\n", s.labels_charged);
    let lt = &s.lead_time;
    t += &format!(
        "new families {}  popular {}  labeled before popular {} ({:.2})",
        lt.families.len(),
        lt.n_popular,
        lt.n_labeled_before_popular,
        lt.fraction_before_popular
    );
    if let Some(m) = lt.mean_lead {
        t += &format!("  mean lead {m:.2} months");
    }
    t += "\n";
    for f in &lt.families {
        t += &format!(
            "  family {}: popular {}  first labeled {}\n",
            f.family,
            f.popular_month.map_or("-".into(), |m| m.to_string()),
            f.first_labeled.map_or("-".into(), |m| m.to_string())
        );
    }
    for flag in &s.flags {
        t += &format!("flag: {flag}\n");
    }
    t
}

fn cmd_report(path: &Path) -> CliResult<()> {
    let file = if path.is_dir() {
        path.join("summary.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Failure {
        code: 3,
        msg: format!("{}: {e}", file.display()),
    })?;
    let s: Summary =
        parse_json(&text, &file.display().to_string()).map_err(|f| Failure { code: 3, ..f })?;
    print!("{}", render_report(&s));
    Ok(())
}

fn with_seed<T>(mut cfg: T, seed: Option<u64>, set: impl Fn(&mut T, u64)) -> T {
    if let Some(s) = seed {
        set(&mut cfg, s);
    }
    cfg
}

fn dispatch(
    command: &str,
    config: Value,
    config_path: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> CliResult<()> {
    let what = config_path
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "manifest".into());
    match command {
        "synth" => {
            let cfg: SynthConfig = from_value(config, &what)?;
            cmd_synth(with_seed(cfg, seed, |c, s| c.seed = s), out, config_path)
        }
        "run" => {
            let cfg: RunConfig = from_value(config, &what)?;
            let mut cfg = with_seed(cfg, seed, |c, s| c.al.seed = s);
            cfg.data = resolve_data(cfg.data, config_path);
            cmd_run(cfg, out, config_path)
        }
        "tune" => {
            let cfg: TuneConfig = from_value(config, &what)?;
            let mut cfg = with_seed(cfg, seed, |c, s| c.seed = s);
            cfg.data = resolve_data(cfg.data, config_path);
            cmd_tune(cfg, out, config_path)
        }
        "export-embeddings" => {
            let mut args: ExportArgs = from_value(config, &what)?;
            args.out = out.to_path_buf();
            cmd_export(&args)
        }
        other => Err(Failure::config(format!("unknown command {other:?}"))),
    }
}

fn init_threads(jobs: usize) {
    if jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
}

fn run_common(name: &str, c: &Common) -> CliResult<()> {
    init_threads(c.jobs);
    let text = fs::read_to_string(&c.config)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", c.config.display())))?;
    let value: Value = parse_json(&text, &c.config.display().to_string())?;
    dispatch(name, value, Some(&c.config), &c.out, c.seed)
}

fn run_cli(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(c) => run_common("synth", &c),
        Command::Run(c) => run_common("run", &c),
        Command::Tune(c) => run_common("tune", &c),
        Command::ExportEmbeddings(a) => {
            init_threads(a.jobs);
            cmd_export(&a)
        }
        Command::Report { path } => cmd_report(&path),
        Command::Rerun {
            manifest,
            out,
            jobs,
        } => {
            init_threads(jobs);
            let m: Manifest = read_config(&manifest)?;
            let out = out.unwrap_or_else(|| m.out_dir.clone());
            dispatch(
                &m.command,
                m.resolved_config,
                m.config_path.as_deref(),
                &out,
                None,
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run_cli(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
