use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, NaiveDateTime, Utc};
use clap::{Args, Parser, Subcommand};
use tracing::info;

use covbridge::batch_analytics::{run_batch, Granularity, JobSpec, Metric, SummaryTable, SummaryTables, PERIOD_FORMAT};
use covbridge::cov_ingest::{
    bind, serve, BackupJournal, IndexedStore, Ingestor, Quarantine, ServeOptions, JOURNAL_ENV,
};
use covbridge::device_sim::{stream, Scenario, TcpSink};
use covbridge::export_map::{
    build_3d, emit_summary_csv, map_frame, read_point_order, select_time, write_summary, BimRegistry, ExportWindow,
    SummaryCsv, DEFAULT_SENTINEL,
};
use covbridge::gateway_api::{router, serve_api, ApiState, REGISTRY_FILE, SPATIAL_FILE};
use covbridge::point_model::{parse_network_name, LookupTable};
use covbridge::ts_store::{StoreConfig, TsStore, DEFAULT_BASE_RESOLUTION};

#[derive(Parser)]
#[command(name = "covbridge", version, about = "BAS change-of-value telemetry pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lookup-table tools.
    #[command(subcommand)]
    Points(PointsCmd),
    /// Accept COV events over TCP.
    Serve(ServeArgs),
    /// Push backup-journal lines into the store.
    Replay(ReplayArgs),
    /// Stream a simulated field network to a COV server.
    Simulate(SimulateArgs),
    /// Inspect stored series.
    #[command(subcommand)]
    Store(StoreCmd),
    /// Summarize the stored series into tables.
    Batch(BatchArgs),
    /// Pivot one summary table into the mapping CSV.
    Export(ExportArgs),
    /// Select one time row of a summary CSV and map it onto the registry.
    Map(MapArgs),
    /// Serve frames and summaries over HTTP.
    ServeApi(ServeApiArgs),
}

#[derive(Subcommand)]
enum PointsCmd {
    /// Validate a lookup table.
    Lint { file: PathBuf },
    /// Print the system name of a network point.
    Resolve {
        network_id: String,
        #[arg(long, default_value = "lookup.csv")]
        lookup: PathBuf,
    },
}

#[derive(Args)]
struct StoreArgs {
    /// Store directory (events.log, series.log).
    #[arg(long, default_value = "data/store")]
    store: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BASE_RESOLUTION)]
    base_resolution: u32,
}

impl StoreArgs {
    fn config(&self) -> StoreConfig {
        StoreConfig {
            base_resolution: self.base_resolution,
            ..StoreConfig::default()
        }
    }

    fn open(&self) -> Result<IndexedStore> {
        IndexedStore::open(&self.store, self.config())
            .with_context(|| format!("opening store {}", self.store.display()))
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "0.0.0.0:5005")]
    bind: String,
    /// Overridden by COVBRIDGE_JOURNAL.
    #[arg(long, default_value = "backup.journal")]
    journal: PathBuf,
    #[arg(long, default_value = "lookup.csv")]
    lookup: PathBuf,
    #[arg(long)]
    quarantine: Option<PathBuf>,
    /// Read many newline-delimited events per connection.
    #[arg(long)]
    persistent: bool,
    #[command(flatten)]
    store: StoreArgs,
}

#[derive(Args)]
struct ReplayArgs {
    /// Overridden by COVBRIDGE_JOURNAL.
    #[arg(long, default_value = "backup.journal")]
    journal: PathBuf,
    #[arg(long, default_value = "lookup.csv")]
    lookup: PathBuf,
    #[arg(long)]
    quarantine: Option<PathBuf>,
    #[command(flatten)]
    store: StoreArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    sink: String,
    #[arg(long)]
    persistent: bool,
    /// Write the full run report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the lookup table for the scenario's points.
    #[arg(long)]
    emit_lookup: Option<PathBuf>,
}

#[derive(Subcommand)]
enum StoreCmd {
    /// Print `name,unix_seconds,value` for a point in `[from, to)`.
    Dump {
        #[arg(long)]
        point: String,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[command(flatten)]
        store: StoreArgs,
    },
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    store: StoreArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    metric: Metric,
    #[arg(long)]
    granularity: Granularity,
    /// Directory written by `batch`.
    #[arg(long, default_value = "data/tables")]
    tables: PathBuf,
    #[arg(long, default_value = "data/export")]
    out: PathBuf,
    /// Point ids in cell order, comma separated. Defaults to every point id
    /// in the table, sorted.
    #[arg(long, value_delimiter = ',')]
    points: Vec<String>,
    #[arg(long)]
    from: Option<String>,
    #[arg(long)]
    to: Option<String>,
    #[arg(long)]
    last: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SENTINEL)]
    sentinel: f64,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    csv: PathBuf,
    /// Row index, newest first.
    #[arg(long)]
    time: usize,
    /// Defaults to `registry.json` beside the CSV.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Defaults to `spatial.csv` beside the CSV, when present.
    #[arg(long)]
    spatial: Option<PathBuf>,
    /// Point order file; defaults to the CSV's `.points` sidecar.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Write the model snapshot here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SENTINEL)]
    sentinel: f64,
}

#[derive(Args)]
struct ServeApiArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "data/export")]
    data: PathBuf,
    /// Static UI bundle served for unmatched paths.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SENTINEL)]
    sentinel: f64,
}

fn journal_path(flag: &Path) -> PathBuf {
    std::env::var_os(JOURNAL_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| flag.to_path_buf())
}

fn load_lookup(path: &Path) -> Result<Arc<LookupTable>> {
    let table = LookupTable::load(path).with_context(|| format!("loading lookup table {}", path.display()))?;
    Ok(Arc::new(table))
}

fn parse_time(text: &str) -> Result<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(text) {
        return Ok(t.with_timezone(&Utc));
    }
    if let Ok(t) = NaiveDateTime::parse_from_str(text, PERIOD_FORMAT) {
        return Ok(t.and_utc());
    }
    bail!("cannot parse {text:?}: expected RFC 3339 or \"YYYY-MM-DD hh:mm:ss\" (UTC)")
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn points(cmd: PointsCmd) -> Result<ExitCode> {
    match cmd {
        PointsCmd::Lint { file } => match LookupTable::load(&file) {
            Ok(table) => {
                println!("{}: {} entries ok", file.display(), table.len());
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => {
                eprintln!("{}: {e}", file.display());
                Ok(ExitCode::FAILURE)
            }
        },
        PointsCmd::Resolve { network_id, lookup } => {
            let net = parse_network_name(&network_id)?;
            let table = load_lookup(&lookup)?;
            println!("{}", table.resolve(&net)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

async fn serve_cmd(args: ServeArgs) -> Result<ExitCode> {
    let lookup = load_lookup(&args.lookup)?;
    let store = args.store.open()?;
    let journal = BackupJournal::new(journal_path(&args.journal));
    info!(journal = %journal.path().display(), pending = journal.len()?, "backup journal");
    let ingestor = Ingestor::new(lookup, store, journal, Quarantine::new(args.quarantine));
    let ingestor = Arc::new(Mutex::new(ingestor));
    let listener = bind(&args.bind).await?;
    let options = ServeOptions {
        persistent: args.persistent,
        ..ServeOptions::default()
    };
    serve(listener, Arc::clone(&ingestor), options, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    let counters = ingestor.lock().unwrap_or_else(|p| p.into_inner()).counters();
    info!(?counters, "stopped");
    Ok(ExitCode::SUCCESS)
}

fn replay(args: ReplayArgs) -> Result<ExitCode> {
    let lookup = load_lookup(&args.lookup)?;
    let store = args.store.open()?;
    let journal = BackupJournal::new(journal_path(&args.journal));
    let mut ingestor = Ingestor::new(lookup, store, journal, Quarantine::new(args.quarantine));
    let report = ingestor.replay_backup()?;
    print_json(&report)?;
    Ok(if report.remaining == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn open_series(args: &StoreArgs) -> Result<TsStore> {
    let path = args.store.join("series.log");
    if !path.exists() {
        bail!("no series log at {}", path.display());
    }
    TsStore::open(&path, args.config()).with_context(|| format!("opening {}", path.display()))
}

fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let scenario = Scenario::load(&args.scenario)?;
    if let Some(path) = &args.emit_lookup {
        scenario.lookup_table()?.write_csv(std::fs::File::create(path)?)?;
    }
    let mut sink = TcpSink::new(args.sink.as_str())?.persistent(args.persistent);
    let report = stream(&scenario, &mut sink, &mut ());
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&report.summary())?;
    // lines the server never acknowledged are a failed run
    if report.unsent.is_empty() && report.rejected.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn store_cmd(cmd: StoreCmd) -> Result<ExitCode> {
    let StoreCmd::Dump { point, from, to, store } = cmd;
    let name = point.parse()?;
    let series = open_series(&store)?;
    let mut out = std::io::stdout().lock();
    for s in series.query_range(&name, &parse_time(&from)?, &parse_time(&to)?) {
        use std::io::Write;
        writeln!(out, "{name},{},{}", s.at.timestamp(), s.value)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn batch(args: BatchArgs) -> Result<ExitCode> {
    let spec = JobSpec::from_json(&std::fs::read_to_string(&args.spec)?)?;
    let series = open_series(&args.store)?;
    let tables = run_batch(&series.snapshot(), &spec);
    tables.write_dir(&args.out)?;
    for t in tables.iter() {
        println!(
            "{}: {} records",
            SummaryTable::file_name(t.metric, t.granularity),
            t.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn export(args: ExportArgs) -> Result<ExitCode> {
    let table = SummaryTables::read_table(&args.tables, args.metric, args.granularity).with_context(|| {
        format!(
            "reading {} {} table from {}",
            args.metric,
            args.granularity,
            args.tables.display()
        )
    })?;
    let window = ExportWindow {
        from: args.from.as_deref().map(parse_time).transpose()?,
        to: args.to.as_deref().map(parse_time).transpose()?,
        last: args.last,
    };
    let points = if args.points.is_empty() {
        let ids: BTreeSet<&str> = table.records().iter().map(|r| r.point.point_id()).collect();
        ids.into_iter().map(str::to_owned).collect()
    } else {
        args.points
    };
    let csv = emit_summary_csv(&table, &points, &window, args.sentinel)?;
    let path = write_summary(&args.out, args.metric, args.granularity, &csv, &points)?;
    println!(
        "{}: {} rows x {} columns",
        path.display(),
        csv.rows.len(),
        csv.columns.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn map(args: MapArgs) -> Result<ExitCode> {
    let csv = SummaryCsv::load(&args.csv).with_context(|| format!("reading {}", args.csv.display()))?;
    let points_path = args.points.unwrap_or_else(|| args.csv.with_extension("points"));
    let point_order = read_point_order(&points_path).with_context(|| format!("reading {}", points_path.display()))?;
    let dir = args.csv.parent().unwrap_or(Path::new("."));
    let registry_path = args.registry.unwrap_or_else(|| dir.join(REGISTRY_FILE));
    let mut registry = BimRegistry::load_seed(&registry_path)
        .with_context(|| format!("loading registry {}", registry_path.display()))?;
    let spatial = args
        .spatial
        .or_else(|| Some(dir.join(SPATIAL_FILE)).filter(|p| p.exists()));
    if let Some(spatial) = &spatial {
        registry.apply_spatial_table(std::fs::File::open(spatial)?)?;
    }
    let nested = build_3d(&csv, &registry.order())?;
    let frame = select_time(&nested, args.time)?;
    let report = map_frame(&frame, &point_order, &mut registry, args.sentinel)?;
    eprintln!(
        "{}: {} values written, {} sentinel",
        nested.timestamps[args.time],
        report.written,
        report.skipped.len()
    );
    let snapshot = registry.snapshot_model();
    match &args.out {
        Some(path) => std::fs::write(path, snapshot)?,
        None => println!("{snapshot}"),
    }
    Ok(ExitCode::SUCCESS)
}

async fn serve_api_cmd(args: ServeApiArgs) -> Result<ExitCode> {
    let state = ApiState::load(&args.data, args.sentinel)?;
    let app = router(state, args.static_dir.as_deref());
    serve_api(SocketAddr::from(([0, 0, 0, 0], args.port)), app).await?;
    Ok(ExitCode::SUCCESS)
}

#[tokio::main]
async fn main() -> Result<ExitCode> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match Cli::parse().command {
        Command::Points(cmd) => points(cmd),
        Command::Serve(args) => serve_cmd(args).await,
        Command::Replay(args) => replay(args),
        Command::Simulate(args) => tokio::task::spawn_blocking(move || simulate(args)).await?,
        Command::Store(cmd) => store_cmd(cmd),
        Command::Batch(args) => batch(args),
        Command::Export(args) => export(args),
        Command::Map(args) => map(args),
        Command::ServeApi(args) => serve_api_cmd(args).await,
    }
}
