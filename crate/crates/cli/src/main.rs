use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use scooter_core::assoc::{
    apply_threshold, associate, parse_thresholds, read_associated_csv, sensitivity,
    write_associated_csv, write_sensitivity_csv, AssocError, Endpoint, ThresholdMode,
};
use scooter_core::ingest::{
    bounding_box_filter, write_jsonl_batch, FeedFormat, IngestError, SnapshotReader,
};
use scooter_core::pipeline::{
    extract_file, harvest_region, places_client, run_pipeline, write_json_file, PipelineConfig,
    PipelineError, StageError,
};
use scooter_core::poi::{normalize, Catalog, PoiError, RawPoi};
use scooter_core::purpose::{
    build_all, drill_down, parse_group_pair, write_long_csv, PurposeError,
};
use scooter_core::synth::{generate_truth, score, GroundTruth, ScenarioConfig, SynthError};
use scooter_core::trips::{
    clean_trips, crop_to_region, read_trips_csv, write_trips_csv, TripError,
};

#[derive(Parser)]
#[command(
    name = "scooter",
    version,
    about = "Dockless e-scooter trips, POI association and trip purpose"
)]
struct Cli {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long, global = true, env = "SCOOTER_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info", env = "SCOOTER_LOG")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a feed, keep observations inside the region, write JSONL.
    Ingest {
        #[arg(long)]
        feed: Option<PathBuf>,
        #[arg(long)]
        format: Option<FeedFormat>,
        /// Defaults to `<out-dir>/feed_region.jsonl`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Reconstruct trips from a feed, clean them and crop to the region.
    Extract {
        #[arg(long)]
        feed: Option<PathBuf>,
        #[arg(long)]
        format: Option<FeedFormat>,
    },
    /// Query the places source over the harvest grids.
    Harvest,
    /// Turn harvested places into a grouped catalog.
    Normalize {
        /// Defaults to `<out-dir>/raw_pois.json`.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Link trip endpoints to their nearest POIs.
    Associate {
        #[arg(long)]
        trips: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        cutoff_m: Option<f64>,
    },
    /// Trips kept per group across a range of distance thresholds.
    Sensitivity {
        #[arg(long)]
        assoc: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// `start:end:step` or a comma-separated list, in meters.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long, value_enum, default_value = "all")]
        mode: ModeArg,
    },
    /// Purpose matrices and drill-downs from thresholded associations.
    Report {
        /// Defaults to `<out-dir>/assoc_within_cutoff.csv`.
        #[arg(long)]
        assoc: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Generate a synthetic feed and its ground truth.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        feed: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Compare trips extracted from a feed with the ground truth.
    Score {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        feed: PathBuf,
    },
    /// Every stage end to end, with a manifest.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Both,
    All,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let code = match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(e) => e.exit_code(),
            CliError::Stage(e) => e.exit_code(),
            CliError::Synth(SynthError::InvalidConfig(_)) => 1,
            CliError::Synth(_) | CliError::Io { .. } => 2,
        };
        code as u8
    }
}

macro_rules! stage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Stage(e.into())
            }
        }
    )*};
}
stage_from!(IngestError, TripError, PoiError, AssocError, PurposeError);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("report serializes")
    );
}

fn load_catalog(path: &Path) -> Result<Catalog, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "catalog {} does not exist",
            path.display()
        )));
    }
    Ok(Catalog::load(path)?)
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn feed_format(path: &Path, explicit: Option<FeedFormat>) -> FeedFormat {
    explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => FeedFormat::Csv,
        _ => FeedFormat::Jsonl,
    })
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let out = config.out_dir.clone();
    let in_out =
        |given: &Option<PathBuf>, name: &str| given.clone().unwrap_or_else(|| out.join(name));
    let catalog_path = |given: &Option<PathBuf>| {
        given
            .clone()
            .or_else(|| config.poi.catalog.clone())
            .unwrap_or_else(|| out.join("catalog.json"))
    };

    match &cli.command {
        Command::Ingest {
            feed,
            format,
            output,
        } => {
            let feed = feed.clone().unwrap_or_else(|| config.feed.clone());
            let output = in_out(output, "feed_region.jsonl");
            let mut reader = SnapshotReader::new(open(&feed)?, feed_format(&feed, *format));
            let mut w = create(&output)?;
            let mut kept = 0u64;
            let mut failure = None;
            let batches = reader
                .by_ref()
                .map_while(|b| b.map_err(|e| failure = Some(e)).ok());
            for batch in bounding_box_filter(batches, config.bbox) {
                kept += batch.observations.len() as u64;
                write_jsonl_batch(&mut w, &batch).map_err(io_err(&output))?;
            }
            if let Some(e) = failure {
                return Err(e.into());
            }
            w.flush().map_err(io_err(&output))?;
            print_json(&serde_json::json!({ "stats": reader.stats(), "inside_region": kept }));
        }
        Command::Extract { feed, format } => {
            let feed = feed.clone().unwrap_or_else(|| config.feed.clone());
            let (raw, stats) = extract_file(&feed, feed_format(&feed, *format), config.timezone)?;
            let extracted = raw.len();
            let rules = scooter_core::trips::CleaningRules {
                timezone: config.timezone,
                ..config.cleaning.clone()
            };
            let (cleaned, report) = clean_trips(raw, &rules);
            let (trips, outside) = crop_to_region(cleaned, &config.bbox);
            let path = out.join("trips.csv");
            let mut w = create(&path)?;
            write_trips_csv(&mut w, &trips)?;
            w.flush().map_err(io_err(&path))?;
            print_json(&serde_json::json!({
                "ingest": stats,
                "extracted": extracted,
                "cleaning": report,
                "outside_region": outside,
                "trips": trips.len(),
            }));
        }
        Command::Harvest => {
            let client = places_client(config.poi.fixtures.as_deref())?;
            let (plan, densify) = config.poi.plans()?;
            let path = out.join("raw_pois.json");
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            match harvest_region(client.as_ref(), config.bbox, &config.poi, &plan, &densify) {
                Ok(h) => {
                    write_json_file(&path, &h.pois).map_err(io_err(&path))?;
                    print_json(&serde_json::json!({
                        "raw_pois": h.pois.len(),
                        "budget_used": h.budget_used,
                        "densify_results": h.densified,
                        "report": h.report,
                    }));
                }
                Err(failure) => {
                    write_json_file(&path, &failure.partial.pois).map_err(io_err(&path))?;
                    return Err(StageError::from(failure).into());
                }
            }
        }
        Command::Normalize { raw } => {
            let raw_path = in_out(raw, "raw_pois.json");
            let raw: Vec<RawPoi> =
                serde_json::from_reader(open(&raw_path)?).map_err(|e| PoiError::Json {
                    path: raw_path.display().to_string(),
                    source: e,
                })?;
            let (catalog, report) = normalize(raw, &config.poi.normalize_options()?)?;
            let path = out.join("catalog.json");
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            fs::write(&path, catalog.to_json() + "\n").map_err(io_err(&path))?;
            print_json(&report);
        }
        Command::Associate {
            trips,
            catalog,
            cutoff_m,
        } => {
            let trips = read_trips_csv(open(&in_out(trips, "trips.csv"))?)?;
            let catalog = load_catalog(&catalog_path(catalog))?;
            let cutoff = cutoff_m.unwrap_or(config.cutoff_m);
            if cutoff.is_nan() || cutoff < 0.0 {
                return Err(CliError::Usage(format!(
                    "cutoff must be non-negative, got {cutoff}"
                )));
            }
            let (assoc, report) = associate(&trips, &catalog.spatial_index())?;
            let within = apply_threshold(&assoc, cutoff);
            for (name, rows) in [("assoc.csv", &assoc), ("assoc_within_cutoff.csv", &within)] {
                let path = out.join(name);
                let mut w = create(&path)?;
                write_associated_csv(&mut w, rows)?;
                w.flush().map_err(io_err(&path))?;
            }
            print_json(
                &serde_json::json!({ "report": report, "cutoff_m": cutoff, "within_cutoff": within.len() }),
            );
        }
        Command::Sensitivity {
            assoc,
            catalog,
            thresholds,
            mode,
        } => {
            let assoc = read_associated_csv(open(&in_out(assoc, "assoc.csv"))?)?;
            let catalog = load_catalog(&catalog_path(catalog))?;
            let spec = thresholds
                .as_deref()
                .unwrap_or(&config.sensitivity_thresholds);
            let thresholds = parse_thresholds(spec).map_err(|e| CliError::Usage(e.to_string()))?;
            let groups = config.poi.taxonomy()?.groups().to_vec();
            let modes: &[ThresholdMode] = match mode {
                ModeArg::Single => &[ThresholdMode::Single],
                ModeArg::Both => &[ThresholdMode::Both],
                ModeArg::All => &[ThresholdMode::Single, ThresholdMode::Both],
            };
            for &m in modes {
                let tables = [Endpoint::Origin, Endpoint::Destination]
                    .into_iter()
                    .map(|e| sensitivity(&assoc, &catalog, &groups, &thresholds, e, m))
                    .collect::<Result<Vec<_>, _>>()?;
                let path = out.join(format!("sensitivity_{m}.csv"));
                let mut w = create(&path)?;
                write_sensitivity_csv(&mut w, &tables)?;
                w.flush().map_err(io_err(&path))?;
                log::info!("wrote {}", path.display());
            }
        }
        Command::Report { assoc, catalog } => {
            let assoc = read_associated_csv(open(&in_out(assoc, "assoc_within_cutoff.csv"))?)?;
            let catalog = load_catalog(&catalog_path(catalog))?;
            let groups = config.poi.taxonomy()?.groups().to_vec();
            let set = build_all(&assoc, &catalog, &groups, config.timezone)?;
            for m in set.all() {
                let path = out.join(format!("matrix_{}.csv", m.slice));
                let mut w = create(&path)?;
                m.write_csv(&mut w)?;
                w.flush().map_err(io_err(&path))?;
            }
            let path = out.join("matrices_long.csv");
            let mut w = create(&path)?;
            write_long_csv(&mut w, &set.all())?;
            w.flush().map_err(io_err(&path))?;
            for pair in &config.drilldowns {
                let (o, d) = parse_group_pair(pair).map_err(|e| CliError::Usage(e.to_string()))?;
                let dd = drill_down(&assoc, &catalog, &o, &d)?;
                let safe = |s: &str| s.replace(|c: char| !c.is_ascii_alphanumeric(), "-");
                let path = out.join(format!("drilldown_{}_{}.csv", safe(&o), safe(&d)));
                let mut w = create(&path)?;
                dd.write_csv(&mut w)?;
                w.flush().map_err(io_err(&path))?;
            }
            let totals: serde_json::Map<_, _> = set
                .all()
                .iter()
                .map(|m| (m.slice.to_string(), m.total().into()))
                .collect();
            print_json(&totals);
        }
        Command::Simulate {
            scenario,
            feed,
            truth,
        } => {
            let scenario = ScenarioConfig::load(scenario)?;
            let gt = generate_truth(&scenario)?;
            let mut w = create(feed)?;
            let observations = gt.write_feed_jsonl(&mut w).map_err(io_err(feed))?;
            w.flush().map_err(io_err(feed))?;
            if let Some(path) = truth {
                let mut t = create(path)?;
                t.write_all(gt.to_json().as_bytes()).map_err(io_err(path))?;
                t.flush().map_err(io_err(path))?;
            }
            print_json(&serde_json::json!({
                "observations": observations,
                "trips": gt.trips.len(),
                "relocations": gt.relocations.len(),
                "recoverable": gt.recoverable().len(),
            }));
        }
        Command::Score { truth, feed } => {
            let gt = GroundTruth::load(truth)?;
            let tz = gt.timezone;
            let (trips, _) = extract_file(feed, feed_format(feed, None), tz)?;
            print_json(&score(&gt, &trips));
        }
        Command::Run => {
            let manifest = run_pipeline(&config)?;
            for stage in &manifest.stages {
                let counts: Vec<String> = stage
                    .counts
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                println!("{:<12} {}", stage.name, counts.join(" "));
            }
            println!(
                "{} artifacts in {}",
                manifest.artifacts.len(),
                config.out_dir.display()
            );
        }
    }
    Ok(())
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
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
