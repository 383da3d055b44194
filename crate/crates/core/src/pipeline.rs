//! End-to-end run: feed to trips, POI catalog, association, sensitivity and
//! purpose matrices, with a manifest describing every artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assoc::{
    apply_threshold, associate, parse_thresholds, sensitivity, write_associated_csv,
    write_sensitivity_csv, AssocError, Endpoint, ThresholdMode,
};
use crate::geo::{make_grid, BBox};
use crate::ingest::{FeedFormat, IngestError, SnapshotReader};
use crate::poi::{
    harvest, harvest_cells, normalize, select_low_density_cells, BufferSpec, Catalog,
    FixtureClient, GroupTaxonomy, HarvestFailure, HarvestOptions, HarvestReport, ManualPoi,
    MergeOptions, NormalizeOptions, PlacesClient, PlanEntry, PoiError, QueryBudget, RawPoi,
};
use crate::purpose::{build_all, drill_down, parse_group_pair, write_long_csv, PurposeError};
use crate::trips::{
    clean_trips, crop_to_region, write_trips_csv, CleaningRules, TripError, TripExtractor,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides `poi.fixtures` when set.
pub const FIXTURES_ENV: &str = "SCOOTER_FIXTURES_DIR";
/// API key for live harvesting when no fixtures are configured.
pub const API_KEY_ENV: &str = "PLACES_API_KEY";

const DEFAULT_PLAN: &str = include_str!("../data/plan.json");
const DEFAULT_DENSIFY_PLAN: &str = include_str!("../data/densify_plan.json");
const DEFAULT_BUFFERS: &str = include_str!("../data/buffers.json");
const DEFAULT_MANUAL: &str = include_str!("../data/manual_pois.json");

/// `ROWSxCOLS`, e.g. `8x8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GridSize {
    pub rows: usize,
    pub cols: usize,
}

impl FromStr for GridSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("grid `{s}` is not ROWSxCOLS"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("grid `{s}` is not ROWSxCOLS"))
        };
        let (rows, cols) = (parse(r)?, parse(c)?);
        if rows == 0 || cols == 0 {
            return Err(format!("grid `{s}` must have at least one cell"));
        }
        Ok(GridSize { rows, cols })
    }
}

impl TryFrom<String> for GridSize {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<GridSize> for String {
    fn from(g: GridSize) -> Self {
        g.to_string()
    }
}

impl fmt::Display for GridSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoiConfig {
    /// A finished catalog. When set, harvesting and normalization are skipped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
    pub harvest_grid: GridSize,
    pub densify_grid: GridSize,
    /// How many of the sparsest densify cells get the extra text searches.
    pub densify_cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub densify_plan: Option<PathBuf>,
    pub budget: u64,
    pub harvest: HarvestOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manual: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffers: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    pub excluded_types: Vec<String>,
    pub merge: MergeOptions,
}

impl Default for PoiConfig {
    fn default() -> Self {
        PoiConfig {
            catalog: None,
            fixtures: None,
            harvest_grid: GridSize { rows: 8, cols: 8 },
            densify_grid: GridSize { rows: 15, cols: 15 },
            densify_cells: 45,
            plan: None,
            densify_plan: None,
            budget: 10_000,
            harvest: HarvestOptions::default(),
            manual: None,
            buffers: None,
            taxonomy: None,
            excluded_types: vec!["bus_station".to_string()],
            merge: MergeOptions::default(),
        }
    }
}

impl PoiConfig {
    /// The harvest and densify plans, from their files or the bundled ones.
    pub fn plans(&self) -> Result<(Vec<PlanEntry>, Vec<PlanEntry>), PoiError> {
        let load = |path: Option<&PathBuf>, bundled: &str| match path {
            Some(p) => crate::poi::read_json(p),
            None => serde_json::from_str(bundled).map_err(|e| PoiError::Json {
                path: "bundled plan".into(),
                source: e,
            }),
        };
        Ok((
            load(self.plan.as_ref(), DEFAULT_PLAN)?,
            load(self.densify_plan.as_ref(), DEFAULT_DENSIFY_PLAN)?,
        ))
    }

    pub fn taxonomy(&self) -> Result<GroupTaxonomy, PoiError> {
        match &self.taxonomy {
            Some(p) => GroupTaxonomy::load(p),
            None => Ok(GroupTaxonomy::bundled()),
        }
    }

    /// Manual places, buffers and taxonomy from their files or the bundled ones.
    pub fn normalize_options(&self) -> Result<NormalizeOptions, PoiError> {
        let load_manual = || -> Result<Vec<ManualPoi>, PoiError> {
            match &self.manual {
                Some(p) => crate::poi::read_json(p),
                None => {
                    Ok(serde_json::from_str(DEFAULT_MANUAL).expect("bundled manual places parse"))
                }
            }
        };
        let buffers: Vec<BufferSpec> = match &self.buffers {
            Some(p) => crate::poi::read_json(p)?,
            None => serde_json::from_str(DEFAULT_BUFFERS).expect("bundled buffers parse"),
        };
        Ok(NormalizeOptions {
            manual: load_manual()?,
            buffers,
            taxonomy: self.taxonomy()?,
            excluded_types: self.excluded_types.clone(),
            merge: self.merge.clone(),
        })
    }
}

/// Paths are relative to the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub feed: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feed_format: Option<FeedFormat>,
    pub out_dir: PathBuf,
    pub bbox: BBox,
    /// Local time zone for the day boundary, cleaning hours and time slots.
    pub timezone: Tz,
    pub cleaning: CleaningRules,
    pub poi: PoiConfig,
    pub cutoff_m: f64,
    /// `start:end:step` or a comma-separated list, in meters.
    pub sensitivity_thresholds: String,
    /// `Origin:Destination` group pairs to break down by primary type.
    pub drilldowns: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            feed: PathBuf::from("feed.jsonl"),
            feed_format: None,
            out_dir: PathBuf::from("out"),
            bbox: BBox::study_region(),
            timezone: chrono_tz::America::New_York,
            cleaning: CleaningRules::default(),
            poi: PoiConfig::default(),
            cutoff_m: 50.0,
            sensitivity_thresholds: "0:100:5".to_string(),
            drilldowns: vec!["Business:Business".to_string()],
        }
    }
}

impl PipelineConfig {
    /// Reads a config and resolves its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.feed);
        fix(&mut self.out_dir);
        let poi = &mut self.poi;
        for p in [
            &mut poi.catalog,
            &mut poi.fixtures,
            &mut poi.plan,
            &mut poi.densify_plan,
            &mut poi.manual,
            &mut poi.buffers,
            &mut poi.taxonomy,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.cutoff_m.is_nan() || self.cutoff_m < 0.0 {
            return bad(format!(
                "cutoff_m must be non-negative, got {}",
                self.cutoff_m
            ));
        }
        self.cleaning
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        parse_thresholds(&self.sensitivity_thresholds)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for d in &self.drilldowns {
            parse_group_pair(d).map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if self.poi.densify_cells > self.poi.densify_grid.rows * self.poi.densify_grid.cols {
            return bad("densify_cells exceeds the densify grid".into());
        }
        Ok(())
    }

    fn rules(&self) -> CleaningRules {
        CleaningRules {
            timezone: self.timezone,
            ..self.cleaning.clone()
        }
    }

    fn feed_format(&self) -> FeedFormat {
        self.feed_format
            .unwrap_or_else(|| match self.feed.extension().and_then(|e| e.to_str()) {
                Some(e) if e.eq_ignore_ascii_case("csv") => FeedFormat::Csv,
                _ => FeedFormat::Jsonl,
            })
    }

    /// Hash of the settings that shape the output. The output directory is
    /// left out, and paths are hashed as file contents via the manifest's
    /// input list rather than by location.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("out_dir");
        obj.remove("feed");
        if let Some(poi) = obj.get_mut("poi").and_then(|p| p.as_object_mut()) {
            for k in [
                "catalog",
                "fixtures",
                "plan",
                "densify_plan",
                "manual",
                "buffers",
                "taxonomy",
            ] {
                poi.remove(k);
            }
        }
        sha256_hex(
            serde_json::to_string(&v)
                .expect("value serializes")
                .as_bytes(),
        )
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Trip(#[from] TripError),
    #[error(transparent)]
    Poi(#[from] PoiError),
    #[error(transparent)]
    Harvest(#[from] HarvestFailure),
    #[error(transparent)]
    Assoc(#[from] AssocError),
    #[error(transparent)]
    Purpose(#[from] PurposeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Missing(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: StageError,
    },
}

impl StageError {
    /// 3 when the query budget ran out, 2 for any other data error.
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Poi(PoiError::BudgetExhausted { .. }) => 3,
            StageError::Harvest(f) if matches!(f.error, PoiError::BudgetExhausted { .. }) => 3,
            _ => 2,
        }
    }
}

impl PipelineError {
    /// 1 for configuration problems, otherwise the stage's code.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::Stage { stage, .. } => Some(stage),
            PipelineError::Config(_) => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_sha256: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// sha256 of every input file read.
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    /// sha256 of every artifact written, keyed by file name.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn count(&self, stage: &str, key: &str) -> Option<u64> {
        self.stage(stage).and_then(|s| s.counts.get(key).copied())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Run<'a> {
    config: &'a PipelineConfig,
    manifest: Manifest,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Run<'_> {
    fn record(&mut self, name: &str, counts: &[(&str, u64)]) {
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            counts: counts.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
    }

    fn input(&mut self, label: &str, path: &Path) -> Result<Vec<u8>, StageError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        self.manifest
            .inputs
            .insert(label.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Records the hash of an optional input file, or marks it bundled.
    fn note_input(&mut self, label: &str, path: Option<&PathBuf>) -> Result<(), StageError> {
        match path {
            Some(p) => {
                self.input(label, p)?;
            }
            None => {
                self.manifest
                    .inputs
                    .insert(label.to_string(), "bundled".to_string());
            }
        }
        Ok(())
    }

    fn artifact(
        &mut self,
        name: &str,
        write: impl FnOnce(&mut Vec<u8>) -> Result<(), StageError>,
    ) -> Result<(), StageError> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        let path = self.config.out_dir.join(name);
        fs::write(&path, &buf).map_err(io_err(&path))?;
        self.manifest
            .artifacts
            .insert(name.to_string(), sha256_hex(&buf));
        Ok(())
    }

    fn finish(&mut self, failure: Option<&PipelineError>) -> Result<(), std::io::Error> {
        match failure {
            None => self.manifest.status = "ok".into(),
            Some(e) => {
                self.manifest.status = "FAILED".into();
                self.manifest.failed_stage = e.stage().map(String::from);
                self.manifest.error = Some(e.to_string());
            }
        }
        let text =
            serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        fs::write(self.config.out_dir.join("manifest.json"), text)
    }
}

trait InStage<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> InStage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            source: e.into(),
        })
    }
}

/// Runs every stage in order. The manifest is written whether or not a
/// stage fails; on failure it is marked `FAILED` and names the stage.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Manifest, PipelineError> {
    run_pipeline_with(config, None)
}

/// [`run_pipeline`] with an explicit places source in place of the
/// configured fixtures or live API.
pub fn run_pipeline_with(
    config: &PipelineConfig,
    client: Option<&dyn PlacesClient>,
) -> Result<Manifest, PipelineError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", config.out_dir.display())))?;
    let mut run = Run {
        config,
        manifest: Manifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: config.fingerprint(),
            ..Default::default()
        },
    };
    let result = stages(&mut run, client);
    run.finish(result.as_ref().err())
        .map_err(|e| PipelineError::Config(format!("{}: {e}", config.out_dir.display())))?;
    result.map(|_| run.manifest)
}

fn stages(run: &mut Run<'_>, client: Option<&dyn PlacesClient>) -> Result<(), PipelineError> {
    let config = run.config;
    let tz = config.timezone;
    let rules = config.rules();

    // ingest + extract, streamed
    let feed = run.input("feed", &config.feed).stage("ingest")?;
    let mut reader = SnapshotReader::new(BufReader::new(&feed[..]), config.feed_format());
    let mut extractor = TripExtractor::new(tz);
    let mut raw = Vec::new();
    for batch in reader.by_ref() {
        extractor.push(&batch.stage("ingest")?, &mut raw);
    }
    let s = reader.stats();
    run.record(
        "ingest",
        &[
            ("batches", s.batches),
            ("records", s.records),
            ("retained", s.retained),
            ("in_use", s.in_use),
            ("duplicates", s.duplicates),
        ],
    );
    run.record("extract", &[("trips", raw.len() as u64)]);

    let (cleaned, report) = clean_trips(raw, &rules);
    run.record(
        "clean",
        &[
            ("trips_in", report.input),
            ("removed_by_hours", report.removed_hours),
            ("removed_too_short", report.removed_too_short),
            ("removed_too_long", report.removed_too_long),
            ("removed_by_distance", report.removed_distance()),
            ("trips_out", report.kept),
            ("under_5m", report.under_5m),
            ("under_10m", report.under_10m),
            ("under_20m", report.under_20m),
        ],
    );
    let (trips, outside) = crop_to_region(cleaned, &config.bbox);
    run.record(
        "crop",
        &[
            ("outside_region", outside),
            ("trips_out", trips.len() as u64),
        ],
    );
    run.artifact("trips.csv", |buf| Ok(write_trips_csv(buf, &trips)?))
        .stage("crop")?;

    run.note_input("taxonomy", config.poi.taxonomy.as_ref())
        .stage("normalize")?;
    let taxonomy = config.poi.taxonomy().stage("normalize")?;

    let catalog = match &config.poi.catalog {
        Some(path) => {
            if !path.exists() {
                return Err(StageError::Missing(format!(
                    "catalog {} does not exist",
                    path.display()
                )))
                .stage("harvest");
            }
            let bytes = run.input("catalog", path).stage("harvest")?;
            let catalog: Catalog = serde_json::from_slice(&bytes)
                .map_err(|e| PoiError::Json {
                    path: path.display().to_string(),
                    source: e,
                })
                .stage("harvest")?;
            run.record("harvest", &[("catalog_pois", catalog.len() as u64)]);
            catalog
        }
        None => {
            let raw = harvest_stage(run, client)?;
            normalize_stage(run, raw, &taxonomy)?
        }
    };
    run.artifact("catalog.json", |buf| {
        buf.extend_from_slice(catalog.to_json().as_bytes());
        buf.push(b'\n');
        Ok(())
    })
    .stage("normalize")?;

    let index = catalog.spatial_index();
    let (assoc, ar) = associate(&trips, &index).stage("associate")?;
    run.record(
        "associate",
        &[
            ("trips", ar.trips),
            ("origin_reassigned", ar.reassigned),
            ("same_poi_unresolved", ar.unresolved_same_poi),
        ],
    );
    run.artifact("assoc.csv", |buf| Ok(write_associated_csv(buf, &assoc)?))
        .stage("associate")?;

    let within = apply_threshold(&assoc, config.cutoff_m);
    run.record(
        "threshold",
        &[("associated_within_cutoff", within.len() as u64)],
    );
    run.artifact("assoc_within_cutoff.csv", |buf| {
        Ok(write_associated_csv(buf, &within)?)
    })
    .stage("threshold")?;

    let thresholds = parse_thresholds(&config.sensitivity_thresholds).stage("sensitivity")?;
    let groups = taxonomy.groups().to_vec();
    for mode in [ThresholdMode::Single, ThresholdMode::Both] {
        let tables = [Endpoint::Origin, Endpoint::Destination]
            .into_iter()
            .map(|e| sensitivity(&assoc, &catalog, &groups, &thresholds, e, mode))
            .collect::<Result<Vec<_>, _>>()
            .stage("sensitivity")?;
        run.artifact(&format!("sensitivity_{mode}.csv"), |buf| {
            Ok(write_sensitivity_csv(buf, &tables)?)
        })
        .stage("sensitivity")?;
    }
    run.record("sensitivity", &[("thresholds", thresholds.len() as u64)]);

    let set = build_all(&within, &catalog, &groups, tz).stage("report")?;
    for m in set.all() {
        run.artifact(&format!("matrix_{}.csv", m.slice), |buf| {
            Ok(m.write_csv(buf)?)
        })
        .stage("report")?;
    }
    run.artifact("matrices_long.csv", |buf| {
        Ok(write_long_csv(buf, &set.all())?)
    })
    .stage("report")?;
    let mut counts = vec![("matrix_total", set.overall.total())];
    let slot_totals: Vec<(String, u64)> = set
        .all()
        .iter()
        .skip(1)
        .map(|m| (format!("matrix_{}", m.slice), m.total()))
        .collect();
    for pair in &config.drilldowns {
        let (o, d) = parse_group_pair(pair).stage("report")?;
        let dd = drill_down(&within, &catalog, &o, &d).stage("report")?;
        let name = format!("drilldown_{}_{}.csv", file_safe(&o), file_safe(&d));
        run.artifact(&name, |buf| Ok(dd.write_csv(buf)?))
            .stage("report")?;
    }
    counts.extend(slot_totals.iter().map(|(k, v)| (k.as_str(), *v)));
    run.record("report", &counts);
    Ok(())
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

/// A fixture directory (environment override first), else the live API.
pub fn places_client(configured: Option<&Path>) -> Result<Box<dyn PlacesClient>, StageError> {
    let dir = std::env::var_os(FIXTURES_ENV)
        .map(PathBuf::from)
        .or_else(|| configured.map(Path::to_path_buf));
    if let Some(dir) = dir {
        if !dir.exists() {
            return Err(StageError::Missing(format!(
                "fixtures {} do not exist",
                dir.display()
            )));
        }
        return Ok(Box::new(FixtureClient::from_path(&dir)?));
    }
    #[cfg(feature = "live")]
    if let Ok(key) = std::env::var(API_KEY_ENV) {
        return Ok(Box::new(
            crate::poi::HttpPlacesClient::new(key).map_err(PoiError::from)?,
        ));
    }
    Err(StageError::Missing(format!(
        "no places source: set poi.fixtures, {FIXTURES_ENV} or {API_KEY_ENV}"
    )))
}

/// Raw results of the grid pass plus the low-density follow-up.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionHarvest {
    pub pois: Vec<RawPoi>,
    pub report: HarvestReport,
    /// Places gathered by the low-density follow-up.
    pub densified: u64,
    pub budget_used: u64,
}

/// Searches the harvest grid with `plan`, then the sparsest cells of the
/// finer densify grid with `densify_plan`. On failure the partial result
/// holds every place gathered by both passes.
pub fn harvest_region<C: PlacesClient + ?Sized>(
    client: &C,
    bbox: BBox,
    poi: &PoiConfig,
    plan: &[PlanEntry],
    densify_plan: &[PlanEntry],
) -> Result<RegionHarvest, HarvestFailure> {
    let grid_failure = |e: crate::geo::GeoError| HarvestFailure {
        error: PoiError::from(e),
        partial: Box::default(),
    };
    let mut budget = QueryBudget::new(poi.budget);
    let grid =
        make_grid(bbox, poi.harvest_grid.rows, poi.harvest_grid.cols).map_err(grid_failure)?;
    let main = harvest(client, &grid, plan, &mut budget, poi.harvest)?;
    let mut out = RegionHarvest {
        pois: main.pois,
        report: main.report,
        densified: 0,
        budget_used: 0,
    };
    if poi.densify_cells > 0 && !densify_plan.is_empty() {
        let fine =
            make_grid(bbox, poi.densify_grid.rows, poi.densify_grid.cols).map_err(grid_failure)?;
        let cells = select_low_density_cells(
            &fine,
            out.pois.iter().map(|p| &p.position),
            poi.densify_cells,
        );
        match harvest_cells(
            client,
            &fine,
            &cells,
            densify_plan,
            &mut budget,
            poi.harvest,
        ) {
            Ok(o) => {
                out.densified = o.pois.len() as u64;
                let r = &mut out.report;
                r.queries += o.report.queries;
                r.refinement_queries += o.report.refinement_queries;
                r.retries += o.report.retries;
                r.results += o.report.results;
                r.refinement_skipped += o.report.refinement_skipped;
                r.truncated.extend(o.report.truncated);
                out.pois.extend(o.pois);
            }
            Err(mut failure) => {
                out.pois.append(&mut failure.partial.pois);
                failure.partial.pois = out.pois;
                return Err(failure);
            }
        }
    }
    out.budget_used = budget.used;
    Ok(out)
}

fn harvest_stage(
    run: &mut Run<'_>,
    client: Option<&dyn PlacesClient>,
) -> Result<Vec<RawPoi>, PipelineError> {
    let config = run.config;
    let poi = &config.poi;
    run.note_input("plan", poi.plan.as_ref()).stage("harvest")?;
    run.note_input("densify_plan", poi.densify_plan.as_ref())
        .stage("harvest")?;
    let (plan, densify_plan) = poi.plans().stage("harvest")?;
    let owned;
    let client = match client {
        Some(c) => c,
        None => {
            owned = places_client(poi.fixtures.as_deref()).stage("harvest")?;
            owned.as_ref()
        }
    };
    let h = match harvest_region(client, config.bbox, poi, &plan, &densify_plan) {
        Ok(h) => h,
        Err(failure) => {
            write_raw(run, &failure.partial.pois).stage("harvest")?;
            return Err(failure).stage("harvest");
        }
    };
    write_raw(run, &h.pois).stage("harvest")?;
    run.record(
        "harvest",
        &[
            ("queries", h.report.queries),
            ("budget_used", h.budget_used),
            ("results", h.report.results),
            ("truncated_queries", h.report.truncated.len() as u64),
            ("refinement_queries", h.report.refinement_queries),
            ("refinement_skipped", h.report.refinement_skipped),
            ("densify_results", h.densified),
            ("raw_pois", h.pois.len() as u64),
        ],
    );
    Ok(h.pois)
}

fn write_raw(run: &mut Run<'_>, raw: &[RawPoi]) -> Result<(), StageError> {
    run.artifact("raw_pois.json", |buf| {
        serde_json::to_writer_pretty(&mut *buf, raw).expect("raw POIs serialize");
        buf.push(b'\n');
        Ok(())
    })
}

fn normalize_stage(
    run: &mut Run<'_>,
    raw: Vec<RawPoi>,
    taxonomy: &GroupTaxonomy,
) -> Result<Catalog, PipelineError> {
    let poi = &run.config.poi;
    run.note_input("manual", poi.manual.as_ref())
        .stage("normalize")?;
    run.note_input("buffers", poi.buffers.as_ref())
        .stage("normalize")?;
    let options = NormalizeOptions {
        taxonomy: taxonomy.clone(),
        ..poi.normalize_options().stage("normalize")?
    };
    let (catalog, r) = normalize(raw, &options).stage("normalize")?;
    run.record(
        "normalize",
        &[
            ("raw", r.raw as u64),
            ("excluded", r.excluded as u64),
            ("manual", r.manual as u64),
            ("repeated", r.merge.repeated as u64),
            (
                "cross_type_duplicates",
                r.merge.cross_type_duplicates as u64,
            ),
            ("vague_vicinity", r.merge.vague_vicinity as u64),
            ("colocated_groups", r.merge.colocated_groups as u64),
            ("multiple", r.merge.multiple as u64),
            ("buffers", r.buffers as u64),
            ("catalog_pois", r.output as u64),
        ],
    );
    Ok(catalog)
}

/// Streams a feed file through the extractor.
pub fn extract_file(
    path: &Path,
    format: FeedFormat,
    tz: Tz,
) -> Result<(Vec<crate::trips::Trip>, crate::ingest::IngestStats), IngestError> {
    let file = File::open(path)?;
    let mut reader = SnapshotReader::new(BufReader::with_capacity(1 << 20, file), format);
    let mut extractor = TripExtractor::new(tz);
    let mut trips = Vec::new();
    for batch in reader.by_ref() {
        extractor.push(&batch?, &mut trips);
    }
    Ok((trips, reader.stats()))
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    std::io::Write::flush(&mut w)
}
