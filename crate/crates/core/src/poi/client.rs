//! Places search clients.
//!
//! Requests and responses follow the shape of the Google Places web service
//! (`nearbysearch` / `textsearch`). [`FixtureClient`] replays recorded
//! responses keyed by [`PlacesRequest::canonical_key`], [`InventoryClient`]
//! answers from an in-memory place list, and [`RecordingClient`] captures
//! whatever another client returns so it can be written out as fixtures.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{read_json, PoiError, QueryKind};
use crate::geo::{haversine_m, GeoPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacesRequest {
    pub kind: QueryKind,
    /// Predefined type for nearby searches, free text for text searches.
    pub term: String,
    pub center: GeoPoint,
    pub radius_m: f64,
}

impl PlacesRequest {
    /// Stable lookup key: kind, term, center to 6 decimals, radius to 0.1 m.
    pub fn canonical_key(&self) -> String {
        format!(
            "{}|{}|{:.6},{:.6}|{:.1}",
            self.kind, self.term, self.center.lat, self.center.lon, self.radius_m
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLng {
    pub lat: f64,
    pub lng: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaceGeometry {
    pub location: LatLng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceResult {
    pub place_id: String,
    pub name: String,
    pub geometry: PlaceGeometry,
    #[serde(default)]
    pub types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vicinity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formatted_address: Option<String>,
}

impl PlaceResult {
    pub fn position(&self) -> GeoPoint {
        GeoPoint {
            lat: self.geometry.location.lat,
            lon: self.geometry.location.lng,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacesResponse {
    pub status: String,
    #[serde(default)]
    pub results: Vec<PlaceResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

impl PlacesResponse {
    pub fn ok(results: Vec<PlaceResult>) -> Self {
        PlacesResponse {
            status: if results.is_empty() {
                "ZERO_RESULTS".into()
            } else {
                "OK".into()
            },
            results,
            error_message: None,
        }
    }

    /// Splits API-level failures out of the payload.
    pub fn into_results(self) -> Result<Vec<PlaceResult>, ClientError> {
        match self.status.as_str() {
            "OK" | "ZERO_RESULTS" => Ok(self.results),
            "OVER_QUERY_LIMIT" | "UNKNOWN_ERROR" => Err(ClientError::retriable(
                self.status,
                self.error_message.unwrap_or_default(),
            )),
            _ => Err(ClientError::fatal(
                self.status,
                self.error_message.unwrap_or_default(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ClientError {
    pub status: String,
    pub retriable: bool,
    pub message: String,
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.retriable { "retriable" } else { "fatal" };
        write!(f, "{} ({kind})", self.status)?;
        if !self.message.is_empty() {
            write!(f, ": {}", self.message)?;
        }
        Ok(())
    }
}

impl ClientError {
    pub fn retriable(status: impl Into<String>, message: impl Into<String>) -> Self {
        ClientError {
            status: status.into(),
            retriable: true,
            message: message.into(),
        }
    }

    pub fn fatal(status: impl Into<String>, message: impl Into<String>) -> Self {
        ClientError {
            status: status.into(),
            retriable: false,
            message: message.into(),
        }
    }
}

pub trait PlacesClient {
    fn search(&self, request: &PlacesRequest) -> Result<PlacesResponse, ClientError>;
}

impl<C: PlacesClient + ?Sized> PlacesClient for &C {
    fn search(&self, request: &PlacesRequest) -> Result<PlacesResponse, ClientError> {
        (**self).search(request)
    }
}

/// Replays recorded responses. A fixture file is a JSON object mapping
/// canonical request keys to response bodies; a directory of such files is
/// merged in file-name order.
#[derive(Debug, Clone, Default)]
pub struct FixtureClient {
    responses: BTreeMap<String, PlacesResponse>,
    strict: bool,
}

impl FixtureClient {
    pub fn new(responses: BTreeMap<String, PlacesResponse>) -> Self {
        FixtureClient {
            responses,
            strict: false,
        }
    }

    /// In strict mode an unrecorded request is a fatal `FIXTURE_MISSING`
    /// error; otherwise it answers `ZERO_RESULTS`.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn from_path(path: &Path) -> Result<Self, PoiError> {
        let mut responses = BTreeMap::new();
        if path.is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(path)
                .map_err(|source| PoiError::Io {
                    path: path.display().to_string(),
                    source,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for f in files {
                let map: BTreeMap<String, PlacesResponse> = read_json(&f)?;
                responses.extend(map);
            }
        } else {
            responses = read_json(path)?;
        }
        Ok(FixtureClient::new(responses))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl PlacesClient for FixtureClient {
    fn search(&self, request: &PlacesRequest) -> Result<PlacesResponse, ClientError> {
        let key = request.canonical_key();
        match self.responses.get(&key) {
            Some(r) => Ok(r.clone()),
            None if self.strict => Err(ClientError::fatal(
                "FIXTURE_MISSING",
                format!("no recorded response for `{key}`"),
            )),
            None => Ok(PlacesResponse::ok(vec![])),
        }
    }
}

/// A place known to [`InventoryClient`], with extra words a text search
/// should match besides its name and types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventoryPlace {
    #[serde(flatten)]
    pub place: PlaceResult,
    #[serde(default)]
    pub keywords: Vec<String>,
}

/// Answers searches from a fixed place list, nearest first, one page of
/// `page_size` results at most.
#[derive(Debug, Clone)]
pub struct InventoryClient {
    places: Vec<InventoryPlace>,
    page_size: usize,
}

impl InventoryClient {
    pub fn new(places: Vec<InventoryPlace>) -> Self {
        InventoryClient {
            places,
            page_size: super::MAX_RESULTS_PER_QUERY,
        }
    }

    pub fn with_page_size(mut self, page_size: usize) -> Self {
        self.page_size = page_size;
        self
    }

    pub fn places(&self) -> &[InventoryPlace] {
        &self.places
    }

    fn matches(place: &InventoryPlace, request: &PlacesRequest) -> bool {
        match request.kind {
            QueryKind::Nearby => place.place.types.contains(&request.term),
            QueryKind::Text => {
                let term = request.term.to_lowercase();
                let term_as_type = term.replace(' ', "_");
                place.place.name.to_lowercase().contains(&term)
                    || place.keywords.iter().any(|k| k.to_lowercase() == term)
                    || place.place.types.contains(&term_as_type)
            }
        }
    }
}

impl PlacesClient for InventoryClient {
    fn search(&self, request: &PlacesRequest) -> Result<PlacesResponse, ClientError> {
        let mut hits: Vec<(f64, &PlaceResult)> = self
            .places
            .iter()
            .filter(|p| Self::matches(p, request))
            .map(|p| (haversine_m(request.center, p.place.position()), &p.place))
            .filter(|(d, _)| *d <= request.radius_m)
            .collect();
        hits.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| a.1.place_id.cmp(&b.1.place_id))
        });
        hits.truncate(self.page_size);
        Ok(PlacesResponse::ok(
            hits.into_iter().map(|(_, p)| p.clone()).collect(),
        ))
    }
}

/// Passes requests through to `inner` and keeps every successful response.
pub struct RecordingClient<C> {
    inner: C,
    recorded: Mutex<BTreeMap<String, PlacesResponse>>,
    keep_empty: bool,
}

impl<C: PlacesClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        RecordingClient {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
            keep_empty: false,
        }
    }

    /// Also record `ZERO_RESULTS` answers (off by default, since a
    /// non-strict [`FixtureClient`] already answers them).
    pub fn keep_empty(mut self, keep: bool) -> Self {
        self.keep_empty = keep;
        self
    }

    pub fn into_fixtures(self) -> BTreeMap<String, PlacesResponse> {
        self.recorded
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
    }
}

impl<C: PlacesClient> PlacesClient for RecordingClient<C> {
    fn search(&self, request: &PlacesRequest) -> Result<PlacesResponse, ClientError> {
        let response = self.inner.search(request)?;
        if self.keep_empty || !response.results.is_empty() {
            self.recorded
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .insert(request.canonical_key(), response.clone());
        }
        Ok(response)
    }
}

#[cfg(feature = "live")]
mod http {
    use std::sync::Mutex;
    use std::time::{Duration, Instant};

    use super::{ClientError, PlacesClient, PlacesRequest, PlacesResponse, QueryKind};

    pub const DEFAULT_BASE_URL: &str = "https://maps.googleapis.com/maps/api/place";

    /// Blocking client for a Places-style web service, spacing requests at
    /// least `min_interval` apart.
    pub struct HttpPlacesClient {
        http: reqwest::blocking::Client,
        base_url: String,
        api_key: String,
        min_interval: Duration,
        last_request: Mutex<Option<Instant>>,
    }

    impl HttpPlacesClient {
        pub fn new(api_key: impl Into<String>) -> Result<Self, ClientError> {
            let http = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .map_err(|e| ClientError::fatal("CLIENT_SETUP", e.to_string()))?;
            Ok(HttpPlacesClient {
                http,
                base_url: DEFAULT_BASE_URL.to_string(),
                api_key: api_key.into(),
                min_interval: Duration::from_millis(100),
                last_request: Mutex::new(None),
            })
        }

        pub fn with_base_url(mut self, base_url: impl Into<String>) -> Self {
            self.base_url = base_url.into().trim_end_matches('/').to_string();
            self
        }

        pub fn with_min_interval(mut self, interval: Duration) -> Self {
            self.min_interval = interval;
            self
        }

        fn throttle(&self) {
            let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(prev) = *last {
                let elapsed = prev.elapsed();
                if elapsed < self.min_interval {
                    std::thread::sleep(self.min_interval - elapsed);
                }
            }
            *last = Some(Instant::now());
        }
    }

    impl PlacesClient for HttpPlacesClient {
        fn search(&self, request: &PlacesRequest) -> Result<PlacesResponse, ClientError> {
            self.throttle();
            let location = format!("{},{}", request.center.lat, request.center.lon);
            let radius = format!("{}", request.radius_m.round());
            let (endpoint, term_param) = match request.kind {
                QueryKind::Nearby => ("nearbysearch", "type"),
                QueryKind::Text => ("textsearch", "query"),
            };
            let url = format!("{}/{endpoint}/json", self.base_url);
            let response = self
                .http
                .get(&url)
                .query(&[
                    ("location", location.as_str()),
                    ("radius", radius.as_str()),
                    (term_param, request.term.as_str()),
                    ("key", self.api_key.as_str()),
                ])
                .send()
                .map_err(|e| ClientError::retriable("NETWORK", e.to_string()))?;
            let status = response.status();
            if status.as_u16() == 429 || status.is_server_error() {
                return Err(ClientError::retriable(
                    format!("HTTP_{}", status.as_u16()),
                    "",
                ));
            }
            if !status.is_success() {
                return Err(ClientError::fatal(format!("HTTP_{}", status.as_u16()), ""));
            }
            let body = response
                .text()
                .map_err(|e| ClientError::retriable("NETWORK", e.to_string()))?;
            serde_json::from_str(&body)
                .map_err(|e| ClientError::fatal("BAD_RESPONSE", e.to_string()))
        }
    }
}

#[cfg(feature = "live")]
pub use http::HttpPlacesClient;
