//! Grid-tiled POI harvesting under a query budget.

use serde::{Deserialize, Serialize};

use super::client::{PlacesClient, PlacesRequest};
use super::{PoiError, QueryKind, RawPoi};
use crate::geo::{BBox, GeoPoint, GridSpec};

/// A single search never returns more than this many places.
pub const MAX_RESULTS_PER_QUERY: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBudget {
    pub max_queries: u64,
    pub used: u64,
}

impl QueryBudget {
    pub fn new(max_queries: u64) -> Self {
        QueryBudget {
            max_queries,
            used: 0,
        }
    }

    pub fn remaining(&self) -> u64 {
        self.max_queries - self.used
    }

    pub fn is_exhausted(&self) -> bool {
        self.used >= self.max_queries
    }

    pub fn try_consume(&mut self) -> Result<(), PoiError> {
        if self.is_exhausted() {
            return Err(PoiError::BudgetExhausted {
                used: self.used,
                max: self.max_queries,
            });
        }
        self.used += 1;
        Ok(())
    }
}

/// One line of a query plan. Text entries may name the primary type their
/// results get (e.g. text `"subway station"` -> `subway_station`); otherwise
/// the term itself is used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub kind: QueryKind,
    pub term: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_type: Option<String>,
}

impl PlanEntry {
    pub fn nearby(term: impl Into<String>) -> Self {
        PlanEntry {
            kind: QueryKind::Nearby,
            term: term.into(),
            primary_type: None,
        }
    }

    pub fn text(term: impl Into<String>) -> Self {
        PlanEntry {
            kind: QueryKind::Text,
            term: term.into(),
            primary_type: None,
        }
    }

    pub fn query_type(&self) -> &str {
        self.primary_type.as_deref().unwrap_or(&self.term)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fetched {
    pub pois: Vec<RawPoi>,
    /// The result cap was hit, so more places probably exist.
    pub truncated: bool,
}

/// Runs one search, charging it to `budget`.
pub fn fetch<C: PlacesClient + ?Sized>(
    client: &C,
    request: &PlacesRequest,
    query_type: &str,
    budget: &mut QueryBudget,
) -> Result<Fetched, PoiError> {
    budget.try_consume()?;
    let mut results = client.search(request)?.into_results()?;
    results.truncate(MAX_RESULTS_PER_QUERY);
    let truncated = results.len() == MAX_RESULTS_PER_QUERY;
    let pois = results
        .into_iter()
        .filter_map(|r| {
            let position = r.position();
            if !position.is_valid() {
                log::warn!("skipping `{}` with invalid location {position}", r.place_id);
                return None;
            }
            Some(RawPoi {
                place_id: r.place_id,
                name: r.name,
                position,
                predefined_types: r.types,
                vicinity: r.vicinity.or(r.formatted_address).unwrap_or_default(),
                query_type: query_type.to_string(),
                source: request.kind,
            })
        })
        .collect();
    Ok(Fetched { pois, truncated })
}

pub fn fetch_nearby<C: PlacesClient + ?Sized>(
    client: &C,
    center: GeoPoint,
    radius_m: f64,
    place_type: &str,
    budget: &mut QueryBudget,
) -> Result<(Vec<RawPoi>, bool), PoiError> {
    let request = PlacesRequest {
        kind: QueryKind::Nearby,
        term: place_type.to_string(),
        center,
        radius_m,
    };
    let f = fetch(client, &request, place_type, budget)?;
    Ok((f.pois, f.truncated))
}

pub fn fetch_text<C: PlacesClient + ?Sized>(
    client: &C,
    query: &str,
    center: GeoPoint,
    radius_m: f64,
    budget: &mut QueryBudget,
) -> Result<Vec<RawPoi>, PoiError> {
    let request = PlacesRequest {
        kind: QueryKind::Text,
        term: query.to_string(),
        center,
        radius_m,
    };
    Ok(fetch(client, &request, query, budget)?.pois)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestOptions {
    /// How many times a capped cell is split 2x2 and searched again.
    pub refine_depth: u8,
    /// Extra attempts after a retriable client error. Each attempt is billed.
    pub max_retries: u32,
}

impl Default for HarvestOptions {
    fn default() -> Self {
        HarvestOptions {
            refine_depth: 2,
            max_retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedQuery {
    /// Cell path: grid index, then one `.q` per 2x2 split (q in 0..4).
    pub cell: String,
    pub term: String,
    pub kind: QueryKind,
    pub center: GeoPoint,
    pub radius_m: f64,
    pub depth: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HarvestReport {
    pub queries: u64,
    pub refinement_queries: u64,
    pub retries: u64,
    pub results: u64,
    pub truncated: Vec<TruncatedQuery>,
    /// Refinement searches dropped because the budget ran out.
    pub refinement_skipped: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HarvestOutcome {
    pub pois: Vec<RawPoi>,
    pub report: HarvestReport,
}

/// A harvest that stopped early, with everything gathered up to that point.
#[derive(Debug)]
pub struct HarvestFailure {
    pub error: PoiError,
    pub partial: Box<HarvestOutcome>,
}

impl std::fmt::Display for HarvestFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (after {} queries, {} places kept)",
            self.error,
            self.partial.report.queries,
            self.partial.pois.len()
        )
    }
}

impl std::error::Error for HarvestFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Searches every grid cell with every plan entry, using the cell center and
/// circumradius, then re-searches capped cells on 2x2 subdivisions while the
/// budget lasts.
pub fn harvest<C: PlacesClient + ?Sized>(
    client: &C,
    grid: &GridSpec,
    plan: &[PlanEntry],
    budget: &mut QueryBudget,
    options: HarvestOptions,
) -> Result<HarvestOutcome, HarvestFailure> {
    let all: Vec<usize> = (0..grid.len()).collect();
    harvest_cells(client, grid, &all, plan, budget, options)
}

struct Work<'a> {
    cell: String,
    bounds: BBox,
    center: GeoPoint,
    radius_m: f64,
    depth: u8,
    entry: &'a PlanEntry,
}

/// [`harvest`] restricted to the listed cells.
pub fn harvest_cells<C: PlacesClient + ?Sized>(
    client: &C,
    grid: &GridSpec,
    cells: &[usize],
    plan: &[PlanEntry],
    budget: &mut QueryBudget,
    options: HarvestOptions,
) -> Result<HarvestOutcome, HarvestFailure> {
    let mut out = HarvestOutcome::default();
    if plan.is_empty() {
        return Err(HarvestFailure {
            error: PoiError::EmptyPlan,
            partial: Box::new(out),
        });
    }

    let mut refine = Vec::new();
    for &i in cells {
        let cell = &grid.cells[i];
        for entry in plan {
            let work = Work {
                cell: i.to_string(),
                bounds: cell.bounds,
                center: cell.center,
                radius_m: cell.circumradius_m,
                depth: 0,
                entry,
            };
            match run(client, &work, budget, options, &mut out) {
                Ok(true) if options.refine_depth > 0 => refine.push(work),
                Ok(_) => {}
                Err(error) => {
                    return Err(HarvestFailure {
                        error,
                        partial: Box::new(out),
                    })
                }
            }
        }
    }

    let mut queue = std::collections::VecDeque::from(refine);
    while let Some(parent) = queue.pop_front() {
        let sub = match crate::geo::make_grid(parent.bounds, 2, 2) {
            Ok(g) => g,
            Err(e) => {
                return Err(HarvestFailure {
                    error: e.into(),
                    partial: Box::new(out),
                })
            }
        };
        for (q, cell) in sub.cells.iter().enumerate() {
            if budget.is_exhausted() {
                let pending: u64 = 4 - q as u64 + 4 * queue.len() as u64;
                out.report.refinement_skipped += pending;
                log::warn!("query budget spent; skipping {pending} refinement searches");
                return Ok(out);
            }
            let work = Work {
                cell: format!("{}.{q}", parent.cell),
                bounds: cell.bounds,
                center: cell.center,
                radius_m: cell.circumradius_m,
                depth: parent.depth + 1,
                entry: parent.entry,
            };
            out.report.refinement_queries += 1;
            match run(client, &work, budget, options, &mut out) {
                Ok(true) if work.depth < options.refine_depth => queue.push_back(work),
                Ok(_) => {}
                Err(PoiError::BudgetExhausted { .. }) => {
                    out.report.refinement_skipped += 1;
                    return Ok(out);
                }
                Err(error) => {
                    return Err(HarvestFailure {
                        error,
                        partial: Box::new(out),
                    })
                }
            }
        }
    }
    Ok(out)
}

/// Returns whether the search hit the result cap.
fn run<C: PlacesClient + ?Sized>(
    client: &C,
    work: &Work<'_>,
    budget: &mut QueryBudget,
    options: HarvestOptions,
    out: &mut HarvestOutcome,
) -> Result<bool, PoiError> {
    let request = PlacesRequest {
        kind: work.entry.kind,
        term: work.entry.term.clone(),
        center: work.center,
        radius_m: work.radius_m,
    };
    let mut attempt = 0;
    let fetched = loop {
        out.report.queries += 1;
        match fetch(client, &request, work.entry.query_type(), budget) {
            Ok(f) => break f,
            Err(PoiError::Client(e)) if e.retriable && attempt < options.max_retries => {
                log::warn!("retrying `{}` after {e}", request.canonical_key());
                attempt += 1;
                out.report.retries += 1;
            }
            Err(PoiError::BudgetExhausted { used, max }) => {
                out.report.queries -= 1;
                return Err(PoiError::BudgetExhausted { used, max });
            }
            Err(e) => return Err(e),
        }
    };
    out.report.results += fetched.pois.len() as u64;
    if fetched.truncated {
        out.report.truncated.push(TruncatedQuery {
            cell: work.cell.clone(),
            term: work.entry.term.clone(),
            kind: work.entry.kind,
            center: work.center,
            radius_m: work.radius_m,
            depth: work.depth,
        });
    }
    out.pois.extend(fetched.pois);
    Ok(fetched.truncated)
}

/// The `count` cells holding the fewest POIs, ties going to the lower index.
pub fn select_low_density_cells<'a>(
    grid: &GridSpec,
    positions: impl IntoIterator<Item = &'a GeoPoint>,
    count: usize,
) -> Vec<usize> {
    let mut density = vec![0usize; grid.len()];
    for p in positions {
        if let Some(i) = grid.cell_index(*p) {
            density[i] += 1;
        }
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by_key(|&i| (density[i], i));
    order.truncate(count);
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::super::client::tests::place;
    use super::super::client::{ClientError, InventoryClient, PlacesResponse};
    use super::*;
    use crate::geo::{make_grid, BBox};
    use std::cell::Cell;

    fn center() -> GeoPoint {
        GeoPoint {
            lat: 33.77,
            lon: -84.39,
        }
    }

    fn cluster(n: usize, ty: &str) -> Vec<super::super::client::InventoryPlace> {
        (0..n)
            .map(|i| {
                place(
                    &format!("{ty}{i:02}"),
                    33.77 + i as f64 * 1e-5,
                    -84.39,
                    &[ty],
                )
            })
            .collect()
    }

    #[test]
    fn nearby_small_cell_is_not_truncated() {
        let client = InventoryClient::new(cluster(3, "restaurant"));
        let mut budget = QueryBudget::new(5);
        let (pois, truncated) =
            fetch_nearby(&client, center(), 200.0, "restaurant", &mut budget).unwrap();
        assert_eq!(pois.len(), 3);
        assert!(!truncated);
        assert_eq!(budget.used, 1);
        assert!(pois
            .iter()
            .all(|p| p.source == QueryKind::Nearby && p.query_type == "restaurant"));
    }

    #[test]
    fn nearby_cap_marks_truncation() {
        // The inventory returns everything; the cap is enforced by fetch.
        let client = InventoryClient::new(cluster(25, "restaurant")).with_page_size(60);
        let mut budget = QueryBudget::new(5);
        let (pois, truncated) =
            fetch_nearby(&client, center(), 200.0, "restaurant", &mut budget).unwrap();
        assert_eq!(pois.len(), 20);
        assert!(truncated);
    }

    #[test]
    fn exhausted_budget_is_an_error() {
        let client = InventoryClient::new(vec![]);
        let mut budget = QueryBudget::new(0);
        assert!(matches!(
            fetch_nearby(&client, center(), 200.0, "bar", &mut budget),
            Err(PoiError::BudgetExhausted { used: 0, max: 0 })
        ));
    }

    #[test]
    fn text_queries_tag_their_type() {
        let mut apt = place("apt1", 33.7701, -84.3901, &[]);
        apt.keywords = vec!["apartment".into()];
        let mut condo = place("c1", 33.7702, -84.3902, &["point_of_interest"]);
        condo.keywords = vec!["condo".into()];
        let client = InventoryClient::new(vec![apt, condo]);
        let mut budget = QueryBudget::new(5);
        let pois = fetch_text(&client, "apartment", center(), 300.0, &mut budget).unwrap();
        assert_eq!(pois.len(), 1);
        assert_eq!(pois[0].source, QueryKind::Text);
        let pois = fetch_text(&client, "condo", center(), 300.0, &mut budget).unwrap();
        assert_eq!(pois[0].query_type, "condo");
        let empty = InventoryClient::new(vec![]);
        assert!(fetch_text(&empty, "condo", center(), 300.0, &mut budget)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn one_query_per_cell_and_entry() {
        let grid = make_grid(BBox::study_region(), 8, 8).unwrap();
        let client = InventoryClient::new(vec![]);
        let mut budget = QueryBudget::new(1000);
        let out = harvest(
            &client,
            &grid,
            &[PlanEntry::nearby("bar")],
            &mut budget,
            HarvestOptions::default(),
        )
        .unwrap();
        assert_eq!(out.report.queries, 64);
        assert_eq!(budget.used, 64);
    }

    #[test]
    fn budget_shortfall_stops_after_max_queries() {
        struct Counting(Cell<u64>);
        impl PlacesClient for Counting {
            fn search(&self, _: &PlacesRequest) -> Result<PlacesResponse, ClientError> {
                self.0.set(self.0.get() + 1);
                Ok(PlacesResponse::ok(vec![]))
            }
        }
        let grid = make_grid(BBox::study_region(), 8, 8).unwrap();
        let client = Counting(Cell::new(0));
        let mut budget = QueryBudget::new(10);
        let err = harvest(
            &client,
            &grid,
            &[PlanEntry::nearby("bar")],
            &mut budget,
            HarvestOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err.error,
            PoiError::BudgetExhausted { used: 10, max: 10 }
        ));
        assert_eq!(client.0.get(), 10);
        assert_eq!(err.partial.report.queries, 10);
    }

    #[test]
    fn capped_cells_are_refined() {
        let grid = make_grid(BBox::study_region(), 1, 1).unwrap();
        let c = grid.cells[0].center;
        let places: Vec<_> = (0..30)
            .map(|i| {
                place(
                    &format!("b{i:02}"),
                    c.lat + (i as f64 - 15.0) * 4e-4,
                    c.lon + ((i * 7) % 11) as f64 * 3e-4,
                    &["bar"],
                )
            })
            .collect();
        let client = InventoryClient::new(places);
        let mut budget = QueryBudget::new(100);
        let out = harvest(
            &client,
            &grid,
            &[PlanEntry::nearby("bar")],
            &mut budget,
            HarvestOptions::default(),
        )
        .unwrap();
        assert_eq!(out.report.truncated[0].cell, "0");
        assert!(out.report.refinement_queries >= 4);
        let mut ids: Vec<_> = out.pois.iter().map(|p| p.place_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 30, "refinement recovers every place");

        let mut tight = QueryBudget::new(3);
        let out = harvest(
            &client,
            &grid,
            &[PlanEntry::nearby("bar")],
            &mut tight,
            HarvestOptions::default(),
        )
        .unwrap();
        assert_eq!(out.report.refinement_queries, 2);
        assert!(out.report.refinement_skipped >= 2);
    }

    #[test]
    fn retriable_errors_are_retried_then_surface() {
        struct Flaky(Cell<u32>);
        impl PlacesClient for Flaky {
            fn search(&self, _: &PlacesRequest) -> Result<PlacesResponse, ClientError> {
                self.0.set(self.0.get() + 1);
                if self.0.get() % 2 == 1 {
                    Err(ClientError::retriable("OVER_QUERY_LIMIT", ""))
                } else {
                    Ok(PlacesResponse::ok(vec![]))
                }
            }
        }
        let grid = make_grid(BBox::study_region(), 1, 2).unwrap();
        let mut budget = QueryBudget::new(10);
        let out = harvest(
            &Flaky(Cell::new(0)),
            &grid,
            &[PlanEntry::nearby("bar")],
            &mut budget,
            HarvestOptions::default(),
        )
        .unwrap();
        assert_eq!(out.report.retries, 2);
        assert_eq!(budget.used, 4);

        struct Denied;
        impl PlacesClient for Denied {
            fn search(&self, _: &PlacesRequest) -> Result<PlacesResponse, ClientError> {
                Err(ClientError::fatal("REQUEST_DENIED", "bad key"))
            }
        }
        let err = harvest(
            &Denied,
            &grid,
            &[PlanEntry::nearby("bar")],
            &mut QueryBudget::new(10),
            HarvestOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err.error, PoiError::Client(ref e) if !e.retriable));
    }

    #[test]
    fn low_density_selection() {
        let grid = make_grid(BBox::study_region(), 2, 2).unwrap();
        let pts = vec![
            grid.cells[0].center,
            grid.cells[0].center,
            grid.cells[3].center,
        ];
        assert_eq!(select_low_density_cells(&grid, &pts, 2), vec![1, 2]);
        assert_eq!(select_low_density_cells(&grid, &pts, 3), vec![1, 2, 3]);
    }
}
