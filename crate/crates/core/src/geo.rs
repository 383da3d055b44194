//! Spherical-earth geodesy, query grids, and a k-d tree over Earth-centered
//! coordinates.
//!
//! Everything here assumes a sphere of radius [`EARTH_RADIUS_M`]. Nearest
//! neighbor search runs on 3D chord distance, which orders points exactly like
//! great-circle distance, and reports haversine meters back to the caller.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by every distance in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("invalid bounding box: min {min} must be strictly below max {max}")]
    InvalidBbox { min: GeoPoint, max: GeoPoint },
    #[error("invalid bounding box literal `{0}`; expected minlat,minlon,maxlat,maxlon")]
    BboxSyntax(String),
    #[error("grid needs at least one row and one column, got {rows}x{cols}")]
    InvalidGrid { rows: usize, cols: usize },
    #[error("spatial index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
}

/// A WGS84 latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(GeoError::InvalidCoordinate { lat, lon })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }

    /// Integer key of the point rounded to 6 decimal places (about 0.11 m).
    pub fn location_key(&self) -> (i64, i64) {
        (
            (self.lat * 1e6).round() as i64,
            (self.lon * 1e6).round() as i64,
        )
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let half_dphi = (phi2 - phi1) * 0.5;
    let half_dlambda = (b.lon - a.lon).to_radians() * 0.5;
    let h = half_dphi.sin().powi(2) + phi1.cos() * phi2.cos() * half_dlambda.sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_M * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Earth-centered, Earth-fixed position in meters on the reference sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CartesianPoint {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance_squared(&self, other: &CartesianPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn distance(&self, other: &CartesianPoint) -> f64 {
        self.distance_squared(other).sqrt()
    }

    fn axis(&self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

pub fn to_cartesian(p: GeoPoint) -> CartesianPoint {
    let (sin_lat, cos_lat) = p.lat.to_radians().sin_cos();
    let (sin_lon, cos_lon) = p.lon.to_radians().sin_cos();
    CartesianPoint {
        x: EARTH_RADIUS_M * cos_lat * cos_lon,
        y: EARTH_RADIUS_M * cos_lat * sin_lon,
        z: EARTH_RADIUS_M * sin_lat,
    }
}

/// The point at `radius_m` meters from `center` along the initial bearing
/// `bearing_deg` (clockwise from true north).
///
/// On a sphere this is the inverse azimuthal equidistant projection of the
/// polar offset `(radius_m, bearing_deg)` around `center`. Bearings outside
/// `[0, 360)` are wrapped.
///
/// # Panics
///
/// If `radius_m` is negative, non-finite, or larger than 10 km.
pub fn offset_azimuthal(center: GeoPoint, bearing_deg: f64, radius_m: f64) -> GeoPoint {
    assert!(
        radius_m.is_finite() && (0.0..=10_000.0).contains(&radius_m),
        "offset radius must be within [0, 10000] m, got {radius_m}"
    );
    if radius_m == 0.0 {
        return center;
    }
    let theta = bearing_deg.rem_euclid(360.0).to_radians();
    let delta = radius_m / EARTH_RADIUS_M;
    let phi1 = center.lat.to_radians();
    let lambda1 = center.lon.to_radians();

    let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos();
    let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
    let lambda2 = lambda1
        + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);

    let lon = (lambda2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    GeoPoint {
        lat: phi2.to_degrees(),
        lon,
    }
}

/// An axis-aligned latitude/longitude rectangle. Bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BBoxFields")]
pub struct BBox {
    pub min: GeoPoint,
    pub max: GeoPoint,
}

#[derive(Deserialize)]
struct BBoxFields {
    min: GeoPoint,
    max: GeoPoint,
}

impl TryFrom<BBoxFields> for BBox {
    type Error = GeoError;

    fn try_from(value: BBoxFields) -> Result<Self, Self::Error> {
        BBox::new(value.min, value.max)
    }
}

impl BBox {
    pub fn new(min: GeoPoint, max: GeoPoint) -> Result<Self, GeoError> {
        if !min.is_valid() {
            return Err(GeoError::InvalidCoordinate {
                lat: min.lat,
                lon: min.lon,
            });
        }
        if !max.is_valid() {
            return Err(GeoError::InvalidCoordinate {
                lat: max.lat,
                lon: max.lon,
            });
        }
        if min.lat >= max.lat || min.lon >= max.lon {
            return Err(GeoError::InvalidBbox { min, max });
        }
        Ok(BBox { min, max })
    }

    /// Midtown/downtown Atlanta cell that carries most of the ridership.
    pub fn study_region() -> Self {
        BBox {
            min: GeoPoint {
                lat: 33.748_379_333_333_33,
                lon: -84.405_623_333_333_32,
            },
            max: GeoPoint {
                lat: 33.789_279,
                lon: -84.359_614_999_999_99,
            },
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min.lat
            && p.lat <= self.max.lat
            && p.lon >= self.min.lon
            && p.lon <= self.max.lon
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.min.lat + self.max.lat) * 0.5,
            lon: (self.min.lon + self.max.lon) * 0.5,
        }
    }

    /// SW, SE, NE, NW.
    pub fn corners(&self) -> [GeoPoint; 4] {
        [
            self.min,
            GeoPoint {
                lat: self.min.lat,
                lon: self.max.lon,
            },
            self.max,
            GeoPoint {
                lat: self.max.lat,
                lon: self.min.lon,
            },
        ]
    }
}

impl FromStr for BBox {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| GeoError::BboxSyntax(s.to_string()))?;
        let [min_lat, min_lon, max_lat, max_lon] = parts[..] else {
            return Err(GeoError::BboxSyntax(s.to_string()));
        };
        BBox::new(
            GeoPoint::new(min_lat, min_lon)?,
            GeoPoint::new(max_lat, max_lon)?,
        )
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.min.lat, self.min.lon, self.max.lat, self.max.lon
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub bounds: BBox,
    pub center: GeoPoint,
    /// Radius of the smallest center-anchored disk that contains the cell.
    pub circumradius_m: f64,
}

impl GridCell {
    pub fn subdivide(&self, rows: usize, cols: usize) -> Result<GridSpec, GeoError> {
        make_grid(self.bounds, rows, cols)
    }
}

/// Uniform lat/lon subdivision of a bounding box. Row 0 is the southern
/// edge, column 0 the western edge; cells are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bbox: BBox,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<GridCell>,
}

pub fn make_grid(bbox: BBox, rows: usize, cols: usize) -> Result<GridSpec, GeoError> {
    if rows == 0 || cols == 0 {
        return Err(GeoError::InvalidGrid { rows, cols });
    }
    let bbox = BBox::new(bbox.min, bbox.max)?;
    let mut cells = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let bounds = BBox {
                min: GeoPoint {
                    lat: lat_edge(&bbox, rows, row),
                    lon: lon_edge(&bbox, cols, col),
                },
                max: GeoPoint {
                    lat: lat_edge(&bbox, rows, row + 1),
                    lon: lon_edge(&bbox, cols, col + 1),
                },
            };
            let center = bounds.center();
            let circumradius_m = bounds
                .corners()
                .iter()
                .map(|c| haversine_m(center, *c))
                .fold(0.0, f64::max);
            cells.push(GridCell {
                row,
                col,
                bounds,
                center,
                circumradius_m,
            });
        }
    }
    Ok(GridSpec {
        bbox,
        rows,
        cols,
        cells,
    })
}

fn lat_edge(bbox: &BBox, rows: usize, i: usize) -> f64 {
    if i == rows {
        return bbox.max.lat;
    }
    bbox.min.lat + (bbox.max.lat - bbox.min.lat) * (i as f64) / (rows as f64)
}

fn lon_edge(bbox: &BBox, cols: usize, j: usize) -> f64 {
    if j == cols {
        return bbox.max.lon;
    }
    bbox.min.lon + (bbox.max.lon - bbox.min.lon) * (j as f64) / (cols as f64)
}

/// Locates `value` in the half-open bands defined by `edge(0..=n)`; the last
/// band is closed so the whole range is covered.
fn band_index(value: f64, n: usize, lo: f64, hi: f64, edge: impl Fn(usize) -> f64) -> usize {
    let guess = ((value - lo) / (hi - lo) * n as f64).floor();
    let mut i = if guess.is_nan() || guess < 0.0 {
        0
    } else {
        (guess as usize).min(n - 1)
    };
    while i > 0 && value < edge(i) {
        i -= 1;
    }
    while i + 1 < n && value >= edge(i + 1) {
        i += 1;
    }
    i
}

impl GridSpec {
    /// Row-major index of the cell containing `p`, or `None` outside the box.
    pub fn cell_index(&self, p: GeoPoint) -> Option<usize> {
        if !self.bbox.contains(p) {
            return None;
        }
        let row = band_index(
            p.lat,
            self.rows,
            self.bbox.min.lat,
            self.bbox.max.lat,
            |i| lat_edge(&self.bbox, self.rows, i),
        );
        let col = band_index(
            p.lon,
            self.cols,
            self.bbox.min.lon,
            self.bbox.max.lon,
            |j| lon_edge(&self.bbox, self.cols, j),
        );
        Some(row * self.cols + col)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// A nearest-neighbor hit: the item id and its haversine distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<Id> {
    pub id: Id,
    pub distance_m: f64,
}

/// Static k-d tree over points on the sphere, keyed by caller-chosen ids.
///
/// The tree is stored implicitly: each subrange `[lo, hi)` keeps its splitting
/// point at `mid = (lo + hi) / 2`, with the split axis recorded per slot.
#[derive(Debug, Clone)]
pub struct SpatialIndex<Id> {
    ids: Vec<Id>,
    geo: Vec<GeoPoint>,
    xyz: Vec<CartesianPoint>,
    axes: Vec<u8>,
}

pub fn build_spatial_index<Id: Ord + Clone>(points: Vec<(Id, GeoPoint)>) -> SpatialIndex<Id> {
    SpatialIndex::build(points)
}

pub fn nearest_k<Id: Ord + Clone>(
    index: &SpatialIndex<Id>,
    query: GeoPoint,
    k: usize,
) -> Result<Vec<Neighbor<Id>>, GeoError> {
    index.nearest_k(query, k)
}

impl<Id: Ord + Clone> SpatialIndex<Id> {
    pub fn build(points: Vec<(Id, GeoPoint)>) -> Self {
        let mut items: Vec<(Id, GeoPoint, CartesianPoint)> = points
            .into_iter()
            .map(|(id, p)| {
                let c = to_cartesian(p);
                (id, p, c)
            })
            .collect();
        let mut axes = vec![0u8; items.len()];
        let len = items.len();
        build_recursive(&mut items, &mut axes, 0, len);

        let mut ids = Vec::with_capacity(len);
        let mut geo = Vec::with_capacity(len);
        let mut xyz = Vec::with_capacity(len);
        for (id, g, c) in items {
            ids.push(id);
            geo.push(g);
            xyz.push(c);
        }
        SpatialIndex {
            ids,
            geo,
            xyz,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `k` points closest to `query`, ascending by distance, ties broken
    /// by ascending id. Returns fewer than `k` hits only when the index holds
    /// fewer points.
    pub fn nearest_k(&self, query: GeoPoint, k: usize) -> Result<Vec<Neighbor<Id>>, GeoError> {
        if k == 0 {
            return Err(GeoError::InvalidK);
        }
        if self.is_empty() {
            return Err(GeoError::EmptyIndex);
        }
        let q = to_cartesian(query);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(&q, k, 0, self.len(), &mut best);
        Ok(best
            .into_iter()
            .map(|(_, slot)| Neighbor {
                id: self.ids[slot].clone(),
                distance_m: haversine_m(query, self.geo[slot]),
            })
            .collect())
    }

    pub fn nearest(&self, query: GeoPoint) -> Result<Neighbor<Id>, GeoError> {
        let mut hits = self.nearest_k(query, 1)?;
        Ok(hits.swap_remove(0))
    }

    fn search(
        &self,
        q: &CartesianPoint,
        k: usize,
        lo: usize,
        hi: usize,
        best: &mut Vec<(f64, usize)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let d2 = q.distance_squared(&self.xyz[mid]);
        self.offer(k, d2, mid, best);

        let axis = self.axes[mid] as usize;
        let diff = q.axis(axis) - self.xyz[mid].axis(axis);
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, k, near.0, near.1, best);
        // Equal plane distance must still be explored so that equidistant
        // points with smaller ids are not skipped.
        if best.len() < k || diff * diff <= best[best.len() - 1].0 {
            self.search(q, k, far.0, far.1, best);
        }
    }

    fn offer(&self, k: usize, d2: f64, slot: usize, best: &mut Vec<(f64, usize)>) {
        let before = |a: &(f64, usize)| a.0 < d2 || (a.0 == d2 && self.ids[a.1] <= self.ids[slot]);
        if best.len() == k {
            let worst = best[k - 1];
            if before(&worst) {
                return;
            }
        }
        let pos = best.partition_point(before);
        best.insert(pos, (d2, slot));
        best.truncate(k);
    }
}

fn build_recursive<Id>(
    items: &mut [(Id, GeoPoint, CartesianPoint)],
    axes: &mut [u8],
    lo: usize,
    hi: usize,
) {
    if hi - lo <= 1 {
        return;
    }
    let slice = &mut items[lo..hi];
    let axis = widest_axis(slice);
    let mid = (hi - lo) / 2;
    slice.select_nth_unstable_by(mid, |a, b| a.2.axis(axis).total_cmp(&b.2.axis(axis)));
    axes[lo + mid] = axis as u8;
    build_recursive(items, axes, lo, lo + mid);
    build_recursive(items, axes, lo + mid + 1, hi);
}

fn widest_axis<Id>(slice: &[(Id, GeoPoint, CartesianPoint)]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (_, _, c) in slice {
        for (axis, (l, h)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
            let v = c.axis(axis);
            *l = l.min(v);
            *h = h.max(v);
        }
    }
    (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn study_point() -> impl Strategy<Value = GeoPoint> {
        let b = BBox::study_region();
        (b.min.lat..=b.max.lat, b.min.lon..=b.max.lon).prop_map(|(lat, lon)| GeoPoint { lat, lon })
    }

    #[test]
    fn haversine_identity_and_small_offset() {
        let a = pt(33.77, -84.39);
        assert_eq!(haversine_m(a, a), 0.0);
        // pi/180 * 6_371_000 * 0.001
        let expected = std::f64::consts::PI / 180.0 * 6_371_000.0 * 0.001;
        let d = haversine_m(a, pt(33.771, -84.39));
        assert!((d - expected).abs() < 0.01, "{d} vs {expected}");
        assert!((d - 111.19).abs() < 0.01);
    }

    #[test]
    fn haversine_antipodal() {
        let d = haversine_m(pt(10.0, 20.0), pt(-10.0, -160.0));
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_M).abs() < 1.0);
    }

    #[test]
    fn cartesian_reference_points() {
        let c = to_cartesian(pt(0.0, 0.0));
        assert!((c.x - EARTH_RADIUS_M).abs() < 1e-6 && c.y.abs() < 1e-6 && c.z.abs() < 1e-6);
        for lon in [-120.0, 0.0, 45.0] {
            let c = to_cartesian(pt(90.0, lon));
            assert!(c.x.abs() < 1e-6 && c.y.abs() < 1e-6);
            assert!((c.z - EARTH_RADIUS_M).abs() < 1e-6);
        }
    }

    #[test]
    fn chord_matches_arc_at_one_kilometer() {
        let a = pt(33.77, -84.39);
        let b = offset_azimuthal(a, 37.0, 1000.0);
        let arc = haversine_m(a, b);
        assert!((arc - 1000.0).abs() < 1e-3);
        let chord = to_cartesian(a).distance(&to_cartesian(b));
        assert!((chord - 1000.0).abs() < 0.1, "chord {chord}");
    }

    #[test]
    fn offset_north_ninety_meters() {
        let c = pt(33.7634, -84.3951);
        let p = offset_azimuthal(c, 0.0, 90.0);
        assert!(p.lat > c.lat);
        assert!((p.lon - c.lon).abs() < 1e-12);
        assert!((haversine_m(c, p) - 90.0).abs() <= 0.09);
    }

    #[test]
    fn offset_zero_radius_is_center() {
        let c = pt(33.7634, -84.3951);
        assert_eq!(offset_azimuthal(c, 123.0, 0.0), c);
    }

    #[test]
    fn offset_cardinal_square() {
        let c = pt(33.757, -84.396);
        let pts: Vec<GeoPoint> = [0.0, 90.0, 180.0, 270.0]
            .iter()
            .map(|b| offset_azimuthal(c, *b, 140.0))
            .collect();
        let adjacent = 140.0 * std::f64::consts::SQRT_2;
        for i in 0..4 {
            let d_adj = haversine_m(pts[i], pts[(i + 1) % 4]);
            assert!((d_adj - adjacent).abs() < 0.1, "adjacent {d_adj}");
            assert!((d_adj - 198.0).abs() < 0.1);
        }
        for i in 0..2 {
            let d_opp = haversine_m(pts[i], pts[i + 2]);
            assert!((d_opp - 280.0).abs() < 0.01, "opposite {d_opp}");
        }
    }

    #[test]
    fn bbox_rejects_inverted_and_parses() {
        assert!(matches!(
            BBox::new(pt(34.0, -84.4), pt(33.0, -84.3)),
            Err(GeoError::InvalidBbox { .. })
        ));
        let b: BBox = "33.748379,-84.405623,33.789279,-84.359615".parse().unwrap();
        assert!(b.contains(pt(33.77, -84.39)));
        assert!(!b.contains(pt(34.0, -84.39)));
        assert!("1,2,3".parse::<BBox>().is_err());
        let json = r#"{"min":{"lat":1.0,"lon":1.0},"max":{"lat":0.0,"lon":2.0}}"#;
        assert!(serde_json::from_str::<BBox>(json).is_err());
    }

    #[test]
    fn grid_counts_and_single_cell() {
        let b = BBox::study_region();
        assert_eq!(make_grid(b, 8, 8).unwrap().len(), 64);
        assert_eq!(make_grid(b, 15, 15).unwrap().len(), 225);
        let one = make_grid(b, 1, 1).unwrap();
        let half_diag = haversine_m(b.min, b.max) / 2.0;
        // Midpoint in lat/lon sits marginally off the great-circle midpoint.
        assert!((one.cells[0].circumradius_m - half_diag).abs() / half_diag < 1e-3);
        assert!(matches!(
            make_grid(b, 0, 3),
            Err(GeoError::InvalidGrid { .. })
        ));
    }

    #[test]
    fn grid_edges_belong_to_exactly_one_cell() {
        let grid = make_grid(BBox::study_region(), 8, 8).unwrap();
        for (i, cell) in grid.cells.iter().enumerate() {
            assert_eq!(grid.cell_index(cell.center), Some(i));
            // The SW corner is owned by its own cell.
            assert_eq!(grid.cell_index(cell.bounds.min), Some(i));
        }
        assert_eq!(grid.cell_index(grid.bbox.max), Some(63));
        assert_eq!(grid.cell_index(pt(0.0, 0.0)), None);
    }

    #[test]
    fn nearest_singleton_and_errors() {
        let idx = build_spatial_index(vec![("A".to_string(), pt(33.77, -84.39))]);
        let hits = idx.nearest_k(pt(33.78, -84.38), 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "A");
        assert!(
            (hits[0].distance_m - haversine_m(pt(33.77, -84.39), pt(33.78, -84.38))).abs() < 1e-9
        );
        assert_eq!(idx.nearest_k(pt(0.0, 0.0), 0), Err(GeoError::InvalidK));
        let empty: SpatialIndex<u32> = build_spatial_index(vec![]);
        assert_eq!(empty.nearest_k(pt(0.0, 0.0), 1), Err(GeoError::EmptyIndex));
    }

    #[test]
    fn equidistant_ties_prefer_lower_id() {
        let q = pt(0.0, 0.0);
        let idx = build_spatial_index(vec![
            ("b".to_string(), pt(0.0, 1.0)),
            ("a".to_string(), pt(0.0, -1.0)),
            ("c".to_string(), pt(0.0, 3.0)),
        ]);
        let hits = idx.nearest_k(q, 2).unwrap();
        assert_eq!(hits[0].id, "a");
        assert_eq!(hits[1].id, "b");

        let same = pt(33.77, -84.39);
        let idx = build_spatial_index(vec![(9u32, same), (3, same), (5, same)]);
        let ids: Vec<u32> = idx
            .nearest_k(same, 3)
            .unwrap()
            .into_iter()
            .map(|n| n.id)
            .collect();
        assert_eq!(ids, vec![3, 5, 9]);
    }

    #[test]
    fn knn_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = BBox::study_region();
        let pts: Vec<(usize, GeoPoint)> = (0..1000)
            .map(|i| {
                (
                    i,
                    GeoPoint {
                        lat: rng.gen_range(b.min.lat..b.max.lat),
                        lon: rng.gen_range(b.min.lon..b.max.lon),
                    },
                )
            })
            .collect();
        let idx = build_spatial_index(pts.clone());
        for _ in 0..100 {
            let q = GeoPoint {
                lat: rng.gen_range(b.min.lat..b.max.lat),
                lon: rng.gen_range(b.min.lon..b.max.lon),
            };
            let mut oracle: Vec<(f64, usize)> =
                pts.iter().map(|(i, p)| (haversine_m(q, *p), *i)).collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let hits = idx.nearest_k(q, 5).unwrap();
            for (h, o) in hits.iter().zip(&oracle) {
                assert_eq!(h.id, o.1);
                assert!((h.distance_m - o.0).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn haversine_metric_properties(a in study_point(), b in study_point(), c in study_point()) {
            let ab = haversine_m(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, haversine_m(b, a));
            let lhs = haversine_m(a, c);
            let rhs = ab + haversine_m(b, c);
            prop_assert!(lhs <= rhs * (1.0 + 1e-6) + 1e-9);
        }

        #[test]
        fn offset_round_trip(c in study_point(), bearing in 0.0f64..360.0, r in 0.5f64..300.0) {
            let p = offset_azimuthal(c, bearing, r);
            let d = haversine_m(c, p);
            prop_assert!((d - r).abs() / r < 1e-3);
        }

        #[test]
        fn cartesian_norm_is_radius(p in study_point()) {
            let n = to_cartesian(p).norm();
            prop_assert!((n - EARTH_RADIUS_M).abs() / EARTH_RADIUS_M < 0.005);
        }

        #[test]
        fn chord_distortion_small_within_five_km(c in study_point(), bearing in 0.0f64..360.0, r in 1.0f64..5000.0) {
            let p = offset_azimuthal(c, bearing, r);
            let arc = haversine_m(c, p);
            let chord = to_cartesian(c).distance(&to_cartesian(p));
            prop_assert!((arc - chord).abs() / arc < 1e-4);
        }

        #[test]
        fn grid_partitions_and_covers(p in study_point(), rows in 1usize..12, cols in 1usize..12) {
            let grid = make_grid(BBox::study_region(), rows, cols).unwrap();
            let owners: Vec<usize> = grid
                .cells
                .iter()
                .enumerate()
                .filter(|(i, cell)| {
                    let b = cell.bounds;
                    let last_row = *i / cols == rows - 1;
                    let last_col = *i % cols == cols - 1;
                    p.lat >= b.min.lat
                        && (p.lat < b.max.lat || (last_row && p.lat <= b.max.lat))
                        && p.lon >= b.min.lon
                        && (p.lon < b.max.lon || (last_col && p.lon <= b.max.lon))
                })
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(owners.len(), 1);
            prop_assert_eq!(grid.cell_index(p), Some(owners[0]));
            let cell = &grid.cells[owners[0]];
            prop_assert!(haversine_m(cell.center, p) <= cell.circumradius_m + 1e-6);
        }
    }
}
