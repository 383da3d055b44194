//! Regenerates the places fixtures for a pipeline config from a synthetic
//! inventory of downtown and midtown Atlanta places.
//!
//!     cargo run -p scooter-core --example record_fixtures -- fixtures/midtown/pipeline.json

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scooter_core::geo::offset_azimuthal;
use scooter_core::pipeline::{harvest_region, write_json_file, PipelineConfig};
use scooter_core::poi::{
    InventoryClient, InventoryPlace, LatLng, PlaceGeometry, PlaceResult, RecordingClient,
};
use scooter_core::GeoPoint;

const STREETS: &[&str] = &[
    "Peachtree St NE",
    "Spring St NW",
    "West Peachtree St NW",
    "Juniper St NE",
    "Piedmont Ave NE",
    "Courtland St NE",
    "Marietta St NW",
    "Ponce de Leon Ave NE",
    "North Ave NE",
    "10th St NE",
    "14th St NW",
    "Edgewood Ave SE",
];

const WORDS: &[&str] = &[
    "Magnolia", "Dogwood", "Pine", "Brick", "Station", "Corner", "Union", "Summit", "Canopy",
    "Copper", "Lantern", "Harbor", "Ivy", "Cotton", "Rail", "Tower",
];

fn place(
    id: String,
    name: String,
    at: GeoPoint,
    types: &[&str],
    vicinity: String,
) -> InventoryPlace {
    InventoryPlace {
        place: PlaceResult {
            place_id: id,
            name,
            geometry: PlaceGeometry {
                location: LatLng {
                    lat: at.lat,
                    lng: at.lon,
                },
            },
            types: types.iter().map(|t| t.to_string()).collect(),
            vicinity: Some(vicinity),
            formatted_address: None,
        },
        keywords: vec![],
    }
}

fn landmark(id: &str, name: &str, lat: f64, lon: f64, types: &[&str]) -> InventoryPlace {
    place(
        id.to_string(),
        name.to_string(),
        GeoPoint { lat, lon },
        types,
        format!("{name}, Atlanta"),
    )
}

fn inventory(config: &PipelineConfig) -> Vec<InventoryPlace> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let bbox = config.bbox;
    let mut out = vec![
        landmark(
            "lm-aquarium",
            "Georgia Aquarium",
            33.7634,
            -84.3951,
            &["aquarium", "tourist_attraction"],
        ),
        landmark(
            "lm-stadium",
            "Mercedes-Benz Stadium",
            33.7554,
            -84.4008,
            &["stadium", "point_of_interest"],
        ),
        landmark(
            "lm-north-ave",
            "North Avenue",
            33.7717,
            -84.3870,
            &["subway_station", "transit_station"],
        ),
        landmark(
            "lm-midtown",
            "Midtown",
            33.7810,
            -84.3863,
            &["subway_station", "transit_station"],
        ),
        landmark(
            "lm-civic",
            "Civic Center",
            33.7664,
            -84.3876,
            &["subway_station", "transit_station"],
        ),
        landmark(
            "lm-peachtree",
            "Peachtree Center",
            33.7597,
            -84.3877,
            &["subway_station", "transit_station"],
        ),
        landmark(
            "lm-olympic",
            "Centennial Olympic Park",
            33.7603,
            -84.3932,
            &["park", "tourist_attraction"],
        ),
        landmark(
            "lm-piedmont",
            "Piedmont Park",
            33.7851,
            -84.3738,
            &["park", "point_of_interest"],
        ),
        landmark(
            "lm-tech",
            "Georgia Institute of Technology",
            33.7756,
            -84.3963,
            &["university", "point_of_interest"],
        ),
        landmark(
            "lm-grady",
            "Grady Memorial Hospital",
            33.7520,
            -84.3820,
            &["hospital", "health"],
        ),
    ];
    // (primary, extra types, count, clustered near Peachtree Center)
    let kinds: &[(&str, &[&str], usize, bool)] = &[
        ("restaurant", &["food", "point_of_interest"], 70, false),
        ("restaurant", &["bar", "food"], 30, true),
        ("cafe", &["food", "store"], 35, false),
        ("bar", &["night_club", "point_of_interest"], 25, false),
        ("bank", &["finance", "point_of_interest"], 20, false),
        ("store", &["point_of_interest"], 40, false),
        ("parking", &["point_of_interest"], 45, false),
        ("lodging", &["point_of_interest"], 25, false),
        ("park", &["point_of_interest"], 10, false),
        ("church", &["place_of_worship"], 15, false),
        ("gym", &["health"], 12, false),
        ("bus_station", &["transit_station"], 12, false),
        ("apartment", &["premise"], 30, false),
        ("condo", &["premise"], 10, false),
    ];
    let hub = GeoPoint {
        lat: 33.7597,
        lon: -84.3877,
    };
    let mut n = 0;
    for &(primary, extra, count, clustered) in kinds {
        for _ in 0..count {
            n += 1;
            let at = if clustered {
                offset_azimuthal(
                    hub,
                    rng.gen_range(0.0..360.0),
                    300.0 * rng.gen::<f64>().sqrt(),
                )
            } else {
                GeoPoint {
                    lat: rng.gen_range(bbox.min.lat..bbox.max.lat),
                    lon: rng.gen_range(bbox.min.lon..bbox.max.lon),
                }
            };
            let word = WORDS[rng.gen_range(0..WORDS.len())];
            let name = match primary {
                "apartment" => format!("{word} Apartments"),
                "condo" => format!("The {word} Condominiums"),
                _ => format!("{word} {}", primary.replace('_', " ")),
            };
            // A few places only know the city, as some real listings do.
            let vicinity = if n % 23 == 0 {
                "Atlanta".to_string()
            } else {
                format!(
                    "{} {}",
                    rng.gen_range(10..1400),
                    STREETS[rng.gen_range(0..STREETS.len())]
                )
            };
            let mut types = vec![primary];
            types.extend_from_slice(extra);
            types.push("establishment");
            out.push(place(format!("p{n:04}"), name, at, &types, vicinity));
        }
    }
    // Places sharing a storefront with a different kind of business.
    let shared: Vec<_> = out
        .iter()
        .filter(|p| p.place.types[0] == "lodging")
        .take(6)
        .cloned()
        .collect();
    for (i, host) in shared.into_iter().enumerate() {
        n += 1;
        out.push(place(
            format!("p{n:04}"),
            format!("Lobby Cafe {i}"),
            host.place.position(),
            &["cafe", "food", "establishment"],
            host.place.vicinity.clone().unwrap_or_default(),
        ));
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config_path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures/midtown/pipeline.json"));
    let config = PipelineConfig::load(&config_path)?;
    let target = config
        .poi
        .fixtures
        .clone()
        .ok_or("config has no poi.fixtures directory")?;
    let (plan, densify) = config.poi.plans()?;
    let recorder = RecordingClient::new(InventoryClient::new(inventory(&config)));
    let h = harvest_region(&recorder, config.bbox, &config.poi, &plan, &densify)?;
    std::fs::create_dir_all(&target)?;
    let fixtures = recorder.into_fixtures();
    let out = target.join("places.json");
    write_json_file(&out, &fixtures)?;
    println!(
        "{} responses, {} places from {} queries ({} truncated) -> {}",
        fixtures.len(),
        h.pois.len(),
        h.report.queries,
        h.report.truncated.len(),
        out.display()
    );
    Ok(())
}
