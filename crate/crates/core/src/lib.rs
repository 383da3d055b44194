//! Reconstructs e-scooter trips from fleet-availability snapshots, links trip
//! endpoints to points of interest, and aggregates the result into
//! origin/destination purpose matrices.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! 1. [`ingest`] parses snapshot feeds into ordered [`ingest::SnapshotBatch`]es.
//! 2. [`trips`] turns per-scooter timelines into trips and cleans them.
//! 3. [`poi`] harvests, normalizes, buffers, merges and groups POIs.
//! 4. [`assoc`] links trip endpoints to their nearest POI.
//! 5. [`purpose`] builds group-by-group matrices and drill-downs.
//!
//! [`synth`] generates ground-truth fleets for testing the above, and
//! [`pipeline`] wires every stage together behind a single config file.

pub mod assoc;
pub mod geo;
pub mod ingest;
pub mod pipeline;
pub mod poi;
pub mod purpose;
pub mod synth;
pub mod trips;

pub use geo::{haversine_m, BBox, GeoPoint};
