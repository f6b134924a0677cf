//! Geometric road-attribute labeling for street-level panoramas.
//!
//! The pipeline ingests an OpenStreetMap XML extract and a panorama-metadata
//! graph, matches every panorama to the road it was shot from, transfers nine
//! road-layout attributes (intersections, driveable headings, heading offset,
//! bike lanes, speed limits, one-way, wrong-way, lane count) onto perspective
//! crops of the panoramas, and writes reproducible train/test manifests.
//!
//! Modules, bottom-up:
//!
//! * [`geo`] — local tangent-plane projection, bearings, angle arithmetic,
//!   point-to-segment distance.
//! * [`osmnet`] — OSM XML subset parser, road filtering, junction detection.
//! * [`panograph`] — panorama metadata, adjacency crawl, JSONL storage.
//! * [`roadmatch`] — grid-indexed exact nearest-segment matching, thresholds.
//! * [`labelgen`] — the nine labelers and deterministic sample identity.
//! * [`panoimage`] — equirectangular-to-perspective unwarping.
//! * [`datasetio`] — manifest serialization, west/east split, class balance.
//! * [`evalkit`] — accuracy/MAE and map-maintenance recommendations.
//! * [`synthkit`] — synthetic grid-city generator with exact ground truth.
//! * [`cli`] — the `streetlabel` command-line front end.

pub mod cli;
pub mod datasetio;
pub mod error;
pub mod evalkit;
pub mod geo;
pub mod labelgen;
pub mod osmnet;
pub mod panograph;
pub mod panoimage;
pub mod roadmatch;
pub mod synthkit;

pub use error::{Error, Result};
