//! Electrification mapping from high-resolution daytime satellite tiles.
//!
//! The crate is organised as a staged pipeline:
//!
//! * [`geogrid`] lays a metric tile grid over a region and cuts fixed-size
//!   image tiles out of georeferenced scenes.
//! * [`labels`] turns utility-customer and building point data into per-tile
//!   counts and the access / extent / customer-type class labels.
//! * [`splits`] implements the geographic evaluation protocol: one held-out
//!   county per map quadrant plus a central county, and a density-stratified
//!   70/20/10 split of the rest.
//! * [`synthdata`] generates scenes, point files and county polygons with
//!   known ground truth, plus a coarse nighttime-lights raster.
//! * [`models`] holds a small CPU convolutional network trainer with a
//!   VGG11-pattern backbone and task heads.
//! * [`eval`] and [`baseline`] compute accuracy / R² reports, county
//!   aggregation and the nighttime-lights comparison.
//! * [`pipeline`] wires the stages together behind restartable, manifest-keyed
//!   working directories.

pub mod baseline;
pub mod counties;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geogrid;
pub mod labels;
pub mod models;
pub mod pipeline;
pub mod projection;
pub mod raster;
pub mod rng;
pub mod splits;
pub mod synthdata;

pub use error::{Error, Result};
pub use geogrid::{GeoPoint, GeoRect, GridSpec, ImageTile, ProjRect, SceneMeta, TileIndex};
pub use labels::{AccessClass, PctClass, TileLabels};
pub use models::{TaskId, TrainedModel};
pub use splits::{Split, SplitAssignment};
