// SPDX-License-Identifier: MIT OR Apache-2.0

//! Output side of the pipeline: run records with SHA-256 manifests, and SVG
//! figures.

pub mod record;
pub mod svg;

pub use record::{sha256_bytes, sha256_file, write_atomic, DirLock, ManifestEntry, RunRecord, StageOutputs};
pub use svg::{plot_curves, plot_heatmap, Axes, HeatmapStyle, PlotError, Series, SeriesStyle};
