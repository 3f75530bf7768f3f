//! Datasets, experiment cells, run records and reports.

pub mod dataset;
pub mod grid;
pub mod report;
pub mod run;
pub mod toy;

pub use dataset::{build_splits, make_toy_dataset, Corpus, DatasetId, DatasetSpec, ManifestEntry, Split, SplitManifest};
pub use run::{run_cell, run_cell_with, CellEnv, ExperimentCell, MethodId, RunRecord};
pub use grid::{load_noise_bank, pretrain_checkpoint, run_grid, source_model, GridConfig};
pub use report::{report, Layout};
pub use toy::toy_noise_bank;
