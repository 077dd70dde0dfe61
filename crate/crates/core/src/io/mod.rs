//! Interchange formats: the NCAD activation container, the run manifest
//! that binds containers to a hyperparameter grid, and the moment-table CSV.

pub mod manifest;
pub mod moment_csv;
pub mod ncad;

pub use manifest::{probe_hash, ResolvedRun, RunManifest};
pub use moment_csv::{read_moment_csv, write_moment_csv};
pub use ncad::{NcadContainer, NcadTensor};
pub use manifest::RunWriter;
pub use moment_csv::{write_moment_csv_many, write_moment_rows, MomentRow};
