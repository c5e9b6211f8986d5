//! Dataset ingestion, synthetic generation, splitting, random features and
//! result files.

pub mod manifest;
pub mod report;
pub mod rff;
pub mod split;
pub mod synthetic;

pub use manifest::{load_manifest, read_matrix_csv, DatasetManifest};
pub use report::write_report;
pub use rff::{rff_transform, RffMap};
pub use split::kfold_split;
pub use synthetic::generate_synthetic;
