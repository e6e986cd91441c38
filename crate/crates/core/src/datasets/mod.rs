//! Tabular data: schema files, CSV ingestion, feature encoding, splits and
//! a synthetic generator with a known sensitive attribute.

mod dataset;
mod encoder;
mod schema;
mod synthetic;
mod table;

pub use dataset::{split_indices, FeatureView, TabularDataset};
pub use encoder::{DecodedValue, EncodedColumn, Encoder, FeatureEncoding};
pub use schema::{ColumnKind, ColumnSpec, CsvFormat, Role, SchemaSpec, Transform};
pub use synthetic::{make_synthetic, synthetic_raw, SyntheticSpec};
pub use table::{RawColumn, RawTable, RawValues};
