//! Synthetic traces, trace files, dispatch and dataset statistics.

pub mod catalog;
pub mod dispatch;
pub mod generate;
pub mod io;
pub mod stats;

pub use catalog::{Catalog, CatalogConfig, FlowShape};
pub use dispatch::{symmetric_hash, Dispatcher};
pub use generate::{RateSegment, TraceGenerator};
pub use io::{TraceFormat, TraceReader, TraceWriter};
pub use stats::TraceStats;

#[derive(Debug, thiserror::Error)]
pub enum TrafficError {
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("invalid catalog: {0}")]
    Catalog(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid rate segment: {0} flows/s for {1} s")]
    Rate(f64, f64),
    #[error("trace not sorted by time at record {index}")]
    Unsorted { index: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
