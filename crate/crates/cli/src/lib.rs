//! Command-line plumbing for penalized KLIC model selection: panel
//! ingestion, run configuration, report writing and the four commands.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod report;

pub use commands::{fit, select, sensitivity, simulate, Outcome};
pub use config::{CandidateSource, Overrides, RunConfig};
pub use ingest::{ingest_csv, Ingested, Metadata};
