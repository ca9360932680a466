//! BAS change-of-value telemetry: point naming, TCP ingestion with a backup
//! journal, month-partitioned series storage, batch summaries, summary export
//! with BIM frame mapping, and a device simulator for fault testing.

pub mod batch_analytics;
pub mod cov_ingest;
pub mod device_sim;
pub mod export_map;
pub mod gateway_api;
pub mod point_model;
pub mod ts_store;
