//! Result emitters (tables, heatmaps, perplexity curves) and the command-line
//! front end.

pub mod cli;
mod svg;
mod table;

pub use svg::{emit_heatmap, emit_perplexity_curves, ramp, scale_position, RAMP_HIGH, RAMP_LOW};
pub use table::{
    build_table, format_2dp, heatmap_row_csv, layer_task_grid, parse_table_csv, round_2dp, table_csv, table_json,
    ResultTable, TableRow,
};

use crate::trainer::RunReport;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{0}")]
    Data(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("formatting failed")]
    Fmt(#[from] std::fmt::Error),
}

/// CSV and JSON renderings of the table built from `reports`.
pub fn emit_tables(reports: &[RunReport]) -> Result<(String, String), ReportError> {
    let table = build_table(reports);
    Ok((table_csv(&table)?, table_json(&table)?))
}
