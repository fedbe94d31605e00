//! Persistence formats, heatmaps and result tables.

mod heatmap;
mod tables;
mod xmap;

pub use heatmap::{colormap, render_heatmap, top_indices, top_mask, HeatmapRender, RenderedHeatmap};
pub use tables::{
    format_headline, headline, method_order, read_metric_csv, summarize_rows, write_boxplot_csv, write_headline_csv,
    write_metric_csv, write_summary_csv, HeadlineRow, MetricRow, MetricSummary, METRIC_COLUMNS,
};
pub use xmap::{decode_map, encode_map, load_map, save_map, XMAP_MAGIC, XMAP_VERSION};
