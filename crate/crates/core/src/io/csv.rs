use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::trainer::LossRecord;

#[derive(Serialize)]
struct LossRow {
    step: usize,
    #[serde(rename = "L_c")]
    l_c: f64,
    #[serde(rename = "L_t")]
    l_t: f64,
    wall_time: f64,
}

/// Any serializable rows, header taken from the field names.
pub fn write_table_csv<R: Serialize>(rows: &[R], path: &Path) -> Result<()> {
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| fail(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| fail(e.to_string()))?;
    super::write_atomic(path, &bytes)
}

/// Columns `step,L_c,L_t,wall_time`.
pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let rows: Vec<LossRow> = history
        .iter()
        .map(|r| LossRow {
            step: r.step,
            l_c: r.l_c,
            l_t: r.l_t,
            wall_time: r.wall_time,
        })
        .collect();
    write_table_csv(&rows, path)
}

/// Columns `frame,timestamp,psnr,ssim`.
pub fn write_metrics_csv(report: &MetricReport, path: &Path) -> Result<()> {
    write_table_csv(&report.frames, path)
}
