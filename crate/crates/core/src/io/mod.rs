//! On-disk formats: raw and PNG images, dataset directories, checkpoints and
//! CSV tables.

mod checkpoint;
mod csv;
mod dataset;
mod raw;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use checkpoint::{checkpoint_precision, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use csv::{write_loss_csv, write_metrics_csv, write_table_csv};
pub use dataset::{load_dataset, save_dataset, DATASET_VERSION};
pub use raw::{decode_raw_image, encode_raw_image, read_raw_image, write_raw_image};

use crate::error::{io_err, Result};
use crate::frames::Image;

/// 8-bit PNG, values clipped to `[0, 1]` then scaled by 255 and rounded.
pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches image size");
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| crate::Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    write_atomic(path, &out)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}
