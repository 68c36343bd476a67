//! Raw float images: magic `DGSRAW01`, then little-endian u32 width, height
//! and channel count, then `width * height * channels` little-endian f32.

use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::frames::Image;

const MAGIC: &[u8; 8] = b"DGSRAW01";
const HEADER: usize = 8 + 12;

pub fn encode_raw_image(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * img.data.len());
    out.extend_from_slice(MAGIC);
    for v in [img.width as u32, img.height as u32, 3] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// `what` names the image in error messages.
pub fn decode_raw_image(bytes: &[u8], path: &Path, what: &str) -> Result<Image> {
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg: format!("{what}: {msg}"),
    };
    if bytes.len() < HEADER {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("not a raw image (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    if c != 3 {
        return Err(fail(format!("expected 3 channels, found {c}")));
    }
    let want = HEADER + 4 * w * h * c;
    if bytes.len() != want {
        return Err(fail(format!("truncated or oversized data: {} bytes, expected {want}", bytes.len())));
    }
    let data = bytes[HEADER..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(Image { width: w, height: h, data })
}

pub fn write_raw_image(img: &Image, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_raw_image(img))
}

pub fn read_raw_image(path: &Path, what: &str) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_raw_image(&bytes, path, what)
}
