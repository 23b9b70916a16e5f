//! 8-bit RGB PNG files for rendered figures.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

fn image_err(path: &Path, detail: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Write `rgb` (row-major, 3 bytes per pixel) as a `width × height` PNG.
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(image_err(
            path,
            format!("{} bytes for {width}×{height} RGB", rgb.len()),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(rgb).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Read an 8-bit RGB PNG back as `(width, height, rgb)`.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(
            path,
            format!("expected 8-bit RGB, found {:?}/{:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|v| (v * 13) as u8).collect();
        write_rgb(&path, 3, 2, &rgb).unwrap();
        assert_eq!(read_rgb(&path).unwrap(), (3, 2, rgb));
        assert!(write_rgb(&path, 3, 3, &[0; 3]).is_err());
        let err = write_rgb(&dir.path().join("missing/x.png"), 1, 1, &[0; 3]).unwrap_err();
        assert!(err.to_string().contains("missing"), "{err}");
    }
}
