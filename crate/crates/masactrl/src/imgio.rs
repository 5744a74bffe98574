//! PNG I/O for images, heatmaps and binary rasters.
//!
//! Images are 8-bit RGB; rasters are 1-bit grayscale. Encoding is
//! deterministic, so artifact directories can be compared byte-for-byte.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::real::Real;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a `[3, H, W]` image with values in [0, 1] as 8-bit RGB PNG.
pub fn save_rgb<F: Real>(img: &Array3<F>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::contract(format!("expected 3 channels, got {c}")));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([
            to_u8(img[(0, i, j)].to_f64c()),
            to_u8(img[(1, i, j)].to_f64c()),
            to_u8(img[(2, i, j)].to_f64c()),
        ])
    });
    buf.save(path)?;
    Ok(())
}

/// Load an 8-bit RGB PNG into `[3, H, W]` with values in [0, 1].
pub fn load_rgb<F: Real>(path: &Path) -> Result<Array3<F>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = F::c(px.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Save a `[H, W]` map with values in [0, 1] as 8-bit grayscale PNG.
pub fn save_gray(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(map[(y as usize, x as usize)])])
    });
    buf.save(path)?;
    Ok(())
}

/// Save a binary raster as a 1-bit grayscale PNG.
pub fn save_bitmask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png header: {e}")))?;
    // Pack rows MSB-first, each row padded to a byte boundary.
    let row_bytes = w.div_ceil(8);
    let mut data = vec![0u8; row_bytes * h];
    for i in 0..h {
        for j in 0..w {
            if mask[(i, j)] {
                data[i * row_bytes + j / 8] |= 0x80 >> (j % 8);
            }
        }
    }
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Format(format!("png data: {e}")))?;
    Ok(())
}

/// Load a 1-bit grayscale PNG raster.
pub fn load_bitmask(path: &Path) -> Result<Array2<bool>> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png info: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png frame: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(Error::Format(format!(
            "expected 1-bit grayscale raster, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let row_bytes = w.div_ceil(8);
    let mut out = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            out[(i, j)] = buf[i * row_bytes + j / 8] & (0x80 >> (j % 8)) != 0;
        }
    }
    Ok(out)
}
