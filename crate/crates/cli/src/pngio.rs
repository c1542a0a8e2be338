//! 8-bit PNG import and export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use layersep::Image;

use crate::error::{CliError, CliResult};

pub fn write_png(path: &Path, img: &Image) -> CliResult<()> {
    let (h, w, c) = img.shape();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(CliError::Validation(format!("cannot write a {c}-channel image as PNG"))),
    };
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut writer = enc.write_header().map_err(|e| CliError::io(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| CliError::io(path, e))?;
    writer.finish().map_err(|e| CliError::io(path, e))
}

/// Reads any 8- or 16-bit PNG as an RGB image in `[0, 1]`; alpha is dropped.
pub fn read_png(path: &Path) -> CliResult<Image> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| CliError::io(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| CliError::io(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<f32> = match info.color_type {
        png::ColorType::Rgb => px.iter().map(|&b| b as f32 / 255.0).collect(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| p[..3].iter().map(|&b| b as f32 / 255.0)).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&b| [b as f32 / 255.0; 3]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0] as f32 / 255.0; 3]).collect(),
        png::ColorType::Indexed => return Err(CliError::io(path, "unexpanded palette image")),
    };
    Ok(Image::new(h, w, 3, rgb)?)
}
