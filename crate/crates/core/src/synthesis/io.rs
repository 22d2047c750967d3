//! PNG images and landmark sidecars.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::{Image, LandmarkSet};
use crate::error::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit PNG as RGB in `[0, 1]`. Grey and alpha channels are
/// expanded or dropped.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Data("PNG too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Data(format!("{}: unsupported PNG colour type {other:?}", path.display()))),
    };
    let px = &buf[..info.buffer_size()];
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let src = if stride >= 3 { px[i * stride + c] } else { px[i * stride] };
            data[c * h * w + i] = src as f64 / 255.0;
        }
    }
    Image::new(h, w, data)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let bad = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(bad)?;
    writer.write_image_data(bytes).map_err(bad)?;
    writer.finish().map_err(bad)
}

/// Writes an RGB image as 8-bit PNG (`round(v·255)`).
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(img.plane(c)[i]));
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

/// Writes an H×W map in `[0, 1]` as 8-bit greyscale PNG.
pub fn save_gray_png(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), height * width);
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    write_png(path, width, height, png::ColorType::Grayscale, &bytes)
}

/// Reads the dimensions from a PNG header.
pub fn png_dims(path: &Path) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkFile {
    points: Vec<[f64; 2]>,
}

/// Reads a `{"points": [[x, y], ...]}` sidecar for an image of the given size.
pub fn load_landmarks(path: &Path, height: usize, width: usize) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: LandmarkFile =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    LandmarkSet::new(file.points, height, width)
}

pub fn save_landmarks(path: &Path, lms: &LandmarkSet) -> Result<()> {
    let text = serde_json::to_string(&LandmarkFile {
        points: lms.points().to_vec(),
    })
    .expect("landmarks serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
