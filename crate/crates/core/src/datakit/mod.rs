//! Image and heatmap files, JSON-lines dataset manifests, and the
//! synthetic shapes dataset with ground-truth attention maps.

mod manifest;
mod pnm;
mod shapes;

use std::path::Path;

use thiserror::Error;

use crate::cam::Heatmap;
use crate::tensor::Tensor;
use crate::zoo::Example;

pub use manifest::{load_dataset, write_manifest, ManifestEntry};
pub use pnm::{read_pgm16, read_ppm, write_pgm16, write_ppm};
pub use shapes::{generate_shapes, render_sample, shapes_dataset, Shape, ShapeSample, ShapesSummary};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("png: {0}")]
    Png(String),
    #[error("manifest line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// 8-bit interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(DataError::Invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[3, H, W]` tensor with bytes mapped linearly onto `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        Tensor::from_fn([3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f32 / 127.5 - 1.0
        })
        .expect("non-empty image")
    }
}

/// Reads PPM (P6) or 8-bit RGB PNG, chosen by the file's magic bytes.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        read_ppm(&bytes)
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| DataError::Png(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(DataError::Png(format!(
            "only 8-bit RGB is supported, got {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| DataError::Png("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| DataError::Png(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    RgbImage::new(w, h, buf)
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| DataError::Png(e.to_string()))?;
        w.write_image_data(&image.data).map_err(|e| DataError::Png(e.to_string()))?;
    }
    Ok(out)
}

/// One image with its label and reference attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub label: usize,
    pub heatmap: Heatmap,
}

impl Sample {
    pub fn to_example(&self) -> Example {
        Example {
            image: self.image.to_tensor(),
            label: self.label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_is_planar() {
        let img = RgbImage::new(2, 1, vec![0, 255, 0, 255, 0, 255]).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0, 1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn png_round_trip() {
        let data: Vec<u8> = (0..5 * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = RgbImage::new(5, 4, data).unwrap();
        let bytes = encode_png(&img).unwrap();
        assert_eq!(decode_png(&bytes).unwrap(), img);
        assert_eq!(encode_png(&img).unwrap(), bytes);
    }

    #[test]
    fn png_rejects_non_rgb() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.write_header().unwrap().write_image_data(&[7]).unwrap();
        }
        assert!(matches!(decode_png(&out), Err(DataError::Png(_))));
    }
}
